//! Iterative search over candidate samples.
//!
//! A [`SearchProblem`] supplies the initial candidates, a proposal step and a
//! reward. The engine owns the tree: every evaluated node is kept, beams are
//! chosen by [`subsample`], and the global best is tracked over the whole tree.
//!
//! Beam search draws each new beam from the fresh proposals only; parents are
//! not carried over, so a beam's best reward can drop between depths while
//! the global best cannot.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Beam,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub strategy: Strategy,
    /// Beam width W. Ignored by Monte Carlo search.
    pub width: usize,
    /// Proposals per expanded node, L.
    pub branching: usize,
    pub max_depth: usize,
    /// Self-reflection rollouts per proposal, N_E (example search only).
    pub reflection_rollouts: usize,
    /// Weight of the difficulty term in the example reward.
    pub lambda: f64,
    /// Stop once a full depth fails to improve the global best.
    pub plateau_stop: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            width: 3,
            branching: 3,
            max_depth: 3,
            reflection_rollouts: 3,
            lambda: 1.0,
            plateau_stop: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 {
            return Err("width must be at least 1".into());
        }
        if self.branching == 0 {
            return Err("branching must be at least 1".into());
        }
        if self.max_depth == 0 {
            return Err("max_depth must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(format!("lambda must be a non-negative number, got {}", self.lambda));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionSource {
    M6,
    M8,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionNote {
    pub text: String,
    pub source: ReflectionSource,
}

impl ReflectionNote {
    pub fn none() -> Self {
        Self {
            text: String::new(),
            source: ReflectionSource::None,
        }
    }

    pub fn new(text: impl Into<String>, source: ReflectionSource) -> Self {
        Self {
            text: text.into(),
            source,
        }
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode<P> {
    /// Also the proposal order: ids are assigned as candidates are proposed.
    pub id: NodeId,
    pub payload: P,
    pub reward: f64,
    pub reflection: ReflectionNote,
    pub parent: Option<NodeId>,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree<P> {
    nodes: Vec<SearchNode<P>>,
}

impl<P> Default for SearchTree<P> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<P> SearchTree<P> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> &SearchNode<P> {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[SearchNode<P>] {
        &self.nodes
    }

    /// Root-first path ending at `id`.
    pub fn lineage(&self, id: NodeId) -> Vec<&SearchNode<P>> {
        let mut path = vec![self.get(id)];
        while let Some(parent) = path.last().unwrap().parent {
            path.push(self.get(parent));
        }
        path.reverse();
        path
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &SearchNode<P>> {
        self.nodes.iter().filter(move |n| n.parent == Some(id))
    }

    /// Highest reward in the tree, earliest node on ties.
    pub fn best(&self) -> Option<&SearchNode<P>> {
        self.nodes.iter().reduce(|best, n| if rank_key(n.reward) > rank_key(best.reward) { n } else { best })
    }

    fn push(&mut self, payload: P, evaluation: Evaluation, parent: Option<NodeId>, depth: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(SearchNode {
            id,
            payload,
            reward: evaluation.reward,
            reflection: evaluation.reflection,
            parent,
            depth,
        });
        id
    }
}

/// NaN ranks below every real reward.
fn rank_key(reward: f64) -> f64 {
    if reward.is_nan() {
        f64::NEG_INFINITY
    } else {
        reward
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reward: f64,
    pub reflection: ReflectionNote,
}

pub trait SearchProblem {
    type Payload: Clone;
    type Error;

    fn initial(&mut self) -> Result<Vec<Self::Payload>, Self::Error>;

    /// Up to `limit` new candidates derived from `parent`. Returning fewer
    /// (even none) is normal; `Err` aborts the whole search.
    fn propose(
        &mut self,
        parent: &SearchNode<Self::Payload>,
        tree: &SearchTree<Self::Payload>,
        limit: usize,
    ) -> Result<Vec<Self::Payload>, Self::Error>;

    fn evaluate(&mut self, payload: &Self::Payload, depth: usize) -> Result<Evaluation, Self::Error>;
}

#[derive(Debug, thiserror::Error)]
pub enum SearchError<E> {
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("problem has no initial candidates")]
    NoInitialCandidates,
    #[error(transparent)]
    Problem(E),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult<P> {
    pub best: NodeId,
    pub final_beam: Vec<NodeId>,
    pub tree: SearchTree<P>,
    /// Depths that produced at least one proposal.
    pub iterations_run: usize,
    /// Beam after subsampling at each depth, starting with depth 0.
    pub beams: Vec<Vec<NodeId>>,
    /// Global best reward after each depth, starting with depth 0.
    pub best_by_depth: Vec<f64>,
}

impl<P> SearchResult<P> {
    pub fn best_node(&self) -> &SearchNode<P> {
        self.tree.get(self.best)
    }

    pub fn final_nodes(&self) -> impl Iterator<Item = &SearchNode<P>> {
        self.final_beam.iter().map(|&id| self.tree.get(id))
    }
}

/// Keeps the `width` highest-reward candidates, ordered by reward descending
/// and then by proposal order.
pub fn subsample<'a, P, I>(candidates: I, width: usize) -> Result<Vec<&'a SearchNode<P>>, String>
where
    I: IntoIterator<Item = &'a SearchNode<P>>,
    P: 'a,
{
    if width == 0 {
        return Err("width must be at least 1".into());
    }
    let mut pool: Vec<&SearchNode<P>> = candidates.into_iter().collect();
    pool.sort_by(|a, b| rank_key(b.reward).total_cmp(&rank_key(a.reward)).then(a.id.cmp(&b.id)));
    pool.truncate(width);
    Ok(pool)
}

/// Receives every node as soon as it is evaluated.
pub trait SearchObserver<P> {
    fn on_node(&mut self, node: &SearchNode<P>);
}

impl<P> SearchObserver<P> for () {
    fn on_node(&mut self, _: &SearchNode<P>) {}
}

struct Run<'p, Pr: SearchProblem, O> {
    problem: &'p mut Pr,
    observer: O,
    tree: SearchTree<Pr::Payload>,
}

impl<Pr: SearchProblem, O: SearchObserver<Pr::Payload>> Run<'_, Pr, O> {
    fn add(
        &mut self,
        payload: Pr::Payload,
        parent: Option<NodeId>,
        depth: usize,
    ) -> Result<NodeId, SearchError<Pr::Error>> {
        let evaluation = self.problem.evaluate(&payload, depth).map_err(SearchError::Problem)?;
        let id = self.tree.push(payload, evaluation, parent, depth);
        self.observer.on_node(self.tree.get(id));
        Ok(id)
    }

    fn roots(&mut self) -> Result<Vec<NodeId>, SearchError<Pr::Error>> {
        let initial = self.problem.initial().map_err(SearchError::Problem)?;
        if initial.is_empty() {
            return Err(SearchError::NoInitialCandidates);
        }
        initial.into_iter().map(|p| self.add(p, None, 0)).collect()
    }

    fn expand(&mut self, parent: NodeId, limit: usize) -> Result<Vec<NodeId>, SearchError<Pr::Error>> {
        let mut proposals = self
            .problem
            .propose(self.tree.get(parent), &self.tree, limit)
            .map_err(SearchError::Problem)?;
        proposals.truncate(limit);
        let depth = self.tree.get(parent).depth + 1;
        proposals.into_iter().map(|p| self.add(p, Some(parent), depth)).collect()
    }

    fn best_reward(&self) -> f64 {
        self.tree.best().map_or(f64::NEG_INFINITY, |n| n.reward)
    }

    fn top(&self, ids: &[NodeId], width: usize) -> Vec<NodeId> {
        subsample(ids.iter().map(|&id| self.tree.get(id)), width)
            .expect("width validated")
            .into_iter()
            .map(|n| n.id)
            .collect()
    }
}

pub fn run_search<Pr, O>(
    config: &SearchConfig,
    problem: &mut Pr,
    observer: O,
) -> Result<SearchResult<Pr::Payload>, SearchError<Pr::Error>>
where
    Pr: SearchProblem,
    O: SearchObserver<Pr::Payload>,
{
    match config.strategy {
        Strategy::Beam => run_beam_search(config, problem, observer),
        Strategy::MonteCarlo => run_monte_carlo(config, problem, observer),
    }
}

pub fn run_beam_search<Pr, O>(
    config: &SearchConfig,
    problem: &mut Pr,
    observer: O,
) -> Result<SearchResult<Pr::Payload>, SearchError<Pr::Error>>
where
    Pr: SearchProblem,
    O: SearchObserver<Pr::Payload>,
{
    config.validate().map_err(SearchError::InvalidConfig)?;
    let mut run = Run {
        problem,
        observer,
        tree: SearchTree::default(),
    };
    let roots = run.roots()?;
    let mut beam = run.top(&roots, config.width);
    let mut beams = vec![beam.clone()];
    let mut best_by_depth = vec![run.best_reward()];
    let mut iterations_run = 0;

    for _depth in 1..=config.max_depth {
        let mut proposed = Vec::new();
        for &parent in &beam {
            proposed.extend(run.expand(parent, config.branching)?);
        }
        if proposed.is_empty() {
            break;
        }
        iterations_run += 1;
        beam = run.top(&proposed, config.width);
        beams.push(beam.clone());
        let previous = *best_by_depth.last().unwrap();
        let best = run.best_reward();
        best_by_depth.push(best);
        if config.plateau_stop && best <= previous {
            break;
        }
    }

    let best = run.tree.best().expect("tree has roots").id;
    Ok(SearchResult {
        best,
        final_beam: beam,
        tree: run.tree,
        iterations_run,
        beams,
        best_by_depth,
    })
}

/// Single-trajectory search: one proposal per depth, always moving to it.
pub fn run_monte_carlo<Pr, O>(
    config: &SearchConfig,
    problem: &mut Pr,
    observer: O,
) -> Result<SearchResult<Pr::Payload>, SearchError<Pr::Error>>
where
    Pr: SearchProblem,
    O: SearchObserver<Pr::Payload>,
{
    config.validate().map_err(SearchError::InvalidConfig)?;
    let mut run = Run {
        problem,
        observer,
        tree: SearchTree::default(),
    };
    let roots = run.roots()?;
    let mut current = run.top(&roots, 1)[0];
    let mut beams = vec![vec![current]];
    let mut best_by_depth = vec![run.best_reward()];
    let mut iterations_run = 0;

    for _depth in 1..=config.max_depth {
        let Some(&next) = run.expand(current, 1)?.first() else { break };
        iterations_run += 1;
        current = next;
        beams.push(vec![current]);
        let previous = *best_by_depth.last().unwrap();
        let best = run.best_reward();
        best_by_depth.push(best);
        if config.plateau_stop && best <= previous {
            break;
        }
    }

    let best = run.tree.best().expect("tree has roots").id;
    Ok(SearchResult {
        best,
        final_beam: vec![current],
        tree: run.tree,
        iterations_run,
        beams,
        best_by_depth,
    })
}

/// One line of the search trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub node_id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub reward: f64,
    pub payload_digest: String,
    pub reflection_digest: String,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl TraceRecord {
    pub fn for_node<P: Serialize>(node: &SearchNode<P>) -> Self {
        let payload = serde_json::to_vec(&node.payload).expect("payload serializes");
        Self {
            node_id: node.id,
            parent: node.parent,
            depth: node.depth,
            reward: node.reward,
            payload_digest: digest(&payload),
            reflection_digest: digest(node.reflection.text.as_bytes()),
        }
    }
}

/// Appends one JSON line per evaluated node to `writer`.
pub struct TraceWriter<W: Write> {
    writer: W,
    error: Option<std::io::Error>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(writer: W) -> Self {
        Self { writer, error: None }
    }

    /// The first write error, if any, and the writer.
    pub fn finish(mut self) -> Result<W, std::io::Error> {
        if let Some(err) = self.error.take() {
            return Err(err);
        }
        self.writer.flush()?;
        Ok(self.writer)
    }
}

impl<P: Serialize, W: Write> SearchObserver<P> for TraceWriter<W> {
    fn on_node(&mut self, node: &SearchNode<P>) {
        if self.error.is_some() {
            return;
        }
        let mut line = serde_json::to_string(&TraceRecord::for_node(node)).expect("trace record serializes");
        line.push('\n');
        if let Err(err) = self.writer.write_all(line.as_bytes()) {
            self.error = Some(err);
        }
    }
}

impl<P, O: SearchObserver<P>> SearchObserver<P> for &mut O {
    fn on_node(&mut self, node: &SearchNode<P>) {
        (**self).on_node(node)
    }
}
