//! Documentation search.
//!
//! Candidates are proposed through m7, scored by running the task model with
//! no demonstrations over a batch of generated examples (reward = mean task
//! metric), and critiqued through m8 so the next depth has something to act
//! on. The initial documentation is scored at depth 0, so the returned
//! documentation never scores below it on the same batch.

use std::cell::Cell;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::eval::{run_task_model, task_metric, InferenceConfig, Matching, ToolContext};
use crate::examples::ToolUseExample;
use crate::executor::{Executor, Invocation};
use crate::llm::{parse_structured_output, Bindings, GatewayError, Generator, OutputSchema, PromptId, PromptLibrary};
use crate::registry::{DocWire, ToolDocumentation, ToolSpec};
use crate::search::{
    run_search, Evaluation, NodeId, ReflectionNote, ReflectionSource, SearchConfig, SearchError, SearchNode,
    SearchObserver, SearchProblem, SearchResult, SearchTree,
};

pub const DOCS_FORMAT: &str = "toolplay.docs/1";

#[derive(Debug, thiserror::Error)]
pub enum DocError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("invalid search configuration: {0}")]
    Config(String),
}

impl From<SearchError<DocError>> for DocError {
    fn from(err: SearchError<DocError>) -> Self {
        match err {
            SearchError::Problem(e) => e,
            other => DocError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DocSettings {
    /// Examples scored per candidate; `None` means min(|validation|, 10).
    pub batch_size: Option<usize>,
    pub inference: InferenceConfig,
    pub matching: Matching,
    /// Execute predicted calls so their error text reaches the critique.
    pub execute_predictions: bool,
}

impl Default for DocSettings {
    fn default() -> Self {
        Self {
            batch_size: None,
            inference: InferenceConfig::zero_shot(),
            matching: Matching::Exact,
            execute_predictions: true,
        }
    }
}

pub struct DocContext<'a> {
    pub tool: &'a ToolSpec,
    pub library: &'a PromptLibrary,
    pub generator: &'a Generator,
    pub task_model: &'a Generator,
    pub executor: &'a Executor,
    pub settings: &'a DocSettings,
    pub seed: u64,
}

/// One validation example as attempted under a candidate documentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocTranscript {
    pub example_index: usize,
    pub query: String,
    pub output: String,
    pub invocations: Vec<Invocation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub gold: Invocation,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocCandidate {
    pub documentation: ToolDocumentation,
    pub transcripts: Vec<DocTranscript>,
    pub reward: f64,
    /// Population standard deviation of the per-example metrics.
    pub stdev: f64,
}

pub fn mean_and_stdev(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn batch_size(settings: &DocSettings, validation_len: usize) -> usize {
    settings.batch_size.unwrap_or(10).min(validation_len)
}

/// Indices of the examples scored at `depth`, ascending. Fixed per
/// (seed, depth) so all candidates of one depth see the same batch.
pub fn batch_indices(seed: u64, depth: usize, validation_len: usize, size: usize) -> Vec<usize> {
    let size = size.min(validation_len);
    if size == validation_len {
        return (0..validation_len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (depth as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut picked = sample(&mut rng, validation_len, size).into_vec();
    picked.sort_unstable();
    picked
}

pub fn evaluate_documentation(
    ctx: &DocContext<'_>,
    doc: &ToolDocumentation,
    validation: &[ToolUseExample],
    batch: &[usize],
) -> DocCandidate {
    let tools = [ToolContext {
        tool: ctx.tool,
        doc,
        demos: &[],
    }];
    let config = InferenceConfig {
        demos_per_tool: 0,
        ..ctx.settings.inference.clone()
    };
    let transcripts: Vec<DocTranscript> = batch
        .iter()
        .map(|&i| {
            let example = &validation[i];
            let gold = std::slice::from_ref(&example.invocation);
            match run_task_model(&example.query, &tools, &config, ctx.task_model, ctx.library, Some(ctx.executor)) {
                Ok(t) => {
                    let metric = task_metric(&t, gold, ctx.settings.matching);
                    let error = if t.unparseable {
                        Some("no function call could be read from the reply".to_string())
                    } else if ctx.settings.execute_predictions {
                        execution_error(ctx, &t.invocations).or(t.error.clone())
                    } else {
                        t.error.clone()
                    };
                    DocTranscript {
                        example_index: i,
                        query: example.query.clone(),
                        output: t.outputs.last().cloned().unwrap_or_default(),
                        invocations: t.invocations,
                        error,
                        gold: example.invocation.clone(),
                        metric,
                    }
                }
                Err(err) => DocTranscript {
                    example_index: i,
                    query: example.query.clone(),
                    output: String::new(),
                    invocations: Vec::new(),
                    error: Some(err.to_string()),
                    gold: example.invocation.clone(),
                    metric: 0.0,
                },
            }
        })
        .collect();
    let metrics: Vec<f64> = transcripts.iter().map(|t| t.metric).collect();
    let (reward, stdev) = mean_and_stdev(&metrics);
    DocCandidate {
        documentation: doc.clone(),
        transcripts,
        reward,
        stdev,
    }
}

/// First error produced by running the predicted calls against this tool.
fn execution_error(ctx: &DocContext<'_>, invocations: &[Invocation]) -> Option<String> {
    for inv in invocations {
        if inv.tool_id != ctx.tool.tool_id {
            return Some(format!("called unknown function `{}`", inv.tool_id));
        }
        match ctx.executor.execute_tool(ctx.tool, &inv.arguments) {
            Ok(out) if out.is_ok() => {}
            Ok(out) => return Some(out.error_detail.unwrap_or(out.payload)),
            Err(err) => return Some(err.to_string()),
        }
    }
    None
}

fn describe(doc: &ToolDocumentation) -> String {
    serde_json::to_string(&doc.to_wire()).expect("documentation serializes")
}

fn percent(reward: f64) -> String {
    format!("{:.1}", reward * 100.0)
}

/// A scored documentation along a search path, for the m7/m8 history blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub doc: ToolDocumentation,
    pub reward: f64,
    pub stdev: f64,
}

/// Issues up to `limit` m7 requests; replies that do not parse into a
/// documentation are dropped. Each accepted revision takes the next value of
/// `version`.
pub fn propose_documentation(
    ctx: &DocContext<'_>,
    current: &ToolDocumentation,
    history: &[HistoryEntry],
    analysis: &str,
    limit: usize,
    version: &Cell<u64>,
) -> Result<Vec<ToolDocumentation>, DocError> {
    let items: Vec<Vec<(&str, String)>> = history
        .iter()
        .map(|h| {
            vec![
                ("iteration", h.iteration.to_string()),
                ("description", describe(&h.doc)),
                ("score", percent(h.reward)),
                ("stdev", format!("{:.3}", h.stdev)),
            ]
        })
        .collect();
    let bindings = Bindings::new()
        .set("Documentation", ctx.tool.render_documentation(current))
        .set("function_name", ctx.tool.name.as_str())
        .set("analysis", analysis)
        .list("history", items);
    let mut out = Vec::new();
    for _ in 0..limit {
        let exchange = ctx.library.ask(ctx.generator, PromptId::M7, &bindings)?;
        match parse_revision(&ctx.tool.tool_id, &exchange.completion.text, current, version.get() + 1) {
            Ok(doc) => {
                version.set(version.get() + 1);
                out.push(doc);
            }
            Err(reason) => log::info!("{}: revision dropped: {reason}", ctx.tool.tool_id),
        }
    }
    Ok(out)
}

fn parse_revision(tool: &str, text: &str, current: &ToolDocumentation, version: u64) -> Result<ToolDocumentation, String> {
    let record = parse_structured_output(text, &OutputSchema::documentation()).map_err(|e| e.to_string())?;
    let mut wire: DocWire = serde_json::from_value(Value::Object(record)).map_err(|e| e.to_string())?;
    if wire.description.trim().is_empty() {
        wire.description = current.general_description.clone();
    }
    ToolDocumentation::from_wire(tool, wire, version).map_err(|e| e.to_string())
}

/// m8 critique of an evaluated candidate. Empty critiques are kept.
pub fn reflect_on_documentation(
    ctx: &DocContext<'_>,
    candidate: &DocCandidate,
    history: &[HistoryEntry],
) -> Result<ReflectionNote, DocError> {
    let descriptions: Vec<Vec<(&str, String)>> = history
        .iter()
        .map(|h| {
            vec![
                ("iteration", h.iteration.to_string()),
                ("description", describe(&h.doc)),
                ("score", percent(h.reward)),
            ]
        })
        .collect();
    let results: Vec<Vec<(&str, String)>> = candidate
        .transcripts
        .iter()
        .map(|t| {
            let (name, arguments) = match t.invocations.first() {
                Some(inv) => (inv.tool_id.clone(), Value::Object(inv.arguments.clone()).to_string()),
                None => ("none".to_string(), "{}".to_string()),
            };
            vec![
                ("instruction", t.query.clone()),
                ("answer", t.output.clone()),
                ("function_name", name),
                ("arguments", arguments),
                ("error_message", t.error.clone().unwrap_or_else(|| "none".into())),
                ("fn_call", t.gold.render_call(&ctx.tool.name)),
            ]
        })
        .collect();
    let bindings = Bindings::new()
        .set("Documentation", ctx.tool.render_documentation(&candidate.documentation))
        .set("score", format!("{}%", percent(candidate.reward)))
        .list("descriptions", descriptions)
        .list("results", results);
    let text = ctx.library.ask(ctx.generator, PromptId::M8, &bindings)?.completion.text.trim().to_string();
    if text.is_empty() {
        log::info!("{}: empty documentation critique", ctx.tool.tool_id);
    }
    Ok(ReflectionNote::new(text, ReflectionSource::M8))
}

struct DocProblem<'c, 'a> {
    ctx: &'c DocContext<'a>,
    initial: ToolDocumentation,
    validation: &'c [ToolUseExample],
    size: usize,
    version: Cell<u64>,
    /// Indexed by node id: evaluation order equals id order.
    evaluated: Vec<DocCandidate>,
    /// History of the node being expanded; its proposals are evaluated
    /// before the next expansion starts.
    parent_history: Vec<HistoryEntry>,
}

impl DocProblem<'_, '_> {
    fn history(&self, tree: &SearchTree<ToolDocumentation>, id: NodeId) -> Vec<HistoryEntry> {
        tree.lineage(id)
            .into_iter()
            .map(|n| HistoryEntry {
                iteration: n.depth,
                doc: n.payload.clone(),
                reward: n.reward,
                stdev: self.evaluated[n.id].stdev,
            })
            .collect()
    }
}

impl SearchProblem for DocProblem<'_, '_> {
    type Payload = ToolDocumentation;
    type Error = DocError;

    fn initial(&mut self) -> Result<Vec<ToolDocumentation>, DocError> {
        Ok(vec![self.initial.clone()])
    }

    fn propose(
        &mut self,
        parent: &SearchNode<ToolDocumentation>,
        tree: &SearchTree<ToolDocumentation>,
        limit: usize,
    ) -> Result<Vec<ToolDocumentation>, DocError> {
        self.parent_history = self.history(tree, parent.id);
        propose_documentation(
            self.ctx,
            &parent.payload,
            &self.parent_history,
            &parent.reflection.text,
            limit,
            &self.version,
        )
    }

    fn evaluate(&mut self, doc: &ToolDocumentation, depth: usize) -> Result<Evaluation, DocError> {
        let batch = batch_indices(self.ctx.seed, depth, self.validation.len(), self.size);
        let candidate = evaluate_documentation(self.ctx, doc, self.validation, &batch);
        let reflection = if depth == 0 {
            ReflectionNote::none()
        } else {
            let mut history = self.parent_history.clone();
            history.push(HistoryEntry {
                iteration: depth,
                doc: doc.clone(),
                reward: candidate.reward,
                stdev: candidate.stdev,
            });
            reflect_on_documentation(self.ctx, &candidate, &history)?
        };
        let reward = candidate.reward;
        self.evaluated.push(candidate);
        Ok(Evaluation { reward, reflection })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocNodeRecord {
    pub node_id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub version_tag: u64,
    pub reward: f64,
    pub stdev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSummary {
    pub depth: usize,
    pub beam: Vec<NodeId>,
    pub beam_rewards: Vec<f64>,
    pub best_reward: f64,
}

/// Per-tool documentation artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocArtifact {
    pub format: String,
    pub tool_id: String,
    pub search: SearchConfig,
    pub batch_size: usize,
    pub original: ToolDocumentation,
    pub original_reward: f64,
    pub final_doc: ToolDocumentation,
    pub final_reward: f64,
    pub chosen_node: NodeId,
    pub lineage: Vec<NodeId>,
    pub trajectory: Vec<DepthSummary>,
    pub nodes: Vec<DocNodeRecord>,
    /// Transcripts behind the chosen documentation's reward.
    pub chosen_transcripts: Vec<DocTranscript>,
}

pub fn optimize_documentation<O: SearchObserver<ToolDocumentation>>(
    ctx: &DocContext<'_>,
    initial: &ToolDocumentation,
    validation: &[ToolUseExample],
    config: &SearchConfig,
    observer: O,
) -> Result<(DocArtifact, SearchResult<ToolDocumentation>), DocError> {
    if validation.is_empty() {
        return Err(DocError::EmptyValidation);
    }
    config.validate().map_err(DocError::Config)?;
    let size = batch_size(ctx.settings, validation.len());
    let mut problem = DocProblem {
        ctx,
        initial: initial.clone(),
        validation,
        size,
        version: Cell::new(initial.version_tag),
        evaluated: Vec::new(),
        parent_history: Vec::new(),
    };
    let result = run_search(config, &mut problem, observer)?;
    let best = result.best_node();
    let trajectory = result
        .beams
        .iter()
        .enumerate()
        .map(|(depth, beam)| DepthSummary {
            depth,
            beam: beam.clone(),
            beam_rewards: beam.iter().map(|&id| result.tree.get(id).reward).collect(),
            best_reward: result.best_by_depth[depth],
        })
        .collect();
    let nodes = result
        .tree
        .nodes()
        .iter()
        .map(|n| DocNodeRecord {
            node_id: n.id,
            parent: n.parent,
            depth: n.depth,
            version_tag: n.payload.version_tag,
            reward: n.reward,
            stdev: problem.evaluated[n.id].stdev,
        })
        .collect();
    let artifact = DocArtifact {
        format: DOCS_FORMAT.to_string(),
        tool_id: ctx.tool.tool_id.clone(),
        search: config.clone(),
        batch_size: size,
        original: initial.clone(),
        original_reward: result.tree.get(0).reward,
        final_doc: best.payload.clone(),
        final_reward: best.reward,
        chosen_node: best.id,
        lineage: result.tree.lineage(best.id).iter().map(|n| n.id).collect(),
        trajectory,
        nodes,
        chosen_transcripts: problem.evaluated[best.id].transcripts.clone(),
    };
    Ok((artifact, result))
}

/// Human-readable per-parameter comparison of two documentations.
pub fn documentation_diff(original: &ToolDocumentation, revised: &ToolDocumentation) -> String {
    let mut out = String::new();
    let line = |out: &mut String, text: String| {
        out.push_str(&text);
        out.push('\n');
    };
    if original.general_description == revised.general_description {
        line(&mut out, "description: unchanged".into());
    } else {
        line(&mut out, "description:".into());
        line(&mut out, format!("  - {}", original.general_description));
        line(&mut out, format!("  + {}", revised.general_description));
    }
    let flag = |p: &crate::registry::ParameterDoc| if p.is_required { "required" } else { "optional" };
    for p in &original.parameters {
        match revised.parameter(&p.name) {
            None => line(&mut out, format!("parameter {} ({}): removed", p.name, flag(p))),
            Some(r) if r == p => line(&mut out, format!("parameter {}: unchanged", p.name)),
            Some(r) => {
                line(&mut out, format!("parameter {}:", p.name));
                if r.is_required != p.is_required {
                    line(&mut out, format!("  {} -> {}", flag(p), flag(r)));
                }
                if r.type_label != p.type_label {
                    line(&mut out, format!("  type {} -> {}", p.type_label, r.type_label));
                }
                if r.description != p.description {
                    line(&mut out, format!("  - {}", p.description));
                    line(&mut out, format!("  + {}", r.description));
                }
            }
        }
    }
    for r in &revised.parameters {
        if original.parameter(&r.name).is_none() {
            line(&mut out, format!("parameter {} ({}): added", r.name, flag(r)));
            line(&mut out, format!("  + {}", r.description));
        }
    }
    out
}
