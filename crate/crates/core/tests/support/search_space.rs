//! Scripted proposal spaces and an enumeration oracle for beam search.
#![allow(dead_code)]

use std::collections::HashMap;

use toolplay::search::{Evaluation, ReflectionNote, SearchConfig, SearchNode, SearchProblem, SearchTree};

/// A fully scripted proposal space. Node labels are unique.
#[derive(Debug, Clone)]
pub struct Space {
    pub roots: Vec<String>,
    pub children: HashMap<String, Vec<String>>,
    pub reward: HashMap<String, f64>,
}

impl Space {
    /// `nodes[i] = (parent, reward)`; `parent = None` makes a root.
    pub fn from_parents(nodes: &[(Option<usize>, f64)]) -> Self {
        let mut space = Space {
            roots: Vec::new(),
            children: HashMap::new(),
            reward: HashMap::new(),
        };
        for (i, (parent, reward)) in nodes.iter().enumerate() {
            let label = format!("n{i}");
            space.reward.insert(label.clone(), *reward);
            match parent {
                None => space.roots.push(label),
                Some(p) => space.children.entry(format!("n{p}")).or_default().push(label),
            }
        }
        space
    }

    pub fn kids(&self, label: &str) -> &[String] {
        self.children.get(label).map_or(&[], Vec::as_slice)
    }
}

impl SearchProblem for Space {
    type Payload = String;
    type Error = String;

    fn initial(&mut self) -> Result<Vec<String>, String> {
        Ok(self.roots.clone())
    }

    fn propose(&mut self, parent: &SearchNode<String>, _: &SearchTree<String>, limit: usize) -> Result<Vec<String>, String> {
        Ok(self.kids(&parent.payload).iter().take(limit).cloned().collect())
    }

    fn evaluate(&mut self, payload: &String, _: usize) -> Result<Evaluation, String> {
        Ok(Evaluation {
            reward: self.reward[payload],
            reflection: ReflectionNote::none(),
        })
    }
}

pub fn config(width: usize, branching: usize, max_depth: usize) -> SearchConfig {
    SearchConfig {
        width,
        branching,
        max_depth,
        ..SearchConfig::default()
    }
}

/// Reference beam per depth, built by enumerating every candidate at a depth
/// and ranking with the documented key: reward descending, then the rank of
/// the parent in the previous beam, then the order the parent proposed it.
pub fn oracle_beams(space: &Space, width: usize, branching: usize, max_depth: usize) -> Vec<Vec<String>> {
    let rank = |pool: Vec<(String, (usize, usize))>| -> Vec<String> {
        let mut pool: Vec<(f64, (usize, usize), String)> =
            pool.into_iter().map(|(l, key)| (space.reward[&l], key, l)).collect();
        pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        pool.into_iter().take(width).map(|(_, _, l)| l).collect()
    };
    let mut beams = vec![rank(space.roots.iter().enumerate().map(|(i, l)| (l.clone(), (0, i))).collect())];
    for _ in 0..max_depth {
        let prev = beams.last().unwrap();
        let pool: Vec<(String, (usize, usize))> = prev
            .iter()
            .enumerate()
            .flat_map(|(pr, p)| {
                space
                    .kids(p)
                    .iter()
                    .take(branching)
                    .enumerate()
                    .map(move |(ci, c)| (c.clone(), (pr, ci)))
            })
            .collect();
        if pool.is_empty() {
            break;
        }
        beams.push(rank(pool));
    }
    beams
}

pub fn labels(tree: &SearchTree<String>, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&id| tree.get(id).payload.clone()).collect()
}

/// A target that sits under the lowest-reward first-depth candidate.
pub fn separation_space() -> Space {
    Space::from_parents(&[
        (None, 0.0),      // n0 root
        (Some(0), 0.9),   // n1 greedy
        (Some(0), 0.5),   // n2
        (Some(0), 0.1),   // n3 the non-greedy ancestor
        (Some(1), 0.4),   // n4
        (Some(1), 0.35),  // n5
        (Some(2), 0.3),   // n6
        (Some(3), 0.38),  // n7
        (Some(4), 0.45),  // n8
        (Some(7), 1.0),   // n9 target
    ])
}

