//! Browser bindings for the demo page in `www/`.
//!
//! Each export takes and returns JSON strings. The plain functions are the
//! same operations without the wasm boundary, so they can be tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use toolplay::eval::{aggregate_metrics, round1, CategoryScore};
use toolplay::registry::ToolRegistry;
use toolplay::search::{
    digest, run_search, Evaluation, ReflectionNote, SearchConfig, SearchNode, SearchProblem, SearchTree, Strategy,
};
use wasm_bindgen::prelude::*;

/// Registry JSON with parameter descriptions dropped at rate `p`, plus a
/// count of what was removed.
pub fn dropout(registry_json: &str, p: f64, seed: u64) -> Result<String, String> {
    let registry = ToolRegistry::from_json(registry_json).map_err(|e| e.to_string())?;
    let noised = registry.with_dropout(p, seed).map_err(|e| e.to_string())?;
    let count = |r: &ToolRegistry| {
        r.iter()
            .flat_map(|t| &t.documentation.parameters)
            .filter(|p| !p.description.is_empty())
            .count()
    };
    let before = count(&registry);
    let report = json!({
        "described_before": before,
        "dropped": before - count(&noised),
        "registry": serde_json::from_str::<Value>(&noised.to_json()).map_err(|e| e.to_string())?,
    });
    Ok(report.to_string())
}

/// A synthetic reward landscape. Every node's children are fixed by the seed
/// and the node's path, so both strategies explore the same tree.
pub struct Landscape {
    seed: u64,
    roots: usize,
}

/// Path label such as `2.0.1`, and the node's reward.
type Spot = (String, f64);

impl Landscape {
    fn rng(&self, label: &str) -> ChaCha8Rng {
        let key = u64::from_str_radix(&digest(label.as_bytes())[..16], 16).expect("hex digest");
        ChaCha8Rng::seed_from_u64(self.seed ^ key)
    }
}

impl SearchProblem for Landscape {
    type Payload = Spot;
    type Error = String;

    fn initial(&mut self) -> Result<Vec<Spot>, String> {
        Ok((0..self.roots)
            .map(|i| {
                let label = i.to_string();
                let reward = self.rng(&label).gen_range(0.0..0.5);
                (label, reward)
            })
            .collect())
    }

    fn propose(&mut self, parent: &SearchNode<Spot>, _: &SearchTree<Spot>, limit: usize) -> Result<Vec<Spot>, String> {
        let (label, base) = &parent.payload;
        Ok((0..limit)
            .map(|i| {
                let child = format!("{label}.{i}");
                // Steps are skewed slightly upward with heavy spread, so a
                // weak parent sometimes has the best descendants.
                let step = self.rng(&child).gen_range(-0.3..0.36);
                (child, (base + step).clamp(0.0, 1.0))
            })
            .collect())
    }

    fn evaluate(&mut self, payload: &Spot, _depth: usize) -> Result<Evaluation, String> {
        Ok(Evaluation {
            reward: payload.1,
            reflection: ReflectionNote::none(),
        })
    }
}

/// Runs beam or Monte Carlo search over the seeded landscape and returns the
/// explored tree with beams and the best node.
pub fn search(strategy: &str, width: usize, branching: usize, depth: usize, seed: u64) -> Result<String, String> {
    let strategy = match strategy {
        "beam" => Strategy::Beam,
        "monte_carlo" => Strategy::MonteCarlo,
        other => return Err(format!("unknown strategy `{other}`")),
    };
    let config = SearchConfig {
        strategy,
        width,
        branching,
        max_depth: depth,
        ..SearchConfig::default()
    };
    let mut landscape = Landscape { seed, roots: width.max(1) };
    let result = run_search(&config, &mut landscape, ()).map_err(|e| e.to_string())?;
    let nodes: Vec<Value> = result
        .tree
        .nodes()
        .iter()
        .map(|n| {
            json!({
                "id": n.id,
                "label": n.payload.0,
                "parent": n.parent,
                "depth": n.depth,
                "reward": round3(n.reward),
            })
        })
        .collect();
    let best = result.best_node();
    let report = json!({
        "nodes": nodes,
        "beams": result.beams,
        "best": best.id,
        "best_label": best.payload.0,
        "best_reward": round3(best.reward),
        "best_by_depth": result.best_by_depth.iter().map(|&r| round3(r)).collect::<Vec<_>>(),
    });
    Ok(report.to_string())
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Weighted and unweighted means of `[{name, accuracy, weight}]`, rounded to
/// one decimal.
pub fn aggregate(categories_json: &str) -> Result<String, String> {
    let categories: Vec<CategoryScore> = serde_json::from_str(categories_json).map_err(|e| e.to_string())?;
    let report = aggregate_metrics(&categories).map_err(|e| e.to_string())?;
    Ok(json!({
        "weighted": round1(report.weighted),
        "unweighted": round1(report.unweighted),
        "categories": report.categories,
    })
    .to_string())
}

#[wasm_bindgen(js_name = dropoutPreview)]
pub fn dropout_preview(registry_json: &str, p: f64, seed: u64) -> Result<String, JsError> {
    dropout(registry_json, p, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = runSearch)]
pub fn run_search_demo(strategy: &str, width: usize, branching: usize, depth: usize, seed: u64) -> Result<String, JsError> {
    search(strategy, width, branching, depth, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = aggregateMetrics)]
pub fn aggregate_metrics_demo(categories_json: &str) -> Result<String, JsError> {
    aggregate(categories_json).map_err(|e| JsError::new(&e))
}
