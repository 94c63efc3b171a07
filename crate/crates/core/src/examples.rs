//! Tool-use example search.
//!
//! A node's children are built in three stages: play with the tool until up
//! to L invocations are judged valid, then for each one write a query and an
//! answer backwards from the observed output, and finally score the result
//! with quality R_q (1-3) plus λ times difficulty R_e = -P. Each invocation
//! gets N_E rollouts; the best one becomes the child and its m6 critique
//! becomes the child's reflection.

use serde::{Deserialize, Serialize};

use crate::eval::{run_task_model, task_metric, InferenceConfig, Matching, ToolContext, Transcript};
use crate::eval::EvalError;
use crate::executor::{Executor, Invocation, ToolOutput};
use crate::llm::{
    extract_calls, parse_structured_output, Bindings, GatewayError, Generator, OutputSchema, PromptId, PromptLibrary,
    StructuredError,
};
use crate::registry::{ToolDocumentation, ToolSpec};
use crate::search::{
    run_search, Evaluation, NodeId, ReflectionNote, ReflectionSource, SearchConfig, SearchError, SearchNode,
    SearchObserver, SearchProblem, SearchResult, SearchTree,
};

pub const EXAMPLES_FORMAT: &str = "toolplay.examples/1";

#[derive(Debug, thiserror::Error)]
pub enum ExampleError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{stage}: {source}")]
    Structured {
        stage: &'static str,
        source: StructuredError,
    },
    #[error("answer generation returned an empty completion")]
    EmptyAnswer,
    #[error("invalid search configuration: {0}")]
    Config(String),
}

impl From<SearchError<ExampleError>> for ExampleError {
    fn from(err: SearchError<ExampleError>) -> Self {
        match err {
            SearchError::Problem(e) => e,
            other => ExampleError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub quality: i64,
    pub difficulty: f64,
    pub lambda: f64,
    pub combined: f64,
}

impl RewardReport {
    pub fn new(quality: i64, difficulty: f64, lambda: f64) -> Self {
        Self {
            quality,
            difficulty,
            lambda,
            combined: quality as f64 + lambda * difficulty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub err_code: i64,
    #[serde(default)]
    pub analysis: String,
}

impl ValidityVerdict {
    pub fn is_valid(&self) -> bool {
        self.err_code == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolUseExample {
    pub query: String,
    pub tool: String,
    pub invocation: Invocation,
    pub answer: String,
    pub tool_output: ToolOutput,
    pub reward: RewardReport,
}

impl ToolUseExample {
    pub fn demonstration(&self) -> crate::eval::Demonstration {
        crate::eval::Demonstration {
            query: self.query.clone(),
            invocation: self.invocation.clone(),
            answer: self.answer.clone(),
            reward: self.reward.combined,
        }
    }
}

/// One pass of the rejection loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub index: usize,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invocation: Option<Invocation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<ToolOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ValidityVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Attempt {
    pub fn is_valid(&self) -> bool {
        self.output.as_ref().is_some_and(ToolOutput::is_ok) && self.verdict.as_ref().is_some_and(ValidityVerdict::is_valid)
    }
}

/// Previous example a node is expanded from.
#[derive(Debug, Clone, Copy)]
pub struct Prior<'a> {
    pub example: &'a ToolUseExample,
    pub reflection: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExampleSettings {
    /// Rejection-sampling attempts per expanded node.
    pub budget: usize,
    /// Extra attempts when a structured reply is missing or out of range.
    pub reasks: usize,
    /// Inference settings for the difficulty term; demonstrations are always 0.
    pub inference: InferenceConfig,
    pub matching: Matching,
}

fn default_budget() -> usize {
    8
}

fn default_reasks() -> usize {
    1
}

impl Default for ExampleSettings {
    fn default() -> Self {
        Self {
            budget: default_budget(),
            reasks: default_reasks(),
            inference: InferenceConfig::zero_shot(),
            matching: Matching::Exact,
        }
    }
}

/// Everything an example search needs for one tool.
pub struct ExampleContext<'a> {
    pub tool: &'a ToolSpec,
    pub doc: &'a ToolDocumentation,
    pub library: &'a PromptLibrary,
    pub generator: &'a Generator,
    pub task_model: &'a Generator,
    pub executor: &'a Executor,
    pub settings: &'a ExampleSettings,
}

impl ExampleContext<'_> {
    fn documentation(&self) -> String {
        self.tool.render_documentation(self.doc)
    }

    fn call_text(&self, invocation: &Invocation) -> String {
        invocation.render_call(&self.tool.name)
    }

    /// Completes `id`, re-asking up to `settings.reasks` times when the reply
    /// fails `schema`.
    fn ask_structured(
        &self,
        id: PromptId,
        bindings: &Bindings,
        stage: &'static str,
    ) -> Result<(serde_json::Map<String, serde_json::Value>, usize), ExampleError> {
        let schema = id.output_schema().expect("template has a schema");
        let mut last = None;
        for reask in 0..=self.settings.reasks {
            let exchange = self.library.ask(self.generator, id, bindings)?;
            match parse_structured_output(&exchange.completion.text, &schema) {
                Ok(record) => return Ok((record, reask)),
                Err(err) => {
                    log::debug!("{stage}: unusable reply ({err}), re-asking");
                    last = Some(err);
                }
            }
        }
        Err(ExampleError::Structured {
            stage,
            source: last.expect("at least one attempt"),
        })
    }
}

fn history_item(attempt: &Attempt, function_name: &str) -> Vec<(&'static str, String)> {
    let status = if attempt.is_valid() { "valid" } else { "invalid" };
    let reflection = match (&attempt.verdict, &attempt.failure) {
        (_, Some(failure)) => failure.clone(),
        (Some(v), None) => v.analysis.clone(),
        (None, None) => String::new(),
    };
    vec![
        (
            "fn_call",
            attempt
                .invocation
                .as_ref()
                .map_or_else(|| attempt.completion.clone(), |i| i.render_call(function_name)),
        ),
        ("fn_output", attempt.output.as_ref().map(ToolOutput::render_for_prompt).unwrap_or_default()),
        ("status", status.to_string()),
        ("reflection", reflection),
    ]
}

/// Plays with the tool until `want` invocations are judged valid or the
/// budget runs out. Returns the valid pairs and the full attempt log.
pub fn rejection_sample_invocations(
    ctx: &ExampleContext<'_>,
    prior: Option<Prior<'_>>,
    want: usize,
) -> Result<(Vec<(Invocation, ToolOutput)>, Vec<Attempt>), ExampleError> {
    let documentation = ctx.documentation();
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut valid = Vec::new();

    for index in 0..ctx.settings.budget.max(1) {
        if valid.len() >= want {
            break;
        }
        let mut history: Vec<Vec<(&str, String)>> = Vec::new();
        if let Some(prior) = prior {
            history.push(vec![
                ("fn_call", ctx.call_text(&prior.example.invocation)),
                ("fn_output", prior.example.tool_output.render_for_prompt()),
                ("status", format!("valid, reward {}", prior.example.reward.combined)),
                ("reflection", prior.reflection.to_string()),
            ]);
        }
        history.extend(attempts.iter().map(|a| history_item(a, &ctx.tool.name)));
        let bindings = Bindings::new()
            .set("Documentation", documentation.as_str())
            .set("function_name", ctx.tool.name.as_str())
            .list("history", history);
        let exchange = ctx.library.ask(ctx.generator, PromptId::M1, &bindings)?;
        let mut attempt = Attempt {
            index,
            completion: exchange.completion.text.clone(),
            invocation: None,
            output: None,
            verdict: None,
            failure: None,
        };

        let Some(call) = extract_calls(&exchange.completion.text).and_then(|c| c.into_iter().next()) else {
            log::info!("{}: attempt {index}: no function call in reply", ctx.tool.tool_id);
            attempt.failure = Some("the reply did not contain a function call in the required format".into());
            attempts.push(attempt);
            continue;
        };
        let invocation = Invocation::new(ctx.tool.tool_id.clone(), call.arguments);
        let output = match ctx.executor.execute_tool(ctx.tool, &invocation.arguments) {
            Ok(output) => output,
            Err(err) => {
                attempt.invocation = Some(invocation);
                attempt.failure = Some(err.to_string());
                attempts.push(attempt);
                continue;
            }
        };

        let bindings = Bindings::new()
            .set("Documentation", documentation.as_str())
            .set("function_name", ctx.tool.name.as_str())
            .set("fn_call", ctx.call_text(&invocation))
            .set("fn_output", output.render_for_prompt());
        let verdict_reply = ctx.library.ask(ctx.generator, PromptId::M2, &bindings)?;
        match parse_structured_output(&verdict_reply.completion.text, &OutputSchema::validity()) {
            Ok(record) => {
                attempt.verdict = Some(ValidityVerdict {
                    err_code: record["err_code"].as_i64().unwrap_or(-1),
                    analysis: record.get("analysis").and_then(|a| a.as_str()).unwrap_or("").to_string(),
                });
            }
            Err(err) => {
                log::info!("{}: attempt {index}: verdict unparseable: {err}", ctx.tool.tool_id);
                attempt.failure = Some("the validity check could not be read".into());
            }
        }
        attempt.invocation = Some(invocation.clone());
        attempt.output = Some(output.clone());
        if attempt.is_valid() {
            valid.push((invocation, output));
        }
        attempts.push(attempt);
    }
    Ok((valid, attempts))
}

/// One scored instruction kept as history for the next rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub query: String,
    pub quality: i64,
    pub analysis: String,
}

pub fn generate_query(
    ctx: &ExampleContext<'_>,
    invocation: &Invocation,
    output: &ToolOutput,
    history: &[RolloutRecord],
    reflection: &str,
) -> Result<String, ExampleError> {
    let items: Vec<Vec<(&str, String)>> = history
        .iter()
        .map(|r| vec![("instruction", r.query.clone()), ("score", r.quality.to_string())])
        .collect();
    let bindings = Bindings::new()
        .set("Documentation", ctx.documentation())
        .set("function_name", ctx.tool.name.as_str())
        .set("fn_call", ctx.call_text(invocation))
        .set("fn_output", output.render_for_prompt())
        .set("reflection", reflection)
        .list("history", items);
    let (record, _) = ctx.ask_structured(PromptId::M3, &bindings, "query generation")?;
    Ok(record["instruction"].as_str().unwrap_or("").trim().to_string())
}

pub fn generate_answer(ctx: &ExampleContext<'_>, output: &ToolOutput, query: &str) -> Result<String, ExampleError> {
    let bindings = Bindings::new()
        .set("Documentation", ctx.documentation())
        .set("instruction", query)
        .set("fn_output", output.render_for_prompt());
    let exchange = ctx.library.ask(ctx.generator, PromptId::M4, &bindings)?;
    let answer = exchange.completion.text.trim();
    if answer.is_empty() {
        return Err(ExampleError::EmptyAnswer);
    }
    Ok(answer.to_string())
}

/// R_q with the judge's analysis and the number of re-asks it took.
pub fn score_quality(
    ctx: &ExampleContext<'_>,
    query: &str,
    invocation: &Invocation,
    answer: &str,
) -> Result<(i64, String, usize), ExampleError> {
    let bindings = Bindings::new()
        .set("instruction", query)
        .set("fn_call", ctx.call_text(invocation))
        .set("answer", answer);
    let (record, reasks) = ctx.ask_structured(PromptId::M5, &bindings, "quality scoring")?;
    let analysis = record.get("analysis").and_then(|a| a.as_str()).unwrap_or("").to_string();
    Ok((record["score"].as_i64().expect("range-checked"), analysis, reasks))
}

/// R_e = -P, with the task model given only the documentation.
pub fn score_difficulty(
    ctx: &ExampleContext<'_>,
    query: &str,
    invocation: &Invocation,
) -> Result<(f64, Transcript), ExampleError> {
    let config = InferenceConfig {
        demos_per_tool: 0,
        ..ctx.settings.inference.clone()
    };
    let tools = [ToolContext {
        tool: ctx.tool,
        doc: ctx.doc,
        demos: &[],
    }];
    let transcript = run_task_model(query, &tools, &config, ctx.task_model, ctx.library, Some(ctx.executor))?;
    let p = task_metric(&transcript, std::slice::from_ref(invocation), ctx.settings.matching);
    Ok((-p, transcript))
}

/// A finished rollout: the scored example and the critique written after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub example: ToolUseExample,
    pub reflection: String,
}

fn reflect_on_rollouts(ctx: &ExampleContext<'_>, invocation: &Invocation, history: &[RolloutRecord]) -> Result<String, ExampleError> {
    let items: Vec<Vec<(&str, String)>> = history
        .iter()
        .map(|r| {
            vec![
                ("instruction", r.query.clone()),
                ("score", r.quality.to_string()),
                ("analysis", r.analysis.clone()),
            ]
        })
        .collect();
    let bindings = Bindings::new()
        .set("Documentation", ctx.documentation())
        .set("function_name", ctx.tool.name.as_str())
        .set("fn_call", ctx.call_text(invocation))
        .list("history", items);
    Ok(ctx.library.ask(ctx.generator, PromptId::M6, &bindings)?.completion.text.trim().to_string())
}

/// N_E rollouts for one valid invocation; the best by combined reward wins,
/// ties to the earliest. `None` if every rollout failed to produce output.
pub fn best_rollout(
    ctx: &ExampleContext<'_>,
    invocation: &Invocation,
    output: &ToolOutput,
    rollouts: usize,
    lambda: f64,
) -> Result<Option<Rollout>, ExampleError> {
    let mut history: Vec<RolloutRecord> = Vec::new();
    let mut reflection = String::new();
    let mut best: Option<Rollout> = None;

    for round in 0..rollouts.max(1) {
        let scored = (|| -> Result<_, ExampleError> {
            let query = generate_query(ctx, invocation, output, &history, &reflection)?;
            let answer = generate_answer(ctx, output, &query)?;
            let (quality, analysis, _) = score_quality(ctx, &query, invocation, &answer)?;
            let (difficulty, _) = score_difficulty(ctx, &query, invocation)?;
            Ok((query, answer, quality, analysis, difficulty))
        })();
        let (query, answer, quality, analysis, difficulty) = match scored {
            Ok(parts) => parts,
            Err(err @ (ExampleError::Structured { .. } | ExampleError::EmptyAnswer)) => {
                log::info!("{}: rollout {round} dropped: {err}", ctx.tool.tool_id);
                continue;
            }
            Err(err) => return Err(err),
        };
        history.push(RolloutRecord {
            query: query.clone(),
            quality,
            analysis,
        });
        reflection = reflect_on_rollouts(ctx, invocation, &history)?;
        let example = ToolUseExample {
            query,
            tool: ctx.tool.tool_id.clone(),
            invocation: invocation.clone(),
            answer,
            tool_output: output.clone(),
            reward: RewardReport::new(quality, difficulty, lambda),
        };
        if best.as_ref().is_none_or(|b| example.reward.combined > b.example.reward.combined) {
            best = Some(Rollout {
                example,
                reflection: reflection.clone(),
            });
        }
    }
    Ok(best)
}

/// Up to `branching` children of one node, plus the rejection-loop log.
pub fn example_step(
    ctx: &ExampleContext<'_>,
    prior: Option<Prior<'_>>,
    branching: usize,
    rollouts: usize,
    lambda: f64,
) -> Result<(Vec<Rollout>, Vec<Attempt>), ExampleError> {
    let (valid, attempts) = rejection_sample_invocations(ctx, prior, branching)?;
    let mut children = Vec::new();
    for (invocation, output) in valid.iter().take(branching) {
        if let Some(rollout) = best_rollout(ctx, invocation, output, rollouts, lambda)? {
            children.push(rollout);
        }
    }
    Ok((children, attempts))
}

/// Search payload: the documentation-only seed, or a scored example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExamplePayload {
    Seed,
    Example { example: ToolUseExample, reflection: String },
}

/// Attempts made while expanding one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub parent: NodeId,
    pub attempts: Vec<Attempt>,
}

struct ExampleProblem<'c, 'a> {
    ctx: &'c ExampleContext<'a>,
    config: &'c SearchConfig,
    log: Vec<AttemptLog>,
}

impl SearchProblem for ExampleProblem<'_, '_> {
    type Payload = ExamplePayload;
    type Error = ExampleError;

    fn initial(&mut self) -> Result<Vec<ExamplePayload>, ExampleError> {
        Ok(vec![ExamplePayload::Seed])
    }

    fn propose(
        &mut self,
        parent: &SearchNode<ExamplePayload>,
        _: &SearchTree<ExamplePayload>,
        limit: usize,
    ) -> Result<Vec<ExamplePayload>, ExampleError> {
        let prior = match &parent.payload {
            ExamplePayload::Seed => None,
            ExamplePayload::Example { example, reflection } => Some(Prior { example, reflection }),
        };
        let (children, attempts) =
            example_step(self.ctx, prior, limit, self.config.reflection_rollouts, self.config.lambda)?;
        self.log.push(AttemptLog {
            parent: parent.id,
            attempts,
        });
        Ok(children
            .into_iter()
            .map(|r| ExamplePayload::Example {
                example: r.example,
                reflection: r.reflection,
            })
            .collect())
    }

    fn evaluate(&mut self, payload: &ExamplePayload, _: usize) -> Result<Evaluation, ExampleError> {
        // Rewards are computed during proposal; the seed is a placeholder
        // that never competes with examples because beams are drawn from
        // fresh proposals only.
        Ok(match payload {
            ExamplePayload::Seed => Evaluation {
                reward: 0.0,
                reflection: ReflectionNote::none(),
            },
            ExamplePayload::Example { example, reflection } => Evaluation {
                reward: example.reward.combined,
                reflection: ReflectionNote::new(reflection.clone(), ReflectionSource::M6),
            },
        })
    }
}

/// An emitted example with its place in the search tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedExample {
    pub node_id: NodeId,
    /// Root-first node ids ending at this example.
    pub lineage: Vec<NodeId>,
    pub example: ToolUseExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEntry {
    pub node_id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub reward: f64,
}

/// Per-tool example artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleArtifact {
    pub format: String,
    pub tool_id: String,
    pub outcome: ExampleOutcome,
    pub search: SearchConfig,
    pub examples: Vec<RankedExample>,
    pub tree: Vec<TreeEntry>,
    pub iterations_run: usize,
    pub attempts: Vec<AttemptLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleOutcome {
    Found,
    /// No invocation was ever judged valid.
    Unplayable,
}

impl ExampleArtifact {
    pub fn demonstrations(&self) -> Vec<crate::eval::Demonstration> {
        self.examples.iter().map(|e| e.example.demonstration()).collect()
    }

    pub fn validation_set(&self) -> Vec<ToolUseExample> {
        self.examples.iter().map(|e| e.example.clone()).collect()
    }
}

/// Runs the example search for one tool and returns the final beam.
pub fn optimize_examples<O: SearchObserver<ExamplePayload>>(
    ctx: &ExampleContext<'_>,
    config: &SearchConfig,
    observer: O,
) -> Result<(ExampleArtifact, SearchResult<ExamplePayload>), ExampleError> {
    config.validate().map_err(ExampleError::Config)?;
    let mut problem = ExampleProblem {
        ctx,
        config,
        log: Vec::new(),
    };
    let result = run_search(config, &mut problem, observer)?;
    let examples: Vec<RankedExample> = result
        .final_nodes()
        .filter_map(|node| match &node.payload {
            ExamplePayload::Example { example, .. } => Some(RankedExample {
                node_id: node.id,
                lineage: result.tree.lineage(node.id).iter().map(|n| n.id).collect(),
                example: example.clone(),
            }),
            ExamplePayload::Seed => None,
        })
        .collect();
    let outcome = if examples.is_empty() {
        log::warn!("{}: no valid invocation found; tool unplayable", ctx.tool.tool_id);
        ExampleOutcome::Unplayable
    } else {
        ExampleOutcome::Found
    };
    let artifact = ExampleArtifact {
        format: EXAMPLES_FORMAT.to_string(),
        tool_id: ctx.tool.tool_id.clone(),
        outcome,
        search: config.clone(),
        examples,
        tree: result
            .tree
            .nodes()
            .iter()
            .map(|n| TreeEntry {
                node_id: n.id,
                parent: n.parent,
                depth: n.depth,
                reward: n.reward,
            })
            .collect(),
        iterations_run: result.iterations_run,
        attempts: problem.log,
    };
    Ok((artifact, result))
}
