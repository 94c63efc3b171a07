//! Task-model inference, invocation scoring and benchmark-style aggregation.
//!
//! The task metric used everywhere (example difficulty, documentation reward,
//! benchmark evaluation) is [`task_metric`]; canonicalization rules for exact
//! matching live in [`canonical_value`].

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::executor::{Executor, Invocation};
use crate::llm::structured::json_values;
use crate::llm::{extract_calls, parse_structured_output, Bindings, Decoding, GatewayError, Generator, OutputSchema, PromptId, PromptLibrary};
use crate::registry::{ToolDocumentation, ToolSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    #[default]
    SingleTurn,
    FunctionCall,
    ReactLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub demos_per_tool: usize,
    pub temperature: f64,
    pub max_react_steps: usize,
}

fn default_demos() -> usize {
    1
}

fn default_temperature() -> f64 {
    0.001
}

fn default_react_steps() -> usize {
    6
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::SingleTurn,
            demos_per_tool: default_demos(),
            temperature: default_temperature(),
            max_react_steps: default_react_steps(),
        }
    }
}

impl InferenceConfig {
    /// The configuration used while optimizing: one shot, no demonstrations.
    pub fn zero_shot() -> Self {
        Self {
            demos_per_tool: 0,
            ..Self::default()
        }
    }
}

/// A worked example shown to the task model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub query: String,
    pub invocation: Invocation,
    pub answer: String,
    pub reward: f64,
}

/// One tool as presented to the task model.
#[derive(Debug, Clone, Copy)]
pub struct ToolContext<'a> {
    pub tool: &'a ToolSpec,
    pub doc: &'a ToolDocumentation,
    pub demos: &'a [Demonstration],
}

/// The `k` highest-reward demonstrations, ties in input order.
pub fn select_demonstrations(demos: &[Demonstration], k: usize) -> Vec<&Demonstration> {
    let mut ranked: Vec<&Demonstration> = demos.iter().collect();
    ranked.sort_by(|a, b| b.reward.total_cmp(&a.reward));
    ranked.truncate(k);
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub query: String,
    pub prompts: Vec<String>,
    pub outputs: Vec<String>,
    pub invocations: Vec<Invocation>,
    pub answer: String,
    pub steps: usize,
    /// No invocation could be extracted; scored 0.
    pub unparseable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Transcript {
    fn new(query: &str) -> Self {
        Self {
            query: query.to_string(),
            prompts: Vec::new(),
            outputs: Vec::new(),
            invocations: Vec::new(),
            answer: String::new(),
            steps: 0,
            unparseable: false,
            error: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("react mode needs an executor")]
    NoExecutor,
    #[error("no categories to aggregate")]
    EmptyReport,
    #[error("category `{0}` has a non-positive weight")]
    BadWeight(String),
}

fn demo_call(tool: &ToolSpec, invocation: &Invocation) -> String {
    serde_json::json!({ "name": tool.name, "arguments": invocation.arguments }).to_string()
}

fn base_bindings(query: &str, tools: &[ToolContext<'_>], demos_per_tool: usize) -> Bindings {
    let rendered: Vec<String> = tools.iter().map(|t| t.tool.render_documentation(t.doc)).collect();
    let demos: Vec<Vec<(&str, String)>> = tools
        .iter()
        .flat_map(|t| {
            select_demonstrations(t.demos, demos_per_tool).into_iter().map(move |d| {
                vec![
                    ("demo_query", d.query.clone()),
                    ("demo_call", demo_call(t.tool, &d.invocation)),
                    ("demo_answer", d.answer.clone()),
                ]
            })
        })
        .collect();
    Bindings::new()
        .set("tools", rendered.join("\n"))
        .set("query", query)
        .list("demonstrations", demos)
}

/// Maps a model-written function name back to a tool id. Unknown names are
/// kept verbatim so they score as mismatches.
fn resolve(tools: &[ToolContext<'_>], name: &str) -> String {
    tools
        .iter()
        .find(|t| t.tool.name == name || t.tool.tool_id == name)
        .map_or_else(|| name.to_string(), |t| t.tool.tool_id.clone())
}

pub fn run_task_model(
    query: &str,
    tools: &[ToolContext<'_>],
    config: &InferenceConfig,
    task_model: &Generator,
    library: &PromptLibrary,
    executor: Option<&Executor>,
) -> Result<Transcript, EvalError> {
    let model = task_model.clone().with_decoding(Decoding {
        temperature: config.temperature,
        ..task_model.decoding()
    });
    match config.mode {
        InferenceMode::SingleTurn | InferenceMode::FunctionCall => {
            let id = if config.mode == InferenceMode::SingleTurn {
                PromptId::TaskSingleTurn
            } else {
                PromptId::TaskFunctionCall
            };
            let bindings = base_bindings(query, tools, config.demos_per_tool);
            let exchange = library.ask(&model, id, &bindings)?;
            let mut transcript = Transcript::new(query);
            transcript.steps = 1;
            match extract_calls(&exchange.completion.text) {
                Some(calls) => {
                    transcript.invocations = calls
                        .into_iter()
                        .map(|c| Invocation::new(resolve(tools, &c.name), c.arguments))
                        .collect()
                }
                None => transcript.unparseable = true,
            }
            transcript.answer = exchange.completion.text.clone();
            transcript.prompts.push(exchange.prompt);
            transcript.outputs.push(exchange.completion.text);
            Ok(transcript)
        }
        InferenceMode::ReactLoop => {
            let executor = executor.ok_or(EvalError::NoExecutor)?;
            run_react(query, tools, config, &model, library, executor)
        }
    }
}

enum ReactStep {
    Finish(String),
    Act { name: String, arguments: Map<String, Value> },
    Unparseable,
}

fn field_after<'t>(text: &'t str, label: &str) -> Option<&'t str> {
    text.find(label).map(|i| &text[i + label.len()..])
}

fn parse_react(text: &str) -> ReactStep {
    if let Some(rest) = field_after(text, "Final Answer:") {
        return ReactStep::Finish(rest.trim().to_string());
    }
    let Some(after_action) = field_after(text, "Action:") else {
        return ReactStep::Unparseable;
    };
    let name = after_action.lines().next().unwrap_or("").trim().to_string();
    let arguments = field_after(after_action, "Action Input:")
        .and_then(|input| json_values(input, b"{").next())
        .and_then(|v| match v {
            Value::Object(map) => Some(map),
            _ => None,
        });
    match arguments {
        Some(arguments) if !name.is_empty() => ReactStep::Act { name, arguments },
        _ => ReactStep::Unparseable,
    }
}

fn run_react(
    query: &str,
    tools: &[ToolContext<'_>],
    config: &InferenceConfig,
    model: &Generator,
    library: &PromptLibrary,
    executor: &Executor,
) -> Result<Transcript, EvalError> {
    let names: Vec<&str> = tools.iter().map(|t| t.tool.name.as_str()).collect();
    let base = base_bindings(query, tools, config.demos_per_tool).set("tool_names", names.join(", "));
    let mut transcript = Transcript::new(query);
    let mut scratchpad = String::new();

    while transcript.steps < config.max_react_steps {
        let bindings = base.clone().set("scratchpad", scratchpad.clone());
        let exchange = library.ask(model, PromptId::TaskReact, &bindings)?;
        transcript.steps += 1;
        // Models sometimes invent their own observation; only the part before it counts.
        let text = exchange.completion.text.split("\nObservation:").next().unwrap_or("").to_string();
        transcript.prompts.push(exchange.prompt);
        transcript.outputs.push(exchange.completion.text);
        match parse_react(&text) {
            ReactStep::Finish(answer) => {
                transcript.answer = answer;
                return Ok(transcript);
            }
            ReactStep::Unparseable => {
                transcript.unparseable = transcript.invocations.is_empty();
                transcript.error = Some("unparseable react step".into());
                return Ok(transcript);
            }
            ReactStep::Act { name, arguments } => {
                let invocation = Invocation::new(resolve(tools, &name), arguments);
                let observation = match tools.iter().find(|t| t.tool.tool_id == invocation.tool_id) {
                    Some(t) => match executor.execute_tool(t.tool, &invocation.arguments) {
                        Ok(output) => output.render_for_prompt(),
                        Err(err) => err.to_string(),
                    },
                    None => format!("unknown tool `{name}`"),
                };
                scratchpad.push_str(text.trim_end());
                scratchpad.push_str("\nObservation: ");
                scratchpad.push_str(&observation);
                scratchpad.push('\n');
                transcript.invocations.push(invocation);
            }
        }
    }
    transcript.error = Some(format!("step cap of {} reached", config.max_react_steps));
    transcript.unparseable = transcript.invocations.is_empty();
    Ok(transcript)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Ordered, pairwise.
    #[default]
    Exact,
    /// Order-insensitive multiset comparison, for parallel calls.
    Structural,
}

/// Canonical form for comparison: object keys sorted, numbers as `f64`
/// (so `1` equals `1.0`), strings trimmed.
pub fn canonical_value(value: &Value) -> Value {
    match value {
        Value::String(s) => Value::String(s.trim().to_string()),
        Value::Number(n) => n
            .as_f64()
            .and_then(serde_json::Number::from_f64)
            .map_or_else(|| Value::Number(n.clone()), Value::Number),
        Value::Array(items) => Value::Array(items.iter().map(canonical_value).collect()),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            Value::Object(keys.into_iter().map(|k| (k.clone(), canonical_value(&map[k]))).collect())
        }
        other => other.clone(),
    }
}

fn canonical_key(invocation: &Invocation) -> String {
    let args = canonical_value(&Value::Object(invocation.arguments.clone()));
    format!("{}\u{0}{}", invocation.tool_id.trim(), args)
}

/// 1.0 on a match, 0.0 otherwise.
pub fn score_invocation(predicted: &[Invocation], gold: &[Invocation], matching: Matching) -> f64 {
    if predicted.len() != gold.len() {
        return 0.0;
    }
    let mut p: Vec<String> = predicted.iter().map(canonical_key).collect();
    let mut g: Vec<String> = gold.iter().map(canonical_key).collect();
    if matching == Matching::Structural {
        p.sort();
        g.sort();
    }
    if p == g {
        1.0
    } else {
        0.0
    }
}

/// The task metric P: unparseable transcripts score 0.
pub fn task_metric(transcript: &Transcript, gold: &[Invocation], matching: Matching) -> f64 {
    if transcript.unparseable {
        0.0
    } else {
        score_invocation(&transcript.invocations, gold, matching)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub name: String,
    pub accuracy: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub categories: Vec<CategoryScore>,
    pub unweighted: f64,
    pub weighted: f64,
}

pub fn aggregate_metrics(categories: &[CategoryScore]) -> Result<CategoryReport, EvalError> {
    if categories.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    if let Some(bad) = categories.iter().find(|c| !(c.weight > 0.0)) {
        return Err(EvalError::BadWeight(bad.name.clone()));
    }
    let unweighted = categories.iter().map(|c| c.accuracy).sum::<f64>() / categories.len() as f64;
    let total: f64 = categories.iter().map(|c| c.weight).sum();
    let weighted = categories.iter().map(|c| c.weight * c.accuracy).sum::<f64>() / total;
    Ok(CategoryReport {
        categories: categories.to_vec(),
        unweighted,
        weighted,
    })
}

/// Rounds half away from zero to one decimal, as reported in tables.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Solved,
    Unsolved,
    Unsure,
}

/// Judge outages and unparseable verdicts both come back as `Unsure`.
pub fn judge_solvable(query: &str, answer: &str, judge: &Generator, library: &PromptLibrary) -> Verdict {
    let bindings = Bindings::new().set("query", query).set("answer", answer);
    let exchange = match library.ask(judge, PromptId::Judge, &bindings) {
        Ok(exchange) => exchange,
        Err(err) => {
            log::warn!("judge unavailable, recording unsure: {err}");
            return Verdict::Unsure;
        }
    };
    let Ok(record) = parse_structured_output(&exchange.completion.text, &OutputSchema::verdict()) else {
        return Verdict::Unsure;
    };
    match record["verdict"].as_str().map(|v| v.trim().to_ascii_lowercase()).as_deref() {
        Some("solved") => Verdict::Solved,
        Some("unsolved") => Verdict::Unsolved,
        _ => Verdict::Unsure,
    }
}

/// Fraction of verdicts that are `Solved`; `None` for an empty set.
pub fn pass_rate(verdicts: &[Verdict]) -> Option<f64> {
    if verdicts.is_empty() {
        return None;
    }
    let solved = verdicts.iter().filter(|v| **v == Verdict::Solved).count();
    Some(solved as f64 / verdicts.len() as f64)
}
