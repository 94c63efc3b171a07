//! Run orchestration: configuration, backends, the run directory and its
//! manifest, and the per-stage drivers behind the command-line verbs.
//!
//! Each tool is an independent unit of work with its own backend state,
//! executor and derived seed. A tool's output therefore depends only on the
//! configuration, the registry and the tool itself, which is what makes
//! resuming at tool granularity and byte-for-byte replay possible.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json
//! examples/<tool>.json          examples/<tool>.trace.jsonl
//! docs/<tool>.json              docs/<tool>.diff.txt        docs/<tool>.trace.jsonl
//! eval/report.json              eval/report.txt
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::docs::{documentation_diff, optimize_documentation, DocArtifact, DocContext, DocSettings};
use crate::eval::{
    aggregate_metrics, judge_solvable, pass_rate, round1, run_task_model, task_metric, CategoryReport, CategoryScore,
    Demonstration, InferenceConfig, Matching, ToolContext, Transcript, Verdict,
};
use crate::examples::{optimize_examples, ExampleArtifact, ExampleContext, ExampleOutcome, ExampleSettings};
use crate::executor::{ExecutionLimits, Executor, Invocation};
use crate::llm::{Backend, Generator, MockBackend, MockScript, PromptLibrary, RetryPolicy, Role};
use crate::registry::{RegistryError, ToolDocumentation, ToolRegistry, ToolSpec};
use crate::search::{digest, SearchConfig, TraceWriter};

pub const MANIFEST_FORMAT: &str = "toolplay.manifest/1";
pub const REPORT_FORMAT: &str = "toolplay.report/1";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("run directory {dir} was created with a different {what}; use a fresh --out")]
    ManifestMismatch { dir: String, what: &'static str },
    #[error("queries line {line}: {message}")]
    Queries { line: usize, message: String },
    #[error("{path}: {message}")]
    Artifact { path: String, message: String },
    #[error("replay: {0}")]
    Replay(String),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub example_generator: String,
    pub doc_generator: String,
    pub task_model: String,
    pub judge: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            example_generator: "gpt-4o".into(),
            doc_generator: "gpt-4o".into(),
            task_model: "gpt-4o-mini".into(),
            judge: "gpt-4o".into(),
        }
    }
}

impl ModelConfig {
    pub fn for_role(&self, role: Role) -> &str {
        match role {
            Role::ExampleGenerator => &self.example_generator,
            Role::DocGenerator => &self.doc_generator,
            Role::TaskModel => &self.task_model,
            Role::Judge => &self.judge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CategoryConfig {
    pub weight: f64,
    pub matching: Matching,
}

impl Default for CategoryConfig {
    fn default() -> Self {
        Self {
            weight: 1.0,
            matching: Matching::Exact,
        }
    }
}

fn default_jobs() -> usize {
    1
}

/// Everything that shapes a run. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub example_search: SearchConfig,
    #[serde(default)]
    pub doc_search: SearchConfig,
    #[serde(default)]
    pub examples: ExampleSettings,
    #[serde(default)]
    pub docs: DocSettings,
    /// Inference settings for the evaluation stage.
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub execution: ExecutionLimits,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub models: ModelConfig,
    /// Tool ids to process; empty selects every tool.
    #[serde(default)]
    pub tools: Vec<String>,
    /// Evaluation categories; unlisted categories get weight 1, exact matching.
    #[serde(default)]
    pub categories: BTreeMap<String, CategoryConfig>,
    /// Ask the judge model for a solvable verdict on each evaluated query.
    #[serde(default)]
    pub judge: bool,
    /// Tools processed in parallel.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            example_search: SearchConfig::default(),
            doc_search: SearchConfig::default(),
            examples: ExampleSettings::default(),
            docs: DocSettings::default(),
            inference: InferenceConfig::default(),
            execution: ExecutionLimits::default(),
            retry: RetryPolicy::default(),
            models: ModelConfig::default(),
            tools: Vec::new(),
            categories: BTreeMap::new(),
            judge: false,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.example_search
            .validate()
            .map_err(|e| PipelineError::Config(format!("example_search: {e}")))?;
        self.doc_search
            .validate()
            .map_err(|e| PipelineError::Config(format!("doc_search: {e}")))?;
        if self.inference.mode == crate::eval::InferenceMode::ReactLoop && self.inference.max_react_steps == 0 {
            return Err(PipelineError::Config("inference.max_react_steps must be at least 1".into()));
        }
        if let Some((name, _)) = self.categories.iter().find(|(_, c)| !(c.weight > 0.0)) {
            return Err(PipelineError::Config(format!("category `{name}` needs a positive weight")));
        }
        Ok(())
    }

    /// Seed for one tool, stable under tool reordering.
    pub fn tool_seed(&self, tool_id: &str) -> u64 {
        let h = digest(tool_id.as_bytes());
        self.seed ^ u64::from_str_radix(&h[..16], 16).expect("hex digest")
    }
}

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSource {
    Mock { script: MockScript },
    OpenAi { base_url: String },
}

/// One generator per role.
#[derive(Clone)]
pub struct Generators {
    pub example: Generator,
    pub doc: Generator,
    pub task: Generator,
    pub judge: Generator,
}

impl Generators {
    pub fn calls(&self) -> CallCounts {
        CallCounts {
            example_generator: self.example.call_count(),
            doc_generator: self.doc.call_count(),
            task_model: self.task.call_count(),
            judge: self.judge.call_count(),
            tool: 0,
        }
    }
}

impl BackendSource {
    /// Fresh generators with their own backend state.
    pub fn generators(&self, config: &RunConfig) -> Result<Generators, PipelineError> {
        let make = |role: Role, backend: Arc<dyn Backend>| Generator::new(role, backend).with_retry(config.retry);
        match self {
            BackendSource::Mock { script } => {
                let backend: Arc<dyn Backend> = MockBackend::shared(script.clone());
                Ok(Generators {
                    example: make(Role::ExampleGenerator, backend.clone()),
                    doc: make(Role::DocGenerator, backend.clone()),
                    task: make(Role::TaskModel, backend.clone()),
                    judge: make(Role::Judge, backend),
                })
            }
            #[cfg(feature = "net")]
            BackendSource::OpenAi { base_url } => {
                let key = std::env::var("TOOLPLAY_API_KEY").ok();
                let backend = |role: Role| -> Arc<dyn Backend> {
                    Arc::new(crate::llm::OpenAiBackend::new(
                        base_url.clone(),
                        config.models.for_role(role),
                        key.clone(),
                        std::time::Duration::from_secs(120),
                    ))
                };
                Ok(Generators {
                    example: make(Role::ExampleGenerator, backend(Role::ExampleGenerator)),
                    doc: make(Role::DocGenerator, backend(Role::DocGenerator)),
                    task: make(Role::TaskModel, backend(Role::TaskModel)),
                    judge: make(Role::Judge, backend(Role::Judge)),
                })
            }
            #[cfg(not(feature = "net"))]
            BackendSource::OpenAi { .. } => Err(PipelineError::Config("built without network support".into())),
        }
    }
}

/// Writes through a temporary sibling and renames it into place, so readers
/// see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io_err(parent))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    text.into_bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Examples,
    Docs,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Done,
    Unplayable,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounts {
    pub example_generator: u64,
    pub doc_generator: u64,
    pub task_model: u64,
    pub judge: u64,
    pub tool: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub status: UnitStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub artifacts: Vec<ArtifactRecord>,
    pub calls: CallCounts,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub units: BTreeMap<String, UnitRecord>,
    /// Stage inputs not derivable from the registry (the queries file).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub run_id: String,
    pub config: RunConfig,
    pub backend: BackendSource,
    /// The registry as loaded, normalized.
    pub registry: String,
    pub registry_sha256: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn new(config: &RunConfig, backend: &BackendSource, registry: &ToolRegistry) -> Self {
        let registry_text = registry.to_json();
        let registry_sha256 = digest(registry_text.as_bytes());
        let identity = serde_json::json!({ "config": config, "backend": backend, "registry": registry_sha256 });
        Self {
            format: MANIFEST_FORMAT.to_string(),
            run_id: digest(identity.to_string().as_bytes())[..16].to_string(),
            config: config.clone(),
            backend: backend.clone(),
            registry: registry_text,
            registry_sha256,
            stages: BTreeMap::new(),
        }
    }
}

/// A run directory and its manifest.
pub struct RunDir {
    root: PathBuf,
    manifest: Mutex<RunManifest>,
}

impl RunDir {
    /// Opens `root`, creating a manifest or checking the existing one
    /// matches this configuration, backend and registry.
    pub fn open(root: &Path, fresh: RunManifest) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        let path = root.join("manifest.json");
        let manifest = if path.exists() {
            let existing = read_manifest(&path)?;
            let mismatch = |what| PipelineError::ManifestMismatch {
                dir: root.display().to_string(),
                what,
            };
            if existing.config != fresh.config {
                return Err(mismatch("configuration"));
            }
            if existing.backend != fresh.backend {
                return Err(mismatch("backend"));
            }
            if existing.registry_sha256 != fresh.registry_sha256 {
                return Err(mismatch("registry"));
            }
            existing
        } else {
            write_atomic(&path, &pretty(&fresh))?;
            fresh
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Mutex::new(manifest),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> RunManifest {
        self.manifest.lock().expect("manifest lock").clone()
    }

    fn record(&self, stage: Stage, unit: &str, record: UnitRecord) -> Result<(), PipelineError> {
        let mut manifest = self.manifest.lock().expect("manifest lock");
        manifest.stages.entry(stage).or_default().units.insert(unit.to_string(), record);
        write_atomic(&self.root.join("manifest.json"), &pretty(&*manifest))
    }

    fn set_input(&self, stage: Stage, input: &str) -> Result<(), PipelineError> {
        let mut manifest = self.manifest.lock().expect("manifest lock");
        manifest.stages.entry(stage).or_default().input = Some(input.to_string());
        write_atomic(&self.root.join("manifest.json"), &pretty(&*manifest))
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<ArtifactRecord, PipelineError> {
        write_atomic(&self.root.join(rel), bytes)?;
        Ok(ArtifactRecord {
            path: rel.to_string(),
            sha256: digest(bytes),
        })
    }

    /// True when `unit` finished earlier and its artifacts are intact.
    fn completed(&self, stage: Stage, unit: &str) -> bool {
        let manifest = self.manifest.lock().expect("manifest lock");
        let Some(record) = manifest.stages.get(&stage).and_then(|s| s.units.get(unit)) else {
            return false;
        };
        matches!(record.status, UnitStatus::Done | UnitStatus::Unplayable)
            && record.artifacts.iter().all(|a| {
                std::fs::read(self.root.join(&a.path)).is_ok_and(|bytes| digest(&bytes) == a.sha256)
            })
    }

    pub fn examples_path(&self, tool_id: &str) -> PathBuf {
        self.root.join(examples_rel(tool_id))
    }

    pub fn docs_path(&self, tool_id: &str) -> PathBuf {
        self.root.join(docs_rel(tool_id))
    }
}

fn examples_rel(tool_id: &str) -> String {
    format!("examples/{tool_id}.json")
}

fn docs_rel(tool_id: &str) -> String {
    format!("docs/{tool_id}.json")
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// What happened to each selected unit during one stage invocation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageSummary {
    pub completed: Vec<String>,
    /// Finished by an earlier invocation and left untouched.
    pub resumed: Vec<String>,
    pub unplayable: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub skipped: Vec<(String, String)>,
}

impl StageSummary {
    /// 0 when every selected unit succeeded, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failed.is_empty() && self.skipped.is_empty() && self.unplayable.is_empty() {
            0
        } else {
            2
        }
    }

    pub fn is_empty(&self) -> bool {
        self.completed.is_empty()
            && self.resumed.is_empty()
            && self.unplayable.is_empty()
            && self.failed.is_empty()
            && self.skipped.is_empty()
    }

    pub fn render(&self) -> String {
        if self.is_empty() {
            return "no tools selected\n".into();
        }
        let mut out = String::new();
        let names = |v: &[String]| v.join(", ");
        if !self.completed.is_empty() {
            out.push_str(&format!("completed: {}\n", names(&self.completed)));
        }
        if !self.resumed.is_empty() {
            out.push_str(&format!("already done: {}\n", names(&self.resumed)));
        }
        if !self.unplayable.is_empty() {
            out.push_str(&format!("unplayable: {}\n", names(&self.unplayable)));
        }
        for (tool, why) in &self.skipped {
            out.push_str(&format!("skipped {tool}: {why}\n"));
        }
        for (tool, why) in &self.failed {
            out.push_str(&format!("failed {tool}: {why}\n"));
        }
        out
    }
}

enum UnitResult {
    Done(UnitRecord),
    Unplayable(UnitRecord),
    Skipped(String),
    Failed(String),
}

/// Shared inputs of every stage.
pub struct Pipeline<'a> {
    pub config: &'a RunConfig,
    pub registry: &'a ToolRegistry,
    pub backend: &'a BackendSource,
    pub library: &'a PromptLibrary,
    pub dir: &'a RunDir,
}

impl Pipeline<'_> {
    /// Tools chosen by `selector` (tool ids or names), else by the
    /// configuration's list, else all of them.
    pub fn select(&self, selector: &[String]) -> Vec<&ToolSpec> {
        let wanted = if selector.is_empty() { &self.config.tools } else { selector };
        self.registry
            .iter()
            .filter(|t| wanted.is_empty() || wanted.iter().any(|w| *w == t.tool_id || *w == t.name))
            .collect()
    }

    fn run_units<F>(&self, stage: Stage, tools: &[&ToolSpec], work: F) -> Result<StageSummary, PipelineError>
    where
        F: Fn(&ToolSpec) -> UnitResult + Sync,
    {
        let mut summary = StageSummary::default();
        let pending: Vec<&ToolSpec> = tools
            .iter()
            .copied()
            .filter(|t| {
                let done = self.dir.completed(stage, &t.tool_id);
                if done {
                    summary.resumed.push(t.tool_id.clone());
                }
                !done
            })
            .collect();

        let results: Mutex<Vec<(usize, UnitResult)>> = Mutex::new(Vec::new());
        let next = AtomicUsize::new(0);
        let first_error: Mutex<Option<PipelineError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..self.config.jobs.clamp(1, pending.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(tool) = pending.get(i) else { break };
                    let result = work(tool);
                    let stored = match &result {
                        UnitResult::Done(r) | UnitResult::Unplayable(r) => Some(r.clone()),
                        UnitResult::Failed(message) => Some(UnitRecord {
                            status: UnitStatus::Failed,
                            message: Some(message.clone()),
                            artifacts: Vec::new(),
                            calls: CallCounts::default(),
                            wall_clock_ms: 0,
                        }),
                        UnitResult::Skipped(_) => None,
                    };
                    if let Some(record) = stored {
                        if let Err(err) = self.dir.record(stage, &tool.tool_id, record) {
                            first_error.lock().unwrap().get_or_insert(err);
                        }
                    }
                    results.lock().unwrap().push((i, result));
                });
            }
        });
        if let Some(err) = first_error.into_inner().unwrap() {
            return Err(err);
        }
        let mut results = results.into_inner().unwrap();
        results.sort_by_key(|(i, _)| *i);
        for (i, result) in results {
            let id = pending[i].tool_id.clone();
            match result {
                UnitResult::Done(_) => summary.completed.push(id),
                UnitResult::Unplayable(_) => summary.unplayable.push(id),
                UnitResult::Skipped(why) => {
                    log::warn!("skipping {id}: {why}");
                    summary.skipped.push((id, why));
                }
                UnitResult::Failed(why) => {
                    log::error!("{id} failed: {why}");
                    summary.failed.push((id, why));
                }
            }
        }
        Ok(summary)
    }

    pub fn optimize_examples(&self, selector: &[String]) -> Result<StageSummary, PipelineError> {
        let tools = self.select(selector);
        self.run_units(Stage::Examples, &tools, |tool| match self.examples_for(tool) {
            Ok(result) => result,
            Err(err) => UnitResult::Failed(err.to_string()),
        })
    }

    fn examples_for(&self, tool: &ToolSpec) -> Result<UnitResult, PipelineError> {
        let started = Instant::now();
        let generators = self.backend.generators(self.config)?;
        let executor = Executor::new(self.config.execution.clone());
        let ctx = ExampleContext {
            tool,
            doc: &tool.documentation,
            library: self.library,
            generator: &generators.example,
            task_model: &generators.task,
            executor: &executor,
            settings: &self.config.examples,
        };
        let mut trace = TraceWriter::new(Vec::new());
        let (artifact, _) = match optimize_examples(&ctx, &self.config.example_search, &mut trace) {
            Ok(done) => done,
            Err(err) => return Ok(UnitResult::Failed(err.to_string())),
        };
        let trace = trace.finish().map_err(io_err(Path::new("trace")))?;
        let id = &tool.tool_id;
        let artifacts = vec![
            self.dir.write(&examples_rel(id), &pretty(&artifact))?,
            self.dir.write(&format!("examples/{id}.trace.jsonl"), &trace)?,
        ];
        let mut calls = generators.calls();
        calls.tool = executor.call_count();
        let unplayable = artifact.outcome == ExampleOutcome::Unplayable;
        let record = UnitRecord {
            status: if unplayable { UnitStatus::Unplayable } else { UnitStatus::Done },
            message: unplayable.then(|| format!("no valid invocation in {} attempts", count_attempts(&artifact))),
            artifacts,
            calls,
            wall_clock_ms: started.elapsed().as_millis() as u64,
        };
        Ok(if unplayable {
            UnitResult::Unplayable(record)
        } else {
            UnitResult::Done(record)
        })
    }

    pub fn optimize_docs(&self, selector: &[String]) -> Result<StageSummary, PipelineError> {
        let tools = self.select(selector);
        self.run_units(Stage::Docs, &tools, |tool| match self.docs_for(tool) {
            Ok(result) => result,
            Err(err) => UnitResult::Failed(err.to_string()),
        })
    }

    fn docs_for(&self, tool: &ToolSpec) -> Result<UnitResult, PipelineError> {
        let path = self.dir.examples_path(&tool.tool_id);
        if !path.exists() {
            return Ok(UnitResult::Skipped(format!("no example artifact at {}", path.display())));
        }
        let examples: ExampleArtifact = read_json(&path)?;
        if examples.outcome == ExampleOutcome::Unplayable || examples.examples.is_empty() {
            return Ok(UnitResult::Skipped("tool was unplayable; no validation examples".into()));
        }
        let started = Instant::now();
        let generators = self.backend.generators(self.config)?;
        let executor = Executor::new(self.config.execution.clone());
        let ctx = DocContext {
            tool,
            library: self.library,
            generator: &generators.doc,
            task_model: &generators.task,
            executor: &executor,
            settings: &self.config.docs,
            seed: self.config.tool_seed(&tool.tool_id),
        };
        let validation = examples.validation_set();
        let mut trace = TraceWriter::new(Vec::new());
        let (artifact, _) =
            match optimize_documentation(&ctx, &tool.documentation, &validation, &self.config.doc_search, &mut trace) {
                Ok(done) => done,
                Err(err) => return Ok(UnitResult::Failed(err.to_string())),
            };
        let trace = trace.finish().map_err(io_err(Path::new("trace")))?;
        let id = &tool.tool_id;
        let diff = documentation_diff(&artifact.original, &artifact.final_doc);
        let artifacts = vec![
            self.dir.write(&docs_rel(id), &pretty(&artifact))?,
            self.dir.write(&format!("docs/{id}.diff.txt"), diff.as_bytes())?,
            self.dir.write(&format!("docs/{id}.trace.jsonl"), &trace)?,
        ];
        let mut calls = generators.calls();
        calls.tool = executor.call_count();
        Ok(UnitResult::Done(UnitRecord {
            status: UnitStatus::Done,
            message: None,
            artifacts,
            calls,
            wall_clock_ms: started.elapsed().as_millis() as u64,
        }))
    }

    /// Runs both conditions over `queries` and writes the report.
    pub fn evaluate(&self, queries_text: &str) -> Result<EvalReport, PipelineError> {
        let started = Instant::now();
        let queries = parse_queries(queries_text, self.registry)?;
        self.dir.set_input(Stage::Eval, queries_text)?;
        let tools = self.select(&[]);

        let mut optimized_docs: BTreeMap<String, ToolDocumentation> = BTreeMap::new();
        let mut demos: BTreeMap<String, Vec<Demonstration>> = BTreeMap::new();
        for tool in &tools {
            let docs_path = self.dir.docs_path(&tool.tool_id);
            if docs_path.exists() {
                let artifact: DocArtifact = read_json(&docs_path)?;
                optimized_docs.insert(tool.tool_id.clone(), artifact.final_doc);
            }
            let examples_path = self.dir.examples_path(&tool.tool_id);
            if examples_path.exists() {
                let artifact: ExampleArtifact = read_json(&examples_path)?;
                demos.insert(tool.tool_id.clone(), artifact.demonstrations());
            }
        }

        let baseline_ctx: Vec<ToolContext<'_>> = tools
            .iter()
            .map(|t| ToolContext {
                tool: t,
                doc: &t.documentation,
                demos: &[],
            })
            .collect();
        let optimized_ctx: Vec<ToolContext<'_>> = tools
            .iter()
            .map(|t| ToolContext {
                tool: t,
                doc: optimized_docs.get(&t.tool_id).unwrap_or(&t.documentation),
                demos: demos.get(&t.tool_id).map_or(&[][..], Vec::as_slice),
            })
            .collect();
        let baseline_config = InferenceConfig {
            demos_per_tool: 0,
            ..self.config.inference.clone()
        };

        let mut calls = CallCounts::default();
        let baseline = self.run_condition(&queries, &baseline_ctx, &baseline_config, &mut calls)?;
        let optimized = self.run_condition(&queries, &optimized_ctx, &self.config.inference, &mut calls)?;
        let report = EvalReport::new(baseline, optimized);

        let artifacts = vec![
            self.dir.write("eval/report.json", &pretty(&report))?,
            self.dir.write("eval/report.txt", report.render_table().as_bytes())?,
        ];
        self.dir.record(
            Stage::Eval,
            "report",
            UnitRecord {
                status: UnitStatus::Done,
                message: None,
                artifacts,
                calls,
                wall_clock_ms: started.elapsed().as_millis() as u64,
            },
        )?;
        Ok(report)
    }

    fn run_condition(
        &self,
        queries: &[EvalQuery],
        tools: &[ToolContext<'_>],
        inference: &InferenceConfig,
        calls: &mut CallCounts,
    ) -> Result<ConditionReport, PipelineError> {
        let generators = self.backend.generators(self.config)?;
        let executor = Executor::new(self.config.execution.clone());
        let mut records = Vec::with_capacity(queries.len());
        for q in queries {
            let matching = q.matching.unwrap_or_else(|| self.category(&q.category).matching);
            let (metric, transcript, error) =
                match run_task_model(&q.query, tools, inference, &generators.task, self.library, Some(&executor)) {
                    Ok(t) => (task_metric(&t, &q.gold, matching), Some(t), None),
                    Err(err) => (0.0, None, Some(err.to_string())),
                };
            let verdict = self.config.judge.then(|| {
                let answer = transcript.as_ref().map_or("", |t| t.answer.as_str());
                judge_solvable(&q.query, answer, &generators.judge, self.library)
            });
            records.push(QueryRecord {
                query: q.query.clone(),
                category: q.category.clone(),
                metric,
                verdict,
                error,
                transcript,
            });
        }
        let c = generators.calls();
        calls.task_model += c.task_model;
        calls.judge += c.judge;
        calls.tool += executor.call_count();

        let mut by_category: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &records {
            by_category.entry(r.category.as_str()).or_default().push(r.metric);
        }
        let categories: Vec<CategoryScore> = by_category
            .into_iter()
            .map(|(name, metrics)| CategoryScore {
                name: name.to_string(),
                accuracy: 100.0 * metrics.iter().sum::<f64>() / metrics.len() as f64,
                weight: self.category(name).weight,
            })
            .collect();
        let summary = aggregate_metrics(&categories)?;
        let verdicts: Vec<Verdict> = records.iter().filter_map(|r| r.verdict).collect();
        Ok(ConditionReport {
            summary,
            pass_rate: pass_rate(&verdicts),
            queries: records,
        })
    }

    fn category(&self, name: &str) -> CategoryConfig {
        self.config.categories.get(name).cloned().unwrap_or_default()
    }
}

fn count_attempts(artifact: &ExampleArtifact) -> usize {
    artifact.attempts.iter().map(|a| a.attempts.len()).sum()
}

/// A gold call as written in a queries file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldCall {
    pub name: String,
    #[serde(default)]
    pub arguments: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QueryLine {
    query: String,
    gold: Vec<GoldCall>,
    #[serde(default = "default_category")]
    category: String,
    #[serde(default)]
    matching: Option<Matching>,
}

fn default_category() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub query: String,
    pub gold: Vec<Invocation>,
    pub category: String,
    pub matching: Option<Matching>,
}

/// Parses a JSON-lines queries file: `{query, gold: [{name, arguments}], category}`.
pub fn parse_queries(text: &str, registry: &ToolRegistry) -> Result<Vec<EvalQuery>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| PipelineError::Queries { line: i + 1, message };
        let row: QueryLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let gold = row
            .gold
            .into_iter()
            .map(|g| {
                let tool = registry
                    .get(&g.name)
                    .or_else(|| registry.by_name(&g.name))
                    .ok_or_else(|| err(format!("unknown tool `{}`", g.name)))?;
                Ok(Invocation::new(tool.tool_id.clone(), g.arguments))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        out.push(EvalQuery {
            query: row.query,
            gold,
            category: row.category,
            matching: row.matching,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: String,
    pub category: String,
    pub metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    /// Set when the task model could not be reached; the query scores 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Transcript>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub summary: CategoryReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_rate: Option<f64>,
    pub queries: Vec<QueryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub weighted: f64,
    pub unweighted: f64,
    pub categories: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub baseline: ConditionReport,
    pub optimized: ConditionReport,
    pub delta: Delta,
}

impl EvalReport {
    pub fn new(baseline: ConditionReport, optimized: ConditionReport) -> Self {
        let categories = optimized
            .summary
            .categories
            .iter()
            .zip(&baseline.summary.categories)
            .map(|(o, b)| (o.name.clone(), o.accuracy - b.accuracy))
            .collect();
        let delta = Delta {
            weighted: optimized.summary.weighted - baseline.summary.weighted,
            unweighted: optimized.summary.unweighted - baseline.summary.unweighted,
            categories,
            pass_rate: baseline.pass_rate.zip(optimized.pass_rate).map(|(b, o)| o - b),
        };
        Self {
            format: REPORT_FORMAT.to_string(),
            baseline,
            optimized,
            delta,
        }
    }

    /// Plain-text table: one column per category plus the two averages.
    pub fn render_table(&self) -> String {
        let mut header = vec!["condition".to_string()];
        header.extend(self.baseline.summary.categories.iter().map(|c| c.name.clone()));
        header.push("weighted".into());
        header.push("unweighted".into());
        let with_pass = self.baseline.pass_rate.is_some();
        if with_pass {
            header.push("pass rate".into());
        }

        let row = |name: &str, r: &ConditionReport| {
            let mut cells = vec![name.to_string()];
            cells.extend(r.summary.categories.iter().map(|c| format!("{:.1}", round1(c.accuracy))));
            cells.push(format!("{:.1}", round1(r.summary.weighted)));
            cells.push(format!("{:.1}", round1(r.summary.unweighted)));
            if with_pass {
                cells.push(r.pass_rate.map_or("-".into(), |p| format!("{:.1}", round1(100.0 * p))));
            }
            cells
        };
        let signed = |x: f64| format!("{:+.1}", round1(x));
        let mut delta = vec!["delta".to_string()];
        delta.extend(self.delta.categories.values().map(|d| signed(*d)));
        delta.push(signed(self.delta.weighted));
        delta.push(signed(self.delta.unweighted));
        if with_pass {
            delta.push(self.delta.pass_rate.map_or("-".into(), |p| signed(100.0 * p)));
        }

        let rows = [header, row("baseline", &self.baseline), row("optimized", &self.optimized), delta];
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r.get(i).map_or(0, String::len)).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(i, cell)| if i == 0 { format!("{cell:<w$}", w = widths[i]) } else { format!("{cell:>w$}", w = widths[i]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if n == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

/// The registry with parameter descriptions dropped, as written to disk.
pub fn noise_registry(registry: &ToolRegistry, p: f64, seed: u64) -> Result<String, PipelineError> {
    Ok(registry.with_dropout(p, seed)?.to_json())
}

/// Default path for a noised registry: next to the original.
pub fn noised_path(registry_path: &Path, p: f64, seed: u64) -> PathBuf {
    let stem = registry_path.file_stem().and_then(|s| s.to_str()).unwrap_or("registry");
    registry_path.with_file_name(format!("{stem}.noise-p{p}-s{seed}.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub path: String,
    pub identical: bool,
}

/// Re-runs every recorded stage of the run in `original` into `scratch` and
/// compares the artifacts byte for byte. Only mock-backend runs replay.
pub fn replay(original: &Path, scratch: &Path, library: &PromptLibrary) -> Result<Vec<ReplayCheck>, PipelineError> {
    let manifest = read_manifest(&original.join("manifest.json"))?;
    if !matches!(manifest.backend, BackendSource::Mock { .. }) {
        return Err(PipelineError::Replay("only runs made with a mock backend can be replayed".into()));
    }
    let registry = ToolRegistry::from_json(&manifest.registry)?;
    if scratch.join("manifest.json").exists() {
        return Err(PipelineError::Replay(format!("{} already holds a run", scratch.display())));
    }
    let dir = RunDir::open(scratch, RunManifest::new(&manifest.config, &manifest.backend, &registry))?;
    let pipeline = Pipeline {
        config: &manifest.config,
        registry: &registry,
        backend: &manifest.backend,
        library,
        dir: &dir,
    };
    for (stage, record) in &manifest.stages {
        let units: Vec<String> = record.units.keys().cloned().collect();
        match stage {
            Stage::Examples => {
                pipeline.optimize_examples(&units)?;
            }
            Stage::Docs => {
                pipeline.optimize_docs(&units)?;
            }
            Stage::Eval => {
                let input = record
                    .input
                    .as_deref()
                    .ok_or_else(|| PipelineError::Replay("evaluation stage has no recorded queries".into()))?;
                pipeline.evaluate(input)?;
            }
        }
    }

    let mut checks = Vec::new();
    for record in manifest.stages.values() {
        for unit in record.units.values() {
            for artifact in &unit.artifacts {
                let a = std::fs::read(original.join(&artifact.path)).ok();
                let b = std::fs::read(scratch.join(&artifact.path)).ok();
                let identical = match (a, b) {
                    (Some(a), Some(b)) => digest(&a) == artifact.sha256 && a == b,
                    _ => false,
                };
                checks.push(ReplayCheck {
                    path: artifact.path.clone(),
                    identical,
                });
            }
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let err = toml_free_parse(r#"{"example_search": {"width": 2}}"#).unwrap_err();
        assert!(err.contains("seed"));
        let config = toml_free_parse(r#"{"seed": 4, "example_search": {"width": 2}}"#).unwrap();
        assert_eq!(config.example_search.width, 2);
        assert_eq!(config.example_search.branching, 3);
        assert_eq!(config.examples.budget, 8);
    }

    fn toml_free_parse(text: &str) -> Result<RunConfig, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    #[test]
    fn tool_seeds_differ_per_tool() {
        let c = RunConfig::new(1);
        assert_ne!(c.tool_seed("a"), c.tool_seed("b"));
        assert_eq!(c.tool_seed("a"), RunConfig::new(1).tool_seed("a"));
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/a.json");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn noised_path_is_a_sibling() {
        let p = noised_path(Path::new("/tmp/reg/tools.json"), 0.5, 3);
        assert_eq!(p, Path::new("/tmp/reg/tools.noise-p0.5-s3.json"));
    }

    #[test]
    fn empty_summary() {
        let s = StageSummary::default();
        assert_eq!(s.exit_code(), 0);
        assert_eq!(s.render(), "no tools selected\n");
    }
}
