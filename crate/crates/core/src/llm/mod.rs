//! Model access: prompt templates, completion backends and structured-output
//! recovery.

pub mod backend;
pub mod structured;
pub mod template;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use backend::{
    Backend, BackendError, Completion, CompletionRequest, Decoding, FnBackend, Generator, GatewayError, MockBackend,
    MockPolicy, MockResponse, MockRule, MockScript, RecordedCall, RetryPolicy, Role, Usage,
};
#[cfg(feature = "net")]
pub use backend::OpenAiBackend;
pub use structured::{extract_calls, parse_structured_output, OutputSchema, RawCall, StructuredError};
pub use template::{Bindings, Template, TemplateError};

/// Every template the engine renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptId {
    /// Propose an invocation.
    M1,
    /// Judge an invocation's validity.
    M2,
    /// Write a query for a valid invocation.
    M3,
    /// Answer the query from the tool output.
    M4,
    /// Score example quality 1-3.
    M5,
    /// Reflect on scored queries.
    M6,
    /// Propose revised documentation.
    M7,
    /// Critique documentation from task-model transcripts.
    M8,
    TaskSingleTurn,
    TaskFunctionCall,
    TaskReact,
    Judge,
}

impl PromptId {
    pub const ALL: [PromptId; 12] = [
        PromptId::M1,
        PromptId::M2,
        PromptId::M3,
        PromptId::M4,
        PromptId::M5,
        PromptId::M6,
        PromptId::M7,
        PromptId::M8,
        PromptId::TaskSingleTurn,
        PromptId::TaskFunctionCall,
        PromptId::TaskReact,
        PromptId::Judge,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            PromptId::M1 => "m1",
            PromptId::M2 => "m2",
            PromptId::M3 => "m3",
            PromptId::M4 => "m4",
            PromptId::M5 => "m5",
            PromptId::M6 => "m6",
            PromptId::M7 => "m7",
            PromptId::M8 => "m8",
            PromptId::TaskSingleTurn => "task_single_turn",
            PromptId::TaskFunctionCall => "task_function_call",
            PromptId::TaskReact => "task_react",
            PromptId::Judge => "judge",
        }
    }

    fn default_source(self) -> &'static str {
        match self {
            PromptId::M1 => include_str!("../../prompts/m1.txt"),
            PromptId::M2 => include_str!("../../prompts/m2.txt"),
            PromptId::M3 => include_str!("../../prompts/m3.txt"),
            PromptId::M4 => include_str!("../../prompts/m4.txt"),
            PromptId::M5 => include_str!("../../prompts/m5.txt"),
            PromptId::M6 => include_str!("../../prompts/m6.txt"),
            PromptId::M7 => include_str!("../../prompts/m7.txt"),
            PromptId::M8 => include_str!("../../prompts/m8.txt"),
            PromptId::TaskSingleTurn => include_str!("../../prompts/task_single_turn.txt"),
            PromptId::TaskFunctionCall => include_str!("../../prompts/task_function_call.txt"),
            PromptId::TaskReact => include_str!("../../prompts/task_react.txt"),
            PromptId::Judge => include_str!("../../prompts/judge.txt"),
        }
    }

    pub fn role(self) -> Role {
        match self {
            PromptId::M1 | PromptId::M2 | PromptId::M3 | PromptId::M4 | PromptId::M5 | PromptId::M6 => {
                Role::ExampleGenerator
            }
            PromptId::M7 | PromptId::M8 => Role::DocGenerator,
            PromptId::TaskSingleTurn | PromptId::TaskFunctionCall | PromptId::TaskReact => Role::TaskModel,
            PromptId::Judge => Role::Judge,
        }
    }

    /// Structured fields the completion must carry, if any.
    pub fn output_schema(self) -> Option<OutputSchema> {
        match self {
            PromptId::M2 => Some(OutputSchema::validity()),
            PromptId::M3 => Some(OutputSchema::instruction()),
            PromptId::M5 => Some(OutputSchema::quality()),
            PromptId::M7 => Some(OutputSchema::documentation()),
            PromptId::Judge => Some(OutputSchema::verdict()),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// The loaded template set. Defaults ship with the crate; a directory of
/// `<stem>.txt` files overrides any subset of them.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<PromptId, Template>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        let templates = PromptId::ALL
            .into_iter()
            .map(|id| {
                let t = Template::parse(id.file_stem(), id.default_source()).expect("bundled template parses");
                (id, t)
            })
            .collect();
        Self { templates }
    }
}

impl PromptLibrary {
    pub fn with_overrides(dir: &Path) -> Result<Self, LibraryError> {
        let mut lib = Self::default();
        for id in PromptId::ALL {
            let path = dir.join(format!("{}.txt", id.file_stem()));
            if !path.exists() {
                continue;
            }
            let source = std::fs::read_to_string(&path).map_err(|source| LibraryError::Io {
                path: path.display().to_string(),
                source,
            })?;
            lib.templates.insert(id, Template::parse(id.file_stem(), &source)?);
        }
        Ok(lib)
    }

    pub fn template(&self, id: PromptId) -> &Template {
        &self.templates[&id]
    }

    pub fn render(&self, id: PromptId, bindings: &Bindings) -> Result<String, TemplateError> {
        self.template(id).render(bindings)
    }

    /// Renders `id` for `generator` and completes it, enforcing the role split.
    pub fn ask(&self, generator: &Generator, id: PromptId, bindings: &Bindings) -> Result<Exchange, GatewayError> {
        if generator.role() != id.role() {
            return Err(GatewayError::RoleViolation {
                role: generator.role(),
                template: id.file_stem().to_string(),
            });
        }
        let prompt = self.render(id, bindings)?;
        let completion = generator.complete(&prompt)?;
        Ok(Exchange { prompt, completion })
    }
}

/// A rendered prompt and the completion it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub prompt: String,
    pub completion: Completion,
}
