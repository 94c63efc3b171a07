//! Tool specifications, their documentation, and the registry file format.
//!
//! A registry document looks like:
//!
//! ```json
//! {
//!   "tools": [{
//!     "name": "get_weather",
//!     "description": "Current weather for a city",
//!     "parameters": {
//!       "properties": { "city": { "type": "string", "description": "City name" } },
//!       "required": ["city"],
//!       "optional": []
//!     },
//!     "executor": { "kind": "rest", "method": "GET", "url": "http://localhost:8080/weather" }
//!   }]
//! }
//! ```
//!
//! `id` is optional and defaults to `name`. When `optional` is missing, every
//! property not listed in `required` is optional.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("registry parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate tool id `{0}`")]
    DuplicateId(String),
    #[error("invalid tool `{tool}`: {message}")]
    Invalid { tool: String, message: String },
    #[error("dropout probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("registry io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for RegistryError {
    fn from(err: serde_json::Error) -> Self {
        RegistryError::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

/// How a tool is called.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExecutorBinding {
    Rest(RestBinding),
    Subprocess(SubprocessBinding),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestBinding {
    #[serde(default = "default_method")]
    pub method: String,
    /// URL template; `{name}` segments are filled from same-named arguments.
    pub url: String,
    #[serde(default)]
    pub placement: ArgumentPlacement,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub headers: BTreeMap<String, String>,
}

fn default_method() -> String {
    "GET".to_string()
}

/// Where non-path arguments go in a REST request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgumentPlacement {
    /// Scalars to the query string, structured values to a JSON body.
    #[default]
    Auto,
    Query,
    Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubprocessBinding {
    /// Program and arguments used to launch the runner.
    pub command: Vec<String>,
    /// Function name sent to the runner; defaults to the tool name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDoc {
    pub name: String,
    pub type_label: String,
    pub description: String,
    pub is_required: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDocumentation {
    pub general_description: String,
    pub parameters: Vec<ParameterDoc>,
    /// Revision counter; 0 for the documentation a registry was loaded with.
    pub version_tag: u64,
}

impl ToolDocumentation {
    pub fn required_names(&self) -> Vec<&str> {
        self.parameters
            .iter()
            .filter(|p| p.is_required)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn optional_names(&self) -> Vec<&str> {
        self.parameters
            .iter()
            .filter(|p| !p.is_required)
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterDoc> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn validate(&self, tool: &str) -> Result<(), RegistryError> {
        let mut seen = HashSet::new();
        for p in &self.parameters {
            if p.name.is_empty() {
                return Err(invalid(tool, "parameter with empty name"));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(invalid(tool, format!("duplicate parameter `{}`", p.name)));
            }
        }
        Ok(())
    }

    /// Interchange form: the `description` + `parameters` block of a registry entry.
    pub fn to_wire(&self) -> DocWire {
        let mut properties = Map::new();
        for p in &self.parameters {
            properties.insert(
                p.name.clone(),
                serde_json::to_value(PropertyWire {
                    kind: p.type_label.clone(),
                    description: p.description.clone(),
                })
                .expect("property serializes"),
            );
        }
        DocWire {
            description: self.general_description.clone(),
            parameters: ParametersWire {
                properties,
                required: self.required_names().into_iter().map(String::from).collect(),
                optional: Some(self.optional_names().into_iter().map(String::from).collect()),
            },
        }
    }

    pub fn from_wire(tool: &str, wire: DocWire, version_tag: u64) -> Result<Self, RegistryError> {
        let ParametersWire {
            properties,
            required,
            optional,
        } = wire.parameters;
        let names: Vec<String> = properties.keys().cloned().collect();
        for r in &required {
            if !names.contains(r) {
                return Err(invalid(tool, format!("required parameter `{r}` has no property entry")));
            }
        }
        if let Some(optional) = &optional {
            for o in optional {
                if !names.contains(o) {
                    return Err(invalid(tool, format!("optional parameter `{o}` has no property entry")));
                }
                if required.contains(o) {
                    return Err(invalid(tool, format!("parameter `{o}` is both required and optional")));
                }
            }
        }
        let mut parameters = Vec::with_capacity(properties.len());
        for (name, value) in properties {
            let prop: PropertyWire = match value {
                Value::Object(_) => serde_json::from_value(value)
                    .map_err(|e| invalid(tool, format!("property `{name}`: {e}")))?,
                // Bare type strings, e.g. `"city": "string"`.
                Value::String(kind) => PropertyWire {
                    kind,
                    description: String::new(),
                },
                other => {
                    return Err(invalid(tool, format!("property `{name}` must be an object, got {other}")))
                }
            };
            parameters.push(ParameterDoc {
                is_required: required.contains(&name),
                name,
                type_label: prop.kind,
                description: prop.description,
            });
        }
        let doc = ToolDocumentation {
            general_description: wire.description,
            parameters,
            version_tag,
        };
        doc.validate(tool)?;
        Ok(doc)
    }
}

fn invalid(tool: &str, message: impl Into<String>) -> RegistryError {
    RegistryError::Invalid {
        tool: tool.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocWire {
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: ParametersWire,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParametersWire {
    #[serde(default)]
    pub properties: Map<String, Value>,
    #[serde(default)]
    pub required: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optional: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PropertyWire {
    #[serde(rename = "type", default)]
    kind: String,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_id: String,
    pub name: String,
    pub executor: ExecutorBinding,
    pub documentation: ToolDocumentation,
}

impl ToolSpec {
    /// Documentation as shown to models: name, description and parameter block.
    pub fn render_documentation(&self, doc: &ToolDocumentation) -> String {
        let wire = doc.to_wire();
        let value = serde_json::json!({
            "name": self.name,
            "description": wire.description,
            "parameters": wire.parameters,
        });
        serde_json::to_string_pretty(&value).expect("documentation serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryFile {
    tools: Vec<ToolEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ToolEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    parameters: ParametersWire,
    executor: ExecutorBinding,
}

/// Immutable set of tools keyed by `tool_id`, in document order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToolRegistry {
    tools: Vec<ToolSpec>,
}

impl ToolRegistry {
    pub fn new(tools: Vec<ToolSpec>) -> Result<Self, RegistryError> {
        let mut seen = HashSet::new();
        for tool in &tools {
            if !seen.insert(tool.tool_id.clone()) {
                return Err(RegistryError::DuplicateId(tool.tool_id.clone()));
            }
            if tool.name.is_empty() {
                return Err(invalid(&tool.tool_id, "empty tool name"));
            }
            tool.documentation.validate(&tool.tool_id)?;
        }
        Ok(Self { tools })
    }

    pub fn from_json(source: &str) -> Result<Self, RegistryError> {
        let file: RegistryFile = serde_json::from_str(source)?;
        let mut tools = Vec::with_capacity(file.tools.len());
        for entry in file.tools {
            let tool_id = entry.id.unwrap_or_else(|| entry.name.clone());
            let documentation = ToolDocumentation::from_wire(
                &tool_id,
                DocWire {
                    description: entry.description,
                    parameters: entry.parameters,
                },
                0,
            )?;
            tools.push(ToolSpec {
                tool_id,
                name: entry.name,
                executor: entry.executor,
                documentation,
            });
        }
        Self::new(tools)
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = RegistryFile {
            tools: self
                .tools
                .iter()
                .map(|t| {
                    let wire = t.documentation.to_wire();
                    ToolEntry {
                        id: (t.tool_id != t.name).then(|| t.tool_id.clone()),
                        name: t.name.clone(),
                        description: wire.description,
                        parameters: wire.parameters,
                        executor: t.executor.clone(),
                    }
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("registry serializes");
        text.push('\n');
        text
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn get(&self, tool_id: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.tool_id == tool_id)
    }

    pub fn by_name(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.iter()
    }

    /// Copy of the registry with one tool's documentation replaced.
    pub fn with_documentation(&self, tool_id: &str, doc: ToolDocumentation) -> Option<Self> {
        let mut tools = self.tools.clone();
        tools.iter_mut().find(|t| t.tool_id == tool_id)?.documentation = doc;
        Some(Self { tools })
    }

    /// Applies parameter-description dropout to every tool, drawing from one
    /// seeded stream in document order.
    pub fn with_dropout(&self, p: f64, seed: u64) -> Result<Self, RegistryError> {
        check_probability(p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tools = self
            .tools
            .iter()
            .map(|t| ToolSpec {
                documentation: dropout_with(&t.documentation, p, &mut rng),
                ..t.clone()
            })
            .collect();
        Ok(Self { tools })
    }
}

fn check_probability(p: f64) -> Result<(), RegistryError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(RegistryError::InvalidProbability(p))
    }
}

/// Empties each parameter description independently with probability `p`.
/// Names, type labels, required flags and the general description are kept.
pub fn drop_parameter_descriptions(
    doc: &ToolDocumentation,
    p: f64,
    seed: u64,
) -> Result<ToolDocumentation, RegistryError> {
    check_probability(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(dropout_with(doc, p, &mut rng))
}

fn dropout_with<R: Rng>(doc: &ToolDocumentation, p: f64, rng: &mut R) -> ToolDocumentation {
    let mut out = doc.clone();
    for param in &mut out.parameters {
        // One draw per parameter, even for already-empty descriptions, so the
        // stream position depends only on the parameter count.
        if rng.gen_bool(p) {
            param.description.clear();
        }
    }
    out
}
