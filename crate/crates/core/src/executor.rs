//! Runs concrete tool invocations and reifies every outcome as a [`ToolOutput`].
//!
//! Tool failures (bad arguments, HTTP errors, crashed runners, timeouts) are
//! data, not errors: the optimizers need to see them. Only configuration
//! problems surface as [`ExecutorError`].

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::registry::{ExecutorBinding, RestBinding, SubprocessBinding, ToolRegistry, ToolSpec};

pub const TRUNCATION_MARKER: &str = "\n[output truncated]";

#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("malformed executor binding for `{tool}`: {message}")]
    MalformedBinding { tool: String, message: String },
}

/// A concrete parameter binding for one tool. Argument names are not checked
/// against the documentation; invalid names are a legitimate outcome to observe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub tool_id: String,
    pub arguments: Map<String, Value>,
}

impl Invocation {
    pub fn new(tool_id: impl Into<String>, arguments: Map<String, Value>) -> Self {
        Self {
            tool_id: tool_id.into(),
            arguments,
        }
    }

    /// Call rendered in the shape the example generator is asked to emit.
    pub fn render_call(&self, function_name: &str) -> String {
        serde_json::json!({
            "name": function_name,
            "parameters": { "properties": self.arguments },
        })
        .to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputStatus {
    Ok,
    ToolError,
    TransportError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolOutput {
    pub status: OutputStatus,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
    /// Wall time of the call. Not persisted: artifacts must replay byte-for-byte.
    #[serde(skip)]
    pub elapsed_ms: u64,
}

impl ToolOutput {
    pub fn ok(payload: impl Into<String>) -> Self {
        Self {
            status: OutputStatus::Ok,
            payload: payload.into(),
            error_detail: None,
            elapsed_ms: 0,
        }
    }

    pub fn failed(status: OutputStatus, payload: impl Into<String>, detail: impl Into<String>) -> Self {
        debug_assert!(status != OutputStatus::Ok);
        Self {
            status,
            payload: payload.into(),
            error_detail: Some(detail.into()),
            elapsed_ms: 0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == OutputStatus::Ok
    }

    /// `{"error": ..., "response": ...}` view handed to the generator prompts.
    pub fn render_for_prompt(&self) -> String {
        serde_json::json!({
            "error": self.error_detail.clone().unwrap_or_default(),
            "response": self.payload,
        })
        .to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionLimits {
    pub timeout_ms: u64,
    pub payload_cap: usize,
    /// Calls per second per tool; `None` disables rate limiting.
    #[serde(default)]
    pub rate_limit: Option<f64>,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            payload_cap: 16 * 1024,
            rate_limit: None,
        }
    }
}

impl ExecutionLimits {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// Cuts `text` to at most `cap` bytes on a char boundary and appends
/// [`TRUNCATION_MARKER`] when anything was removed.
pub fn truncate_payload(mut text: String, cap: usize) -> String {
    if text.len() <= cap {
        return text;
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    text.truncate(end);
    text.push_str(TRUNCATION_MARKER);
    text
}

/// Token bucket of capacity one per tool: at most `rate` calls per second.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_free: Mutex<HashMap<String, Instant>>,
}

impl RateLimiter {
    pub fn new(rate: f64) -> Self {
        assert!(rate > 0.0, "rate must be positive");
        Self {
            interval: Duration::from_secs_f64(1.0 / rate),
            next_free: Mutex::new(HashMap::new()),
        }
    }

    /// Reserves the next slot for `tool` and returns how long to wait from `now`.
    pub fn reserve(&self, tool: &str, now: Instant) -> Duration {
        let mut slots = self.next_free.lock().expect("rate limiter poisoned");
        let slot = slots.entry(tool.to_string()).or_insert(now);
        let start = (*slot).max(now);
        *slot = start + self.interval;
        start - now
    }
}

/// Stateless apart from rate-limit slots and a request counter used for
/// subprocess request ids.
#[derive(Debug)]
pub struct Executor {
    limits: ExecutionLimits,
    limiter: Option<RateLimiter>,
    requests: AtomicU64,
}

impl Executor {
    pub fn new(limits: ExecutionLimits) -> Self {
        let limiter = limits.rate_limit.map(RateLimiter::new);
        Self {
            limits,
            limiter,
            requests: AtomicU64::new(0),
        }
    }

    pub fn limits(&self) -> &ExecutionLimits {
        &self.limits
    }

    /// Number of invocations dispatched so far.
    pub fn call_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn execute(&self, registry: &ToolRegistry, invocation: &Invocation) -> Result<ToolOutput, ExecutorError> {
        let tool = registry
            .get(&invocation.tool_id)
            .ok_or_else(|| ExecutorError::UnknownTool(invocation.tool_id.clone()))?;
        self.execute_tool(tool, &invocation.arguments)
    }

    pub fn execute_tool(&self, tool: &ToolSpec, arguments: &Map<String, Value>) -> Result<ToolOutput, ExecutorError> {
        if let Some(limiter) = &self.limiter {
            let wait = limiter.reserve(&tool.tool_id, Instant::now());
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
        let seq = self.requests.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let mut output = match &tool.executor {
            ExecutorBinding::Rest(binding) => execute_rest(binding, arguments, &self.limits)
                .map_err(|message| malformed(tool, message))?,
            ExecutorBinding::Subprocess(binding) => {
                if binding.command.is_empty() {
                    return Err(malformed(tool, "empty command".into()));
                }
                let function = binding.function.as_deref().unwrap_or(&tool.name);
                execute_subprocess(binding, function, &format!("req-{seq}"), arguments, &self.limits)
            }
        };
        output.payload = truncate_payload(std::mem::take(&mut output.payload), self.limits.payload_cap);
        output.elapsed_ms = started.elapsed().as_millis() as u64;
        log::debug!("{} -> {:?} in {} ms", tool.tool_id, output.status, output.elapsed_ms);
        Ok(output)
    }
}

fn malformed(tool: &ToolSpec, message: String) -> ExecutorError {
    ExecutorError::MalformedBinding {
        tool: tool.tool_id.clone(),
        message,
    }
}

/// Text form of an argument for query strings and path segments.
fn scalar_text(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Null => Some(String::new()),
        Value::Array(_) | Value::Object(_) => None,
    }
}

/// Request shape after placing arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct RestRequest {
    pub method: String,
    pub url: String,
    pub query: Vec<(String, String)>,
    pub body: Option<Value>,
}

/// Fills path placeholders and splits the remaining arguments into query
/// pairs and a JSON body. `Err` carries a play-level failure (missing path
/// argument), not a configuration error.
pub fn build_rest_request(binding: &RestBinding, arguments: &Map<String, Value>) -> Result<RestRequest, String> {
    use crate::registry::ArgumentPlacement;

    let mut url = String::with_capacity(binding.url.len());
    let mut used = Vec::new();
    let mut rest = binding.url.as_str();
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        let name = &rest[open + 1..open + close];
        url.push_str(&rest[..open]);
        let value = arguments
            .get(name)
            .ok_or_else(|| format!("missing path argument `{name}`"))?;
        let text = scalar_text(value).unwrap_or_else(|| value.to_string());
        url.push_str(&percent_encode(&text));
        used.push(name.to_string());
        rest = &rest[open + close + 1..];
    }
    url.push_str(rest);

    let mut query = Vec::new();
    let mut body = Map::new();
    for (name, value) in arguments {
        if used.contains(name) {
            continue;
        }
        let to_body = match binding.placement {
            ArgumentPlacement::Body => true,
            ArgumentPlacement::Query => false,
            ArgumentPlacement::Auto => scalar_text(value).is_none(),
        };
        if to_body {
            body.insert(name.clone(), value.clone());
        } else {
            query.push((name.clone(), scalar_text(value).unwrap_or_else(|| value.to_string())));
        }
    }
    Ok(RestRequest {
        method: binding.method.to_ascii_uppercase(),
        url,
        query,
        body: (!body.is_empty()).then_some(Value::Object(body)),
    })
}

fn percent_encode(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for b in text.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// Executes a REST call. Non-2xx responses become `tool_error` with the status
/// code in the detail. `Err` is reserved for malformed bindings.
#[cfg(feature = "net")]
pub fn execute_rest(
    binding: &RestBinding,
    arguments: &Map<String, Value>,
    limits: &ExecutionLimits,
) -> Result<ToolOutput, String> {
    const METHODS: [&str; 6] = ["GET", "DELETE", "HEAD", "POST", "PUT", "PATCH"];
    let method = binding.method.to_ascii_uppercase();
    if !METHODS.contains(&method.as_str()) {
        return Err(format!("unsupported HTTP method `{}`", binding.method));
    }
    if binding.url.is_empty() {
        return Err("empty URL".into());
    }
    let request = match build_rest_request(binding, arguments) {
        Ok(r) => r,
        Err(message) => return Ok(ToolOutput::failed(OutputStatus::ToolError, "", message)),
    };

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(limits.timeout()))
        .http_status_as_error(false)
        .build()
        .into();

    let result = match method.as_str() {
        "GET" | "DELETE" | "HEAD" => {
            let mut req = match method.as_str() {
                "GET" => agent.get(&request.url),
                "DELETE" => agent.delete(&request.url),
                _ => agent.head(&request.url),
            };
            for (k, v) in &binding.headers {
                req = req.header(k, v);
            }
            for (k, v) in &request.query {
                req = req.query(k, v);
            }
            req.call()
        }
        _ => {
            let mut req = match method.as_str() {
                "POST" => agent.post(&request.url),
                "PUT" => agent.put(&request.url),
                _ => agent.patch(&request.url),
            };
            for (k, v) in &binding.headers {
                req = req.header(k, v);
            }
            for (k, v) in &request.query {
                req = req.query(k, v);
            }
            match &request.body {
                Some(body) => req.send_json(body),
                None => req.send_empty(),
            }
        }
    };

    let mut response = match result {
        Ok(r) => r,
        Err(ureq::Error::Timeout(kind)) => {
            return Ok(ToolOutput::failed(
                OutputStatus::Timeout,
                "",
                format!("request timed out ({kind:?}) after {} ms", limits.timeout_ms),
            ))
        }
        Err(err) => {
            return Ok(ToolOutput::failed(
                OutputStatus::TransportError,
                "",
                format!("connection failure: {err}"),
            ))
        }
    };
    let status = response.status().as_u16();
    let body = match response.body_mut().read_to_vec() {
        Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
        Err(ureq::Error::Timeout(kind)) => {
            return Ok(ToolOutput::failed(
                OutputStatus::Timeout,
                "",
                format!("response body timed out ({kind:?}) after {} ms", limits.timeout_ms),
            ))
        }
        Err(err) => {
            return Ok(ToolOutput::failed(
                OutputStatus::TransportError,
                "",
                format!("failed reading response body: {err}"),
            ))
        }
    };
    if (200..300).contains(&status) {
        Ok(ToolOutput::ok(body))
    } else {
        let detail = format!("HTTP {status}: {}", truncate_payload(body.clone(), 512));
        Ok(ToolOutput::failed(OutputStatus::ToolError, body, detail))
    }
}

#[cfg(not(feature = "net"))]
pub fn execute_rest(
    _binding: &RestBinding,
    _arguments: &Map<String, Value>,
    _limits: &ExecutionLimits,
) -> Result<ToolOutput, String> {
    Ok(ToolOutput::failed(
        OutputStatus::TransportError,
        "",
        "REST transport not compiled in (enable the `net` feature)",
    ))
}

/// Request line of the subprocess runner protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerRequest {
    pub id: String,
    pub function: String,
    pub arguments: Map<String, Value>,
}

/// Response line of the subprocess runner protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerResponse {
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunnerRequest {
    /// One protocol line, newline included.
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("request serializes");
        line.push('\n');
        line
    }
}

impl RunnerResponse {
    pub fn into_output(self) -> ToolOutput {
        if self.ok {
            let payload = match self.result {
                Some(Value::String(s)) => s,
                Some(other) => other.to_string(),
                None => String::new(),
            };
            ToolOutput::ok(payload)
        } else {
            let error = self.error.unwrap_or_else(|| "runner reported failure without error text".into());
            ToolOutput::failed(OutputStatus::ToolError, "", error)
        }
    }
}

/// Spawns the runner, sends one request, and waits for the matching response.
pub fn execute_subprocess(
    binding: &SubprocessBinding,
    function: &str,
    id: &str,
    arguments: &Map<String, Value>,
    limits: &ExecutionLimits,
) -> ToolOutput {
    let request = RunnerRequest {
        id: id.to_string(),
        function: function.to_string(),
        arguments: arguments.clone(),
    };
    let mut child = match Command::new(&binding.command[0])
        .args(&binding.command[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
    {
        Ok(child) => child,
        Err(err) => {
            return ToolOutput::failed(
                OutputStatus::TransportError,
                "",
                format!("failed to launch `{}`: {err}", binding.command[0]),
            )
        }
    };

    if let Some(mut stdin) = child.stdin.take() {
        // A write failure shows up as a missing response below.
        let _ = stdin.write_all(request.to_line().as_bytes());
    }

    let stdout = child.stdout.take().expect("stdout piped");
    let (tx, rx) = mpsc::channel();
    let wanted = id.to_string();
    std::thread::spawn(move || {
        let reader = BufReader::new(stdout);
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<RunnerResponse>(&line);
            match parsed {
                Ok(resp) if resp.id == wanted => {
                    let _ = tx.send(Ok(resp));
                    return;
                }
                Ok(_) => continue,
                Err(err) => {
                    let _ = tx.send(Err(format!("malformed runner response `{line}`: {err}")));
                    return;
                }
            }
        }
        let _ = tx.send(Err("runner exited without a response".into()));
    });

    let outcome = rx.recv_timeout(limits.timeout());
    let output = match outcome {
        Ok(Ok(resp)) => resp.into_output(),
        Ok(Err(message)) => {
            let _ = child.kill();
            let mut stderr = String::new();
            if let Some(mut err) = child.stderr.take() {
                let _ = err.read_to_string(&mut stderr);
            }
            let detail = if stderr.trim().is_empty() {
                message
            } else {
                format!("{message}; stderr: {}", stderr.trim())
            };
            ToolOutput::failed(OutputStatus::TransportError, "", detail)
        }
        Err(_) => {
            let _ = child.kill();
            ToolOutput::failed(
                OutputStatus::Timeout,
                "",
                format!("runner did not answer within {} ms", limits.timeout_ms),
            )
        }
    };
    drop(child.stdin.take());
    let _ = child.kill();
    let _ = child.wait();
    output
}
