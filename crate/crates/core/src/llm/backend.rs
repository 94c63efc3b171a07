//! Completion backends and the retrying [`Generator`] wrapper.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// What a model is used for. Determines which templates it may render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ExampleGenerator,
    DocGenerator,
    TaskModel,
    Judge,
}

impl Role {
    pub fn default_decoding(self) -> Decoding {
        let temperature = match self {
            Role::ExampleGenerator | Role::DocGenerator => 0.7,
            Role::TaskModel | Role::Judge => 0.001,
        };
        Decoding {
            temperature,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    /// Transient failures retried before this completion succeeded.
    #[serde(default)]
    pub retries: u32,
    #[serde(skip)]
    pub latency_ms: u64,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
            retries: 0,
            latency_ms: 0,
        }
    }
}

pub struct CompletionRequest<'a> {
    pub role: Role,
    pub prompt: &'a str,
    pub decoding: Decoding,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    /// Retryable: connection failures, 5xx, 429, timeouts.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend rejected the request with status {status}: {detail}")]
    Rejected { status: u16, detail: String },
    #[error("no mock rule matched the prompt: {0}")]
    Unmatched(String),
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError>;

    /// Short identifier recorded in run manifests.
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend still failing after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("backend rejected the request with status {status}: {detail}")]
    Rejected { status: u16, detail: String },
    #[error("no mock rule matched the prompt: {0}")]
    Unmatched(String),
    #[error("{role:?} may not render template `{template}`")]
    RoleViolation { role: Role, template: String },
    #[error(transparent)]
    Template(#[from] super::template::TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

/// A role bound to a backend, decoding settings and a retry policy.
#[derive(Clone)]
pub struct Generator {
    role: Role,
    backend: Arc<dyn Backend>,
    decoding: Decoding,
    retry: RetryPolicy,
    calls: Arc<AtomicU64>,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("role", &self.role)
            .field("backend", &self.backend.describe())
            .field("decoding", &self.decoding)
            .finish()
    }
}

impl Generator {
    pub fn new(role: Role, backend: Arc<dyn Backend>) -> Self {
        Self {
            role,
            backend,
            decoding: role.default_decoding(),
            retry: RetryPolicy::default(),
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn with_decoding(mut self, decoding: Decoding) -> Self {
        self.decoding = decoding;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn decoding(&self) -> Decoding {
        self.decoding
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    /// Completions requested through this generator (retries not counted).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Completes `prompt`, retrying transient failures with exponential backoff.
    pub fn complete(&self, prompt: &str) -> Result<Completion, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let request = CompletionRequest {
            role: self.role,
            prompt,
            decoding: self.decoding,
        };
        let mut retries = 0;
        loop {
            let started = Instant::now();
            match self.backend.complete(&request) {
                Ok(mut completion) => {
                    completion.retries = retries;
                    completion.latency_ms = started.elapsed().as_millis() as u64;
                    return Ok(completion);
                }
                Err(BackendError::Transient(msg)) => {
                    if retries >= self.retry.max_retries {
                        return Err(GatewayError::ExhaustedRetries {
                            attempts: retries + 1,
                            last: msg,
                        });
                    }
                    let delay = self.retry.base_delay_ms.saturating_mul(1 << retries.min(16));
                    log::warn!("{:?} backend transient failure ({msg}); retry {} in {delay} ms", self.role, retries + 1);
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    retries += 1;
                }
                Err(BackendError::Rejected { status, detail }) => {
                    return Err(GatewayError::Rejected { status, detail })
                }
                Err(BackendError::Unmatched(p)) => return Err(GatewayError::Unmatched(p)),
            }
        }
    }
}

/// Backend driven by a closure; handy for scripted tests.
pub struct FnBackend<F> {
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest<'_>) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }

    pub fn shared(f: F) -> Arc<dyn Backend>
    where
        F: 'static,
    {
        Arc::new(Self::new(f))
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest<'_>) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        (self.f)(request).map(Completion::text)
    }

    fn describe(&self) -> String {
        "fn".into()
    }
}

/// One scripted reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockResponse {
    Text(String),
    /// Simulated HTTP failure; 5xx and 429 are transient, other codes reject.
    Fail { fail: u16 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    /// Every string must occur in the prompt. Empty matches everything.
    #[serde(default)]
    pub contains: Vec<String>,
    /// Replies used in turn; the rule cycles when it runs out.
    pub responses: Vec<MockResponse>,
}

impl MockRule {
    pub fn new<S: Into<String>>(contains: impl IntoIterator<Item = S>, reply: impl Into<String>) -> Self {
        Self {
            role: None,
            contains: contains.into_iter().map(Into::into).collect(),
            responses: vec![MockResponse::Text(reply.into())],
        }
    }

    pub fn for_role(mut self, role: Role) -> Self {
        self.role = Some(role);
        self
    }

    pub fn replies<S: Into<String>>(mut self, replies: impl IntoIterator<Item = S>) -> Self {
        self.responses = replies.into_iter().map(|r| MockResponse::Text(r.into())).collect();
        self
    }

    pub fn matches(&self, role: Role, prompt: &str) -> bool {
        self.role.is_none_or(|r| r == role) && self.contains.iter().all(|c| prompt.contains(c.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockPolicy {
    /// First matching rule answers; unmatched prompts get `default` or fail.
    #[default]
    FirstMatch,
    /// First matching rule answers; unmatched prompts always fail.
    Strict,
    /// Rules are consumed one per call, in order; each must match its call.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub policy: MockPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// A prompt observed by a [`MockBackend`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub role: Role,
    pub prompt: String,
}

#[derive(Debug, Default)]
struct MockState {
    cursors: Vec<usize>,
    next_rule: usize,
    calls: Vec<RecordedCall>,
}

/// Deterministic scripted backend.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    state: Mutex<MockState>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let cursors = vec![0; script.rules.len()];
        Self {
            script,
            state: Mutex::new(MockState {
                cursors,
                ..Default::default()
            }),
        }
    }

    pub fn shared(script: MockScript) -> Arc<Self> {
        Arc::new(Self::new(script))
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.state.lock().expect("mock poisoned").calls.clone()
    }

    fn answer(&self, response: &MockResponse) -> Result<Completion, BackendError> {
        match response {
            MockResponse::Text(t) => Ok(Completion::text(t.clone())),
            MockResponse::Fail { fail } if *fail >= 500 || *fail == 429 => {
                Err(BackendError::Transient(format!("HTTP {fail}")))
            }
            MockResponse::Fail { fail } => Err(BackendError::Rejected {
                status: *fail,
                detail: "scripted rejection".into(),
            }),
        }
    }
}

fn prompt_excerpt(prompt: &str) -> String {
    let mut end = prompt.len().min(160);
    while !prompt.is_char_boundary(end) {
        end -= 1;
    }
    prompt[..end].to_string()
}

impl Backend for MockBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let mut state = self.state.lock().expect("mock poisoned");
        state.calls.push(RecordedCall {
            role: request.role,
            prompt: request.prompt.to_string(),
        });
        let index = match self.script.policy {
            MockPolicy::Sequential => {
                let i = state.next_rule;
                let rule = self.script.rules.get(i);
                match rule {
                    Some(rule) if rule.matches(request.role, request.prompt) => {
                        state.next_rule += 1;
                        Some(i)
                    }
                    _ => None,
                }
            }
            MockPolicy::FirstMatch | MockPolicy::Strict => self
                .script
                .rules
                .iter()
                .position(|r| r.matches(request.role, request.prompt)),
        };
        let Some(index) = index else {
            return match (&self.script.default, self.script.policy) {
                (Some(default), MockPolicy::FirstMatch | MockPolicy::Sequential) => {
                    Ok(Completion::text(default.clone()))
                }
                _ => Err(BackendError::Unmatched(prompt_excerpt(request.prompt))),
            };
        };
        let rule = &self.script.rules[index];
        if rule.responses.is_empty() {
            return Ok(Completion::text(""));
        }
        let cursor = state.cursors[index];
        state.cursors[index] += 1;
        self.answer(&rule.responses[cursor % rule.responses.len()])
    }

    fn describe(&self) -> String {
        format!("mock({} rules, {:?})", self.script.rules.len(), self.script.policy)
    }
}

/// Chat-completion HTTP backend (`POST {base_url}/chat/completions`).
#[cfg(feature = "net")]
pub struct OpenAiBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[cfg(feature = "net")]
impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent,
        }
    }
}

#[cfg(feature = "net")]
#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[cfg(feature = "net")]
#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[cfg(feature = "net")]
#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[cfg(feature = "net")]
#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[cfg(feature = "net")]
impl Backend for OpenAiBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_tokens,
        });
        let mut req = self.agent.post(format!("{}/chat/completions", self.base_url));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = req
            .send_json(&body)
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if status >= 500 || status == 429 {
            return Err(BackendError::Transient(format!("HTTP {status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Rejected { status, detail: text });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| BackendError::Rejected {
            status,
            detail: format!("unreadable completion body: {e}"),
        })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(Completion {
            text: content,
            usage: parsed.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
            retries: 0,
            latency_ms: 0,
        })
    }

    fn describe(&self) -> String {
        format!("openai-compatible({}, {})", self.base_url, self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_delay() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 0,
        }
    }

    #[test]
    fn scripted_reply() {
        let mock = MockBackend::shared(MockScript {
            rules: vec![MockRule::new(Vec::<String>::new(), "OK")],
            ..Default::default()
        });
        let g = Generator::new(Role::TaskModel, mock);
        assert_eq!(g.complete("anything").unwrap().text, "OK");
    }

    #[test]
    fn retries_transient_failures() {
        let mock = MockBackend::shared(MockScript {
            rules: vec![MockRule {
                role: None,
                contains: vec![],
                responses: vec![
                    MockResponse::Fail { fail: 500 },
                    MockResponse::Fail { fail: 500 },
                    MockResponse::Text("fine".into()),
                ],
            }],
            ..Default::default()
        });
        let g = Generator::new(Role::Judge, mock).with_retry(no_delay());
        let c = g.complete("p").unwrap();
        assert_eq!(c.text, "fine");
        assert_eq!(c.retries, 2);
    }

    #[test]
    fn exhausts_retry_budget() {
        let mock = MockBackend::shared(MockScript {
            rules: vec![MockRule {
                role: None,
                contains: vec![],
                responses: vec![MockResponse::Fail { fail: 500 }],
            }],
            ..Default::default()
        });
        let g = Generator::new(Role::Judge, mock.clone()).with_retry(no_delay());
        assert_eq!(
            g.complete("p").unwrap_err(),
            GatewayError::ExhaustedRetries {
                attempts: 4,
                last: "HTTP 500".into()
            }
        );
        assert_eq!(mock.calls().len(), 4);
    }

    #[test]
    fn rejection_is_not_retried() {
        let mock = MockBackend::shared(MockScript {
            rules: vec![MockRule {
                role: None,
                contains: vec![],
                responses: vec![MockResponse::Fail { fail: 400 }],
            }],
            ..Default::default()
        });
        let g = Generator::new(Role::Judge, mock.clone()).with_retry(no_delay());
        assert!(matches!(g.complete("p"), Err(GatewayError::Rejected { status: 400, .. })));
        assert_eq!(mock.calls().len(), 1);
    }

    #[test]
    fn strict_policy_rejects_unmatched() {
        let mock = MockBackend::shared(MockScript {
            policy: MockPolicy::Strict,
            default: Some("ignored".into()),
            rules: vec![MockRule::new(["needle"], "hit")],
        });
        let g = Generator::new(Role::ExampleGenerator, mock);
        assert_eq!(g.complete("has needle").unwrap().text, "hit");
        assert!(matches!(g.complete("nothing"), Err(GatewayError::Unmatched(_))));
    }

    #[test]
    fn first_match_falls_back_to_default() {
        let mock = MockBackend::shared(MockScript {
            policy: MockPolicy::FirstMatch,
            default: Some("fallback".into()),
            rules: vec![MockRule::new(["needle"], "hit")],
        });
        let g = Generator::new(Role::ExampleGenerator, mock);
        assert_eq!(g.complete("nothing").unwrap().text, "fallback");
    }

    #[test]
    fn sequential_consumes_in_order() {
        let mock = MockBackend::shared(MockScript {
            policy: MockPolicy::Sequential,
            default: None,
            rules: vec![MockRule::new(["x"], "first"), MockRule::new(["x"], "second")],
        });
        let g = Generator::new(Role::ExampleGenerator, mock);
        assert_eq!(g.complete("x").unwrap().text, "first");
        assert_eq!(g.complete("x").unwrap().text, "second");
        assert!(g.complete("x").is_err());
    }

    #[test]
    fn role_filter_and_cycling() {
        let mock = MockBackend::shared(MockScript {
            rules: vec![
                MockRule::new(["q"], "").for_role(Role::Judge).replies(["a", "b"]),
                MockRule::new(["q"], "other"),
            ],
            ..Default::default()
        });
        let judge = Generator::new(Role::Judge, mock.clone());
        let task = Generator::new(Role::TaskModel, mock);
        assert_eq!(judge.complete("q").unwrap().text, "a");
        assert_eq!(judge.complete("q").unwrap().text, "b");
        assert_eq!(judge.complete("q").unwrap().text, "a");
        assert_eq!(task.complete("q").unwrap().text, "other");
    }

    #[test]
    fn script_file_format() {
        let script = MockScript::from_json(
            r#"{"policy": "strict", "rules": [{"role": "judge", "contains": ["a"], "responses": ["x", {"fail": 503}]}]}"#,
        )
        .unwrap();
        assert_eq!(script.policy, MockPolicy::Strict);
        assert_eq!(script.rules[0].responses[1], MockResponse::Fail { fail: 503 });
    }
}
