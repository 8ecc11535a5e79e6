//! Chat-completion client shared by extraction, fallback selection,
//! distractor generation and answer evaluation.
//!
//! Backends implement [`ChatBackend`]; [`ChatClient`] adds the retry policy
//! and a global in-flight bound. [`MockChatBackend`] replays a JSONL script
//! for offline runs (`KGGDG_LLM_URL=mock:<path>`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::util::{sha256_hex, Semaphore};

pub const QA_EXTRACT_TEMPLATE: &str = include_str!("../assets/qa_extract.tmpl");
pub const FALLBACK_SELECT_TEMPLATE: &str = include_str!("../assets/fallback_select.tmpl");
pub const MISLEADING_DISTRACTOR_TEMPLATE: &str =
    include_str!("../assets/misleading_distractor.tmpl");
pub const ANSWER_MCQ_TEMPLATE: &str = include_str!("../assets/answer_mcq.tmpl");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("authentication rejected (status {0})")]
    Auth(u16),
    #[error("empty completion")]
    EmptyCompletion,
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<LlmError> },
    #[error("mock script has no rule matching the prompt")]
    ScriptExhausted,
    #[error("mock script: {0}")]
    Script(String),
    #[error("no JSON object found in completion")]
    NoJson,
    #[error("completion JSON is not an object")]
    NotAnObject,
    #[error("template `{template}`: placeholder `{name}` is unbound")]
    UnboundPlaceholder { template: String, name: String },
    #[error("template `{template}`: binding `{name}` matches no placeholder")]
    UnknownBinding { template: String, name: String },
    #[error("configuration: {0}")]
    Config(String),
}

impl LlmError {
    /// Errors worth another attempt under the retry policy.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Transport(_) | LlmError::EmptyCompletion => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system_prompt: Option<String>,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            system_prompt: None,
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_tokens: 1024,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before retry `i` (1-based) is `backoff_base_ms * 2^(i-1)`.
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_attempts == 0 || self.backoff_base_ms == 0 {
            return Err(LlmError::Config(
                "retry policy needs max_attempts >= 1 and backoff_base_ms >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64 << retry.saturating_sub(1).min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    pub fn run<T, E>(
        &self,
        is_transient: impl Fn(&E) -> bool,
        exhausted: impl FnOnce(u32, E) -> E,
        mut op: impl FnMut(u32) -> std::result::Result<T, E>,
    ) -> std::result::Result<T, E> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if !is_transient(&e) => return Err(e),
                Err(e) if attempt >= attempts => return Err(exhausted(attempt, e)),
                Err(e) => {
                    log::debug!("attempt {attempt}/{attempts} failed, retrying");
                    drop(e);
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

/// Model name plus decoding settings for one pipeline role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRole {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ModelRole {
    pub fn new(model: impl Into<String>, temperature: f64, max_tokens: u32) -> Self {
        Self {
            model: model.into(),
            temperature,
            max_tokens,
        }
    }

    pub fn request(&self, prompt: impl Into<String>) -> ChatRequest {
        ChatRequest::new(self.model.clone(), prompt)
            .temperature(self.temperature)
            .max_tokens(self.max_tokens)
    }
}

/// One request/response exchange with a chat provider.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String>;
}

/// Retrying, concurrency-bounded front end over a [`ChatBackend`].
#[derive(Clone)]
pub struct ChatClient {
    backend: Arc<dyn ChatBackend>,
    gate: Arc<Semaphore>,
    policy: RetryPolicy,
}

impl ChatClient {
    pub fn new(backend: Arc<dyn ChatBackend>, max_concurrency: usize, policy: RetryPolicy) -> Self {
        Self {
            backend,
            gate: Arc::new(Semaphore::new(max_concurrency)),
            policy,
        }
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String> {
        complete(self, request, self.policy)
    }
}

/// Returns the first non-empty completion, retrying transient failures.
pub fn complete(client: &ChatClient, request: &ChatRequest, policy: RetryPolicy) -> Result<String> {
    if request.user_prompt.trim().is_empty() {
        return Err(LlmError::Config("empty user prompt".into()));
    }
    policy.run(
        LlmError::is_transient,
        |attempts, last| LlmError::Exhausted {
            attempts,
            last: Box::new(last),
        },
        |_| {
            let _permit = client.gate.acquire();
            let text = client.backend.send(request)?;
            if text.trim().is_empty() {
                return Err(LlmError::EmptyCompletion);
            }
            Ok(text)
        },
    )
}

/// OpenAI-compatible chat-completions endpoint.
pub struct HttpChatBackend {
    url: String,
    key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(url: impl Into<String>, key: Option<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            key,
            http,
        })
    }
}

pub(crate) fn classify_status(status: u16, body: String) -> LlmError {
    match status {
        401 | 403 => LlmError::Auth(status),
        _ => LlmError::Http { status, body },
    }
}

impl ChatBackend for HttpChatBackend {
    fn send(&self, request: &ChatRequest) -> Result<String> {
        let mut messages = Vec::new();
        if let Some(sys) = &request.system_prompt {
            messages.push(serde_json::json!({"role": "system", "content": sys}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user_prompt}));
        let body = serde_json::json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut req = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, text));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| LlmError::Transport(format!("bad response body: {e}")))?;
        parse_chat_response(&value)
    }
}

/// Pulls the assistant text out of a chat-completions response body.
pub fn parse_chat_response(value: &Value) -> Result<String> {
    let content = value
        .pointer("/choices/0/message/content")
        .or_else(|| value.pointer("/message/content"))
        .or_else(|| value.get("content"));
    match content {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) | None => Err(LlmError::EmptyCompletion),
        Some(other) => Err(LlmError::Transport(format!(
            "unexpected content shape: {other}"
        ))),
    }
}

/// One line of a mock script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring that must occur in the user prompt.
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(default)]
    pub response: String,
    /// When set, the rule answers with a transient transport error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Sticky rules are never consumed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub sticky: bool,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: response.into(),
            error: None,
            sticky: false,
        }
    }

    pub fn sticky(mut self) -> Self {
        self.sticky = true;
        self
    }

    pub fn failing(pattern: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: String::new(),
            error: Some("scripted failure".into()),
            sticky: false,
        }
    }
}

/// Scripted backend: each request takes the first unconsumed rule whose
/// `match` text occurs in the prompt.
#[derive(Debug, Default)]
pub struct MockChatBackend {
    rules: Mutex<Vec<(MockRule, bool)>>,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl MockChatBackend {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self {
            rules: Mutex::new(rules.into_iter().map(|r| (r, false)).collect()),
            ..Default::default()
        }
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rule: MockRule = serde_json::from_str(line)
                .map_err(|e| LlmError::Script(format!("line {}: {e}", i + 1)))?;
            rules.push(rule);
        }
        Ok(Self::new(rules))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Every prompt received so far, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl ChatBackend for MockChatBackend {
    fn send(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(request.user_prompt.clone());
        let mut rules = self.rules.lock().unwrap();
        let hit = rules
            .iter_mut()
            .find(|(r, used)| !*used && request.user_prompt.contains(&r.pattern));
        match hit {
            None => Err(LlmError::ScriptExhausted),
            Some((rule, used)) => {
                if !rule.sticky {
                    *used = true;
                }
                match &rule.error {
                    Some(msg) => Err(LlmError::Transport(msg.clone())),
                    None => Ok(rule.response.clone()),
                }
            }
        }
    }
}

/// Builds a backend from an endpoint URL; `mock:<path>` selects a script.
pub fn backend_from_url(url: &str, key: Option<String>) -> Result<Arc<dyn ChatBackend>> {
    match url.strip_prefix("mock:") {
        Some(path) => Ok(Arc::new(MockChatBackend::from_file(Path::new(path))?)),
        None => Ok(Arc::new(HttpChatBackend::new(url, key)?)),
    }
}

/// Parses the first JSON object in a completion, tolerating surrounding
/// prose and triple-backtick fences.
pub fn extract_json(raw: &str) -> Result<Map<String, Value>> {
    let trimmed = raw.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return match v {
            Value::Object(m) => Ok(m),
            _ => Err(LlmError::NotAnObject),
        };
    }
    for block in fenced_blocks(raw) {
        if let Ok(v) = serde_json::from_str::<Value>(block.trim()) {
            return match v {
                Value::Object(m) => Ok(m),
                _ => Err(LlmError::NotAnObject),
            };
        }
    }
    for (i, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(m))) = stream.next() {
            return Ok(m);
        }
    }
    Err(LlmError::NoJson)
}

fn fenced_blocks(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let Some(end) = after.find("```") else { break };
        let mut body = &after[..end];
        // drop a language tag on the opening fence line
        if let Some(nl) = body.find('\n') {
            let tag = body[..nl].trim();
            if !tag.is_empty() && tag.chars().all(|c| c.is_ascii_alphanumeric()) {
                body = &body[nl + 1..];
            }
        }
        out.push(body);
        rest = &after[end + 3..];
    }
    out
}

/// Prompt body with `{placeholder}` slots; a placeholder is an identifier
/// (`[A-Za-z_][A-Za-z0-9_]*`) in braces, so literal JSON braces pass through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            body: body.into(),
        }
    }

    pub fn qa_extract() -> Self {
        Self::new("qa_extract", QA_EXTRACT_TEMPLATE)
    }

    pub fn fallback_select() -> Self {
        Self::new("fallback_select", FALLBACK_SELECT_TEMPLATE)
    }

    pub fn misleading_distractor() -> Self {
        Self::new("misleading_distractor", MISLEADING_DISTRACTOR_TEMPLATE)
    }

    pub fn answer_mcq() -> Self {
        Self::new("answer_mcq", ANSWER_MCQ_TEMPLATE)
    }

    fn pieces(&self) -> Vec<Piece<'_>> {
        let body = self.body.as_str();
        let bytes = body.as_bytes();
        let mut out = Vec::new();
        let mut text_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'{' {
                let mut j = i + 1;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                let is_ident = j > i + 1 && !bytes[i + 1].is_ascii_digit();
                if is_ident && j < bytes.len() && bytes[j] == b'}' {
                    out.push(Piece::Text(&body[text_start..i]));
                    out.push(Piece::Slot(&body[i + 1..j]));
                    i = j + 1;
                    text_start = i;
                    continue;
                }
            }
            i += 1;
        }
        out.push(Piece::Text(&body[text_start..]));
        out
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        self.pieces()
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.to_string()),
                Piece::Text(_) => None,
            })
            .collect()
    }

    pub fn sha256(&self) -> String {
        sha256_hex(self.body.as_bytes())
    }
}

/// Literal single-pass substitution; bound values are never re-scanned.
pub fn render(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String> {
    let slots = template.placeholders();
    if let Some(extra) = bindings.keys().find(|k| !slots.contains(*k)) {
        return Err(LlmError::UnknownBinding {
            template: template.name.clone(),
            name: extra.clone(),
        });
    }
    let mut out = String::with_capacity(template.body.len());
    for piece in template.pieces() {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(s) => match bindings.get(s) {
                Some(v) => out.push_str(v),
                None => {
                    return Err(LlmError::UnboundPlaceholder {
                        template: template.name.clone(),
                        name: s.to_string(),
                    })
                }
            },
        }
    }
    Ok(out)
}

/// Convenience for building binding maps from string pairs.
pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 1,
        }
    }

    fn client(rules: Vec<MockRule>) -> (ChatClient, Arc<MockChatBackend>) {
        let mock = Arc::new(MockChatBackend::new(rules));
        (ChatClient::new(mock.clone(), 4, fast()), mock)
    }

    #[test]
    fn mock_returns_scripted_text() {
        let (c, _) = client(vec![MockRule::new("", "hello")]);
        assert_eq!(c.complete(&ChatRequest::new("m", "hi")).unwrap(), "hello");
    }

    #[test]
    fn succeeds_on_third_attempt() {
        let (c, mock) = client(vec![
            MockRule::failing("q"),
            MockRule::failing("q"),
            MockRule::new("q", "ok"),
        ]);
        assert_eq!(c.complete(&ChatRequest::new("m", "q")).unwrap(), "ok");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn exhausts_after_max_attempts() {
        let (c, mock) = client(vec![
            MockRule::failing("q"),
            MockRule::failing("q"),
            MockRule::failing("q"),
            MockRule::new("q", "too late"),
        ]);
        match c.complete(&ChatRequest::new("m", "q")) {
            Err(LlmError::Exhausted { attempts: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn empty_completion_is_never_success() {
        let (c, _) = client(vec![MockRule::new("q", "  ").sticky()]);
        assert!(matches!(
            c.complete(&ChatRequest::new("m", "q")),
            Err(LlmError::Exhausted { .. })
        ));
    }

    #[test]
    fn auth_errors_do_not_retry() {
        struct Denied(AtomicUsize);
        impl ChatBackend for Denied {
            fn send(&self, _: &ChatRequest) -> Result<String> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Err(classify_status(401, String::new()))
            }
        }
        let backend = Arc::new(Denied(AtomicUsize::new(0)));
        let c = ChatClient::new(backend.clone(), 1, fast());
        assert_eq!(c.complete(&ChatRequest::new("m", "q")), Err(LlmError::Auth(401)));
        assert_eq!(backend.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_is_exponential() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_millis(500));
        assert_eq!(p.delay(2), Duration::from_millis(1000));
        assert_eq!(p.delay(3), Duration::from_millis(2000));
        assert!(RetryPolicy { max_attempts: 0, backoff_base_ms: 1 }.validate().is_err());
    }

    #[test]
    fn mock_script_parses_jsonl() {
        let m = MockChatBackend::from_jsonl(
            "{\"match\": \"a\", \"response\": \"x\"}\n\n{\"match\": \"b\", \"response\": \"y\", \"sticky\": true}\n",
        )
        .unwrap();
        let req = |p: &str| ChatRequest::new("m", p);
        assert_eq!(m.send(&req("b")).unwrap(), "y");
        assert_eq!(m.send(&req("b")).unwrap(), "y");
        assert_eq!(m.send(&req("a")).unwrap(), "x");
        assert_eq!(m.send(&req("a")), Err(LlmError::ScriptExhausted));
        assert!(MockChatBackend::from_jsonl("{oops").is_err());
    }

    #[test]
    fn chat_response_shapes() {
        let v = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": "B"}}]});
        assert_eq!(parse_chat_response(&v).unwrap(), "B");
        let v = serde_json::json!({"choices": [{"message": {"content": null}}]});
        assert_eq!(parse_chat_response(&v), Err(LlmError::EmptyCompletion));
    }

    #[test]
    fn extract_plain_and_fenced() {
        let m = extract_json("{\"a\":1}").unwrap();
        assert_eq!(m["a"], 1);
        let m = extract_json("Sure! ```json\n{\"a\":1}\n```").unwrap();
        assert_eq!(m["a"], 1);
        let m = extract_json("Here it is: {\"a\": {\"b\": [1, 2]}} hope that helps {\"c\":2}").unwrap();
        assert_eq!(m["a"]["b"][1], 2);
        assert_eq!(extract_json("no json here"), Err(LlmError::NoJson));
        assert_eq!(extract_json("[1, 2]"), Err(LlmError::NotAnObject));
        assert_eq!(extract_json("```\n[1]\n```"), Err(LlmError::NotAnObject));
    }

    #[test]
    fn extract_skips_broken_braces() {
        let m = extract_json("use {x} then {\"ok\": true}").unwrap();
        assert_eq!(m["ok"], true);
    }

    #[test]
    fn render_substitutes_literally() {
        let t = PromptTemplate::new("t", "Q: {question}");
        assert_eq!(render(&t, &bindings([("question", "x")])).unwrap(), "Q: x");
        let t = PromptTemplate::new("t", "{a} and {a} {\"json\": 1} {b}");
        let out = render(&t, &bindings([("a", "{b}"), ("b", "2")])).unwrap();
        assert_eq!(out, "{b} and {b} {\"json\": 1} 2");
    }

    #[test]
    fn render_rejects_missing_and_extra() {
        let t = PromptTemplate::new("t", "Q: {question}");
        assert!(matches!(
            render(&t, &BTreeMap::new()),
            Err(LlmError::UnboundPlaceholder { .. })
        ));
        assert!(matches!(
            render(&t, &bindings([("question", "x"), ("extra", "y")])),
            Err(LlmError::UnknownBinding { .. })
        ));
    }

    #[test]
    fn shipped_templates_have_expected_slots() {
        let slots = |t: PromptTemplate| t.placeholders().into_iter().collect::<Vec<_>>();
        assert_eq!(slots(PromptTemplate::qa_extract()), ["answer", "question"]);
        assert_eq!(
            slots(PromptTemplate::fallback_select()),
            ["answer", "query_entity", "question", "similar_entities"]
        );
        assert_eq!(
            slots(PromptTemplate::misleading_distractor()),
            [
                "correct_answer",
                "distractor_slots",
                "input_question",
                "justification_slots",
                "num_distractors",
                "reasoning_paths"
            ]
        );
        assert_eq!(slots(PromptTemplate::answer_mcq()), ["options", "question"]);
    }

    fn json_object() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(|n| Value::from(n)),
            "[a-zA-Z0-9 {}\\[\\]`\"]{0,12}".prop_map(Value::String),
        ];
        let value = leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::btree_map("[a-z]{1,5}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        });
        prop::collection::btree_map("[a-z]{1,5}", value, 0..5)
            .prop_map(|m| Value::Object(m.into_iter().collect()))
    }

    proptest! {
        #[test]
        fn extract_roundtrips_objects(v in json_object(), pretty in any::<bool>()) {
            let text = if pretty {
                format!("Answer:\n```json\n{}\n```", serde_json::to_string_pretty(&v).unwrap())
            } else {
                serde_json::to_string(&v).unwrap()
            };
            let got = Value::Object(extract_json(&text).unwrap());
            prop_assert_eq!(got, v);
        }

        #[test]
        fn render_is_injective(a in "[ -~]{0,20}", b in "[ -~]{0,20}") {
            prop_assume!(a != b);
            let t = PromptTemplate::new("t", "x {slot} y {other}");
            let ra = render(&t, &bindings([("slot", &a), ("other", "k")])).unwrap();
            let rb = render(&t, &bindings([("slot", &b), ("other", "k")])).unwrap();
            prop_assert_ne!(ra, rb);
        }
    }
}
