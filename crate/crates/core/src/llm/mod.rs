//! Language model access: full completions and top-k next-token
//! distributions.

mod remote;
mod scripted;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use remote::RemoteBackend;
pub use scripted::{ScriptedBackend, TreeNode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("model request timed out")]
    Timeout,
    #[error("rate limited after {0} retries")]
    RateLimited(u32),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("operation not supported by backend: {0}")]
    UnsupportedByBackend(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub backend: BackendKind,
    pub model_id: String,
    /// Always 0: answers are taken greedily.
    pub temperature: f64,
    pub top_k_limit: usize,
    pub request_timeout_ms: u64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    /// Base URL of a chat-completions endpoint (remote backend).
    pub base_url: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Script file (scripted backend).
    pub script: Option<PathBuf>,
    /// Ask the server to continue the trailing assistant message instead of
    /// starting a new one when probing next tokens.
    pub continue_final_message: bool,
    /// USD per million tokens, for cost reporting.
    pub price_per_million_tokens: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Scripted,
            model_id: "gpt-4o".into(),
            temperature: 0.0,
            top_k_limit: 5,
            request_timeout_ms: 120_000,
            max_retries: 5,
            initial_backoff_ms: 500,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "LLM_API_KEY".into(),
            script: None,
            continue_final_message: false,
            price_per_million_tokens: 2.5,
        }
    }
}

impl LlmConfig {
    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.temperature != 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be 0".into()));
        }
        if self.top_k_limit == 0 {
            return Err(LlmError::InvalidRequest(
                "top_k_limit must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Top-k candidate next tokens, most probable first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub tokens: Vec<String>,
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    /// Sorts by descending probability (stable), drops non-positive
    /// probabilities and keeps the `k` best.
    pub fn top_k(pairs: impl IntoIterator<Item = (String, f64)>, k: usize) -> Self {
        let mut v: Vec<(String, f64)> = pairs.into_iter().filter(|(_, p)| *p > 0.0).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v.truncate(k);
        let (tokens, probs) = v.into_iter().map(|(t, p)| (t, p.min(1.0))).unzip();
        Self { tokens, probs }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.tokens
            .iter()
            .map(String::as_str)
            .zip(self.probs.iter().copied())
    }

    pub fn is_well_formed(&self, k: usize) -> bool {
        self.tokens.len() == self.probs.len()
            && self.len() <= k
            && self.probs.windows(2).all(|w| w[0] >= w[1])
            && self.probs.iter().all(|p| *p > 0.0 && *p <= 1.0)
            && self.probs.iter().sum::<f64>() <= 1.0 + 1e-6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// Messages exchanged in one model context.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub messages: Vec<Message>,
}

impl Conversation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, role: Role, content: impl Into<String>) {
        self.messages.push(Message {
            role,
            content: content.into(),
        });
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn user_turns(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .count()
    }
}

/// Token counts of one request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens: TokenCount,
}

/// A model provider.
pub trait LlmBackend: Send + Sync {
    /// Answers the conversation's last user message.
    fn chat(&self, conversation: &Conversation, config: &LlmConfig)
        -> Result<Completion, LlmError>;

    /// Top-k next tokens after `partial`, the answer generated so far to
    /// `prompt`.
    fn next_tokens(
        &self,
        prompt: &str,
        partial: &str,
        k: usize,
        config: &LlmConfig,
    ) -> Result<(TokenDistribution, TokenCount), LlmError>;
}

/// Cumulative token counters, safe to update from several threads.
#[derive(Debug, Default)]
pub struct Usage {
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    calls: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageSnapshot {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
}

impl UsageSnapshot {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn since(&self, earlier: &UsageSnapshot) -> UsageSnapshot {
        UsageSnapshot {
            prompt_tokens: self.prompt_tokens - earlier.prompt_tokens,
            completion_tokens: self.completion_tokens - earlier.completion_tokens,
            calls: self.calls - earlier.calls,
        }
    }
}

impl std::ops::Add for UsageSnapshot {
    type Output = UsageSnapshot;

    fn add(self, o: UsageSnapshot) -> UsageSnapshot {
        UsageSnapshot {
            prompt_tokens: self.prompt_tokens + o.prompt_tokens,
            completion_tokens: self.completion_tokens + o.completion_tokens,
            calls: self.calls + o.calls,
        }
    }
}

impl Usage {
    pub fn record(&self, t: TokenCount) {
        self.prompt_tokens.fetch_add(t.prompt, Ordering::Relaxed);
        self.completion_tokens
            .fetch_add(t.completion, Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> UsageSnapshot {
        UsageSnapshot {
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
            calls: self.calls.load(Ordering::Relaxed),
        }
    }
}

/// Shared entry point to a backend. Cheap to clone.
#[derive(Clone)]
pub struct LlmGateway {
    backend: Arc<dyn LlmBackend>,
    config: Arc<LlmConfig>,
    usage: Arc<Usage>,
    /// Counters of the gateway this one was forked from.
    parent: Option<Arc<Usage>>,
}

impl std::fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmGateway")
            .field("config", &self.config)
            .finish()
    }
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn LlmBackend>, config: LlmConfig) -> Result<Self, LlmError> {
        config.validate()?;
        Ok(Self {
            backend,
            config: Arc::new(config),
            usage: Arc::new(Usage::default()),
            parent: None,
        })
    }

    /// Builds the backend named in the configuration.
    pub fn from_config(config: LlmConfig) -> Result<Self, LlmError> {
        let backend: Arc<dyn LlmBackend> = match config.backend {
            BackendKind::Scripted => {
                let path = config.script.as_ref().ok_or_else(|| {
                    LlmError::InvalidRequest("scripted backend needs a script file".into())
                })?;
                Arc::new(ScriptedBackend::from_file(path)?)
            }
            BackendKind::Remote => Arc::new(RemoteBackend::new(&config)?),
        };
        Self::new(backend, config)
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    /// Usage over the gateway's lifetime.
    pub fn usage(&self) -> UsageSnapshot {
        self.usage.snapshot()
    }

    /// Same backend with counters of its own; its calls still count
    /// toward this gateway's usage.
    pub fn fork(&self) -> LlmGateway {
        LlmGateway {
            backend: self.backend.clone(),
            config: self.config.clone(),
            usage: Arc::new(Usage::default()),
            parent: Some(self.usage.clone()),
        }
    }

    fn record(&self, t: TokenCount) {
        self.usage.record(t);
        if let Some(p) = &self.parent {
            p.record(t);
        }
    }

    /// A handle whose counters track only the calls made through it.
    pub fn session(&self) -> LlmSession {
        LlmSession {
            gateway: self.clone(),
            usage: Arc::new(Usage::default()),
        }
    }
}

/// Per-query view of a gateway with its own usage counters.
#[derive(Clone)]
pub struct LlmSession {
    gateway: LlmGateway,
    usage: Arc<Usage>,
}

impl LlmSession {
    pub fn config(&self) -> &LlmConfig {
        &self.gateway.config
    }

    pub fn usage(&self) -> UsageSnapshot {
        self.usage.snapshot()
    }

    fn record(&self, t: TokenCount) {
        self.usage.record(t);
        self.gateway.record(t);
    }

    /// Single-turn completion in a fresh context.
    pub fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let mut c = Conversation::new();
        self.chat(&mut c, prompt)
    }

    /// Sends `prompt` as the next user turn and appends the answer.
    pub fn chat(&self, conversation: &mut Conversation, prompt: &str) -> Result<String, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty prompt".into()));
        }
        conversation.push(Role::User, prompt);
        match self
            .gateway
            .backend
            .chat(conversation, &self.gateway.config)
        {
            Ok(c) => {
                self.record(c.tokens);
                conversation.push(Role::Assistant, c.text.clone());
                Ok(c.text)
            }
            Err(e) => {
                conversation.messages.pop();
                Err(e)
            }
        }
    }

    pub fn next_tokens(
        &self,
        prompt: &str,
        partial: &str,
        k: usize,
    ) -> Result<TokenDistribution, LlmError> {
        let cfg = &self.gateway.config;
        if k == 0 || k > cfg.top_k_limit {
            return Err(LlmError::InvalidRequest(format!(
                "k = {k} outside 1..={}",
                cfg.top_k_limit
            )));
        }
        let (dist, tokens) = self.gateway.backend.next_tokens(prompt, partial, k, cfg)?;
        self.record(tokens);
        Ok(TokenDistribution::top_k(
            dist.tokens.into_iter().zip(dist.probs),
            k,
        ))
    }
}

/// Rough token count used where a backend reports none.
pub fn approx_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}
