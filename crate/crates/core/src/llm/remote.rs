use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{
    approx_tokens, Completion, Conversation, LlmBackend, LlmConfig, LlmError, Role, TokenCount,
    TokenDistribution,
};

/// Chat-completions HTTP backend.
///
/// Next-token distributions are obtained by asking for a single token with
/// `top_logprobs` enabled, the partial answer being sent as a trailing
/// assistant message.
pub struct RemoteBackend {
    client: Client,
    url: String,
    api_key: Option<String>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("url", &self.url)
            .finish()
    }
}

fn role(r: Role) -> &'static str {
    match r {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

impl RemoteBackend {
    pub fn new(config: &LlmConfig) -> Result<Self, LlmError> {
        let client = Client::builder()
            .timeout(config.request_timeout())
            .build()
            .map_err(|e| LlmError::Backend(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: std::env::var(&config.api_key_env)
                .ok()
                .filter(|k| !k.is_empty()),
        })
    }

    fn post(&self, body: &Value, config: &LlmConfig) -> Result<Value, LlmError> {
        let mut attempt = 0u32;
        loop {
            let mut req = self.client.post(&self.url).json(body);
            if let Some(k) = &self.api_key {
                req = req.bearer_auth(k);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) if e.is_timeout() => return Err(LlmError::Timeout),
                Err(e) => return Err(LlmError::Backend(e.to_string())),
            };
            let status = resp.status();
            if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                if attempt >= config.max_retries {
                    return Err(if status == StatusCode::TOO_MANY_REQUESTS {
                        LlmError::RateLimited(attempt)
                    } else {
                        LlmError::Backend(format!("HTTP {status}"))
                    });
                }
                let wait = config
                    .initial_backoff_ms
                    .saturating_mul(1 << attempt.min(16));
                log::warn!("model endpoint returned {status}; retrying in {wait} ms");
                std::thread::sleep(Duration::from_millis(wait));
                attempt += 1;
                continue;
            }
            let text = resp.text().map_err(|e| LlmError::Backend(e.to_string()))?;
            if !status.is_success() {
                return Err(LlmError::Backend(format!("HTTP {status}: {text}")));
            }
            return serde_json::from_str(&text)
                .map_err(|e| LlmError::Backend(format!("bad response body: {e}")));
        }
    }
}

fn usage_of(v: &Value, fallback_prompt: &str, fallback_completion: &str) -> TokenCount {
    match (
        v["usage"]["prompt_tokens"].as_u64(),
        v["usage"]["completion_tokens"].as_u64(),
    ) {
        (Some(p), Some(c)) => TokenCount {
            prompt: p,
            completion: c,
        },
        _ => TokenCount {
            prompt: approx_tokens(fallback_prompt),
            completion: approx_tokens(fallback_completion),
        },
    }
}

impl LlmBackend for RemoteBackend {
    fn chat(
        &self,
        conversation: &Conversation,
        config: &LlmConfig,
    ) -> Result<Completion, LlmError> {
        let messages: Vec<Value> = conversation
            .messages
            .iter()
            .map(|m| json!({"role": role(m.role), "content": m.content}))
            .collect();
        let body = json!({
            "model": config.model_id,
            "messages": messages,
            "temperature": 0,
        });
        let v = self.post(&body, config)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::Backend("response without message content".into()))?
            .to_string();
        let prompt: String = conversation
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect();
        Ok(Completion {
            tokens: usage_of(&v, &prompt, &text),
            text,
        })
    }

    fn next_tokens(
        &self,
        prompt: &str,
        partial: &str,
        k: usize,
        config: &LlmConfig,
    ) -> Result<(TokenDistribution, TokenCount), LlmError> {
        let mut messages = vec![json!({"role": "user", "content": prompt})];
        if !partial.is_empty() {
            messages.push(json!({"role": "assistant", "content": partial}));
        }
        let mut body = json!({
            "model": config.model_id,
            "messages": messages,
            "temperature": 0,
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": k,
        });
        if config.continue_final_message && !partial.is_empty() {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        let v = self.post(&body, config)?;
        let top = v["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
            .as_array()
            .ok_or_else(|| {
                LlmError::UnsupportedByBackend("model returned no log-probabilities".into())
            })?;
        let pairs = top.iter().filter_map(|t| {
            let token = t["token"].as_str()?.to_string();
            let lp = t["logprob"].as_f64()?;
            Some((token, lp.exp()))
        });
        let dist = TokenDistribution::top_k(pairs, k);
        if dist.is_empty() {
            return Err(LlmError::UnsupportedByBackend("empty top_logprobs".into()));
        }
        let text = format!("{prompt}{partial}");
        Ok((dist, usage_of(&v, &text, "x")))
    }
}
