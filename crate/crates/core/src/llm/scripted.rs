use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    approx_tokens, Completion, Conversation, LlmBackend, LlmConfig, LlmError, TokenCount,
    TokenDistribution,
};
use crate::sql::strip_decorations;

/// Node of a scripted token tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub token: String,
    pub prob: f64,
    #[serde(default)]
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn new(token: impl Into<String>, prob: f64, children: Vec<TreeNode>) -> Self {
        Self {
            token: token.into(),
            prob,
            children,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Rule {
    /// Substrings that must all occur somewhere in the conversation.
    #[serde(default)]
    contains: Vec<String>,
    /// Substrings that must all occur in the last user message.
    #[serde(default)]
    last: Vec<String>,
    /// Exact number of user turns so far, when given.
    #[serde(default)]
    turn: Option<usize>,
    response: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ScopedTree {
    /// Substrings that must all occur in the prompt.
    #[serde(default)]
    contains: Vec<String>,
    tree: Vec<TreeNode>,
}

/// On-disk script format.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Script {
    /// Exact prompt -> response.
    #[serde(default)]
    responses: HashMap<String, String>,
    /// First matching rule answers prompts without an exact entry.
    #[serde(default)]
    rules: Vec<Rule>,
    /// sha256(prompt + partial answer) -> [[token, prob], ...]
    #[serde(default)]
    token_tree: HashMap<String, Vec<(String, f64)>>,
    /// Token trees selected by prompt content and walked by the partial
    /// answer.
    #[serde(default)]
    trees: Vec<ScopedTree>,
}

/// Deterministic backend answering from a script.
///
/// Token distributions come from, in order: the hashed `token_tree`, the
/// first matching scoped tree, or (failing both) the scripted full response
/// to the prompt, replayed chunk by chunk with probability 1.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    script: Script,
}

/// Key of a context in the hashed token-tree map.
pub fn context_key(prompt: &str, partial: &str) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update(partial.as_bytes());
    hex::encode(h.finalize())
}

fn chunk_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*\S+").unwrap())
}

fn walk<'a>(nodes: &'a [TreeNode], rest: &str) -> Option<&'a [TreeNode]> {
    if rest.is_empty() {
        return Some(nodes);
    }
    for n in nodes {
        if n.token.is_empty() {
            continue;
        }
        if let Some(r) = rest.strip_prefix(n.token.as_str()) {
            if let Some(found) = walk(&n.children, r) {
                return Some(found);
            }
        }
    }
    None
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let script: Script = serde_json::from_str(text)
            .map_err(|e| LlmError::InvalidRequest(format!("bad script: {e}")))?;
        Ok(Self { script })
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            LlmError::InvalidRequest(format!("cannot read script {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn with_response(mut self, prompt: impl Into<String>, response: impl Into<String>) -> Self {
        self.script.responses.insert(prompt.into(), response.into());
        self
    }

    /// Adds a rule answering any conversation that mentions every string in
    /// `contains` and whose last user message mentions every string in
    /// `last`.
    pub fn with_rule(
        mut self,
        contains: &[&str],
        last: &[&str],
        response: impl Into<String>,
    ) -> Self {
        self.script.rules.push(Rule {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            last: last.iter().map(|s| s.to_string()).collect(),
            turn: None,
            response: response.into(),
        });
        self
    }

    /// Like [`with_rule`](Self::with_rule) but only on the given user turn
    /// (1-based).
    pub fn with_turn_rule(
        mut self,
        contains: &[&str],
        turn: usize,
        response: impl Into<String>,
    ) -> Self {
        self.script.rules.push(Rule {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            last: Vec::new(),
            turn: Some(turn),
            response: response.into(),
        });
        self
    }

    pub fn with_tree(mut self, contains: &[&str], tree: Vec<TreeNode>) -> Self {
        self.script.trees.push(ScopedTree {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            tree,
        });
        self
    }

    pub fn with_distribution(
        mut self,
        prompt: &str,
        partial: &str,
        dist: Vec<(String, f64)>,
    ) -> Self {
        self.script
            .token_tree
            .insert(context_key(prompt, partial), dist);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.script).expect("script serializes")
    }

    fn respond(&self, conversation: &Conversation) -> Option<&str> {
        let last = conversation.last_user()?;
        if let Some(r) = self.script.responses.get(last) {
            return Some(r);
        }
        let transcript: String = conversation
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let turns = conversation.user_turns();
        self.script
            .rules
            .iter()
            .find(|r| {
                r.turn.is_none_or(|t| t == turns)
                    && r.contains.iter().all(|s| transcript.contains(s.as_str()))
                    && r.last.iter().all(|s| last.contains(s.as_str()))
            })
            .map(|r| r.response.as_str())
    }

    fn replay(&self, prompt: &str, partial: &str) -> Result<Vec<(String, f64)>, LlmError> {
        let mut c = Conversation::new();
        c.push(super::Role::User, prompt);
        let response = self
            .respond(&c)
            .ok_or_else(|| LlmError::Backend("no script entry".into()))?;
        let mut sql = strip_decorations(response).unwrap_or_else(|_| response.trim().to_string());
        if !sql.trim_end().ends_with(';') {
            sql.push(';');
        }
        let rest = sql.strip_prefix(partial).ok_or_else(|| {
            LlmError::Backend("partial answer diverges from scripted response".into())
        })?;
        match chunk_re().find(rest) {
            Some(m) => Ok(vec![(m.as_str().to_string(), 1.0)]),
            None => Err(LlmError::Backend("scripted response exhausted".into())),
        }
    }
}

impl LlmBackend for ScriptedBackend {
    fn chat(
        &self,
        conversation: &Conversation,
        _config: &LlmConfig,
    ) -> Result<Completion, LlmError> {
        let text = self
            .respond(conversation)
            .ok_or_else(|| LlmError::Backend("no script entry".into()))?
            .to_string();
        let prompt_chars: String = conversation
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect();
        Ok(Completion {
            tokens: TokenCount {
                prompt: approx_tokens(&prompt_chars),
                completion: approx_tokens(&text),
            },
            text,
        })
    }

    fn next_tokens(
        &self,
        prompt: &str,
        partial: &str,
        k: usize,
        _config: &LlmConfig,
    ) -> Result<(TokenDistribution, TokenCount), LlmError> {
        let pairs = if let Some(d) = self.script.token_tree.get(&context_key(prompt, partial)) {
            d.clone()
        } else if let Some(scoped) = self
            .script
            .trees
            .iter()
            .find(|t| t.contains.iter().all(|s| prompt.contains(s.as_str())))
        {
            let children = walk(&scoped.tree, partial)
                .ok_or_else(|| LlmError::Backend("partial answer not in token tree".into()))?;
            if children.is_empty() {
                return Err(LlmError::Backend("token tree has no continuation".into()));
            }
            children.iter().map(|n| (n.token.clone(), n.prob)).collect()
        } else {
            self.replay(prompt, partial)?
        };
        let dist = TokenDistribution::top_k(pairs, k);
        let tokens = TokenCount {
            prompt: approx_tokens(prompt) + approx_tokens(partial),
            completion: 1,
        };
        Ok((dist, tokens))
    }
}
