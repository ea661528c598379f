//! One-call rule selection: the model reads every rule with an example and a
//! counter-example and names the rule that fits the query, or none. The
//! chosen rule's prompt alone is evaluated and then seeds the search, which
//! saves most of the ensemble's calls at some cost in quality.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::llm::{Conversation, LlmError, UsageSnapshot};
use crate::mcts::{self, MctsConfig, MctsError};
use crate::pipeline::{PreparedQuery, RewriteContext, RewriteOutcome};
use crate::prompts::PromptId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleChoice {
    /// The selected rule; `None` when no rule applies or the answer could
    /// not be read.
    pub choice: Option<PromptId>,
    /// The rest of the model's answer.
    pub rationale: String,
    /// Answers received (2 when a reprompt was needed).
    pub answers: usize,
    pub usage: UsageSnapshot,
}

impl RuleChoice {
    pub fn label(&self) -> &'static str {
        self.choice.map_or("NONE", PromptId::as_str)
    }
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s*`]*RULE\s*:\s*(R[1-6]|NONE)[\s*`.]*$").unwrap())
}

/// Reads a classifier answer. `Some(None)` is an explicit NONE; `None`
/// means the answer does not follow the format. With several answer lines
/// the last one counts.
pub fn parse_answer(text: &str) -> Option<Option<PromptId>> {
    let caps = answer_re().captures_iter(text).last()?;
    let id = caps[1].to_ascii_uppercase();
    if id == "NONE" {
        return Some(None);
    }
    Some(Some(id.parse().ok()?))
}

fn rationale(text: &str) -> String {
    answer_re().replace_all(text, "").trim().to_string()
}

/// Asks the model which rule applies to the query. An unreadable answer
/// gets one stricter reprompt in the same conversation, then NONE.
pub fn classify(ctx: &RewriteContext, pq: &PreparedQuery) -> Result<RuleChoice, LlmError> {
    let session = ctx.llm.session();
    let mut conversation = Conversation::new();
    let prompt = ctx.prompts.render_classify(&pq.query, pq.prompt_context());
    let mut answer = session.chat(&mut conversation, &prompt)?;
    let mut answers = 1;
    let mut parsed = parse_answer(&answer);
    if parsed.is_none() {
        answer = session.chat(&mut conversation, ctx.prompts.classify_retry())?;
        answers += 1;
        parsed = parse_answer(&answer);
    }
    let choice = RuleChoice {
        choice: parsed.flatten(),
        rationale: match parsed {
            Some(_) => rationale(&answer),
            None => format!("unreadable answer: {}", answer.trim()),
        },
        answers,
        usage: session.usage(),
    };
    ctx.events.emit(
        "classify",
        json!({"choice": choice.label(), "answers": answers, "rationale": choice.rationale}),
    );
    Ok(choice)
}

/// Classifier path: the chosen rule's prompt alone (or the four basic
/// prompts for NONE), then a search seeded accordingly.
pub fn classified_rewrite(
    ctx: &RewriteContext,
    pq: &PreparedQuery,
    cfg: &MctsConfig,
) -> Result<RewriteOutcome, MctsError> {
    let (choice, mut notes, usage) = match classify(ctx, pq) {
        Ok(c) => {
            let note = format!("classifier chose {}", c.label());
            (c.choice, vec![note], c.usage)
        }
        Err(e) => (
            None,
            vec![format!("classifier failed, using basic prompts: {e}")],
            UsageSnapshot::default(),
        ),
    };
    // A rule whose context is missing cannot be rendered; fall back.
    let choice = choice.filter(|&id| {
        let ok = ctx
            .prompts
            .render(&pq.query, id, pq.prompt_context())
            .is_ok();
        if !ok {
            notes.push(format!("{id} lacks its context, using basic prompts"));
        }
        ok
    });
    let (first, seed) = match choice {
        Some(rule) => (ctx.run_ensemble_prepared(pq, &[rule]), rule),
        None => {
            let first = ctx.run_ensemble_prepared(pq, &PromptId::BASIC);
            let seed = mcts::choose_seed_prompt(&first);
            (first, seed)
        }
    };
    let mut out = mcts::refine(ctx, pq, &first, seed, cfg)?;
    out.usage = out.usage + usage;
    notes.append(&mut out.diagnostics);
    out.diagnostics = notes;
    Ok(out)
}

#[cfg(test)]
mod tests;
