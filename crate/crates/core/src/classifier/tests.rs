use std::sync::Arc;

use super::*;
use crate::db::{ColumnInfo, FixedCostEngine, SchemaCatalog, TableInfo};
use crate::equiv::{EquivalenceStatus, FixedOracle};
use crate::events::MemorySink;
use crate::llm::{LlmConfig, LlmGateway, ScriptedBackend};
use crate::sql::parse;

const ORIGINAL: &str = "SELECT a FROM t WHERE b = 1";
const CHEAP: &str = "SELECT a FROM t WHERE b = 1 LIMIT ALL";

fn engine() -> FixedCostEngine {
    let col = |name: &str| ColumnInfo {
        name: name.into(),
        data_type: "integer".into(),
        nullable: false,
    };
    FixedCostEngine::new()
        .with_cost(ORIGINAL, 100.0)
        .with_cost(CHEAP, 40.0)
        .with_default_cost(100.0)
        .with_selectivity("t", "b = 1", 0.25)
        .with_catalog(SchemaCatalog {
            tables: vec![TableInfo {
                name: "t".into(),
                columns: vec![col("a"), col("b")],
                primary_key: vec!["a".into()],
                row_estimate: 1000.0,
            }],
            foreign_keys: vec![],
        })
}

/// A rewrite answer the way models write them: reasoning, then the query.
fn reasoned_answer() -> String {
    let reasoning =
        "The query filters t on b and projects a. The predicate is selective, so the planner \
        can use an index on b if one exists; otherwise it scans t once. There are no joins, no \
        subqueries and no repeated computation, so the only change worth making is to give the \
        planner an explicit row limit clause that it can fold away, which keeps the result \
        identical on every instance of the table. Columns and predicates are unchanged. ";
    format!("{}\n\n```sql\n{CHEAP};\n```", reasoning.repeat(3))
}

/// Every rewrite prompt answers `CHEAP`; the classifier answers `verdicts`
/// in turn.
fn script(verdicts: &[&str]) -> ScriptedBackend {
    let mut s = ScriptedBackend::new();
    for (turn, v) in verdicts.iter().enumerate() {
        s = s.with_turn_rule(&["RULE: <id>"], turn + 1, *v);
    }
    s.with_rule(&[], &["Do not rewrite the query yet"], "Noted.")
        .with_rule(&[], &[], reasoned_answer())
}

fn context(script: ScriptedBackend) -> (RewriteContext, Arc<MemorySink>) {
    let sink = Arc::new(MemorySink::default());
    let llm = LlmGateway::new(Arc::new(script), LlmConfig::default()).unwrap();
    let ctx = RewriteContext::new(
        Arc::new(engine()),
        llm,
        Arc::new(FixedOracle::new(EquivalenceStatus::LikelyEquivalent)),
    )
    .with_events(sink.clone());
    (ctx, sink)
}

fn prepared(ctx: &RewriteContext) -> PreparedQuery {
    ctx.prepare(&parse(ORIGINAL).unwrap()).unwrap()
}

fn small_search() -> MctsConfig {
    MctsConfig {
        iter_max: 2,
        ..MctsConfig::default()
    }
}

/// Prompts evaluated by the pipeline, in event order.
fn evaluated(sink: &MemorySink) -> Vec<String> {
    sink.records()
        .into_iter()
        .filter(|r| r["event"] == "candidate" || r["event"] == "rewrite_failure")
        .map(|r| r["prompt_id"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn parses_answer_lines() {
    assert_eq!(parse_answer("RULE: R4"), Some(Some(PromptId::R4)));
    assert_eq!(parse_answer("rule: none"), Some(None));
    assert_eq!(parse_answer("**RULE: R2**"), Some(Some(PromptId::R2)));
    assert_eq!(
        parse_answer("The join is redundant.\nRULE: R4\n"),
        Some(Some(PromptId::R4))
    );
    assert_eq!(parse_answer("RULE: R7"), None);
    assert_eq!(parse_answer("I would apply R4 here."), None);
    assert_eq!(parse_answer("RULE: R4 and maybe R5"), None);
    assert_eq!(parse_answer("RULE: R1\nRULE: R3"), Some(Some(PromptId::R3)));
}

#[test]
fn classify_reads_the_rule() {
    let (ctx, _) = context(script(&["The key join is redundant.\nRULE: R4"]));
    let c = classify(&ctx, &prepared(&ctx)).unwrap();
    assert_eq!(c.choice, Some(PromptId::R4));
    assert_eq!(c.rationale, "The key join is redundant.");
    assert_eq!((c.answers, c.usage.calls), (1, 1));
}

#[test]
fn prose_twice_means_none() {
    let (ctx, _) = context(script(&["Hard to say.", "Still hard to say."]));
    let c = classify(&ctx, &prepared(&ctx)).unwrap();
    assert_eq!(c.choice, None);
    assert_eq!(c.label(), "NONE");
    assert_eq!((c.answers, c.usage.calls), (2, 2));
}

#[test]
fn reprompt_recovers() {
    let (ctx, _) = context(script(&["Hard to say.", "RULE: R3"]));
    let c = classify(&ctx, &prepared(&ctx)).unwrap();
    assert_eq!(c.choice, Some(PromptId::R3));
    assert_eq!(c.answers, 2);
}

#[test]
fn prompt_carries_rules_examples_and_context() {
    let (ctx, _) = context(script(&[]));
    let pq = prepared(&ctx);
    let text = ctx.prompts.render_classify(&pq.query, pq.prompt_context());
    for r in ctx.prompts.rules() {
        assert!(text.contains(&r.text), "{}", r.id);
        assert!(text.contains(r.counter.sql.trim_end()), "{}", r.id);
    }
    assert_eq!(text.matches("Counter-example").count(), 6);
    assert!(text.contains("CREATE TABLE t"));
    assert!(text.contains("0.2500"));
    assert!(text.contains(ORIGINAL));
}

#[test]
fn rule_choice_evaluates_one_prompt() {
    let (ctx, sink) = context(script(&["RULE: R6"]));
    let pq = prepared(&ctx);
    let out = classified_rewrite(&ctx, &pq, &small_search()).unwrap();
    assert_eq!(sink.of_kind("classify").len(), 1);
    assert_eq!(evaluated(&sink), vec!["R6"]);
    assert_eq!(out.chosen_prompt, Some(PromptId::R6));
    assert_eq!(out.result_cost, 40.0);
    assert!(out.diagnostics[0].contains("R6"));
}

#[test]
fn none_falls_back_to_basic_prompts() {
    let (ctx, sink) = context(script(&["RULE: NONE"]));
    let pq = prepared(&ctx);
    let out = classified_rewrite(&ctx, &pq, &small_search()).unwrap();
    assert_eq!(evaluated(&sink), vec!["B1", "B2", "B3", "B4"]);
    assert_eq!(out.chosen_prompt, Some(PromptId::B1));
    assert!(out.result_cost <= out.original_cost);
}

#[test]
fn classified_path_spends_fewer_tokens_than_the_ensemble() {
    let (ctx, _) = context(script(&["RULE: R3"]));
    let pq = prepared(&ctx);
    let classified = classified_rewrite(&ctx, &pq, &small_search()).unwrap();
    let (ctx, _) = context(script(&[]));
    let first = ctx.run_ensemble_prepared(&pq, &PromptId::ENSEMBLE);
    let full = mcts::refine(
        &ctx,
        &pq,
        &first,
        mcts::choose_seed_prompt(&first),
        &small_search(),
    )
    .unwrap();
    assert!(
        classified.usage.total_tokens() < full.usage.total_tokens(),
        "{:?} {:?}",
        classified.usage,
        full.usage
    );
    assert!(classified.usage.calls < full.usage.calls);
}

#[test]
fn classifier_backend_error_uses_basic_prompts() {
    let s = ScriptedBackend::new().with_rule(&[], &["RULE: <id>"], "RULE: R1");
    let (ctx, sink) = context(s);
    let pq = prepared(&ctx);
    // Only the classifier has a script entry; every rewrite fails on the backend.
    let out = classified_rewrite(&ctx, &pq, &small_search()).unwrap();
    assert_eq!(evaluated(&sink), vec!["R1"]);
    assert_eq!(out.result.text(), ORIGINAL);

    let (ctx, sink) = context(ScriptedBackend::new());
    let out = classified_rewrite(&ctx, &pq, &small_search()).unwrap();
    assert_eq!(evaluated(&sink), vec!["B1", "B2", "B3", "B4"]);
    assert!(out.diagnostics[0].starts_with("classifier failed"));
    assert_eq!(out.result_cost, out.original_cost);
}
