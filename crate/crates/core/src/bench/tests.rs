use std::collections::BTreeMap;
use std::sync::Arc;

use super::*;
use crate::clock::FrozenClock;
use crate::db::FixedCostEngine;
use crate::equiv::{EquivalenceStatus, FixedOracle};
use crate::llm::{LlmConfig, LlmGateway, ScriptedBackend};

const Q1: &str = "SELECT a FROM t WHERE b = 1";
const Q1_FAST: &str = "SELECT a FROM t WHERE b = 1 LIMIT ALL";
const Q2: &str = "SELECT a FROM u WHERE b = 2";
const Q3: &str = "SELECT a FROM v WHERE b = 3";

fn workload(fpr: Option<Vec<&str>>) -> Workload {
    let spec = WorkloadSpec {
        name: "tiny".into(),
        queries: vec![],
        fpr_ids: fpr.map(|v| v.into_iter().map(String::from).collect()),
        best_known: BTreeMap::from([("q1".to_string(), 4.0)]),
        db: None,
    };
    let texts = [("q1", Q1), ("q2", Q2), ("q3", Q3)];
    Workload::from_texts(
        spec,
        texts
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
    )
    .unwrap()
}

/// q1 has a 4x rewrite from B2; q2 has nothing better; q3 cannot be costed.
fn context(jobs: usize) -> RewriteContext {
    let engine = FixedCostEngine::new()
        .with_cost(Q1, 100.0)
        .with_cost(Q1_FAST, 25.0)
        .with_cost(Q2, 50.0);
    let script = ScriptedBackend::new()
        .with_rule(
            &[Q1, "semantic and functional equivalence"],
            &[],
            format!("{Q1_FAST};"),
        )
        .with_rule(&[], &["Do not rewrite the query yet"], "Noted.")
        .with_rule(&[], &["RULE: <id>"], "RULE: NONE")
        .with_rule(&[Q1], &[], format!("{Q1};"))
        .with_rule(&[Q2], &[], format!("{Q2};"));
    let llm = LlmGateway::new(Arc::new(script), LlmConfig::default()).unwrap();
    RewriteContext::new(
        Arc::new(engine),
        llm,
        Arc::new(FixedOracle::new(EquivalenceStatus::LikelyEquivalent)),
    )
    .with_clock(Arc::new(FrozenClock::new()))
    .with_executor(crate::exec::Executor::with_jobs(jobs))
}

fn search() -> MctsConfig {
    MctsConfig {
        iter_max: 3,
        ..MctsConfig::default()
    }
}

fn run(mode: BenchMode, fpr: Option<Vec<&str>>) -> BenchmarkReport {
    run_benchmark(&workload(fpr), mode, &context(1), &search())
}

#[test]
fn ensemble_report() {
    let r = run(BenchMode::Ensemble, Some(vec!["q1", "q2"]));
    assert_eq!(r.report_version, 1);
    let q1 = &r.records[0];
    assert_eq!((q1.speedup, q1.is_pr, q1.is_mpr), (4.0, true, true));
    assert_eq!(q1.prompt_used, Some(PromptId::B2));
    assert_eq!(q1.equivalence, Some(EquivalenceStatus::LikelyEquivalent));
    // R4 and R6 need a schema this engine lacks, so they fail without a call.
    assert_eq!(q1.calls, 10);
    let q2 = &r.records[1];
    assert_eq!((q2.speedup, q2.is_pr, q2.prompt_used), (1.0, false, None));
    let q3 = &r.records[2];
    assert!(q3.error.as_deref().unwrap().contains("cannot cost"));
    assert_eq!(q3.calls, 0);

    let a = &r.aggregates;
    assert_eq!(
        (a.queries, a.errors, a.pr_count, a.mpr_count, a.gm_queries),
        (3, 1, 1, 1, 2)
    );
    assert_eq!(a.speedup_gm, Some(2.0));
    assert_eq!(a.total_calls, 20);
    assert!(r.flags.is_empty());
    assert!(r.is_consistent());
    assert!(r.unverified_prs().is_empty());
}

#[test]
fn fpr_flags() {
    let r = run(BenchMode::Ensemble, Some(vec![]));
    assert_eq!(r.aggregates.speedup_gm, None);
    assert_eq!(r.flags, vec![FLAG_NO_FPR]);
    let r = run(BenchMode::Ensemble, None);
    assert_eq!(r.flags, vec![FLAG_GM_OVER_ALL]);
    assert_eq!(r.aggregates.gm_queries, 3);
    assert!((r.aggregates.speedup_gm.unwrap() - 4f64.cbrt()).abs() < 1e-12);
}

#[test]
fn reports_are_reproducible() {
    for mode in BenchMode::ALL {
        let a = run(mode, Some(vec!["q1"])).to_json();
        let b = run(mode, Some(vec!["q1"])).to_json();
        assert_eq!(a, b, "{mode}");
        assert_eq!(BenchmarkReport::from_json(&a).unwrap().to_json(), a);
    }
}

#[test]
fn parallel_run_matches_sequential() {
    let seq = run_benchmark(
        &workload(None),
        BenchMode::EnsembleMcts,
        &context(1),
        &search(),
    );
    let par = run_benchmark(
        &workload(None),
        BenchMode::EnsembleMcts,
        &context(4),
        &search(),
    );
    assert_eq!(seq.records, par.records);
}

#[test]
fn mode_ladder() {
    let e = run(BenchMode::Ensemble, None);
    let m = run(BenchMode::EnsembleMcts, None);
    let c = run(BenchMode::ClassifierMcts, None);
    assert!(m.aggregates.pr_count >= e.aggregates.pr_count);
    assert!(c.aggregates.total_calls < m.aggregates.total_calls);
    assert!(m.aggregates.total_calls > e.aggregates.total_calls);
}

#[test]
fn text_table_lists_every_query() {
    let r = run(BenchMode::Ensemble, Some(vec!["q1", "q2"]));
    let t = r.to_text();
    let lines: Vec<&str> = t.lines().collect();
    assert!(lines[0].starts_with("id"));
    assert!(lines[2].starts_with("q1 ") && lines[2].contains("4.00") && lines[2].contains("B2"));
    assert!(lines[4].contains("error:"));
    assert!(t.contains("PR 1  MPR 1"));
    assert!(t.contains("SpeedupGM 2.000 over 2 queries"));
}

#[test]
fn modes_parse() {
    for m in BenchMode::ALL {
        assert_eq!(m.as_str().parse::<BenchMode>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
    }
    assert!("mcts".parse::<BenchMode>().is_err());
}
