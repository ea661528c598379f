mod common;

use std::collections::BTreeMap;

use common::fixture;
use common::micro::Micro;
use lithe_core::bench::{rewrite_query, BenchMode, BenchmarkReport};
use lithe_core::classifier::classify;
use lithe_core::pipeline::FailureKind;
use lithe_core::prompts::PromptId;
use serde::Deserialize;

#[derive(Deserialize)]
struct Truth {
    productive: BTreeMap<String, Vec<String>>,
    improved_not_productive: BTreeMap<String, Vec<String>>,
    winning_prompt: BTreeMap<String, PromptId>,
    repaired: BTreeMap<String, PromptId>,
    not_equivalent: BTreeMap<String, PromptId>,
    not_cheaper: BTreeMap<String, PromptId>,
    classifier: BTreeMap<String, PromptId>,
}

fn truth() -> Truth {
    serde_json::from_str(&fixture("micro/expected.json")).unwrap()
}

fn ids(r: &BenchmarkReport, pred: impl Fn(&lithe_core::bench::QueryRecord) -> bool) -> Vec<String> {
    r.records
        .iter()
        .filter(|x| pred(x))
        .map(|x| x.id.clone())
        .collect()
}

#[test]
fn every_mode_matches_the_ground_truth() {
    let Some(m) = Micro::setup() else { return };
    let t = truth();
    let mut calls = BTreeMap::new();
    for mode in BenchMode::ALL {
        let r = m.run(mode);
        let key = mode.as_str();
        assert_eq!(ids(&r, |x| x.is_pr), t.productive[key], "{mode}");
        assert_eq!(
            ids(&r, |x| x.prompt_used.is_some() && !x.is_pr),
            t.improved_not_productive[key],
            "{mode}"
        );
        for rec in &r.records {
            assert!(rec.error.is_none(), "{mode} {}: {:?}", rec.id, rec.error);
            assert!(rec.rewrite_cost.unwrap() <= rec.original_cost.unwrap());
            if let Some(p) = rec.prompt_used {
                assert_eq!(p, t.winning_prompt[&rec.id], "{mode} {}", rec.id);
            }
            // Best known speedups are exactly the scripted ones.
            assert_eq!(rec.is_mpr, rec.is_pr, "{mode} {}", rec.id);
        }
        assert!(r.is_consistent());
        assert!(r.unverified_prs().is_empty());
        assert_eq!(r.aggregates.gm_queries, 6);
        calls.insert(mode, r.aggregates.total_calls);
    }
    assert!(
        calls[&BenchMode::ClassifierMcts] < calls[&BenchMode::EnsembleMcts],
        "{calls:?}"
    );
}

#[test]
fn scripted_failures_happen_where_designed() {
    let Some(m) = Micro::setup() else { return };
    let t = truth();
    let ctx = m.context();
    let query = |id: &str| &m.workload.queries.iter().find(|(q, _)| q == id).unwrap().1;
    let search = &m.config.mcts;

    for (id, prompt) in &t.repaired {
        let out = rewrite_query(&ctx, query(id), BenchMode::Ensemble, search).unwrap();
        let winner = out.winner().unwrap();
        assert_eq!(
            (winner.prompt_id, winner.repair_attempts),
            (*prompt, 1),
            "{id}"
        );
    }
    let failure = |id: &str, prompt: PromptId| {
        let out = rewrite_query(&ctx, query(id), BenchMode::Ensemble, search).unwrap();
        assert!(!out.improved(), "{id}");
        out.failures
            .into_iter()
            .find(|f| f.prompt_id == prompt)
            .unwrap()
    };
    for (id, prompt) in &t.not_equivalent {
        let f = failure(id, *prompt);
        assert_eq!(f.kind, FailureKind::NotEquivalent, "{id}: {}", f.detail);
    }
    for (id, prompt) in &t.not_cheaper {
        let f = failure(id, *prompt);
        assert_eq!(f.kind, FailureKind::Regression, "{id}: {}", f.detail);
    }
}

#[test]
fn classifier_picks_the_scripted_rules() {
    let Some(m) = Micro::setup() else { return };
    let t = truth();
    let ctx = m.context();
    for (id, q) in &m.workload.queries {
        let pq = ctx.prepare(q).unwrap();
        let choice = classify(&ctx, &pq).unwrap();
        assert_eq!(choice.choice, t.classifier.get(id).copied(), "{id}");
        assert_eq!(choice.answers, 1);
    }
}
