//! Randomized scripted ensemble runs checked against an independent
//! reduction over the scripted plans.

use std::sync::Arc;

use super::script::{marker, turns};
use lithe_core::db::{ColumnInfo, FixedCostEngine, SchemaCatalog, TableInfo};
use lithe_core::equiv::{EquivalenceStatus, FixedOracle};
use lithe_core::llm::{LlmConfig, LlmGateway, ScriptedBackend};
use lithe_core::pipeline::{FailureKind, OutcomeReason, RewriteContext, MAX_REPAIRS};
use lithe_core::prompts::PromptId;
use lithe_core::sql::parse;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORIGINAL: &str = "SELECT a FROM t WHERE b = 1";
const BROKEN: &str = "SELECT a FROM t WHERE;";
const MULTIPLIERS: [f64; 7] = [0.1, 0.25, 0.5, 0.5, 0.9, 1.0, 1.5];

fn catalog() -> SchemaCatalog {
    let col = |name: &str| ColumnInfo {
        name: name.into(),
        data_type: "integer".into(),
        nullable: false,
    };
    SchemaCatalog {
        tables: vec![TableInfo {
            name: "t".into(),
            columns: vec![col("a"), col("b")],
            primary_key: vec!["a".into()],
            row_estimate: 1000.0,
        }],
        foreign_keys: vec![],
    }
}

/// What one prompt is scripted to do.
struct Plan {
    id: PromptId,
    broken: usize,
    sql: String,
    cost: f64,
    equivalent: bool,
}

impl Plan {
    /// Cost this prompt contributes if it survives every gate.
    fn accepted_cost(&self, original: f64) -> Option<f64> {
        (self.broken <= MAX_REPAIRS && self.cost < original && self.equivalent).then_some(self.cost)
    }
}

pub struct RunReport {
    pub kind: OutcomeReason,
    pub max_repairs: usize,
    /// Largest number of calls a prompt made beyond its own turns.
    pub max_extra_calls: usize,
}

/// Builds, runs and checks one randomized ensemble; panics on any
/// violation.
pub fn randomized_run(run: u64) -> RunReport {
    let mut rng = ChaCha8Rng::seed_from_u64(run);
    let original_cost = rng.gen_range(50..2000) as f64;
    let mut ids = PromptId::ENSEMBLE.to_vec();
    ids.shuffle(&mut rng);
    ids.truncate(rng.gen_range(1..=ids.len()));

    let mut engine = FixedCostEngine::new()
        .with_cost(ORIGINAL, original_cost)
        .with_default_cost(original_cost * 10.0)
        .with_catalog(catalog());
    let mut oracle = FixedOracle::new(EquivalenceStatus::LikelyEquivalent);
    let mut script = ScriptedBackend::new();
    let mut plans = Vec::new();
    for (n, &id) in ids.iter().enumerate() {
        let sql = format!("SELECT a FROM t WHERE b = 1 AND {n} = {n}");
        let cost = original_cost * MULTIPLIERS[rng.gen_range(0..MULTIPLIERS.len())];
        let equivalent = rng.gen_bool(0.7);
        let broken = rng.gen_range(0..=MAX_REPAIRS + 2);
        engine = engine.with_cost(&sql, cost);
        if !equivalent {
            oracle = oracle.with_verdict(&sql, EquivalenceStatus::NotEquivalent);
        }
        let m = marker(id);
        for turn in 0..broken {
            script = script.with_turn_rule(&[m.as_str()], turns(id) + turn, BROKEN);
        }
        script = script.with_turn_rule(&[m.as_str()], turns(id) + broken, format!("{sql};"));
        plans.push(Plan {
            id,
            broken,
            sql,
            cost,
            equivalent,
        });
    }
    script = script.with_rule(&[], &["Do not rewrite the query yet"], "Noted.");

    let llm = LlmGateway::new(Arc::new(script), LlmConfig::default()).unwrap();
    let ctx = RewriteContext::new(Arc::new(engine), llm, Arc::new(oracle));
    let out = ctx.run_ensemble(&parse(ORIGINAL).unwrap(), &ids).unwrap();

    assert!(out.result_cost <= out.original_cost, "run {run}");
    let (mut max_repairs, mut max_extra_calls) = (0, 0);
    assert_eq!(out.original_cost, original_cost);
    assert_eq!(
        out.candidates.len() + out.failures.len(),
        ids.len(),
        "run {run}"
    );

    for c in &out.candidates {
        max_repairs = max_repairs.max(c.repair_attempts);
        max_extra_calls = max_extra_calls.max(c.usage.calls as usize - turns(c.prompt_id));
        let plan = plans.iter().find(|p| p.id == c.prompt_id).unwrap();
        assert_eq!(c.repair_attempts, plan.broken, "run {run} {}", c.prompt_id);
        assert_eq!(Some(c.cost.total_cost), plan.accepted_cost(original_cost));
    }
    for f in &out.failures {
        max_repairs = max_repairs.max(f.repair_attempts);
        max_extra_calls =
            max_extra_calls.max((f.usage.calls as usize).saturating_sub(turns(f.prompt_id)));
        let plan = plans.iter().find(|p| p.id == f.prompt_id).unwrap();
        let expected = if plan.broken > MAX_REPAIRS {
            FailureKind::SyntaxExhausted
        } else if plan.cost >= original_cost {
            FailureKind::Regression
        } else {
            assert!(!plan.equivalent);
            FailureKind::NotEquivalent
        };
        assert_eq!(f.kind, expected, "run {run} {}: {}", f.prompt_id, f.detail);
    }

    // Independent reduction: cheapest survivor, earliest prompt id on ties.
    let mut sorted: Vec<&Plan> = plans.iter().collect();
    sorted.sort_by_key(|p| p.id);
    let best = sorted
        .iter()
        .filter_map(|p| p.accepted_cost(original_cost).map(|c| (c, *p)))
        .fold(None::<(f64, &Plan)>, |acc, (c, p)| match acc {
            Some((bc, _)) if bc <= c => acc,
            _ => Some((c, p)),
        });
    match best {
        Some((cost, plan)) => {
            assert_eq!(out.reason, OutcomeReason::Improved, "run {run}");
            assert_eq!(out.result_cost, cost, "run {run}");
            assert_eq!(out.chosen_prompt, Some(plan.id), "run {run}");
            assert_eq!(
                out.result.fingerprint(),
                parse(&plan.sql).unwrap().fingerprint()
            );
        }
        None => {
            assert_eq!(out.result.text(), ORIGINAL, "run {run}");
            assert_eq!(out.result_cost, original_cost);
            let reason = if plans.iter().all(|p| p.broken > MAX_REPAIRS) {
                OutcomeReason::AllFailedSyntax
            } else if plans
                .iter()
                .all(|p| p.broken <= MAX_REPAIRS && p.cost < original_cost && !p.equivalent)
            {
                OutcomeReason::AllFailedEquivalence
            } else {
                OutcomeReason::NoImprovement
            };
            assert_eq!(out.reason, reason, "run {run}");
        }
    }
    RunReport {
        kind: out.reason,
        max_repairs,
        max_extra_calls,
    }
}
