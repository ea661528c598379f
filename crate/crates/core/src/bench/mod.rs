//! Workload runs and their reports.

mod metrics;
mod report;
mod workload;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{
    estimate_usd, is_mpr, is_productive, speedup_gm, tokens_usd, MetricError, MPR_TOLERANCE,
    PR_THRESHOLD,
};
pub use report::{
    Aggregates, BenchmarkReport, QueryRecord, FLAG_GM_OVER_ALL, FLAG_NO_FPR, REPORT_VERSION,
};
pub use workload::{QueryEntry, Workload, WorkloadError, WorkloadSpec};

use crate::classifier::classified_rewrite;
use crate::mcts::{self, MctsConfig};
use crate::pipeline::{RewriteContext, RewriteOutcome};
use crate::prompts::PromptId;
use crate::sql::SqlQuery;

/// How far each query goes: prompts only, prompts then search, or a
/// classifier-picked prompt then search.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub enum BenchMode {
    #[default]
    #[serde(rename = "ensemble")]
    Ensemble,
    #[serde(rename = "ensemble+mcts")]
    EnsembleMcts,
    #[serde(rename = "classifier+mcts")]
    ClassifierMcts,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [
        BenchMode::Ensemble,
        BenchMode::EnsembleMcts,
        BenchMode::ClassifierMcts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Ensemble => "ensemble",
            BenchMode::EnsembleMcts => "ensemble+mcts",
            BenchMode::ClassifierMcts => "classifier+mcts",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| {
                format!("unknown mode {s:?} (expected ensemble, ensemble+mcts or classifier+mcts)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Queries rewritten concurrently. 1 keeps token accounting and traces
    /// in query order.
    pub jobs: usize,
    pub mode: BenchMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            jobs: 1,
            mode: BenchMode::Ensemble,
        }
    }
}

/// Rewrites one query according to `mode`.
pub fn rewrite_query(
    ctx: &RewriteContext,
    query: &SqlQuery,
    mode: BenchMode,
    search: &MctsConfig,
) -> Result<RewriteOutcome, String> {
    let pq = ctx.prepare(query).map_err(|e| e.to_string())?;
    let out = match mode {
        BenchMode::Ensemble => ctx.run_ensemble_prepared(&pq, &PromptId::ENSEMBLE),
        BenchMode::EnsembleMcts => {
            let first = ctx.run_ensemble_prepared(&pq, &PromptId::ENSEMBLE);
            mcts::refine(ctx, &pq, &first, mcts::choose_seed_prompt(&first), search)
                .map_err(|e| e.to_string())?
        }
        BenchMode::ClassifierMcts => {
            classified_rewrite(ctx, &pq, search).map_err(|e| e.to_string())?
        }
    };
    Ok(out)
}

fn record(id: &str, w: &Workload, out: &RewriteOutcome, elapsed_ms: f64) -> QueryRecord {
    let winner = out.winner();
    let equivalence = winner.map(|c| c.equivalence.status);
    let speedup = out.speedup();
    let is_pr = out.improved() && report::productive(speedup, equivalence);
    QueryRecord {
        id: id.to_string(),
        original_cost: Some(out.original_cost),
        rewrite_cost: Some(out.result_cost),
        speedup,
        is_pr,
        is_mpr: is_pr
            && w.spec
                .best_known
                .get(id)
                .is_some_and(|&best| is_mpr(speedup, best)),
        prompt_used: out.chosen_prompt,
        rewrite: out.result.text().to_string(),
        tokens: out.usage.total_tokens(),
        calls: out.usage.calls,
        elapsed_ms,
        equivalence,
        error: None,
    }
}

/// Rewrites every query of the workload and summarizes. Queries run on the
/// context's executor; a failing query is recorded and the run continues.
pub fn run_benchmark(
    w: &Workload,
    mode: BenchMode,
    ctx: &RewriteContext,
    search: &MctsConfig,
) -> BenchmarkReport {
    let records = ctx.exec.map(&w.queries, |(id, q)| {
        let ctx = RewriteContext {
            llm: ctx.llm.fork(),
            ..ctx.clone()
        };
        let start = ctx.clock.now();
        let r = rewrite_query(&ctx, q, mode, search);
        let elapsed_ms = ctx.clock.since(start).as_secs_f64() * 1000.0;
        match r {
            Ok(out) => record(id, w, &out, elapsed_ms),
            Err(e) => {
                log::warn!("query {id}: {e}");
                let spent = ctx.llm.usage();
                let mut r = report::failed_record(id, None, e, spent.total_tokens(), spent.calls);
                r.elapsed_ms = elapsed_ms;
                r
            }
        }
    });
    let price = ctx.llm.config().price_per_million_tokens;
    BenchmarkReport::new(&w.spec.name, mode, records, w.spec.fpr_ids.clone(), price)
}

#[cfg(test)]
mod tests;
