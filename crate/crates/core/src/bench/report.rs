use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{is_productive, speedup_gm, tokens_usd};
use super::BenchMode;
use crate::equiv::EquivalenceStatus;
use crate::prompts::PromptId;

pub const REPORT_VERSION: u32 = 1;

pub const FLAG_NO_FPR: &str = "no FPR set";
pub const FLAG_GM_OVER_ALL: &str = "no FPR list; speedup_gm taken over all queries";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    /// Planner cost of the input; `None` when it could not be costed.
    pub original_cost: Option<f64>,
    pub rewrite_cost: Option<f64>,
    /// 1 when the query was left unchanged.
    pub speedup: f64,
    pub is_pr: bool,
    pub is_mpr: bool,
    pub prompt_used: Option<PromptId>,
    pub rewrite: String,
    pub tokens: u64,
    pub calls: u64,
    pub elapsed_ms: f64,
    pub equivalence: Option<EquivalenceStatus>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub queries: usize,
    pub errors: usize,
    pub pr_count: usize,
    pub mpr_count: usize,
    /// Over the FPR queries; `None` when that set is empty.
    pub speedup_gm: Option<f64>,
    pub gm_queries: usize,
    pub avg_tokens: f64,
    pub avg_calls: f64,
    pub avg_time_ms: f64,
    pub total_tokens: u64,
    pub total_calls: u64,
    /// Average per query.
    pub est_cost_usd: f64,
    pub total_cost_usd: f64,
}

impl Aggregates {
    /// Everything here is a function of the records, so a report can be
    /// checked by recomputing it.
    pub fn compute(
        records: &[QueryRecord],
        fpr_ids: Option<&[String]>,
        price_per_million: f64,
    ) -> (Self, Vec<String>) {
        let n = records.len();
        let avg = |total: f64| if n == 0 { 0.0 } else { total / n as f64 };
        let mut flags = Vec::new();
        let gm_over: Vec<f64> = match fpr_ids {
            Some(ids) => records
                .iter()
                .filter(|r| ids.contains(&r.id))
                .map(|r| r.speedup)
                .collect(),
            None => {
                flags.push(FLAG_GM_OVER_ALL.to_string());
                records.iter().map(|r| r.speedup).collect()
            }
        };
        if fpr_ids.is_some_and(|ids| ids.is_empty()) {
            flags.push(FLAG_NO_FPR.to_string());
        }
        let total_tokens: u64 = records.iter().map(|r| r.tokens).sum();
        let total_calls: u64 = records.iter().map(|r| r.calls).sum();
        let aggregates = Self {
            queries: n,
            errors: records.iter().filter(|r| r.error.is_some()).count(),
            pr_count: records.iter().filter(|r| r.is_pr).count(),
            mpr_count: records.iter().filter(|r| r.is_mpr).count(),
            speedup_gm: speedup_gm(&gm_over).ok(),
            gm_queries: gm_over.len(),
            avg_tokens: avg(total_tokens as f64),
            avg_calls: avg(total_calls as f64),
            avg_time_ms: avg(records.iter().map(|r| r.elapsed_ms).sum()),
            total_tokens,
            total_calls,
            est_cost_usd: avg(tokens_usd(total_tokens, price_per_million)),
            total_cost_usd: tokens_usd(total_tokens, price_per_million),
        };
        (aggregates, flags)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub report_version: u32,
    pub workload: String,
    pub mode: BenchMode,
    pub price_per_million_tokens: f64,
    pub fpr_ids: Option<Vec<String>>,
    pub records: Vec<QueryRecord>,
    pub aggregates: Aggregates,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl BenchmarkReport {
    pub fn new(
        workload: &str,
        mode: BenchMode,
        records: Vec<QueryRecord>,
        fpr_ids: Option<Vec<String>>,
        price_per_million: f64,
    ) -> Self {
        let (aggregates, flags) =
            Aggregates::compute(&records, fpr_ids.as_deref(), price_per_million);
        Self {
            report_version: REPORT_VERSION,
            workload: workload.to_string(),
            mode,
            price_per_million_tokens: price_per_million,
            fpr_ids,
            records,
            aggregates,
            flags,
        }
    }

    /// True when the stored aggregates match a recomputation.
    pub fn is_consistent(&self) -> bool {
        let (a, f) = Aggregates::compute(
            &self.records,
            self.fpr_ids.as_deref(),
            self.price_per_million_tokens,
        );
        a == self.aggregates && f == self.flags
    }

    /// Rows where a productive rewrite lacks an accepting verdict.
    pub fn unverified_prs(&self) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.is_pr && !r.equivalence.is_some_and(EquivalenceStatus::accepts))
            .map(|r| r.id.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Aligned plain-text table followed by the aggregates.
    pub fn to_text(&self) -> String {
        let head = [
            "id",
            "orig cost",
            "new cost",
            "speedup",
            "PR",
            "MPR",
            "prompt",
            "tokens",
            "calls",
            "equivalence",
        ];
        let rows: Vec<[String; 10]> = self
            .records
            .iter()
            .map(|r| {
                let cost = |c: Option<f64>| c.map_or("-".to_string(), |c| format!("{c:.2}"));
                let yes = |b: bool| if b { "yes" } else { "" }.to_string();
                [
                    r.id.clone(),
                    cost(r.original_cost),
                    cost(r.rewrite_cost),
                    format!("{:.2}", r.speedup),
                    yes(r.is_pr),
                    yes(r.is_mpr),
                    r.prompt_used.map_or("-".into(), |p| p.to_string()),
                    r.tokens.to_string(),
                    r.calls.to_string(),
                    match (&r.error, r.equivalence) {
                        (Some(e), _) => format!("error: {e}"),
                        (None, Some(s)) => format!("{s:?}"),
                        (None, None) => "-".into(),
                    },
                ]
            })
            .collect();
        let mut widths = head.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &head.map(String::from));
        line(&mut out, &widths.map(|w| "-".repeat(w)));
        for row in &rows {
            line(&mut out, row);
        }
        let a = &self.aggregates;
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "workload {} ({}), {} queries, {} errors",
            self.workload, self.mode, a.queries, a.errors
        );
        let _ = writeln!(out, "PR {}  MPR {}", a.pr_count, a.mpr_count);
        let gm = a.speedup_gm.map_or("n/a".into(), |g| format!("{g:.3}"));
        let _ = writeln!(out, "SpeedupGM {gm} over {} queries", a.gm_queries);
        let _ = writeln!(
            out,
            "avg tokens {:.1}  avg calls {:.1}  avg time {:.1} ms  est. cost ${:.4}/query (${:.4} total)",
            a.avg_tokens, a.avg_calls, a.avg_time_ms, a.est_cost_usd, a.total_cost_usd
        );
        for f in &self.flags {
            let _ = writeln!(out, "note: {f}");
        }
        out
    }
}

/// Record for a query whose rewrite failed outright.
pub(crate) fn failed_record(
    id: &str,
    original_cost: Option<f64>,
    error: String,
    tokens: u64,
    calls: u64,
) -> QueryRecord {
    QueryRecord {
        id: id.to_string(),
        original_cost,
        rewrite_cost: original_cost,
        speedup: 1.0,
        is_pr: false,
        is_mpr: false,
        prompt_used: None,
        rewrite: String::new(),
        tokens,
        calls,
        elapsed_ms: 0.0,
        equivalence: None,
        error: Some(error),
    }
}

pub(crate) fn productive(speedup: f64, equivalence: Option<EquivalenceStatus>) -> bool {
    is_productive(speedup) && equivalence.is_some_and(EquivalenceStatus::accepts)
}
