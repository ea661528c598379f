//! Prompt-driven rewriting: each prompt gets a fresh conversation, a bounded
//! syntax repair loop, a cost gate and an equivalence gate. The ensemble
//! keeps the cheapest surviving rewrite.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::clock::{Clock, SystemClock};
use crate::db::{CostEstimate, DbError, Engine, SchemaCatalog, SelectivityMap};
use crate::equiv::{CheckDepth, EquivalenceOracle, EquivalenceVerdict};
use crate::events::{fields, EventSink, NullSink};
use crate::exec::Executor;
use crate::llm::{Conversation, LlmGateway, LlmSession, UsageSnapshot};
use crate::prompts::{PromptContext, PromptId, PromptLibrary};
use crate::sql::{analyze, parse, strip_decorations, QueryStructure, SqlError, SqlQuery};

/// Repair rounds allowed after the first answer of a prompt.
pub const MAX_REPAIRS: usize = 5;

/// Denominator floor for speedups, in planner cost units.
pub const SPEEDUP_EPSILON: f64 = 1e-9;

/// `orig / cand`, with the candidate's cost floored at [`SPEEDUP_EPSILON`].
pub fn compute_speedup(orig: &CostEstimate, cand: &CostEstimate) -> f64 {
    speedup_of(orig.total_cost, cand.total_cost)
}

pub(crate) fn speedup_of(orig: f64, cand: f64) -> f64 {
    orig / cand.max(SPEEDUP_EPSILON)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("input query rejected by the engine: {0}")]
    InvalidInput(String),
    #[error("cannot cost the input query: {0}")]
    Cost(DbError),
}

/// Shared services for rewriting. Cheap to clone.
#[derive(Clone)]
pub struct RewriteContext {
    pub engine: Arc<dyn Engine>,
    pub llm: LlmGateway,
    pub prompts: Arc<PromptLibrary>,
    pub oracle: Arc<dyn EquivalenceOracle>,
    pub events: Arc<dyn EventSink>,
    pub clock: Arc<dyn Clock>,
    pub exec: Executor,
    pub max_repairs: usize,
}

impl std::fmt::Debug for RewriteContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RewriteContext")
            .field("llm", &self.llm)
            .field("exec", &self.exec)
            .field("max_repairs", &self.max_repairs)
            .finish_non_exhaustive()
    }
}

/// The input query with everything the prompts and gates need.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub query: SqlQuery,
    pub structure: QueryStructure,
    /// Schema of the referenced tables; `None` when it could not be read.
    pub catalog: Option<SchemaCatalog>,
    pub stats: SelectivityMap,
    pub cost: CostEstimate,
    pub warnings: Vec<String>,
}

impl PreparedQuery {
    pub fn prompt_context(&self) -> PromptContext<'_> {
        PromptContext {
            catalog: self.catalog.as_ref(),
            stats: Some(&self.stats),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteCandidate {
    pub prompt_id: PromptId,
    pub sql: SqlQuery,
    pub cost: CostEstimate,
    pub speedup: f64,
    pub equivalence: EquivalenceVerdict,
    pub usage: UsageSnapshot,
    pub elapsed: Duration,
    pub repair_attempts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    SyntaxExhausted,
    Regression,
    NotEquivalent,
    Backend,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteFailure {
    pub prompt_id: PromptId,
    pub kind: FailureKind,
    pub detail: String,
    pub usage: UsageSnapshot,
    pub repair_attempts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeReason {
    Improved,
    NoImprovement,
    AllFailedSyntax,
    AllFailedEquivalence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub original: SqlQuery,
    /// The chosen rewrite, or the original.
    pub result: SqlQuery,
    pub original_cost: f64,
    pub result_cost: f64,
    pub chosen_prompt: Option<PromptId>,
    pub reason: OutcomeReason,
    pub candidates: Vec<RewriteCandidate>,
    pub failures: Vec<RewriteFailure>,
    /// Tokens spent producing this outcome.
    pub usage: UsageSnapshot,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl RewriteOutcome {
    /// The original query, returned unchanged.
    pub fn unchanged(pq: &PreparedQuery, reason: OutcomeReason) -> Self {
        Self {
            original: pq.query.clone(),
            result: pq.query.clone(),
            original_cost: pq.cost.total_cost,
            result_cost: pq.cost.total_cost,
            chosen_prompt: None,
            reason,
            candidates: Vec::new(),
            failures: Vec::new(),
            usage: UsageSnapshot::default(),
            diagnostics: Vec::new(),
        }
    }

    pub fn speedup(&self) -> f64 {
        speedup_of(self.original_cost, self.result_cost)
    }

    pub fn improved(&self) -> bool {
        self.reason == OutcomeReason::Improved
    }

    /// The candidate that became the result.
    pub fn winner(&self) -> Option<&RewriteCandidate> {
        if !self.improved() {
            return None;
        }
        self.candidates.iter().find(|c| c.sql == self.result)
    }
}

/// Why a candidate text was not accepted as SQL.
#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    /// Worth feeding back to the model.
    Syntax(String),
    /// The engine itself failed.
    Backend(String),
}

/// Turns model output into an engine-validated query.
///
/// Texts the embedded grammar rejects are still offered to the engine, whose
/// parser is authoritative.
pub fn validate_sql(engine: &dyn Engine, answer: &str) -> Result<SqlQuery, Rejection> {
    let text = strip_decorations(answer).map_err(|e| Rejection::Syntax(e.repair_message()))?;
    let query = match parse(&text) {
        Ok(q) => q,
        Err(SqlError::Syntax(_)) => {
            SqlQuery::engine_accepted(text).map_err(|e| Rejection::Syntax(e.repair_message()))?
        }
        Err(e) => return Err(Rejection::Syntax(e.repair_message())),
    };
    match engine.verify_syntax(&query) {
        Ok(()) => Ok(query),
        Err(DbError::Syntax { message, .. }) => Err(Rejection::Syntax(message)),
        Err(e) => Err(Rejection::Backend(e.to_string())),
    }
}

impl RewriteContext {
    /// A context with the built-in prompts, no trace output, the system
    /// clock and sequential execution.
    pub fn new(
        engine: Arc<dyn Engine>,
        llm: LlmGateway,
        oracle: Arc<dyn EquivalenceOracle>,
    ) -> Self {
        Self {
            engine,
            llm,
            prompts: Arc::new(PromptLibrary::builtin()),
            oracle,
            events: Arc::new(NullSink),
            clock: Arc::new(SystemClock::default()),
            exec: Executor::sequential(),
            max_repairs: MAX_REPAIRS,
        }
    }

    pub fn with_prompts(mut self, prompts: PromptLibrary) -> Self {
        self.prompts = Arc::new(prompts);
        self
    }

    pub fn with_events(mut self, events: Arc<dyn EventSink>) -> Self {
        self.events = events;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_executor(mut self, exec: Executor) -> Self {
        self.exec = exec;
        self
    }

    pub fn with_max_repairs(mut self, n: usize) -> Self {
        self.max_repairs = n.min(MAX_REPAIRS);
        self
    }

    /// Validates and costs the input and gathers its schema and predicate
    /// selectivities.
    pub fn prepare(&self, query: &SqlQuery) -> Result<PreparedQuery, PipelineError> {
        match self.engine.verify_syntax(query) {
            Ok(()) => {}
            Err(e @ DbError::Syntax { .. }) => {
                return Err(PipelineError::InvalidInput(e.to_string()))
            }
            Err(e) => return Err(PipelineError::Cost(e)),
        }
        let cost = self
            .engine
            .estimate_cost(query)
            .map_err(PipelineError::Cost)?;
        let structure = analyze(query);
        let mut warnings: Vec<String> = structure.warning.iter().cloned().collect();
        let catalog = match self.engine.fetch_schema(Some(&structure.tables)) {
            Ok(c) if !c.tables.is_empty() => Some(c),
            Ok(_) => {
                warnings.push("no schema found for the referenced tables".into());
                None
            }
            Err(e) => {
                warnings.push(format!("cannot read schema: {e}"));
                None
            }
        };
        let stats = SelectivityMap::collect(self.engine.as_ref(), &structure);
        Ok(PreparedQuery {
            query: query.clone(),
            structure,
            catalog,
            stats,
            cost,
            warnings,
        })
    }

    /// Runs one prompt in a fresh conversation through repair, cost and
    /// equivalence gates.
    pub fn rewrite_with_prompt(
        &self,
        pq: &PreparedQuery,
        id: PromptId,
    ) -> Result<RewriteCandidate, RewriteFailure> {
        let start = self.clock.now();
        let session = self.llm.session();
        let mut repairs = 0;
        let fail = |session: &LlmSession, kind, detail: String, repairs| {
            let f = RewriteFailure {
                prompt_id: id,
                kind,
                detail,
                usage: session.usage(),
                repair_attempts: repairs,
            };
            self.events.emit("rewrite_failure", fields(&f));
            f
        };

        let turns = match self.prompts.render(&pq.query, id, pq.prompt_context()) {
            Ok(t) => t,
            Err(e) => return Err(fail(&session, FailureKind::Prompt, e.to_string(), 0)),
        };
        let mut conversation = Conversation::new();
        let mut answer = String::new();
        for turn in &turns {
            answer = match session.chat(&mut conversation, turn) {
                Ok(a) => a,
                Err(e) => return Err(fail(&session, FailureKind::Backend, e.to_string(), 0)),
            };
        }

        let sql = loop {
            let message = match validate_sql(self.engine.as_ref(), &answer) {
                Ok(q) => break q,
                Err(Rejection::Backend(m)) => {
                    return Err(fail(&session, FailureKind::Backend, m, repairs))
                }
                Err(Rejection::Syntax(m)) => m,
            };
            if repairs == self.max_repairs {
                let detail = format!("still invalid after {repairs} repairs: {message}");
                return Err(fail(
                    &session,
                    FailureKind::SyntaxExhausted,
                    detail,
                    repairs,
                ));
            }
            repairs += 1;
            let bad = strip_decorations(&answer).unwrap_or_else(|_| answer.trim().to_string());
            let prompt = self.prompts.render_repair(&pq.query, &bad, &message);
            answer = match session.chat(&mut conversation, &prompt) {
                Ok(a) => a,
                Err(e) => return Err(fail(&session, FailureKind::Backend, e.to_string(), repairs)),
            };
        };

        let cost = match self.engine.estimate_cost(&sql) {
            Ok(c) => c,
            Err(e) => return Err(fail(&session, FailureKind::Backend, e.to_string(), repairs)),
        };
        if cost.total_cost >= pq.cost.total_cost {
            let detail = format!(
                "cost {} not below original {}",
                cost.total_cost, pq.cost.total_cost
            );
            return Err(fail(&session, FailureKind::Regression, detail, repairs));
        }
        let equivalence = self.oracle.check(&pq.query, &sql, CheckDepth::Full);
        if !equivalence.status.accepts() {
            let mut detail = format!("{:?}", equivalence.status);
            if let Some(d) = equivalence.diagnostics.first() {
                detail.push_str(": ");
                detail.push_str(d);
            }
            return Err(fail(&session, FailureKind::NotEquivalent, detail, repairs));
        }
        let candidate = RewriteCandidate {
            prompt_id: id,
            speedup: compute_speedup(&pq.cost, &cost),
            sql,
            cost,
            equivalence,
            usage: session.usage(),
            elapsed: self.clock.since(start),
            repair_attempts: repairs,
        };
        self.events.emit(
            "candidate",
            json!({
                "prompt_id": id,
                "sql": candidate.sql.text(),
                "cost": candidate.cost.total_cost,
                "speedup": candidate.speedup,
                "repair_attempts": repairs,
                "equivalence": candidate.equivalence.status,
            }),
        );
        Ok(candidate)
    }

    /// Prepares `query` and runs [`run_ensemble_prepared`](Self::run_ensemble_prepared).
    pub fn run_ensemble(
        &self,
        query: &SqlQuery,
        prompts: &[PromptId],
    ) -> Result<RewriteOutcome, PipelineError> {
        let pq = self.prepare(query)?;
        Ok(self.run_ensemble_prepared(&pq, prompts))
    }

    /// Evaluates every prompt and returns the cheapest accepted rewrite, or
    /// the original when none survives. Ties go to the earlier prompt id.
    pub fn run_ensemble_prepared(
        &self,
        pq: &PreparedQuery,
        prompts: &[PromptId],
    ) -> RewriteOutcome {
        let mut ids = prompts.to_vec();
        ids.sort();
        ids.dedup();
        let results = self.exec.map(&ids, |&id| self.rewrite_with_prompt(pq, id));

        let mut outcome = RewriteOutcome::unchanged(pq, OutcomeReason::NoImprovement);
        if ids.is_empty() {
            outcome.diagnostics.push("no prompts given".into());
        }
        for r in results {
            match r {
                Ok(c) => {
                    outcome.usage = outcome.usage + c.usage;
                    outcome.candidates.push(c);
                }
                Err(f) => {
                    outcome.usage = outcome.usage + f.usage;
                    outcome.failures.push(f);
                }
            }
        }
        let best = outcome
            .candidates
            .iter()
            .fold(None::<&RewriteCandidate>, |best, c| match best {
                Some(b) if b.cost.total_cost <= c.cost.total_cost => Some(b),
                _ => Some(c),
            })
            .cloned();
        match best {
            Some(b) => {
                outcome.result = b.sql;
                outcome.result_cost = b.cost.total_cost;
                outcome.chosen_prompt = Some(b.prompt_id);
                outcome.reason = OutcomeReason::Improved;
            }
            None => outcome.reason = failure_reason(&outcome.failures),
        }
        self.events.emit(
            "ensemble",
            json!({
                "query": pq.query.fingerprint(),
                "reason": outcome.reason,
                "chosen_prompt": outcome.chosen_prompt,
                "original_cost": outcome.original_cost,
                "result_cost": outcome.result_cost,
                "tokens": outcome.usage.total_tokens(),
            }),
        );
        outcome
    }
}

/// Reason code when no candidate survived: a shared failure kind of syntax
/// or equivalence is reported as such, anything else as no improvement.
fn failure_reason(failures: &[RewriteFailure]) -> OutcomeReason {
    let all = |k: FailureKind| !failures.is_empty() && failures.iter().all(|f| f.kind == k);
    if all(FailureKind::SyntaxExhausted) {
        OutcomeReason::AllFailedSyntax
    } else if all(FailureKind::NotEquivalent) {
        OutcomeReason::AllFailedEquivalence
    } else {
        OutcomeReason::NoImprovement
    }
}
