//! Semantic equivalence testing of a query and its rewrite.
//!
//! Three stages, in order: an optional external prover; execution on
//! several seeded, join-preserving samples of the database (with outer-join
//! witness rows and filter constants nudged toward non-empty results); and,
//! on request, execution on the full database. Sample agreement is a
//! necessary condition only, hence the verdict `LikelyEquivalent`.

mod adjust;
mod prover;
mod sample;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::db::{compare_results, Comparison, DbError, Engine, SchemaCatalog};
use crate::sql::{analyze, SqlQuery};

pub use adjust::{adjust_constants, constant_substitutions, Adjustment};
pub use prover::{CommandProver, HttpProver, Prover, ProverAnswer};
pub use sample::{
    correlated_sample, drop_sample, inject_outer_join_witnesses, orphan_count, remove_witnesses,
    SampleDatabase, WitnessRow,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EquivError {
    #[error("sampling fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("{0}")]
    Unexpected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EquivalenceStatus {
    Proven,
    LikelyEquivalent,
    NotEquivalent,
    Unknown,
}

impl EquivalenceStatus {
    /// Whether a rewrite with this verdict may replace the original.
    pub fn accepts(self) -> bool {
        matches!(
            self,
            EquivalenceStatus::Proven | EquivalenceStatus::LikelyEquivalent
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Prover,
    Sampling,
    FullDatabase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    /// Sample seed, or `None` for the full database.
    pub seed: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Evidence {
    None,
    Prover(String),
    Samples {
        seeds_passed: usize,
        full_database: bool,
    },
    Counterexample(Counterexample),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub status: EquivalenceStatus,
    pub evidence: Evidence,
    pub stages_run: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl EquivalenceVerdict {
    pub fn unknown(reason: impl Into<String>) -> Self {
        Self {
            status: EquivalenceStatus::Unknown,
            evidence: Evidence::None,
            stages_run: Vec::new(),
            diagnostics: vec![reason.into()],
        }
    }
}

/// How much checking to spend on a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckDepth {
    /// First seed only; used inside tree search.
    Quick,
    Full,
}

/// Anything that can judge a rewrite against its original.
pub trait EquivalenceOracle: Send + Sync {
    fn check(
        &self,
        original: &SqlQuery,
        candidate: &SqlQuery,
        depth: CheckDepth,
    ) -> EquivalenceVerdict;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquivConfig {
    pub seeds: Vec<u64>,
    pub sample_fraction: f64,
    /// Cap on the expected size of each uniformly sampled table.
    pub max_sample_rows: u64,
    pub full_db: bool,
    pub prover_cmd: Option<String>,
    pub prover_url: Option<String>,
    pub prover_timeout_ms: u64,
    pub exec_timeout_ms: u64,
}

impl Default for EquivConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            sample_fraction: 0.5,
            max_sample_rows: 10_000,
            full_db: false,
            prover_cmd: None,
            prover_url: None,
            prover_timeout_ms: 30_000,
            exec_timeout_ms: 60_000,
        }
    }
}

impl EquivConfig {
    pub fn validate(&self) -> Result<(), EquivError> {
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(EquivError::InvalidFraction(self.sample_fraction));
        }
        if self.seeds.is_empty() {
            return Err(EquivError::Unexpected(
                "at least one sample seed is required".into(),
            ));
        }
        Ok(())
    }

    /// Prover named by the configuration, if any.
    pub fn prover(&self) -> Result<Option<Arc<dyn Prover>>, EquivError> {
        let timeout = Duration::from_millis(self.prover_timeout_ms);
        if let Some(cmd) = &self.prover_cmd {
            return Ok(Some(Arc::new(CommandProver::new(cmd.clone(), timeout))));
        }
        if let Some(url) = &self.prover_url {
            return HttpProver::new(url.clone(), timeout)
                .map(|p| Some(Arc::new(p) as Arc<dyn Prover>))
                .map_err(EquivError::Unexpected);
        }
        Ok(None)
    }
}

/// Stage 1 alone: `Proven` iff the prover certifies equivalence.
pub fn prove_equivalence(
    q1: &SqlQuery,
    q2: &SqlQuery,
    prover: Option<&dyn Prover>,
    schema_ddl: &str,
) -> (EquivalenceStatus, String) {
    let Some(p) = prover else {
        return (EquivalenceStatus::Unknown, "no prover configured".into());
    };
    match p.prove(q1.body(), q2.body(), schema_ddl) {
        ProverAnswer::Equivalent => (EquivalenceStatus::Proven, p.name().to_string()),
        ProverAnswer::NotEquivalent => (
            EquivalenceStatus::Unknown,
            format!("{} found no proof", p.name()),
        ),
        ProverAnswer::Unknown(why) => (EquivalenceStatus::Unknown, why),
    }
}

static RUN_COUNTER: AtomicUsize = AtomicUsize::new(0);

enum SeedOutcome {
    Pass,
    Fail(String),
    Inconclusive(String),
}

/// Equivalence checker backed by a live engine.
///
/// Samples are built lazily, one scratch schema per seed, and reused across
/// checks; witness rows are added per check and removed afterwards so that
/// verdicts do not depend on the order of checks. Scratch schemas are
/// dropped when the checker is.
pub struct SampledChecker {
    engine: Arc<dyn Engine>,
    config: EquivConfig,
    prover: Option<Arc<dyn Prover>>,
    run_id: String,
    catalog: Mutex<Option<Arc<SchemaCatalog>>>,
    samples: Mutex<HashMap<u64, Arc<Mutex<Option<SampleDatabase>>>>>,
}

impl SampledChecker {
    pub fn new(engine: Arc<dyn Engine>, config: EquivConfig) -> Result<Self, EquivError> {
        config.validate()?;
        let prover = config.prover()?;
        Ok(Self {
            engine,
            config,
            prover,
            run_id: format!(
                "{}_{}",
                std::process::id(),
                RUN_COUNTER.fetch_add(1, Ordering::SeqCst)
            ),
            catalog: Mutex::new(None),
            samples: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_prover(mut self, prover: Arc<dyn Prover>) -> Self {
        self.prover = Some(prover);
        self
    }

    pub fn config(&self) -> &EquivConfig {
        &self.config
    }

    fn catalog(&self) -> Result<Arc<SchemaCatalog>, EquivError> {
        let mut slot = self.catalog.lock().unwrap();
        if let Some(c) = slot.as_ref() {
            return Ok(c.clone());
        }
        let c = Arc::new(self.engine.fetch_schema(None)?);
        *slot = Some(c.clone());
        Ok(c)
    }

    pub fn scratch_schema(&self, seed: u64) -> String {
        format!("lithe_sample_{seed}_{}", self.run_id)
    }

    fn sample_slot(&self, seed: u64) -> Arc<Mutex<Option<SampleDatabase>>> {
        self.samples
            .lock()
            .unwrap()
            .entry(seed)
            .or_default()
            .clone()
    }

    /// The sample for `seed`, built on first use.
    pub fn sample(&self, seed: u64) -> Result<SampleDatabase, EquivError> {
        let slot = self.sample_slot(seed);
        let mut guard = slot.lock().unwrap();
        self.ensure_sample(seed, &mut guard).cloned()
    }

    fn ensure_sample<'a>(
        &self,
        seed: u64,
        slot: &'a mut Option<SampleDatabase>,
    ) -> Result<&'a mut SampleDatabase, EquivError> {
        if slot.is_none() {
            let catalog = self.catalog()?;
            let s = correlated_sample(
                self.engine.as_ref(),
                &catalog,
                self.config.sample_fraction,
                self.config.max_sample_rows,
                seed,
                &self.scratch_schema(seed),
            )?;
            *slot = Some(s);
        }
        Ok(slot.as_mut().expect("sample built"))
    }

    fn run_seed(
        &self,
        seed: u64,
        q1: &SqlQuery,
        q2: &SqlQuery,
        diagnostics: &mut Vec<String>,
    ) -> SeedOutcome {
        let catalog = match self.catalog() {
            Ok(c) => c,
            Err(e) => return SeedOutcome::Inconclusive(e.to_string()),
        };
        let slot = self.sample_slot(seed);
        let mut guard = slot.lock().unwrap();
        let sample = match self.ensure_sample(seed, &mut guard) {
            Ok(s) => s,
            Err(e) => return SeedOutcome::Inconclusive(format!("cannot build sample {seed}: {e}")),
        };
        let engine = self.engine.as_ref();
        let adj = adjust_constants(engine, sample, &catalog, q1, q2);
        diagnostics.extend(adj.warnings.iter().map(|w| format!("seed {seed}: {w}")));
        let preds = analyze(&adj.q1).filter_predicates;
        let witnesses = match inject_outer_join_witnesses(engine, sample, &catalog, &preds) {
            Ok(w) => w,
            Err(e) => {
                diagnostics.push(format!("seed {seed}: witness injection failed: {e}"));
                Vec::new()
            }
        };
        let timeout = Duration::from_millis(self.config.exec_timeout_ms);
        let schema = sample.scratch_schema.clone();
        let r1 = engine.execute_in(&adj.q1, Some(&schema), timeout);
        let r2 = match &r1 {
            Ok(_) => Some(engine.execute_in(&adj.q2, Some(&schema), timeout)),
            Err(_) => None,
        };
        if let Err(e) = remove_witnesses(engine, sample, &witnesses) {
            // Leftover witnesses would leak into later checks; start over.
            diagnostics.push(format!(
                "seed {seed}: cannot remove witness rows ({e}); sample discarded"
            ));
            let _ = drop_sample(engine, sample);
            *guard = None;
        }
        match (r1, r2) {
            (Err(e), _) => {
                SeedOutcome::Inconclusive(format!("original failed on sample {seed}: {e}"))
            }
            (Ok(_), Some(Err(DbError::Timeout))) => {
                SeedOutcome::Inconclusive(format!("rewrite timed out on sample {seed}"))
            }
            (Ok(_), Some(Err(e))) => {
                SeedOutcome::Fail(format!("rewrite failed where the original ran: {e}"))
            }
            (Ok(a), Some(Ok(b))) => match compare_results(&a, &b) {
                Comparison::Equal => SeedOutcome::Pass,
                Comparison::Different(d) => SeedOutcome::Fail(d),
            },
            (Ok(_), None) => unreachable!("rewrite runs whenever the original succeeded"),
        }
    }
}

impl Drop for SampledChecker {
    fn drop(&mut self) {
        let samples = self
            .samples
            .get_mut()
            .map(std::mem::take)
            .unwrap_or_default();
        for (_, slot) in samples {
            if let Some(s) = slot.lock().ok().and_then(|mut g| g.take()) {
                if let Err(e) = drop_sample(self.engine.as_ref(), &s) {
                    log::warn!("cannot drop sample schema {}: {e}", s.scratch_schema);
                }
            }
        }
    }
}

impl EquivalenceOracle for SampledChecker {
    fn check(&self, q1: &SqlQuery, q2: &SqlQuery, depth: CheckDepth) -> EquivalenceVerdict {
        let mut stages = Vec::new();
        let mut diagnostics = Vec::new();
        for q in [q1, q2] {
            let s = analyze(q);
            if !s.is_deterministic() {
                return EquivalenceVerdict::unknown(format!(
                    "nondeterministic function {} in query",
                    s.volatile_functions.join(", ")
                ));
            }
        }
        if let Some(p) = &self.prover {
            stages.push(Stage::Prover);
            let ddl = self.catalog().map(|c| c.to_ddl()).unwrap_or_default();
            let (status, note) = prove_equivalence(q1, q2, Some(p.as_ref()), &ddl);
            if status == EquivalenceStatus::Proven {
                return EquivalenceVerdict {
                    status,
                    evidence: Evidence::Prover(note),
                    stages_run: stages,
                    diagnostics,
                };
            }
            diagnostics.push(note);
        }

        stages.push(Stage::Sampling);
        let seeds: &[u64] = match depth {
            CheckDepth::Quick => &self.config.seeds[..1],
            CheckDepth::Full => &self.config.seeds,
        };
        let mut passed = 0;
        for &seed in seeds {
            match self.run_seed(seed, q1, q2, &mut diagnostics) {
                SeedOutcome::Pass => passed += 1,
                SeedOutcome::Fail(detail) => {
                    return EquivalenceVerdict {
                        status: EquivalenceStatus::NotEquivalent,
                        evidence: Evidence::Counterexample(Counterexample {
                            seed: Some(seed),
                            detail,
                        }),
                        stages_run: stages,
                        diagnostics,
                    }
                }
                SeedOutcome::Inconclusive(why) => diagnostics.push(why),
            }
        }
        if passed < seeds.len() {
            return EquivalenceVerdict {
                status: EquivalenceStatus::Unknown,
                evidence: Evidence::Samples {
                    seeds_passed: passed,
                    full_database: false,
                },
                stages_run: stages,
                diagnostics,
            };
        }

        let mut full_database = false;
        if self.config.full_db && depth == CheckDepth::Full {
            stages.push(Stage::FullDatabase);
            let timeout = Duration::from_millis(self.config.exec_timeout_ms);
            let r1 = self.engine.execute(q1, timeout);
            let r2 = self.engine.execute(q2, timeout);
            match (r1, r2) {
                (Ok(a), Ok(b)) => match compare_results(&a, &b) {
                    Comparison::Equal => full_database = true,
                    Comparison::Different(detail) => {
                        return EquivalenceVerdict {
                            status: EquivalenceStatus::NotEquivalent,
                            evidence: Evidence::Counterexample(Counterexample {
                                seed: None,
                                detail,
                            }),
                            stages_run: stages,
                            diagnostics,
                        }
                    }
                },
                (Err(e), _) | (_, Err(e)) => {
                    diagnostics.push(format!("full-database check inconclusive: {e}"))
                }
            }
        }
        EquivalenceVerdict {
            status: EquivalenceStatus::LikelyEquivalent,
            evidence: Evidence::Samples {
                seeds_passed: passed,
                full_database,
            },
            stages_run: stages,
            diagnostics,
        }
    }
}

/// Runs every stage on a one-off checker.
pub fn check_equivalence(
    engine: Arc<dyn Engine>,
    q1: &SqlQuery,
    q2: &SqlQuery,
    config: &EquivConfig,
) -> Result<EquivalenceVerdict, EquivError> {
    let checker = SampledChecker::new(engine, config.clone())?;
    Ok(checker.check(q1, q2, CheckDepth::Full))
}

/// Oracle answering from a table keyed by candidate fingerprint; for
/// offline runs.
#[derive(Debug, Clone)]
pub struct FixedOracle {
    default: EquivalenceStatus,
    verdicts: HashMap<String, EquivalenceStatus>,
}

impl FixedOracle {
    pub fn new(default: EquivalenceStatus) -> Self {
        Self {
            default,
            verdicts: HashMap::new(),
        }
    }

    pub fn with_verdict(mut self, candidate_sql: &str, status: EquivalenceStatus) -> Self {
        self.verdicts
            .insert(crate::sql::fingerprint(candidate_sql), status);
        self
    }
}

impl EquivalenceOracle for FixedOracle {
    fn check(
        &self,
        _original: &SqlQuery,
        candidate: &SqlQuery,
        _depth: CheckDepth,
    ) -> EquivalenceVerdict {
        let status = self
            .verdicts
            .get(candidate.fingerprint())
            .copied()
            .unwrap_or(self.default);
        EquivalenceVerdict {
            status,
            evidence: Evidence::None,
            stages_run: Vec::new(),
            diagnostics: Vec::new(),
        }
    }
}
