//! The scripted ten-query micro workload on its star-schema database.

use std::sync::Arc;

use lithe_core::bench::{run_benchmark, BenchMode, BenchmarkReport, Workload};
use lithe_core::clock::FrozenClock;
use lithe_core::config::Config;
use lithe_core::db::PgDatabase;
use lithe_core::equiv::SampledChecker;
use lithe_core::llm::LlmGateway;
use lithe_core::pipeline::RewriteContext;

use super::fixture_path;

pub struct Micro {
    pub db: Arc<PgDatabase>,
    pub config: Config,
    pub workload: Workload,
}

impl Micro {
    pub fn setup() -> Option<Self> {
        let db = Arc::new(super::database("micro", &["micro/setup.sql"])?);
        let config = Config::from_file(&fixture_path("micro/lithe.toml")).unwrap();
        let workload = Workload::load(&fixture_path("micro/manifest.json")).unwrap();
        Some(Self {
            db,
            config,
            workload,
        })
    }

    /// A fresh context: new gateway counters and a new sample cache.
    pub fn context(&self) -> RewriteContext {
        let llm = LlmGateway::from_config(self.config.llm.clone()).unwrap();
        let oracle = SampledChecker::new(self.db.clone(), self.config.equiv.clone()).unwrap();
        RewriteContext::new(self.db.clone(), llm, Arc::new(oracle))
            .with_clock(Arc::new(FrozenClock::new()))
    }

    pub fn run(&self, mode: BenchMode) -> BenchmarkReport {
        run_benchmark(&self.workload, mode, &self.context(), &self.config.mcts)
    }
}
