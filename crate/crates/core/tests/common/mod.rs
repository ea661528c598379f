#![allow(dead_code)]

pub mod ensemble;
pub mod micro;
pub mod script;
pub mod trees;

use std::path::PathBuf;

use lithe_core::db::{DbConfig, PgDatabase};

pub fn fixture_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(rel)
}

pub fn fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture_path(rel)).unwrap_or_else(|e| panic!("fixture {rel}: {e}"))
}

/// Fresh database populated from fixture scripts.
///
/// Returns `None` (and the test should return early) only when
/// `LITHE_SKIP_DB_TESTS` is set and no server can be started.
pub fn database(prefix: &str, setup: &[&str]) -> Option<PgDatabase> {
    let server = match lithe_testkit::server() {
        Ok(s) => s,
        Err(e) if std::env::var_os("LITHE_SKIP_DB_TESTS").is_some() => {
            eprintln!("skipping database test: {e}");
            return None;
        }
        Err(e) => panic!("no PostgreSQL available ({e}); set LITHE_SKIP_DB_TESTS=1 to skip"),
    };
    let script: String = setup
        .iter()
        .map(|f| fixture(f))
        .collect::<Vec<_>>()
        .join("\n");
    let name = server
        .create_database(prefix, &script)
        .expect("fixture setup");
    let config = DbConfig {
        host: server.host.clone(),
        port: server.port,
        user: server.user.clone(),
        password: server.password.clone(),
        dbname: name,
        ..DbConfig::default()
    };
    Some(PgDatabase::connect(config).expect("connect to fixture database"))
}
