//! Workload manifests: a JSON file naming SQL files relative to itself.
//!
//! ```json
//! {"name": "micro",
//!  "queries": [{"id": "q1", "path": "queries/q1.sql"}],
//!  "fpr_ids": ["q1"],
//!  "best_known": {"q1": 4.0}}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::db::DbConfig;
use crate::sql::{parse, SqlError, SqlQuery};

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("query id {0} appears more than once")]
    DuplicateId(String),
    #[error("query {id} does not parse: {source}")]
    Query {
        id: String,
        #[source]
        source: SqlError,
    },
    #[error("{list} names unknown query {id}")]
    UnknownId { list: &'static str, id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    pub queries: Vec<QueryEntry>,
    /// Queries known to admit a productive rewrite; the geometric mean is
    /// taken over these. Absent means all queries.
    #[serde(default)]
    pub fpr_ids: Option<Vec<String>>,
    /// Best speedup known per query, for matching-productive counts.
    #[serde(default)]
    pub best_known: BTreeMap<String, f64>,
    /// Database the workload runs against; overrides the configuration.
    #[serde(default)]
    pub db: Option<DbConfig>,
}

/// A manifest with its queries read and parsed.
#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub queries: Vec<(String, SqlQuery)>,
}

impl Workload {
    pub fn load(manifest: &Path) -> Result<Self, WorkloadError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| WorkloadError::Io { path, source }
        };
        let text = std::fs::read_to_string(manifest).map_err(io(manifest))?;
        let spec: WorkloadSpec =
            serde_json::from_str(&text).map_err(|e| WorkloadError::Manifest {
                path: manifest.to_path_buf(),
                message: e.to_string(),
            })?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut queries = Vec::new();
        for q in &spec.queries {
            let path = base.join(&q.path);
            let sql = std::fs::read_to_string(&path).map_err(io(&path))?;
            queries.push((q.id.clone(), sql));
        }
        Self::from_texts(spec, queries)
    }

    /// Builds a workload from query texts already in memory.
    pub fn from_texts(
        spec: WorkloadSpec,
        texts: Vec<(String, String)>,
    ) -> Result<Self, WorkloadError> {
        let mut seen = HashSet::new();
        let mut queries = Vec::new();
        for (id, sql) in texts {
            if !seen.insert(id.clone()) {
                return Err(WorkloadError::DuplicateId(id));
            }
            let q = parse(&sql).map_err(|source| WorkloadError::Query {
                id: id.clone(),
                source,
            })?;
            queries.push((id, q));
        }
        let listed = spec.fpr_ids.iter().flatten().map(|id| ("fpr_ids", id));
        for (list, id) in listed.chain(spec.best_known.keys().map(|id| ("best_known", id))) {
            if !seen.contains(id) {
                return Err(WorkloadError::UnknownId {
                    list,
                    id: id.clone(),
                });
            }
        }
        Ok(Self { spec, queries })
    }
}
