//! Database access: syntax verification, plan costs, schema and statistics,
//! and read-only execution.

mod fixed;
mod pg;
mod result;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::sql::{FilterPredicate, QueryStructure, SqlQuery};

pub use fixed::FixedCostEngine;
pub use pg::{DbConfig, PgDatabase};
pub use result::{compare_results, resolve_order_key, Comparison, ResultSet, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DbError {
    #[error("cannot connect to database: {0}")]
    Connection(String),
    /// The server rejected the statement before planning (syntax errors,
    /// unknown relations or columns, type errors).
    #[error("{message}")]
    Syntax {
        message: String,
        position: Option<usize>,
    },
    #[error("statement timed out")]
    Timeout,
    #[error("execution failed: {0}")]
    Execution(String),
    #[error("not supported by this engine: {0}")]
    Unsupported(String),
}

/// Planner cost estimate in the engine's abstract units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub total_cost: f64,
    /// Short hash of the plan shape (node types), for diagnostics.
    pub plan_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub data_type: String,
    pub nullable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableInfo {
    pub name: String,
    pub columns: Vec<ColumnInfo>,
    pub primary_key: Vec<String>,
    /// Planner row estimate; negative when the table was never analyzed.
    pub row_estimate: f64,
}

impl TableInfo {
    pub fn column(&self, name: &str) -> Option<&ColumnInfo> {
        self.columns.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub table: String,
    pub columns: Vec<String>,
    pub ref_table: String,
    pub ref_columns: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub tables: Vec<TableInfo>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl SchemaCatalog {
    pub fn table(&self, name: &str) -> Option<&TableInfo> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Renders the catalog as `CREATE TABLE` statements.
    pub fn to_ddl(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            out.push_str(&format!("CREATE TABLE {} (\n", t.name));
            let mut lines: Vec<String> = t
                .columns
                .iter()
                .map(|c| {
                    let null = if c.nullable { "" } else { " NOT NULL" };
                    format!("    {} {}{}", c.name, c.data_type, null)
                })
                .collect();
            if !t.primary_key.is_empty() {
                lines.push(format!("    PRIMARY KEY ({})", t.primary_key.join(", ")));
            }
            for fk in self.foreign_keys.iter().filter(|f| f.table == t.name) {
                lines.push(format!(
                    "    FOREIGN KEY ({}) REFERENCES {} ({})",
                    fk.columns.join(", "),
                    fk.ref_table,
                    fk.ref_columns.join(", ")
                ));
            }
            out.push_str(&lines.join(",\n"));
            out.push_str("\n);\n");
        }
        out
    }
}

/// Estimated selectivity of one filter predicate on its base table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityEntry {
    pub table: String,
    pub predicate: FilterPredicate,
    pub selectivity: f64,
}

impl SelectivityEntry {
    /// `table.column op value`
    pub fn qualified(&self) -> String {
        format!(
            "{}.{} {} {}",
            self.table, self.predicate.column, self.predicate.op, self.predicate.value
        )
    }
}

/// Per-predicate selectivities of a query, in predicate order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectivityMap {
    pub entries: Vec<SelectivityEntry>,
}

impl SelectivityMap {
    /// Estimates every filter predicate that resolved to a base table.
    ///
    /// Predicates the engine cannot estimate (e.g. on CTE columns) are left
    /// out with a warning.
    pub fn collect(engine: &dyn Engine, structure: &QueryStructure) -> Self {
        let mut entries: Vec<SelectivityEntry> = Vec::new();
        for p in &structure.filter_predicates {
            let Some(table) = &p.table else { continue };
            if entries
                .iter()
                .any(|e| &e.table == table && &e.predicate == p)
            {
                continue;
            }
            match engine.estimate_selectivity(&p.to_sql(), table) {
                Ok(s) => entries.push(SelectivityEntry {
                    table: table.clone(),
                    predicate: p.clone(),
                    selectivity: s,
                }),
                Err(e) => log::warn!("no selectivity for {} on {table}: {e}", p.to_sql()),
            }
        }
        Self { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Statistics block in the format used by the rule prompts.
    pub fn render(&self) -> String {
        let mut out = String::from("Selectivity of different predicates is given below : \n");
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!(
                "( {} ) {} on table {} :: {:.4}\n",
                i + 1,
                e.qualified(),
                e.table,
                e.selectivity
            ));
        }
        out
    }
}

/// A database the rewriter can consult.
///
/// Implementations must be usable from several threads at once.
pub trait Engine: Send + Sync {
    /// Asks the server to parse and bind the statement without running it.
    fn verify_syntax(&self, query: &SqlQuery) -> Result<(), DbError>;

    fn estimate_cost(&self, query: &SqlQuery) -> Result<CostEstimate, DbError>;

    /// Schema of the given tables, or of every table when `tables` is `None`.
    fn fetch_schema(&self, tables: Option<&[String]>) -> Result<SchemaCatalog, DbError>;

    /// Planner-estimated fraction of `table` rows satisfying `predicate`.
    fn estimate_selectivity(&self, predicate: &str, table: &str) -> Result<f64, DbError>;

    /// Runs the query read-only. `schema`, when given, is searched before the
    /// configured schema.
    fn execute_in(
        &self,
        query: &SqlQuery,
        schema: Option<&str>,
        timeout: Duration,
    ) -> Result<ResultSet, DbError>;

    fn execute(&self, query: &SqlQuery, timeout: Duration) -> Result<ResultSet, DbError> {
        self.execute_in(query, None, timeout)
    }

    /// Runs a read-only helper query given as raw SQL (no row limit).
    fn query_raw(&self, _sql: &str, _timeout: Duration) -> Result<ResultSet, DbError> {
        Err(DbError::Unsupported("raw queries".into()))
    }

    /// Runs data-definition / data-manipulation statements, e.g. to build
    /// a sample database.
    fn run_script(&self, _sql: &str) -> Result<(), DbError> {
        Err(DbError::Unsupported("scripts".into()))
    }

    /// Schema in which the workload's tables live.
    fn base_schema(&self) -> &str {
        "public"
    }
}
