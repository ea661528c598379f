use std::collections::HashMap;
use std::time::Duration;

use super::{CostEstimate, DbError, Engine, ResultSet, SchemaCatalog};
use crate::sql::{fingerprint, parse, SqlError, SqlQuery};

/// Offline engine with costs, selectivities and results looked up in tables.
///
/// Syntax is checked by the embedded parser. Useful for deterministic runs
/// and benchmarks where no database is available.
#[derive(Debug, Clone, Default)]
pub struct FixedCostEngine {
    costs: HashMap<String, f64>,
    default_cost: Option<f64>,
    selectivities: HashMap<(String, String), f64>,
    results: HashMap<String, ResultSet>,
    catalog: SchemaCatalog,
}

impl FixedCostEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the cost of every query whose text fingerprints like `sql`.
    pub fn with_cost(mut self, sql: &str, cost: f64) -> Self {
        self.costs.insert(fingerprint(sql), cost);
        self
    }

    /// Cost returned for parseable queries without a registered cost.
    pub fn with_default_cost(mut self, cost: f64) -> Self {
        self.default_cost = Some(cost);
        self
    }

    pub fn with_selectivity(mut self, table: &str, predicate: &str, sel: f64) -> Self {
        self.selectivities
            .insert((table.to_string(), predicate.to_string()), sel);
        self
    }

    pub fn with_result(mut self, sql: &str, result: ResultSet) -> Self {
        self.results.insert(fingerprint(sql), result);
        self
    }

    pub fn with_catalog(mut self, catalog: SchemaCatalog) -> Self {
        self.catalog = catalog;
        self
    }
}

impl Engine for FixedCostEngine {
    fn verify_syntax(&self, query: &SqlQuery) -> Result<(), DbError> {
        match parse(query.text()) {
            Ok(_) => Ok(()),
            Err(SqlError::Syntax(e)) => Err(DbError::Syntax {
                message: e.message,
                position: Some(e.offset),
            }),
            Err(e) => Err(DbError::Syntax {
                message: e.to_string(),
                position: None,
            }),
        }
    }

    fn estimate_cost(&self, query: &SqlQuery) -> Result<CostEstimate, DbError> {
        self.verify_syntax(query)?;
        let cost = self
            .costs
            .get(query.fingerprint())
            .copied()
            .or(self.default_cost)
            .ok_or_else(|| {
                DbError::Unsupported(format!("no cost registered for {}", query.body()))
            })?;
        Ok(CostEstimate {
            total_cost: cost,
            plan_digest: query.fingerprint()[..16].to_string(),
        })
    }

    fn fetch_schema(&self, tables: Option<&[String]>) -> Result<SchemaCatalog, DbError> {
        let mut c = self.catalog.clone();
        if let Some(t) = tables {
            c.tables.retain(|x| t.contains(&x.name));
            c.foreign_keys.retain(|f| t.contains(&f.table));
        }
        Ok(c)
    }

    fn estimate_selectivity(&self, predicate: &str, table: &str) -> Result<f64, DbError> {
        Ok(self
            .selectivities
            .get(&(table.to_string(), predicate.to_string()))
            .copied()
            .unwrap_or(0.5))
    }

    fn execute_in(
        &self,
        query: &SqlQuery,
        schema: Option<&str>,
        _timeout: Duration,
    ) -> Result<ResultSet, DbError> {
        if schema.is_some() {
            return Err(DbError::Unsupported("sample schemas".into()));
        }
        self.results
            .get(query.fingerprint())
            .cloned()
            .ok_or_else(|| DbError::Unsupported("execution".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn costs_by_fingerprint() {
        let e = FixedCostEngine::new().with_cost("SELECT a FROM t", 10.0);
        let q = parse("select a\nFROM t;").unwrap();
        assert_eq!(e.estimate_cost(&q).unwrap().total_cost, 10.0);
        let other = parse("SELECT b FROM t").unwrap();
        assert!(matches!(
            e.estimate_cost(&other),
            Err(DbError::Unsupported(_))
        ));
    }

    #[test]
    fn syntax_errors_surface() {
        let e = FixedCostEngine::new().with_default_cost(1.0);
        let q = SqlQuery::engine_accepted("SELEC 1").unwrap();
        assert!(matches!(
            e.verify_syntax(&q),
            Err(DbError::Syntax {
                position: Some(0),
                ..
            })
        ));
    }
}
