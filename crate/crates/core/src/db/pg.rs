use std::sync::Mutex;
use std::time::Duration;

use postgres::error::{ErrorPosition, SqlState};
use postgres::{Client, NoTls, SimpleQueryMessage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    ColumnInfo, CostEstimate, DbError, Engine, ForeignKey, ResultSet, SchemaCatalog, TableInfo,
    Value,
};
use crate::db::resolve_order_key;
use crate::sql::{analyze, quote_ident, SqlQuery};

const EXPLAIN_PREFIX: &str = "EXPLAIN (FORMAT JSON) ";

/// Connection settings. Every field can be overridden through a
/// `LITHE_DB_<FIELD>` environment variable (e.g. `LITHE_DB_PORT`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbConfig {
    pub host: String,
    pub port: u16,
    pub user: String,
    /// Prefer `LITHE_DB_PASSWORD` over storing this in a file.
    pub password: Option<String>,
    pub dbname: String,
    pub schema: String,
    pub statement_timeout_ms: u64,
    pub pool_size: usize,
}

impl Default for DbConfig {
    fn default() -> Self {
        Self {
            host: "localhost".into(),
            port: 5432,
            user: "postgres".into(),
            password: None,
            dbname: "postgres".into(),
            schema: "public".into(),
            statement_timeout_ms: 300_000,
            pool_size: 8,
        }
    }
}

impl DbConfig {
    pub fn with_env_overrides(mut self) -> Result<Self, DbError> {
        let var = |k: &str| std::env::var(format!("LITHE_DB_{k}")).ok();
        let num = |k: &str, v: String| {
            v.parse::<u64>()
                .map_err(|_| DbError::Connection(format!("LITHE_DB_{k} is not a number: {v}")))
        };
        if let Some(v) = var("HOST") {
            self.host = v;
        }
        if let Some(v) = var("PORT") {
            self.port = num("PORT", v)? as u16;
        }
        if let Some(v) = var("USER") {
            self.user = v;
        }
        if let Some(v) = var("PASSWORD") {
            self.password = Some(v);
        }
        if let Some(v) = var("NAME") {
            self.dbname = v;
        }
        if let Some(v) = var("SCHEMA") {
            self.schema = v;
        }
        if let Some(v) = var("STATEMENT_TIMEOUT_MS") {
            self.statement_timeout_ms = num("STATEMENT_TIMEOUT_MS", v)?;
        }
        Ok(self)
    }
}

/// PostgreSQL-backed [`Engine`] with a small connection pool.
pub struct PgDatabase {
    config: DbConfig,
    pool: Mutex<Vec<Client>>,
}

impl std::fmt::Debug for PgDatabase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PgDatabase")
            .field("host", &self.config.host)
            .field("port", &self.config.port)
            .field("dbname", &self.config.dbname)
            .field("schema", &self.config.schema)
            .finish()
    }
}

impl PgDatabase {
    /// Connects once to validate the settings.
    pub fn connect(config: DbConfig) -> Result<Self, DbError> {
        let db = Self {
            config,
            pool: Mutex::new(Vec::new()),
        };
        let client = db.open()?;
        db.pool.lock().unwrap().push(client);
        Ok(db)
    }

    pub fn config(&self) -> &DbConfig {
        &self.config
    }

    fn open(&self) -> Result<Client, DbError> {
        let c = &self.config;
        let mut cfg = postgres::Config::new();
        cfg.host(&c.host)
            .port(c.port)
            .user(&c.user)
            .dbname(&c.dbname)
            .application_name("lithe")
            .connect_timeout(Duration::from_secs(10));
        if let Some(pw) = &c.password {
            cfg.password(pw);
        }
        let mut client = cfg
            .connect(NoTls)
            .map_err(|e| DbError::Connection(e.to_string()))?;
        client
            .batch_execute(&format!(
                "SET search_path = {}; SET statement_timeout = {}",
                quote_ident(&c.schema),
                c.statement_timeout_ms
            ))
            .map_err(|e| DbError::Connection(e.to_string()))?;
        Ok(client)
    }

    fn with_client<T>(
        &self,
        f: impl FnOnce(&mut Client) -> Result<T, postgres::Error>,
    ) -> Result<T, DbError> {
        self.with_client_at(0, f)
    }

    /// `prefix_chars` is the length of text prepended to the user's
    /// statement, subtracted from error positions.
    fn with_client_at<T>(
        &self,
        prefix_chars: usize,
        f: impl FnOnce(&mut Client) -> Result<T, postgres::Error>,
    ) -> Result<T, DbError> {
        let pooled = self.pool.lock().unwrap().pop();
        let mut client = match pooled {
            Some(c) if !c.is_closed() => c,
            _ => self.open()?,
        };
        let out = f(&mut client);
        if !client.is_closed() {
            let mut pool = self.pool.lock().unwrap();
            if pool.len() < self.config.pool_size.max(1) {
                pool.push(client);
            }
        }
        out.map_err(|e| map_error(e, prefix_chars))
    }

    fn explain(&self, body: &str) -> Result<serde_json::Value, DbError> {
        if body.trim().is_empty() {
            return Err(DbError::Syntax {
                message: "empty statement".into(),
                position: None,
            });
        }
        let sql = format!("{EXPLAIN_PREFIX}{body}");
        let row = self.with_client_at(EXPLAIN_PREFIX.len(), |c| c.query_one(sql.as_str(), &[]))?;
        row.try_get::<_, serde_json::Value>(0)
            .map_err(|e| DbError::Execution(e.to_string()))
    }

    fn read_only(
        &self,
        sql: &str,
        schema: Option<&str>,
        timeout: Duration,
    ) -> Result<ResultSet, DbError> {
        let search_path = match schema {
            Some(s) => format!("{}, {}", quote_ident(s), quote_ident(&self.config.schema)),
            None => quote_ident(&self.config.schema),
        };
        let ms = timeout.as_millis().clamp(1, i32::MAX as u128);
        self.with_client(|c| {
            let mut tx = c.build_transaction().read_only(true).start()?;
            tx.batch_execute(&format!(
                "SET LOCAL search_path = {search_path}; SET LOCAL statement_timeout = {ms}"
            ))?;
            // Preparing first rejects multi-statement texts and yields types.
            let stmt = tx.prepare(sql)?;
            let types: Vec<String> = stmt
                .columns()
                .iter()
                .map(|c| c.type_().name().to_string())
                .collect();
            let columns: Vec<String> = stmt
                .columns()
                .iter()
                .map(|c| c.name().to_string())
                .collect();
            let mut rows = Vec::new();
            for msg in tx.simple_query(sql)? {
                if let SimpleQueryMessage::Row(r) = msg {
                    let row = (0..r.len())
                        .map(|i| {
                            Value::from_pg_text(
                                r.get(i),
                                types.get(i).map_or("text", |s| s.as_str()),
                            )
                        })
                        .collect();
                    rows.push(row);
                }
            }
            tx.rollback()?;
            Ok(ResultSet {
                columns,
                rows,
                ordered: false,
                order_key: None,
            })
        })
    }

    fn plan_rows(&self, sql: &str) -> Result<f64, DbError> {
        let plan = self.explain(sql)?;
        plan[0]["Plan"]["Plan Rows"]
            .as_f64()
            .ok_or_else(|| DbError::Execution("plan without row estimate".into()))
    }
}

fn map_error(e: postgres::Error, prefix_chars: usize) -> DbError {
    if let Some(db) = e.as_db_error() {
        if *db.code() == SqlState::QUERY_CANCELED {
            return DbError::Timeout;
        }
        let mut message = format!("{}: {}", db.severity(), db.message());
        if let Some(d) = db.detail() {
            message.push_str(&format!("\nDETAIL: {d}"));
        }
        if let Some(h) = db.hint() {
            message.push_str(&format!("\nHINT: {h}"));
        }
        let class = &db.code().code()[..2];
        if class == "42" || class == "0A" || class == "22" {
            let position = match db.position() {
                Some(ErrorPosition::Original(p)) => {
                    Some((*p as usize).saturating_sub(1 + prefix_chars))
                }
                _ => None,
            };
            return DbError::Syntax { message, position };
        }
        return DbError::Execution(message);
    }
    if e.is_closed() {
        DbError::Connection(e.to_string())
    } else {
        DbError::Execution(e.to_string())
    }
}

fn plan_digest(plan: &serde_json::Value) -> String {
    fn walk(node: &serde_json::Value, out: &mut String) {
        out.push('(');
        if let Some(t) = node["Node Type"].as_str() {
            out.push_str(t);
        }
        if let Some(r) = node["Relation Name"].as_str() {
            out.push(':');
            out.push_str(r);
        }
        if let Some(children) = node["Plans"].as_array() {
            for c in children {
                walk(c, out);
            }
        }
        out.push(')');
    }
    let mut shape = String::new();
    walk(&plan[0]["Plan"], &mut shape);
    hex::encode(&Sha256::digest(shape.as_bytes())[..8])
}

impl Engine for PgDatabase {
    fn verify_syntax(&self, query: &SqlQuery) -> Result<(), DbError> {
        self.explain(query.body()).map(|_| ())
    }

    fn estimate_cost(&self, query: &SqlQuery) -> Result<CostEstimate, DbError> {
        let plan = self.explain(query.body())?;
        let total_cost = plan[0]["Plan"]["Total Cost"]
            .as_f64()
            .ok_or_else(|| DbError::Execution("plan without total cost".into()))?;
        Ok(CostEstimate {
            total_cost,
            plan_digest: plan_digest(&plan),
        })
    }

    fn fetch_schema(&self, tables: Option<&[String]>) -> Result<SchemaCatalog, DbError> {
        let schema = self.config.schema.clone();
        let (cols, cons) = self.with_client(|c| {
            let cols = c.query(
                "SELECT cl.relname::text, a.attname::text, format_type(a.atttypid, a.atttypmod), \
                        NOT a.attnotnull, cl.reltuples::float8 \
                 FROM pg_attribute a \
                 JOIN pg_class cl ON cl.oid = a.attrelid \
                 JOIN pg_namespace n ON n.oid = cl.relnamespace \
                 WHERE n.nspname = $1 AND cl.relkind IN ('r', 'p') AND a.attnum > 0 AND NOT a.attisdropped \
                 ORDER BY cl.relname, a.attnum",
                &[&schema],
            )?;
            let cons = c.query(
                "SELECT con.contype::text, cl.relname::text, ref.relname::text, \
                   ARRAY(SELECT a.attname::text FROM unnest(con.conkey) WITH ORDINALITY k(n, i) \
                         JOIN pg_attribute a ON a.attrelid = con.conrelid AND a.attnum = k.n ORDER BY k.i), \
                   ARRAY(SELECT a.attname::text FROM unnest(con.confkey) WITH ORDINALITY k(n, i) \
                         JOIN pg_attribute a ON a.attrelid = con.confrelid AND a.attnum = k.n ORDER BY k.i) \
                 FROM pg_constraint con \
                 JOIN pg_class cl ON cl.oid = con.conrelid \
                 JOIN pg_namespace n ON n.oid = cl.relnamespace \
                 LEFT JOIN pg_class ref ON ref.oid = con.confrelid \
                 WHERE n.nspname = $1 AND con.contype IN ('p', 'f') \
                 ORDER BY con.conname",
                &[&schema],
            )?;
            Ok((cols, cons))
        })?;

        let wanted = |name: &str| tables.is_none_or(|t| t.iter().any(|x| x == name));
        let mut catalog = SchemaCatalog::default();
        for row in cols {
            let table: String = row.get(0);
            if !wanted(&table) {
                continue;
            }
            if catalog.tables.last().is_none_or(|t| t.name != table) {
                catalog.tables.push(TableInfo {
                    name: table.clone(),
                    columns: Vec::new(),
                    primary_key: Vec::new(),
                    row_estimate: row.get(4),
                });
            }
            catalog.tables.last_mut().unwrap().columns.push(ColumnInfo {
                name: row.get(1),
                data_type: row.get(2),
                nullable: row.get(3),
            });
        }
        for row in cons {
            let kind: String = row.get(0);
            let table: String = row.get(1);
            let columns: Vec<String> = row.get(3);
            if kind == "p" {
                if let Some(t) = catalog.tables.iter_mut().find(|t| t.name == table) {
                    t.primary_key = columns;
                }
            } else if let Some(ref_table) = row.get::<_, Option<String>>(2) {
                if wanted(&table) {
                    catalog.foreign_keys.push(ForeignKey {
                        table,
                        columns,
                        ref_table,
                        ref_columns: row.get(4),
                    });
                }
            }
        }
        if let Some(order) = tables {
            catalog.tables.sort_by_key(|t| {
                order
                    .iter()
                    .position(|x| *x == t.name)
                    .unwrap_or(usize::MAX)
            });
        }
        Ok(catalog)
    }

    fn estimate_selectivity(&self, predicate: &str, table: &str) -> Result<f64, DbError> {
        let t = quote_ident(table);
        let all = self.plan_rows(&format!("SELECT * FROM {t}"))?;
        if all <= 0.0 {
            log::warn!("table {table} has zero estimated rows; selectivity defaults to 1");
            return Ok(1.0);
        }
        let filtered = self.plan_rows(&format!("SELECT * FROM {t} WHERE {predicate}"))?;
        Ok((filtered / all).clamp(0.0, 1.0))
    }

    fn execute_in(
        &self,
        query: &SqlQuery,
        schema: Option<&str>,
        timeout: Duration,
    ) -> Result<ResultSet, DbError> {
        let mut rs = self.read_only(query.body(), schema, timeout)?;
        if query.is_parsed() {
            let keys = analyze(query).order_by;
            rs.ordered = !keys.is_empty();
            rs.order_key = if rs.ordered {
                resolve_order_key(&rs.columns, &keys)
            } else {
                None
            };
        } else {
            rs.ordered = query.text().to_ascii_lowercase().contains("order by");
        }
        Ok(rs)
    }

    fn query_raw(&self, sql: &str, timeout: Duration) -> Result<ResultSet, DbError> {
        self.read_only(sql, None, timeout)
    }

    fn run_script(&self, sql: &str) -> Result<(), DbError> {
        self.with_client(|c| c.batch_execute(sql))
    }

    fn base_schema(&self) -> &str {
        &self.config.schema
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_shape_only() {
        let a: serde_json::Value = serde_json::from_str(
            r#"[{"Plan":{"Node Type":"Seq Scan","Relation Name":"t","Total Cost":1.0}}]"#,
        )
        .unwrap();
        let b: serde_json::Value = serde_json::from_str(
            r#"[{"Plan":{"Node Type":"Seq Scan","Relation Name":"t","Total Cost":9.0}}]"#,
        )
        .unwrap();
        assert_eq!(plan_digest(&a), plan_digest(&b));
    }

    #[test]
    fn env_overrides() {
        // Only this test touches LITHE_DB_* variables.
        std::env::set_var("LITHE_DB_PORT", "6000");
        std::env::set_var("LITHE_DB_SCHEMA", "tpcds");
        let c = DbConfig::default().with_env_overrides().unwrap();
        std::env::remove_var("LITHE_DB_PORT");
        std::env::remove_var("LITHE_DB_SCHEMA");
        assert_eq!(c.port, 6000);
        assert_eq!(c.schema, "tpcds");
    }
}
