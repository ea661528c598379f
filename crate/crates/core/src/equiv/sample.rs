use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EquivError;
use crate::db::{Engine, ForeignKey, SchemaCatalog, TableInfo, Value};
use crate::sql::{quote_ident, FilterPredicate};

const HELPER_TIMEOUT: Duration = Duration::from_secs(60);

/// A seeded sample of the base schema, materialized in its own schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDatabase {
    pub seed: u64,
    pub scratch_schema: String,
    /// Observed fraction of each table's rows present in the sample.
    pub row_fractions: BTreeMap<String, f64>,
    pub witness_rows_injected: bool,
    /// Tables on FK cycles and their ancestors, copied in full.
    pub whole_copies: Vec<String>,
}

/// A synthetic row added to a sample, identified by its fresh key values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessRow {
    pub table: String,
    /// (column, SQL literal) pairs.
    pub key: Vec<(String, String)>,
}

pub(crate) fn qualified(schema: &str, table: &str) -> String {
    format!("{}.{}", quote_ident(schema), quote_ident(table))
}

fn scalar(engine: &dyn Engine, sql: &str) -> Result<Value, EquivError> {
    let rs = engine.query_raw(sql, HELPER_TIMEOUT)?;
    Ok(rs
        .rows
        .into_iter()
        .next()
        .and_then(|r| r.into_iter().next())
        .unwrap_or(Value::Null))
}

pub(crate) fn count(engine: &dyn Engine, sql_from_where: &str) -> Result<u64, EquivError> {
    match scalar(engine, &format!("SELECT count(*) FROM {sql_from_where}"))? {
        Value::Int(n) => Ok(n.max(0) as u64),
        other => Err(EquivError::Unexpected(format!("count returned {other:?}"))),
    }
}

fn parents<'a>(catalog: &'a SchemaCatalog, table: &str) -> Vec<&'a ForeignKey> {
    catalog
        .foreign_keys
        .iter()
        .filter(|f| {
            f.table == table && f.ref_table != table && catalog.table(&f.ref_table).is_some()
        })
        .collect()
}

/// Tables on a reference cycle (self references included), plus every
/// table they reference directly or indirectly. Sampling any of them would
/// leave dangling references in a whole copy.
fn whole_copy_set(catalog: &SchemaCatalog) -> BTreeSet<String> {
    let refs = |t: &str| -> Vec<&str> {
        catalog
            .foreign_keys
            .iter()
            .filter(|f| f.table == t && catalog.table(&f.ref_table).is_some())
            .map(|f| f.ref_table.as_str())
            .collect()
    };
    let reachable = |from: &str| -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&str> = refs(from);
        while let Some(t) = stack.pop() {
            if seen.insert(t.to_string()) {
                stack.extend(refs(t));
            }
        }
        seen
    };
    let mut out = BTreeSet::new();
    for t in &catalog.tables {
        let r = reachable(&t.name);
        if r.contains(&t.name) {
            log::warn!(
                "table {} is on a foreign-key cycle; copying it whole",
                t.name
            );
            out.extend(r);
        }
    }
    out
}

fn fk_condition(child_alias: &str, fk: &ForeignKey, parent: &str) -> String {
    let nulls: Vec<String> = fk
        .columns
        .iter()
        .map(|c| format!("{child_alias}.{} IS NULL", quote_ident(c)))
        .collect();
    let join: Vec<String> = fk
        .columns
        .iter()
        .zip(&fk.ref_columns)
        .map(|(c, r)| format!("p.{} = {child_alias}.{}", quote_ident(r), quote_ident(c)))
        .collect();
    format!(
        "({} OR EXISTS (SELECT 1 FROM {parent} p WHERE {}))",
        nulls.join(" OR "),
        join.join(" AND ")
    )
}

/// Builds a sample with referential integrity preserved along foreign keys.
///
/// Tables without (non-self) foreign keys are sampled uniformly at
/// `fraction`, reduced so that at most `max_rows` rows are expected. Every
/// other table keeps exactly the rows whose referenced parents were sampled.
/// Tables on a reference cycle, and everything they reference, are copied
/// whole.
pub fn correlated_sample(
    engine: &dyn Engine,
    catalog: &SchemaCatalog,
    fraction: f64,
    max_rows: u64,
    seed: u64,
    scratch_schema: &str,
) -> Result<SampleDatabase, EquivError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EquivError::InvalidFraction(fraction));
    }
    let base = engine.base_schema().to_string();
    let s = quote_ident(scratch_schema);
    engine.run_script(&format!(
        "DROP SCHEMA IF EXISTS {s} CASCADE; CREATE SCHEMA {s}"
    ))?;

    let whole_set = whole_copy_set(catalog);
    let mut done: BTreeSet<String> = BTreeSet::new();
    let mut pending: Vec<&TableInfo> = catalog.tables.iter().collect();
    // Whole copies first; they do not depend on any sampled table.
    pending.sort_by_key(|t| !whole_set.contains(&t.name));
    let mut sample = SampleDatabase {
        seed,
        scratch_schema: scratch_schema.to_string(),
        row_fractions: BTreeMap::new(),
        witness_rows_injected: false,
        whole_copies: Vec::new(),
    };
    while !pending.is_empty() {
        let i = pending
            .iter()
            .position(|t| {
                whole_set.contains(&t.name)
                    || parents(catalog, &t.name)
                        .iter()
                        .all(|f| done.contains(&f.ref_table))
            })
            .expect("tables outside cycles can be ordered");
        let table = pending.remove(i);
        let whole = whole_set.contains(&table.name);
        let src = qualified(&base, &table.name);
        let dst = qualified(scratch_schema, &table.name);
        let total = count(engine, &src)?;
        let fks = parents(catalog, &table.name);
        let select = if whole {
            sample.whole_copies.push(table.name.clone());
            format!("SELECT * FROM {src}")
        } else if fks.is_empty() {
            let cap = if total == 0 {
                1.0
            } else {
                max_rows as f64 / total as f64
            };
            let rate = fraction.min(cap);
            if rate >= 1.0 {
                format!("SELECT * FROM {src}")
            } else {
                format!(
                    "SELECT * FROM {src} TABLESAMPLE BERNOULLI ({}) REPEATABLE ({seed})",
                    rate * 100.0
                )
            }
        } else {
            let conds: Vec<String> = fks
                .iter()
                .map(|f| fk_condition("c", f, &qualified(scratch_schema, &f.ref_table)))
                .collect();
            format!("SELECT c.* FROM {src} c WHERE {}", conds.join(" AND "))
        };
        engine.run_script(&format!("CREATE TABLE {dst} AS {select}"))?;
        let kept = count(engine, &dst)?;
        let observed = if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        };
        sample.row_fractions.insert(table.name.clone(), observed);
        done.insert(table.name.clone());
    }
    Ok(sample)
}

/// Child rows whose non-NULL foreign key has no parent in the sample.
pub fn orphan_count(
    engine: &dyn Engine,
    sample: &SampleDatabase,
    catalog: &SchemaCatalog,
) -> Result<u64, EquivError> {
    let mut total = 0;
    for fk in &catalog.foreign_keys {
        if fk.table == fk.ref_table
            || !sample.row_fractions.contains_key(&fk.table)
            || !sample.row_fractions.contains_key(&fk.ref_table)
        {
            continue;
        }
        let not_null: Vec<String> = fk
            .columns
            .iter()
            .map(|c| format!("c.{} IS NOT NULL", quote_ident(c)))
            .collect();
        let join: Vec<String> = fk
            .columns
            .iter()
            .zip(&fk.ref_columns)
            .map(|(c, r)| format!("p.{} = c.{}", quote_ident(r), quote_ident(c)))
            .collect();
        total += count(
            engine,
            &format!(
                "{} c WHERE {} AND NOT EXISTS (SELECT 1 FROM {} p WHERE {})",
                qualified(&sample.scratch_schema, &fk.table),
                not_null.join(" AND "),
                qualified(&sample.scratch_schema, &fk.ref_table),
                join.join(" AND ")
            ),
        )?;
    }
    Ok(total)
}

fn is_numeric_type(t: &str) -> bool {
    let t = t.to_ascii_lowercase();
    [
        "smallint",
        "integer",
        "bigint",
        "numeric",
        "real",
        "double precision",
        "decimal",
    ]
    .iter()
    .any(|n| t.starts_with(n))
}

fn is_text_type(t: &str) -> bool {
    let t = t.to_ascii_lowercase();
    t == "text" || t.starts_with("character varying") || t.starts_with("varchar")
}

fn literal(v: &Value) -> Option<String> {
    match v {
        Value::Int(i) => Some(i.to_string()),
        Value::Numeric(s) => Some(s.clone()),
        Value::Float(f) if f.is_finite() => Some(f.to_string()),
        _ => None,
    }
}

fn fresh_value(
    engine: &dyn Engine,
    base: &str,
    sample: &SampleDatabase,
    table: &TableInfo,
    column: &str,
) -> Result<Option<String>, EquivError> {
    let Some(info) = table.column(column) else {
        return Ok(None);
    };
    let c = quote_ident(column);
    if is_numeric_type(&info.data_type) {
        let v = scalar(
            engine,
            &format!(
                "SELECT coalesce(greatest((SELECT max({c}) FROM {}), (SELECT max({c}) FROM {})), 0) + 1",
                qualified(base, &table.name),
                qualified(&sample.scratch_schema, &table.name)
            ),
        )?;
        Ok(literal(&v))
    } else if is_text_type(&info.data_type) {
        let n = count(engine, &qualified(&sample.scratch_schema, &table.name))?;
        Ok(Some(format!("'lithe_witness_{}_{n}'", sample.seed)))
    } else {
        Ok(None)
    }
}

fn template_filter(engine: &dyn Engine, from: &str, preds: &[&FilterPredicate]) -> String {
    if preds.is_empty() {
        return String::new();
    }
    let cond: Vec<String> = preds.iter().map(|p| p.to_sql()).collect();
    let filter = format!(" WHERE {}", cond.join(" AND "));
    match count(engine, &format!("{from}{filter}")) {
        Ok(n) if n > 0 => filter,
        _ => String::new(),
    }
}

/// Copies one row of `table` (preferably one satisfying `preds`) with the
/// `fresh` columns set to new key values and `nulls` set to NULL.
fn insert_copy(
    engine: &dyn Engine,
    sample: &SampleDatabase,
    table: &TableInfo,
    fresh: &[(String, String)],
    nulls: &[String],
    preds: &[&FilterPredicate],
) -> Result<bool, EquivError> {
    let from = qualified(&sample.scratch_schema, &table.name);
    if count(engine, &from)? == 0 {
        return Ok(false);
    }
    let filter = template_filter(engine, &from, preds);
    let cols: Vec<String> = table.columns.iter().map(|c| quote_ident(&c.name)).collect();
    let exprs: Vec<String> = table
        .columns
        .iter()
        .map(|c| {
            if let Some((_, v)) = fresh.iter().find(|(n, _)| *n == c.name) {
                v.clone()
            } else if nulls.contains(&c.name) {
                "NULL".to_string()
            } else {
                quote_ident(&c.name)
            }
        })
        .collect();
    let order = if table.primary_key.is_empty() {
        "ctid".to_string()
    } else {
        table
            .primary_key
            .iter()
            .map(|c| quote_ident(c))
            .collect::<Vec<_>>()
            .join(", ")
    };
    engine.run_script(&format!(
        "INSERT INTO {from} ({}) SELECT {} FROM {from}{filter} ORDER BY {order} LIMIT 1",
        cols.join(", "),
        exprs.join(", ")
    ))?;
    Ok(true)
}

fn fresh_keys(
    engine: &dyn Engine,
    base: &str,
    sample: &SampleDatabase,
    table: &TableInfo,
    columns: &[String],
) -> Result<Option<Vec<(String, String)>>, EquivError> {
    let mut out = Vec::new();
    for c in columns {
        match fresh_value(engine, base, sample, table, c)? {
            Some(v) => out.push((c.clone(), v)),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// Adds rows that make inner and outer joins along each foreign key differ:
/// a parent row with a fresh key (so it has no children) and, where the
/// foreign key is nullable, a child row with a NULL reference. Template rows
/// are chosen to satisfy `preds` when possible so that the witnesses survive
/// the queries' filters.
pub fn inject_outer_join_witnesses(
    engine: &dyn Engine,
    sample: &mut SampleDatabase,
    catalog: &SchemaCatalog,
    preds: &[FilterPredicate],
) -> Result<Vec<WitnessRow>, EquivError> {
    let base = engine.base_schema().to_string();
    let mut rows = Vec::new();
    let mut parents_done: BTreeSet<&str> = BTreeSet::new();
    for fk in &catalog.foreign_keys {
        if fk.table == fk.ref_table
            || !sample.row_fractions.contains_key(&fk.table)
            || !sample.row_fractions.contains_key(&fk.ref_table)
        {
            continue;
        }
        let (Some(parent), Some(child)) = (catalog.table(&fk.ref_table), catalog.table(&fk.table))
        else {
            continue;
        };
        if parents_done.insert(parent.name.as_str()) {
            let mut key: Vec<String> = parent.primary_key.clone();
            for r in &fk.ref_columns {
                if !key.contains(r) {
                    key.push(r.clone());
                }
            }
            let table_preds: Vec<&FilterPredicate> = preds
                .iter()
                .filter(|p| p.table.as_deref() == Some(&parent.name))
                .collect();
            match fresh_keys(engine, &base, sample, parent, &key)? {
                Some(fresh) => {
                    if insert_copy(engine, sample, parent, &fresh, &[], &table_preds)? {
                        rows.push(WitnessRow {
                            table: parent.name.clone(),
                            key: fresh,
                        });
                    }
                }
                None => log::warn!("no fresh key for {}; skipping its witness row", parent.name),
            }
        }
        let nullable = fk
            .columns
            .iter()
            .all(|c| child.column(c).is_some_and(|i| i.nullable));
        if nullable && !child.primary_key.is_empty() {
            let table_preds: Vec<&FilterPredicate> = preds
                .iter()
                .filter(|p| p.table.as_deref() == Some(&child.name))
                .collect();
            match fresh_keys(engine, &base, sample, child, &child.primary_key)? {
                Some(fresh) => {
                    if insert_copy(engine, sample, child, &fresh, &fk.columns, &table_preds)? {
                        rows.push(WitnessRow {
                            table: child.name.clone(),
                            key: fresh,
                        });
                    }
                }
                None => log::warn!("no fresh key for {}; skipping its witness row", child.name),
            }
        }
    }
    sample.witness_rows_injected = sample.witness_rows_injected || !rows.is_empty();
    Ok(rows)
}

/// Deletes previously injected witness rows.
pub fn remove_witnesses(
    engine: &dyn Engine,
    sample: &mut SampleDatabase,
    rows: &[WitnessRow],
) -> Result<(), EquivError> {
    for w in rows.iter().rev() {
        let cond: Vec<String> = w
            .key
            .iter()
            .map(|(c, v)| format!("{} = {v}", quote_ident(c)))
            .collect();
        engine.run_script(&format!(
            "DELETE FROM {} WHERE {}",
            qualified(&sample.scratch_schema, &w.table),
            cond.join(" AND ")
        ))?;
    }
    if !rows.is_empty() {
        sample.witness_rows_injected = false;
    }
    Ok(())
}

pub fn drop_sample(engine: &dyn Engine, sample: &SampleDatabase) -> Result<(), EquivError> {
    engine.run_script(&format!(
        "DROP SCHEMA IF EXISTS {} CASCADE",
        quote_ident(&sample.scratch_schema)
    ))?;
    Ok(())
}
