use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use super::sample::{count, qualified, SampleDatabase};
use super::EquivError;
use crate::db::{Engine, SchemaCatalog, Value};
use crate::sql::{
    literal_sites, parse, quote_ident, replace_literal_tokens, CmpOp, LiteralValue, SqlError,
    SqlQuery,
};

/// Result of adjusting the filter constants of a query pair.
#[derive(Debug, Clone)]
pub struct Adjustment {
    pub q1: SqlQuery,
    pub q2: SqlQuery,
    /// Literal text -> replacement, applied to both queries.
    pub substitutions: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

fn requery(text: String) -> Result<SqlQuery, SqlError> {
    match parse(&text) {
        Ok(q) => Ok(q),
        Err(SqlError::Syntax(_)) => SqlQuery::engine_accepted(text),
        Err(e) => Err(e),
    }
}

fn first_row(engine: &dyn Engine, sql: &str) -> Result<Vec<Value>, EquivError> {
    let rs = engine.query_raw(sql, Duration::from_secs(60))?;
    Ok(rs.rows.into_iter().next().unwrap_or_default())
}

fn is_integer_type(t: &str) -> bool {
    matches!(
        t.to_ascii_lowercase().as_str(),
        "smallint" | "integer" | "bigint"
    )
}

/// Midpoint of `[min, max]`, as an integer literal when the column is.
fn midpoint(min: f64, max: f64, integral: bool) -> String {
    let mid = (min + max) / 2.0;
    if integral {
        format!("{}", mid.floor() as i64)
    } else {
        format!("{mid}")
    }
}

/// Computes replacements for `q`'s filter constants on the sample.
///
/// An equality constant absent from the sampled column becomes the column's
/// smallest sampled value. A range constant outside the sampled
/// `[min, max]` becomes the midpoint. Constants already present, or inside
/// the range, are kept.
pub fn constant_substitutions(
    engine: &dyn Engine,
    sample: &SampleDatabase,
    catalog: &SchemaCatalog,
    q: &SqlQuery,
) -> (BTreeMap<String, String>, Vec<String>) {
    let mut map = BTreeMap::new();
    let mut warnings = Vec::new();
    for site in literal_sites(q) {
        let Some(table) = site.table.as_deref().and_then(|t| catalog.table(t)) else {
            continue;
        };
        if !sample.row_fractions.contains_key(&table.name) {
            continue;
        }
        let Some(column) = table.column(&site.column) else {
            continue;
        };
        let key = q.text()[site.start..site.end].to_string();
        if map.contains_key(&key) || key.starts_with('-') {
            continue;
        }
        let from = qualified(&sample.scratch_schema, &table.name);
        let col = quote_ident(&column.name);
        let replacement = match site.op {
            CmpOp::Eq => {
                match count(engine, &format!("{from} WHERE {col} = {key}")) {
                    Ok(0) => {}
                    Ok(_) => continue,
                    Err(e) => {
                        warnings.push(format!(
                            "cannot probe {}.{} = {key}: {e}",
                            table.name, column.name
                        ));
                        continue;
                    }
                }
                let row = first_row(
                    engine,
                    &format!("SELECT {col}::text FROM {from} WHERE {col} IS NOT NULL ORDER BY {col} LIMIT 1"),
                );
                match row.as_deref() {
                    Ok([Value::Text(v)]) => match &site.value {
                        LiteralValue::Number(_) | LiteralValue::Bool(_) => v.clone(),
                        LiteralValue::Text(_) | LiteralValue::Typed { .. } => {
                            crate::sql::quote_literal(v)
                        }
                    },
                    Ok(_) => {
                        warnings.push(format!(
                            "column {}.{} is empty in the sample",
                            table.name, column.name
                        ));
                        continue;
                    }
                    Err(e) => {
                        warnings.push(e.to_string());
                        continue;
                    }
                }
            }
            CmpOp::Lt | CmpOp::LtEq | CmpOp::Gt | CmpOp::GtEq => {
                let Some(c) = site.value.as_f64() else {
                    continue;
                };
                let row = first_row(
                    engine,
                    &format!("SELECT min({col})::float8, max({col})::float8 FROM {from}"),
                );
                match row.as_deref() {
                    Ok([lo, hi]) => match (lo.as_f64(), hi.as_f64()) {
                        (Some(lo), Some(hi)) if c < lo || c > hi => midpoint(
                            lo,
                            hi,
                            is_integer_type(&column.data_type) && !key.contains('.'),
                        ),
                        (Some(_), Some(_)) => continue,
                        _ => {
                            warnings.push(format!(
                                "column {}.{} is empty in the sample",
                                table.name, column.name
                            ));
                            continue;
                        }
                    },
                    Ok(_) => continue,
                    Err(e) => {
                        warnings.push(e.to_string());
                        continue;
                    }
                }
            }
            _ => continue,
        };
        if replacement != key {
            map.insert(key, replacement);
        }
    }
    (map, warnings)
}

/// Adjusts constants of both queries with one substitution map computed
/// from `q1`. Substitutions whose literal does not occur in both texts are
/// dropped, so the two queries always receive the same mutation.
pub fn adjust_constants(
    engine: &dyn Engine,
    sample: &SampleDatabase,
    catalog: &SchemaCatalog,
    q1: &SqlQuery,
    q2: &SqlQuery,
) -> Adjustment {
    let (map, mut warnings) = constant_substitutions(engine, sample, catalog, q1);
    let mut kept = BTreeMap::new();
    for (k, v) in map {
        let single = HashMap::from([(k.clone(), v.clone())]);
        let in_both = [q1, q2]
            .iter()
            .all(|q| replace_literal_tokens(q.text(), &single).is_some_and(|(_, n)| n > 0));
        if in_both {
            kept.insert(k, v);
        } else {
            warnings.push(format!(
                "constant {k} does not occur in both queries; left unchanged"
            ));
        }
    }
    let all: HashMap<String, String> = kept.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let rewrite = |q: &SqlQuery| -> SqlQuery {
        if all.is_empty() {
            return q.clone();
        }
        replace_literal_tokens(q.text(), &all)
            .and_then(|(t, _)| requery(t).ok())
            .unwrap_or_else(|| q.clone())
    };
    Adjustment {
        q1: rewrite(q1),
        q2: rewrite(q2),
        substitutions: kept,
        warnings,
    }
}
