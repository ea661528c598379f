use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::sql::OrderKey;

const REL_TOL: f64 = 1e-9;

/// A single cell of a result set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    /// Arbitrary precision decimal, kept as text.
    Numeric(String),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            Value::Numeric(s) => s.parse().ok(),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Bool(_) => 1,
            Value::Int(_) | Value::Float(_) | Value::Numeric(_) => 2,
            Value::Text(_) => 3,
        }
    }

    /// Total order used to canonicalize unordered results.
    fn sort_cmp(&self, other: &Value) -> Ordering {
        match self.rank().cmp(&other.rank()) {
            Ordering::Equal => {}
            o => return o,
        }
        match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (a, b) => match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                _ => Ordering::Equal,
            },
        }
    }

    /// Equality with NULL = NULL and a relative tolerance across numeric
    /// types.
    pub fn matches(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Numeric(a), Value::Numeric(b)) if a == b => true,
            (a, b) => match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => close(x, y),
                _ => false,
            },
        }
    }

    /// Parses the text form PostgreSQL sends for a column of type `type_name`.
    pub fn from_pg_text(text: Option<&str>, type_name: &str) -> Value {
        let Some(t) = text else { return Value::Null };
        match type_name {
            "int2" | "int4" | "int8" | "oid" => t
                .parse()
                .map(Value::Int)
                .unwrap_or_else(|_| Value::Text(t.into())),
            "float4" | "float8" => match t {
                "NaN" => Value::Float(f64::NAN),
                "Infinity" => Value::Float(f64::INFINITY),
                "-Infinity" => Value::Float(f64::NEG_INFINITY),
                _ => t
                    .parse()
                    .map(Value::Float)
                    .unwrap_or_else(|_| Value::Text(t.into())),
            },
            "numeric" => Value::Numeric(normalize_numeric(t)),
            "bool" => Value::Bool(t == "t" || t == "true"),
            _ => Value::Text(t.to_string()),
        }
    }
}

fn normalize_numeric(t: &str) -> String {
    if t.contains('.') && !t.contains(['e', 'E']) {
        let s = t.trim_end_matches('0');
        s.trim_end_matches('.').to_string()
    } else {
        t.to_string()
    }
}

fn close(x: f64, y: f64) -> bool {
    if x == y || (x.is_nan() && y.is_nan()) {
        return true;
    }
    (x - y).abs() <= REL_TOL * x.abs().max(y.abs())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    /// The query had a top-level ORDER BY.
    pub ordered: bool,
    /// Output column indexes of the ORDER BY keys, when every key is an
    /// output column. `None` with `ordered` means rows are compared as a
    /// strict sequence.
    pub order_key: Option<Vec<usize>>,
}

/// Maps ORDER BY keys onto output columns.
pub fn resolve_order_key(columns: &[String], keys: &[OrderKey]) -> Option<Vec<usize>> {
    keys.iter()
        .map(|k| match k {
            OrderKey::Column(name) => columns.iter().position(|c| c.eq_ignore_ascii_case(name)),
            OrderKey::Position(p) => (*p >= 1 && *p <= columns.len()).then(|| p - 1),
            OrderKey::Expr(_) => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    Equal,
    Different(String),
}

impl Comparison {
    pub fn is_equal(&self) -> bool {
        matches!(self, Comparison::Equal)
    }
}

fn row_cmp(a: &[Value], b: &[Value]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.sort_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn rows_match(a: &[Value], b: &[Value]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.matches(y))
}

fn multiset_eq(a: &[Vec<Value>], b: &[Vec<Value>]) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("row counts differ: {} vs {}", a.len(), b.len()));
    }
    let mut sa: Vec<&Vec<Value>> = a.iter().collect();
    let mut sb: Vec<&Vec<Value>> = b.iter().collect();
    sa.sort_by(|x, y| row_cmp(x, y));
    sb.sort_by(|x, y| row_cmp(x, y));
    for (x, y) in sa.iter().zip(&sb) {
        if !rows_match(x, y) {
            return Some(format!("row {x:?} vs {y:?}"));
        }
    }
    None
}

fn groups<'a>(rows: &'a [Vec<Value>], key: &[usize]) -> Vec<&'a [Vec<Value>]> {
    let same = |x: &Vec<Value>, y: &Vec<Value>| key.iter().all(|&k| x[k].matches(&y[k]));
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || !same(&rows[start], &rows[i]) {
            if i > start {
                out.push(&rows[start..i]);
            }
            start = i;
        }
    }
    out
}

/// Compares two results the way a user of `reference` would.
///
/// Unordered results are compared as multisets. When `reference` is
/// ordered, rows must come in the same order except within groups of equal
/// sort keys; if the sort keys are not output columns the sequences must
/// match exactly.
pub fn compare_results(reference: &ResultSet, candidate: &ResultSet) -> Comparison {
    if reference.columns.len() != candidate.columns.len() {
        return Comparison::Different(format!(
            "column counts differ: {} vs {}",
            reference.columns.len(),
            candidate.columns.len()
        ));
    }
    if reference.rows.len() != candidate.rows.len() {
        return Comparison::Different(format!(
            "row counts differ: {} vs {}",
            reference.rows.len(),
            candidate.rows.len()
        ));
    }
    let width = reference.columns.len();
    if let Some(r) = reference
        .rows
        .iter()
        .chain(&candidate.rows)
        .find(|r| r.len() != width)
    {
        return Comparison::Different(format!("ragged row {r:?}"));
    }
    if !reference.ordered {
        return match multiset_eq(&reference.rows, &candidate.rows) {
            None => Comparison::Equal,
            Some(d) => Comparison::Different(d),
        };
    }
    match &reference.order_key {
        Some(key) if key.iter().all(|&k| k < width) => {
            let ga = groups(&reference.rows, key);
            let gb = groups(&candidate.rows, key);
            if ga.len() != gb.len() {
                return Comparison::Different("order differs".into());
            }
            for (i, (x, y)) in ga.iter().zip(&gb).enumerate() {
                if !key.iter().all(|&k| x[0][k].matches(&y[0][k])) {
                    return Comparison::Different(format!("order differs at group {i}"));
                }
                if let Some(d) = multiset_eq(x, y) {
                    return Comparison::Different(format!("group {i}: {d}"));
                }
            }
            Comparison::Equal
        }
        _ => {
            for (i, (x, y)) in reference.rows.iter().zip(&candidate.rows).enumerate() {
                if !rows_match(x, y) {
                    return Comparison::Different(format!("row {i}: {x:?} vs {y:?}"));
                }
            }
            Comparison::Equal
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rs(rows: Vec<Vec<Value>>) -> ResultSet {
        let width = rows.first().map_or(1, |r| r.len());
        ResultSet {
            columns: (0..width).map(|i| format!("c{i}")).collect(),
            rows,
            ordered: false,
            order_key: None,
        }
    }

    #[test]
    fn numeric_types_compare_with_tolerance() {
        assert!(Value::Int(3).matches(&Value::Numeric("3.000".into())));
        assert!(Value::Float(0.1 + 0.2).matches(&Value::Numeric("0.3".into())));
        assert!(!Value::Int(3).matches(&Value::Float(3.001)));
        assert!(Value::Null.matches(&Value::Null));
        assert!(!Value::Null.matches(&Value::Int(0)));
        assert!(!Value::Text("1".into()).matches(&Value::Int(1)));
    }

    #[test]
    fn unordered_is_multiset() {
        let a = rs(vec![
            vec![Value::Int(1)],
            vec![Value::Int(2)],
            vec![Value::Int(2)],
        ]);
        let b = rs(vec![
            vec![Value::Int(2)],
            vec![Value::Int(1)],
            vec![Value::Int(2)],
        ]);
        let c = rs(vec![
            vec![Value::Int(2)],
            vec![Value::Int(1)],
            vec![Value::Int(1)],
        ]);
        assert!(compare_results(&a, &b).is_equal());
        assert!(!compare_results(&a, &c).is_equal());
    }

    #[test]
    fn ordered_ties_may_permute() {
        let row = |k: i64, v: &str| vec![Value::Int(k), Value::Text(v.into())];
        let mut a = rs(vec![row(1, "x"), row(1, "y"), row(2, "z")]);
        a.ordered = true;
        a.order_key = Some(vec![0]);
        let b = rs(vec![row(1, "y"), row(1, "x"), row(2, "z")]);
        let c = rs(vec![row(2, "z"), row(1, "x"), row(1, "y")]);
        assert!(compare_results(&a, &b).is_equal());
        assert!(!compare_results(&a, &c).is_equal());
        a.order_key = None;
        assert!(!compare_results(&a, &b).is_equal());
    }

    #[test]
    fn pg_text_parsing() {
        assert_eq!(Value::from_pg_text(Some("42"), "int8"), Value::Int(42));
        assert_eq!(
            Value::from_pg_text(Some("1.50"), "numeric"),
            Value::Numeric("1.5".into())
        );
        assert_eq!(Value::from_pg_text(Some("t"), "bool"), Value::Bool(true));
        assert_eq!(Value::from_pg_text(None, "text"), Value::Null);
    }

    #[test]
    fn order_key_resolution() {
        let cols = vec!["a".to_string(), "B".to_string()];
        let keys = [OrderKey::Column("b".into()), OrderKey::Position(1)];
        assert_eq!(resolve_order_key(&cols, &keys), Some(vec![1, 0]));
        assert_eq!(
            resolve_order_key(&cols, &[OrderKey::Expr("a+1".into())]),
            None
        );
    }
}
