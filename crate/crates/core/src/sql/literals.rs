use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sqlparser::dialect::PostgreSqlDialect;
use sqlparser::tokenizer::{Token, Tokenizer};

use super::analyze::{sites, CmpOp};
use super::SqlQuery;

/// Literal operand of a comparison.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LiteralValue {
    Number(String),
    Text(String),
    Bool(bool),
    /// A string interpreted as some type: `DATE '2000-01-01'`, `'x'::date`.
    /// Only the quoted part is covered by the site's span.
    Typed {
        type_name: String,
        value: String,
    },
}

impl LiteralValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            LiteralValue::Number(n) => n.parse().ok(),
            _ => None,
        }
    }

    /// SQL text to put in place of the literal's span.
    pub fn to_sql(&self) -> String {
        match self {
            LiteralValue::Number(n) => n.clone(),
            LiteralValue::Text(s) | LiteralValue::Typed { value: s, .. } => quote(s),
            LiteralValue::Bool(b) => b.to_string(),
        }
    }
}

pub(crate) fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

/// Position of a `column op literal` comparison in the query text.
///
/// `BETWEEN` yields two sites (`>=` low, `<=` high) and `IN` one `=` site
/// per list element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiteralSite {
    pub table: Option<String>,
    pub column: String,
    pub op: CmpOp,
    pub value: LiteralValue,
    /// Byte range of the literal in the query text.
    pub start: usize,
    pub end: usize,
}

pub fn literal_sites(query: &SqlQuery) -> Vec<LiteralSite> {
    sites(query)
}

/// Replaces byte ranges of `text`. Ranges must not overlap; the original
/// formatting outside them is preserved.
pub fn substitute_literals(text: &str, replacements: &[(usize, usize, String)]) -> String {
    let mut sorted: Vec<&(usize, usize, String)> = replacements.iter().collect();
    sorted.sort_by_key(|r| std::cmp::Reverse(r.0));
    let mut out = text.to_string();
    let mut limit = usize::MAX;
    for (start, end, with) in sorted {
        if *end > limit || start > end || *end > out.len() {
            continue;
        }
        out.replace_range(*start..*end, with);
        limit = *start;
    }
    out
}

/// Replaces every number or string literal token whose SQL text is a key
/// of `map`, wherever it occurs. Returns the new text and the number of
/// replacements; `None` if the text cannot be tokenized.
pub fn replace_literal_tokens(
    text: &str,
    map: &HashMap<String, String>,
) -> Option<(String, usize)> {
    let tokens = Tokenizer::new(&PostgreSqlDialect {}, text)
        .tokenize_with_location()
        .ok()?;
    let mut edits = Vec::new();
    for t in tokens {
        let key = match &t.token {
            Token::Number(n, _) => n.clone(),
            Token::SingleQuotedString(s) => quote(s),
            _ => continue,
        };
        if let Some(with) = map.get(&key) {
            let start = super::byte_offset(text, t.span.start.line, t.span.start.column)?;
            let end =
                super::byte_offset(text, t.span.end.line, t.span.end.column).unwrap_or(text.len());
            edits.push((start, end, with.clone()));
        }
    }
    let n = edits.len();
    Some((substitute_literals(text, &edits), n))
}
