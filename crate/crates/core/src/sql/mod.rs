//! SQL query texts: parsing, fingerprinting and structural analysis.
//!
//! Parsing uses an embedded PostgreSQL grammar so that everything here works
//! without a live database. When a database is available its own parser is
//! authoritative (see [`crate::db::Engine::verify_syntax`]); texts accepted by
//! the server but not by the embedded grammar can still be wrapped with
//! [`SqlQuery::engine_accepted`].

mod analyze;
mod extract;
mod literals;

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sqlparser::ast::Statement;
use sqlparser::dialect::PostgreSqlDialect;
use sqlparser::parser::{Parser, ParserError};
use sqlparser::tokenizer::{Token, Tokenizer};

pub use analyze::{analyze, CmpOp, FilterPredicate, OrderKey, QueryStructure};
pub use extract::strip_decorations;
pub(crate) use literals::quote as quote_literal;
pub use literals::{
    literal_sites, replace_literal_tokens, substitute_literals, LiteralSite, LiteralValue,
};

/// SQL dialect accepted by the embedded grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Dialect {
    #[default]
    #[serde(rename = "postgres-compatible")]
    PostgresCompatible,
}

/// Parse failure with a human readable message and the character offset it
/// refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxError {
    pub message: String,
    pub offset: usize,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (at offset {})", self.message, self.offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SqlError {
    #[error("empty input")]
    EmptyInput,
    #[error("syntax error: {0}")]
    Syntax(SyntaxError),
    #[error("expected a single query statement, got: {0}")]
    NotAQuery(String),
    #[error("no SQL statement found in text")]
    NoSqlFound,
}

impl SqlError {
    /// Message suitable for feeding back to a model in a repair prompt.
    pub fn repair_message(&self) -> String {
        match self {
            SqlError::Syntax(e) => e.message.clone(),
            other => other.to_string(),
        }
    }
}

/// A validated query text.
///
/// Equality and hashing are by text. The fingerprint identifies texts that
/// differ only in whitespace, comments, keyword case or trailing semicolons.
#[derive(Clone)]
pub struct SqlQuery {
    text: String,
    dialect: Dialect,
    fingerprint: String,
    ast: Option<Arc<Statement>>,
}

impl SqlQuery {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn dialect(&self) -> Dialect {
        self.dialect
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub(crate) fn statement(&self) -> Option<&Statement> {
        self.ast.as_deref()
    }

    /// Wraps a text that the embedded grammar rejects but the database
    /// engine accepted. Structural analysis of such a query is degraded.
    pub fn engine_accepted(text: impl Into<String>) -> Result<Self, SqlError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(SqlError::EmptyInput);
        }
        let fingerprint = fingerprint(&text);
        Ok(Self {
            text,
            dialect: Dialect::PostgresCompatible,
            fingerprint,
            ast: None,
        })
    }

    /// True when the embedded grammar produced a syntax tree for this text.
    pub fn is_parsed(&self) -> bool {
        self.ast.is_some()
    }

    /// Text without trailing semicolons and surrounding whitespace, suitable
    /// for embedding in another statement (e.g. `EXPLAIN`).
    pub fn body(&self) -> &str {
        self.text
            .trim()
            .trim_end_matches(|c: char| c == ';' || c.is_whitespace())
    }
}

impl fmt::Debug for SqlQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SqlQuery")
            .field("text", &self.text)
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

impl fmt::Display for SqlQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl PartialEq for SqlQuery {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for SqlQuery {}

impl std::hash::Hash for SqlQuery {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.text.hash(state)
    }
}

impl Serialize for SqlQuery {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for SqlQuery {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        match parse(&text) {
            Ok(q) => Ok(q),
            Err(SqlError::Syntax(_)) => {
                SqlQuery::engine_accepted(text).map_err(serde::de::Error::custom)
            }
            Err(e) => Err(serde::de::Error::custom(e)),
        }
    }
}

/// Parses a single query statement.
pub fn parse(text: &str) -> Result<SqlQuery, SqlError> {
    if text.trim().is_empty() {
        return Err(SqlError::EmptyInput);
    }
    let dialect = PostgreSqlDialect {};
    let mut statements =
        Parser::parse_sql(&dialect, text).map_err(|e| SqlError::Syntax(syntax_error(text, e)))?;
    if statements.len() != 1 {
        return Err(SqlError::NotAQuery(format!(
            "{} statements",
            statements.len()
        )));
    }
    let stmt = statements.remove(0);
    if !matches!(stmt, Statement::Query(_)) {
        let kind = stmt.to_string();
        let head: String = kind
            .split_whitespace()
            .take(2)
            .collect::<Vec<_>>()
            .join(" ");
        return Err(SqlError::NotAQuery(head));
    }
    Ok(SqlQuery {
        text: text.to_string(),
        dialect: Dialect::PostgresCompatible,
        fingerprint: fingerprint(text),
        ast: Some(Arc::new(stmt)),
    })
}

fn syntax_error(text: &str, err: ParserError) -> SyntaxError {
    let message = match err {
        ParserError::TokenizerError(m) | ParserError::ParserError(m) => m,
        ParserError::RecursionLimitExceeded => "recursion limit exceeded".to_string(),
    };
    let offset = location_offset(&message)
        .map(|(line, col)| char_offset(text, line, col))
        .unwrap_or(0);
    SyntaxError { message, offset }
}

fn location_offset(message: &str) -> Option<(usize, usize)> {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = RE.get_or_init(|| regex::Regex::new(r"Line: (\d+), Column: (\d+)").unwrap());
    let caps = re.captures_iter(message).last()?;
    Some((caps[1].parse().ok()?, caps[2].parse().ok()?))
}

/// Converts a 1-based line/column pair into a 0-based character offset.
pub(crate) fn char_offset(text: &str, line: usize, col: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + col.saturating_sub(1).min(l.chars().count());
        }
        offset += l.chars().count() + 1;
    }
    offset.min(text.chars().count())
}

/// Converts a 1-based line/column pair into a byte offset.
pub(crate) fn byte_offset(text: &str, line: u64, col: u64) -> Option<usize> {
    if line == 0 || col == 0 {
        return None;
    }
    let mut start = 0usize;
    for (i, l) in text.split('\n').enumerate() {
        if i as u64 + 1 == line {
            let mut chars = l.char_indices();
            let mut remaining = col - 1;
            let mut pos = l.len();
            for (idx, _) in chars.by_ref() {
                if remaining == 0 {
                    pos = idx;
                    break;
                }
                remaining -= 1;
            }
            if remaining > 0 {
                return None;
            }
            return Some(start + pos);
        }
        start += l.len() + 1;
    }
    None
}

const RESERVED: &[&str] = &[
    "all",
    "analyse",
    "analyze",
    "and",
    "any",
    "array",
    "as",
    "asc",
    "asymmetric",
    "both",
    "case",
    "cast",
    "check",
    "collate",
    "column",
    "constraint",
    "create",
    "current_date",
    "current_role",
    "current_time",
    "current_timestamp",
    "current_user",
    "default",
    "deferrable",
    "desc",
    "distinct",
    "do",
    "else",
    "end",
    "except",
    "false",
    "fetch",
    "for",
    "foreign",
    "from",
    "grant",
    "group",
    "having",
    "in",
    "initially",
    "intersect",
    "into",
    "lateral",
    "leading",
    "limit",
    "localtime",
    "localtimestamp",
    "not",
    "null",
    "offset",
    "on",
    "only",
    "or",
    "order",
    "placing",
    "primary",
    "references",
    "returning",
    "select",
    "session_user",
    "some",
    "symmetric",
    "table",
    "then",
    "to",
    "trailing",
    "true",
    "union",
    "unique",
    "user",
    "using",
    "variadic",
    "when",
    "where",
    "window",
    "with",
];

/// Quotes an identifier unless PostgreSQL would read it back unchanged.
pub fn quote_ident(name: &str) -> String {
    let simple = name
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_lowercase() || c == '_')
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '$');
    if simple && !RESERVED.contains(&name) {
        name.to_string()
    } else {
        format!("\"{}\"", name.replace('"', "\"\""))
    }
}

/// Whitespace- and keyword-case-insensitive hash of a query text.
///
/// Only keywords are lowercased; identifiers and literals are kept verbatim.
/// Texts the tokenizer cannot handle fall back to whitespace normalization.
pub fn fingerprint(text: &str) -> String {
    let normalized = normalize(text);
    let digest = Sha256::digest(normalized.as_bytes());
    hex::encode(&digest[..16])
}

fn normalize(text: &str) -> String {
    let dialect = PostgreSqlDialect {};
    let tokens = match Tokenizer::new(&dialect, text).tokenize() {
        Ok(t) => t,
        Err(_) => return text.split_whitespace().collect::<Vec<_>>().join(" "),
    };
    let mut parts: Vec<String> = tokens
        .into_iter()
        .filter(|t| !matches!(t, Token::Whitespace(_) | Token::EOF))
        .map(|t| match t {
            Token::Word(w)
                if w.quote_style.is_none()
                    && w.keyword != sqlparser::keywords::Keyword::NoKeyword =>
            {
                w.value.to_lowercase()
            }
            other => other.to_string(),
        })
        .collect();
    while parts.last().is_some_and(|p| p == ";") {
        parts.pop();
    }
    parts.join(" ")
}
