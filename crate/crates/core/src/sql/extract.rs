use std::sync::OnceLock;

use regex::Regex;

use super::{parse, SqlError};

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\r?\n?(.*?)```").unwrap())
}

fn keyword_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(select|with)\b").unwrap())
}

/// Pulls the SQL statement out of a model response.
///
/// Fenced code blocks win (the longest one that contains SQL). Otherwise
/// every `SELECT`/`WITH` keyword is tried as a start, with the statement
/// ending at a semicolon or blank line; the first candidate that parses is
/// returned, falling back to the first candidate.
pub fn strip_decorations(text: &str) -> Result<String, SqlError> {
    let mut blocks: Vec<&str> = fence_re()
        .captures_iter(text)
        .filter_map(|c| c.get(1))
        .map(|m| m.as_str().trim())
        .filter(|b| keyword_re().is_match(b))
        .collect();
    if !blocks.is_empty() {
        blocks.sort_by_key(|b| std::cmp::Reverse(b.len()));
        return Ok(from_prose(blocks[0]).unwrap_or_else(|| blocks[0].to_string()));
    }
    // An unterminated fence (model cut off mid-answer) still marks the start.
    let unfenced = match text.find("```") {
        Some(i) => {
            let rest = &text[i + 3..];
            let rest = rest.find('\n').map(|n| &rest[n + 1..]).unwrap_or(rest);
            if keyword_re().is_match(rest) {
                rest
            } else {
                text
            }
        }
        None => text,
    };
    from_prose(unfenced).ok_or(SqlError::NoSqlFound)
}

fn from_prose(text: &str) -> Option<String> {
    let starts: Vec<usize> = keyword_re().find_iter(text).map(|m| m.start()).collect();
    let mut first: Option<String> = None;
    for &start in &starts {
        let rest = &text[start..];
        for cand in candidates(rest) {
            let cand = cand.trim();
            if cand.is_empty() {
                continue;
            }
            if first.is_none() {
                first = Some(cand.to_string());
            }
            if parse(cand).is_ok() {
                return Some(cand.to_string());
            }
        }
    }
    first
}

fn candidates(rest: &str) -> Vec<&str> {
    let mut out = Vec::new();
    if let Some(i) = rest.rfind(';') {
        out.push(&rest[..=i]);
    }
    if let Some(i) = rest.find(';') {
        out.push(&rest[..=i]);
    }
    if let Some(i) = rest.find("\n\n") {
        out.push(&rest[..i]);
    }
    out.push(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenced_block() {
        let r = "Here is the rewrite:\n```sql\nSELECT a FROM t;\n```\nIt is faster.";
        assert_eq!(strip_decorations(r).unwrap(), "SELECT a FROM t;");
    }

    #[test]
    fn longest_fence_wins() {
        let r = "```sql\nSELECT 1;\n```\nor\n```\nWITH x AS (SELECT 2) SELECT * FROM x;\n```";
        assert_eq!(
            strip_decorations(r).unwrap(),
            "WITH x AS (SELECT 2) SELECT * FROM x;"
        );
    }

    #[test]
    fn prose_around_statement() {
        let r = "Sure! We can do this with a CTE. SELECT b FROM u WHERE b > 1; This avoids a scan.";
        assert_eq!(
            strip_decorations(r).unwrap(),
            "SELECT b FROM u WHERE b > 1;"
        );
    }

    #[test]
    fn bare_statement_without_semicolon() {
        assert_eq!(strip_decorations("  SELECT 1  ").unwrap(), "SELECT 1");
    }

    #[test]
    fn trailing_explanation_after_blank_line() {
        let r = "SELECT a FROM t\n\nThis selects a.";
        assert_eq!(strip_decorations(r).unwrap(), "SELECT a FROM t");
    }

    #[test]
    fn unparseable_sql_is_still_returned() {
        assert_eq!(
            strip_decorations("SELECT FROM WHERE;").unwrap(),
            "SELECT FROM WHERE;"
        );
    }

    #[test]
    fn unterminated_fence() {
        let r = "```sql\nSELECT a FROM t;";
        assert_eq!(strip_decorations(r).unwrap(), "SELECT a FROM t;");
    }

    #[test]
    fn no_sql() {
        assert_eq!(
            strip_decorations("I cannot improve this query.").unwrap_err(),
            SqlError::NoSqlFound
        );
    }
}
