//! Prompt texts: basic prompts, one-rule prompts, syntax repair and rule
//! classification.
//!
//! Wording lives in data files (a JSON manifest plus plain-text templates and
//! SQL examples). The default set is compiled in; [`PromptLibrary::from_dir`]
//! loads a replacement set from disk.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};

use crate::db::{SchemaCatalog, SelectivityMap};
use crate::sql::{parse, SqlQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PromptId {
    B1,
    B2,
    B3,
    B4,
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    Repair,
    Classify,
}

impl PromptId {
    pub const BASIC: [PromptId; 4] = [PromptId::B1, PromptId::B2, PromptId::B3, PromptId::B4];
    pub const RULES: [PromptId; 6] = [
        PromptId::R1,
        PromptId::R2,
        PromptId::R3,
        PromptId::R4,
        PromptId::R5,
        PromptId::R6,
    ];
    /// Every prompt that produces a rewrite, in tie-break order.
    pub const ENSEMBLE: [PromptId; 10] = [
        PromptId::B1,
        PromptId::B2,
        PromptId::B3,
        PromptId::B4,
        PromptId::R1,
        PromptId::R2,
        PromptId::R3,
        PromptId::R4,
        PromptId::R5,
        PromptId::R6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptId::B1 => "B1",
            PromptId::B2 => "B2",
            PromptId::B3 => "B3",
            PromptId::B4 => "B4",
            PromptId::R1 => "R1",
            PromptId::R2 => "R2",
            PromptId::R3 => "R3",
            PromptId::R4 => "R4",
            PromptId::R5 => "R5",
            PromptId::R6 => "R6",
            PromptId::Repair => "REPAIR",
            PromptId::Classify => "CLASSIFY",
        }
    }

    pub fn is_basic(self) -> bool {
        Self::BASIC.contains(&self)
    }

    pub fn is_rule(self) -> bool {
        Self::RULES.contains(&self)
    }

    pub fn needs_schema(self) -> bool {
        matches!(self, PromptId::R4 | PromptId::R6)
    }

    pub fn needs_stats(self) -> bool {
        matches!(self, PromptId::R5 | PromptId::R6)
    }

    /// Sent as several sub-prompts within one conversation.
    pub fn iterative(self) -> bool {
        self == PromptId::B4
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase();
        [PromptId::Repair, PromptId::Classify]
            .into_iter()
            .chain(Self::ENSEMBLE)
            .find(|p| p.as_str() == up)
            .ok_or_else(|| PromptError::UnknownPrompt(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error("cannot read prompt file {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("bad prompt manifest: {0}")]
    Manifest(String),
    #[error("unknown prompt id {0}")]
    UnknownPrompt(String),
    #[error("{prompt} is not a {expected} prompt")]
    WrongKind {
        prompt: PromptId,
        expected: &'static str,
    },
    #[error("{prompt} needs {what}, which was not provided")]
    MissingContext {
        prompt: PromptId,
        what: &'static str,
    },
    #[error("example for {rule} does not parse: {message}")]
    BadExample { rule: PromptId, message: String },
}

/// Worked demonstration of one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleExample {
    pub rule: PromptId,
    pub original_sql: String,
    pub rewritten_sql: String,
    pub schema_sql: Option<String>,
    pub stats_lines: Option<Vec<String>>,
}

impl RuleExample {
    fn render(&self) -> String {
        let mut out = format!("Original query:\n{}\n", self.original_sql.trim_end());
        if let Some(s) = &self.schema_sql {
            out.push_str(&format!("\nSchema:\n{}\n", s.trim_end()));
        }
        if let Some(lines) = &self.stats_lines {
            out.push_str(&format!("\nStatistics:\n{}\n", lines.join("\n")));
        }
        out.push_str(&format!(
            "\nRewritten query:\n{}\n",
            self.rewritten_sql.trim_end()
        ));
        out
    }
}

/// A query the rule should not be applied to, for the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterExample {
    pub sql: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub id: PromptId,
    /// The one-sentence rule instruction.
    pub text: String,
    pub example: RuleExample,
    pub counter: CounterExample,
}

/// Optional database context for rule and classifier prompts.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptContext<'a> {
    pub catalog: Option<&'a SchemaCatalog>,
    pub stats: Option<&'a SelectivityMap>,
}

#[derive(Debug, Deserialize)]
struct ManifestRule {
    text: String,
    original: String,
    rewritten: String,
    #[serde(default)]
    schema: Option<String>,
    #[serde(default)]
    stats: Option<String>,
    counter: String,
    counter_note: String,
}

#[derive(Debug, Deserialize)]
struct Manifest {
    basic: BTreeMap<String, Vec<String>>,
    rule_template: String,
    repair: String,
    classify: String,
    classify_retry: String,
    rules: BTreeMap<String, ManifestRule>,
}

macro_rules! builtin_files {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../prompts/", $name)))),*]
    };
}

const BUILTIN: &[(&str, &str)] = builtin_files!(
    "manifest.json",
    "b1.txt",
    "b2.txt",
    "b3.txt",
    "b4_1.txt",
    "b4_2.txt",
    "b4_3.txt",
    "rule.txt",
    "repair.txt",
    "classify.txt",
    "classify_retry.txt",
    "examples/r1_original.sql",
    "examples/r1_rewritten.sql",
    "examples/r1_counter.sql",
    "examples/r2_original.sql",
    "examples/r2_rewritten.sql",
    "examples/r2_counter.sql",
    "examples/r3_original.sql",
    "examples/r3_rewritten.sql",
    "examples/r3_counter.sql",
    "examples/r4_schema.sql",
    "examples/r4_original.sql",
    "examples/r4_rewritten.sql",
    "examples/r4_counter.sql",
    "examples/r5_original.sql",
    "examples/r5_rewritten.sql",
    "examples/r5_stats.txt",
    "examples/r5_counter.sql",
    "examples/r6_original.sql",
    "examples/r6_rewritten.sql",
    "examples/r6_stats.txt",
    "examples/r6_counter.sql",
);

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\{(query|schema|stats|example|error|previous|rule|rules)\}").unwrap()
    })
}

/// Single-pass substitution, so placeholder-like text inside a value is
/// never expanded.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    placeholder_re()
        .replace_all(template, |c: &Captures| {
            let key = &c[1];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.to_string())
                .unwrap_or_default()
        })
        .into_owned()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLibrary {
    basic: BTreeMap<PromptId, Vec<String>>,
    rule_template: String,
    repair: String,
    classify: String,
    classify_retry: String,
    rules: Vec<RuleSpec>,
}

impl PromptLibrary {
    /// The compiled-in prompt set.
    pub fn builtin() -> Self {
        static LIB: OnceLock<PromptLibrary> = OnceLock::new();
        LIB.get_or_init(|| {
            Self::load(|name| {
                BUILTIN
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, c)| c.to_string())
                    .ok_or_else(|| PromptError::Io {
                        path: name.into(),
                        message: "not bundled".into(),
                    })
            })
            .expect("bundled prompts are valid")
        })
        .clone()
    }

    /// Loads `manifest.json` and the files it names from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        Self::load(|name| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path,
                message: e.to_string(),
            })
        })
    }

    fn load(read: impl Fn(&str) -> Result<String, PromptError>) -> Result<Self, PromptError> {
        let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)
            .map_err(|e| PromptError::Manifest(e.to_string()))?;
        let mut basic = BTreeMap::new();
        for (id, files) in &manifest.basic {
            let id: PromptId = id.parse()?;
            if !id.is_basic() || files.is_empty() {
                return Err(PromptError::Manifest(format!(
                    "bad basic prompt entry {id}"
                )));
            }
            basic.insert(
                id,
                files
                    .iter()
                    .map(|f| read(f))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
        for id in PromptId::BASIC {
            if !basic.contains_key(&id) {
                return Err(PromptError::Manifest(format!("missing basic prompt {id}")));
            }
        }
        let mut rules = Vec::new();
        for id in PromptId::RULES {
            let r = manifest
                .rules
                .get(id.as_str())
                .ok_or_else(|| PromptError::Manifest(format!("missing rule {id}")))?;
            let stats_lines = match &r.stats {
                Some(f) => Some(read(f)?.lines().map(|l| l.trim_end().to_string()).collect()),
                None => None,
            };
            let example = RuleExample {
                rule: id,
                original_sql: read(&r.original)?,
                rewritten_sql: read(&r.rewritten)?,
                schema_sql: r.schema.as_deref().map(&read).transpose()?,
                stats_lines,
            };
            for sql in [&example.original_sql, &example.rewritten_sql] {
                parse(sql).map_err(|e| PromptError::BadExample {
                    rule: id,
                    message: e.to_string(),
                })?;
            }
            rules.push(RuleSpec {
                id,
                text: r.text.trim().to_string(),
                example,
                counter: CounterExample {
                    sql: read(&r.counter)?,
                    note: r.counter_note.clone(),
                },
            });
        }
        Ok(Self {
            basic,
            rule_template: read(&manifest.rule_template)?,
            repair: read(&manifest.repair)?,
            classify: read(&manifest.classify)?,
            classify_retry: read(&manifest.classify_retry)?,
            rules,
        })
    }

    pub fn rule(&self, id: PromptId) -> Option<&RuleSpec> {
        self.rules.iter().find(|r| r.id == id)
    }

    pub fn rules(&self) -> &[RuleSpec] {
        &self.rules
    }

    /// Basic prompt texts; several for the iterative prompt, one otherwise.
    pub fn render_basic(&self, query: &SqlQuery, id: PromptId) -> Result<Vec<String>, PromptError> {
        let parts = self.basic.get(&id).ok_or(PromptError::WrongKind {
            prompt: id,
            expected: "basic",
        })?;
        // The query goes into the first sub-prompt only.
        let mut placed = false;
        Ok(parts
            .iter()
            .map(|t| {
                let text = if !placed && t.contains("{query}") {
                    placed = true;
                    fill(t, &[("query", query.text())])
                } else {
                    fill(t, &[])
                };
                text.trim_end().to_string()
            })
            .collect())
    }

    pub fn render_rule(
        &self,
        query: &SqlQuery,
        id: PromptId,
        ctx: PromptContext<'_>,
    ) -> Result<String, PromptError> {
        let rule = self.rule(id).ok_or(PromptError::WrongKind {
            prompt: id,
            expected: "rule",
        })?;
        let schema = match (id.needs_schema(), ctx.catalog) {
            (true, None) => {
                return Err(PromptError::MissingContext {
                    prompt: id,
                    what: "a schema catalog",
                })
            }
            (true, Some(c)) => format!("Schema:\n{}\n", c.to_ddl().trim_end()),
            (false, _) => String::new(),
        };
        let stats = match (id.needs_stats(), ctx.stats) {
            (true, None) => {
                return Err(PromptError::MissingContext {
                    prompt: id,
                    what: "predicate selectivities",
                })
            }
            (true, Some(s)) => format!("Statistics:\n{}\n", s.render()),
            (false, _) => String::new(),
        };
        let example = rule.example.render();
        Ok(fill(
            &self.rule_template,
            &[
                ("rule", &rule.text),
                ("example", &example),
                ("schema", &schema),
                ("stats", &stats),
                ("query", query.text()),
            ],
        )
        .trim_end()
        .to_string())
    }

    /// Prompt texts for any rewrite prompt, in sending order.
    pub fn render(
        &self,
        query: &SqlQuery,
        id: PromptId,
        ctx: PromptContext<'_>,
    ) -> Result<Vec<String>, PromptError> {
        if id.is_basic() {
            self.render_basic(query, id)
        } else {
            self.render_rule(query, id, ctx).map(|p| vec![p])
        }
    }

    /// Single prompt from which token-level search starts. The iterative
    /// prompt's sub-prompts are joined in order.
    pub fn seed_prompt(
        &self,
        query: &SqlQuery,
        id: PromptId,
        ctx: PromptContext<'_>,
    ) -> Result<String, PromptError> {
        Ok(self.render(query, id, ctx)?.join("\n\n"))
    }

    pub fn render_repair(&self, query: &SqlQuery, bad_rewrite: &str, error: &str) -> String {
        let error = if error.trim().is_empty() {
            "The database rejected the query without an error message."
        } else {
            error
        };
        fill(
            &self.repair,
            &[
                ("query", query.text()),
                ("previous", bad_rewrite),
                ("error", error),
            ],
        )
        .trim_end()
        .to_string()
    }

    pub fn render_classify(&self, query: &SqlQuery, ctx: PromptContext<'_>) -> String {
        let mut rules = String::new();
        for r in &self.rules {
            rules.push_str(&format!(
                "{}: {}\nExample where it applies:\n{}\nCounter-example where it does not apply ({}):\n{}\n\n",
                r.id,
                r.text,
                r.example.render(),
                r.counter.note,
                r.counter.sql.trim_end()
            ));
        }
        let schema = ctx
            .catalog
            .map(|c| format!("Schema:\n{}\n", c.to_ddl().trim_end()))
            .unwrap_or_default();
        let stats = ctx
            .stats
            .filter(|s| !s.is_empty())
            .map(|s| format!("Statistics:\n{}\n", s.render()))
            .unwrap_or_default();
        fill(
            &self.classify,
            &[
                ("rules", &rules),
                ("schema", &schema),
                ("stats", &stats),
                ("query", query.text()),
            ],
        )
        .trim_end()
        .to_string()
    }

    /// Follow-up sent when a classifier answer could not be parsed.
    pub fn classify_retry(&self) -> &str {
        self.classify_retry.trim_end()
    }
}
