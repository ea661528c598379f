use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    BinaryOperator, Expr, Ident, JoinConstraint, JoinOperator, ObjectName, ObjectNamePart,
    OrderByKind, Query, Select, Statement, TableFactor, TableWithJoins, UnaryOperator, Value,
    ValueWithSpan, Visit, Visitor,
};
use sqlparser::dialect::PostgreSqlDialect;
use sqlparser::keywords::Keyword;
use sqlparser::tokenizer::{Token, Tokenizer};

use super::literals::{LiteralSite, LiteralValue};
use super::{byte_offset, SqlQuery};

/// Comparison operator of a filter predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    NotEq,
    Lt,
    LtEq,
    Gt,
    GtEq,
    Like,
    NotLike,
    Between,
    NotBetween,
    In,
    NotIn,
}

impl CmpOp {
    pub fn as_sql(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::NotEq => "<>",
            CmpOp::Lt => "<",
            CmpOp::LtEq => "<=",
            CmpOp::Gt => ">",
            CmpOp::GtEq => ">=",
            CmpOp::Like => "LIKE",
            CmpOp::NotLike => "NOT LIKE",
            CmpOp::Between => "BETWEEN",
            CmpOp::NotBetween => "NOT BETWEEN",
            CmpOp::In => "IN",
            CmpOp::NotIn => "NOT IN",
        }
    }

    /// Operator with its operands swapped (`5 < a` is `a > 5`).
    fn flipped(self) -> Self {
        match self {
            CmpOp::Lt => CmpOp::Gt,
            CmpOp::LtEq => CmpOp::GtEq,
            CmpOp::Gt => CmpOp::Lt,
            CmpOp::GtEq => CmpOp::LtEq,
            other => other,
        }
    }

    fn from_binary(op: &BinaryOperator) -> Option<Self> {
        Some(match op {
            BinaryOperator::Eq => CmpOp::Eq,
            BinaryOperator::NotEq => CmpOp::NotEq,
            BinaryOperator::Lt => CmpOp::Lt,
            BinaryOperator::LtEq => CmpOp::LtEq,
            BinaryOperator::Gt => CmpOp::Gt,
            BinaryOperator::GtEq => CmpOp::GtEq,
            _ => return None,
        })
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_sql())
    }
}

/// A `column op literal` atom found in a WHERE, HAVING or ON clause.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterPredicate {
    /// Base table the column belongs to, when it could be resolved.
    pub table: Option<String>,
    pub column: String,
    pub op: CmpOp,
    /// Literal operand as SQL text (`'x'`, `5`, `1 AND 9`, `(1, 2)`).
    pub value: String,
}

impl FilterPredicate {
    /// Standalone predicate text, e.g. `rating > 5`.
    pub fn to_sql(&self) -> String {
        format!(
            "{} {} {}",
            super::quote_ident(&self.column),
            self.op,
            self.value
        )
    }
}

/// How the top-level ORDER BY refers to its sort keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderKey {
    Column(String),
    Position(usize),
    Expr(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryStructure {
    /// Base tables in order of first appearance, CTE names excluded.
    pub tables: Vec<String>,
    pub join_count: usize,
    pub filter_predicates: Vec<FilterPredicate>,
    pub order_by: Vec<OrderKey>,
    /// Volatile functions (`random()`, `now()`, ...) the query calls.
    pub volatile_functions: Vec<String>,
    /// Set when only a degraded, table-level analysis was possible.
    pub warning: Option<String>,
}

impl QueryStructure {
    pub fn is_deterministic(&self) -> bool {
        self.volatile_functions.is_empty()
    }

    pub fn has_order_by(&self) -> bool {
        !self.order_by.is_empty()
    }
}

const VOLATILE: &[&str] = &[
    "random",
    "setseed",
    "now",
    "clock_timestamp",
    "statement_timestamp",
    "transaction_timestamp",
    "timeofday",
    "current_timestamp",
    "current_time",
    "localtimestamp",
    "localtime",
    "current_date",
    "gen_random_uuid",
    "uuid_generate_v4",
    "nextval",
];

/// Extracts tables, join count and filter predicates.
///
/// The join count adds, for every SELECT, its explicit JOIN operators plus the
/// commas of its FROM list. Comma lists made up only of derived tables or CTE
/// references are not counted: they combine already aggregated results rather
/// than joining base relations. Joins inside subqueries count separately.
pub fn analyze(query: &SqlQuery) -> QueryStructure {
    match query.statement() {
        Some(stmt) => walk(stmt, query.text()).0,
        None => degraded(query.text()),
    }
}

pub(crate) fn sites(query: &SqlQuery) -> Vec<LiteralSite> {
    match query.statement() {
        Some(stmt) => walk(stmt, query.text()).1,
        None => Vec::new(),
    }
}

fn walk(stmt: &Statement, text: &str) -> (QueryStructure, Vec<LiteralSite>) {
    let mut w = Walker {
        text,
        ctes: BTreeSet::new(),
        scopes: Vec::new(),
        out: QueryStructure::default(),
        sites: Vec::new(),
    };
    if let Statement::Query(q) = stmt {
        w.out.order_by = order_keys(q);
    }
    let _ = stmt.visit(&mut w);
    (w.out, w.sites)
}

fn degraded(text: &str) -> QueryStructure {
    let mut out = QueryStructure {
        warning: Some(
            "query not understood by the embedded parser; only tables were extracted".into(),
        ),
        ..Default::default()
    };
    let dialect = PostgreSqlDialect {};
    let Ok(tokens) = Tokenizer::new(&dialect, text).tokenize() else {
        return out;
    };
    let words: Vec<&Token> = tokens
        .iter()
        .filter(|t| !matches!(t, Token::Whitespace(_)))
        .collect();
    let mut in_from = false;
    let mut expect_table = false;
    let mut pushed = false;
    for tok in words {
        let was_pushed = std::mem::take(&mut pushed);
        match tok {
            Token::Word(w)
                if w.quote_style.is_none()
                    && matches!(w.keyword, Keyword::FROM | Keyword::JOIN) =>
            {
                in_from = w.keyword == Keyword::FROM || in_from;
                expect_table = true;
            }
            Token::Word(w) if expect_table => {
                let name = ident_name(&Ident {
                    value: w.value.clone(),
                    quote_style: w.quote_style,
                    span: sqlparser::tokenizer::Span::empty(),
                });
                if !out.tables.contains(&name) {
                    out.tables.push(name);
                    pushed = true;
                }
                expect_table = false;
            }
            Token::Comma if in_from => expect_table = true,
            Token::Period if was_pushed => {
                // schema qualifier: keep only the relation name
                out.tables.pop();
                expect_table = true;
            }
            Token::Word(w) if w.keyword != Keyword::NoKeyword && w.keyword != Keyword::AS => {
                in_from = false;
                expect_table = false;
            }
            _ => expect_table = false,
        }
    }
    out
}

fn order_keys(q: &Query) -> Vec<OrderKey> {
    let Some(ob) = &q.order_by else {
        return Vec::new();
    };
    let OrderByKind::Expressions(exprs) = &ob.kind else {
        return vec![OrderKey::Expr("ALL".into())];
    };
    exprs
        .iter()
        .map(|o| match &o.expr {
            Expr::Value(ValueWithSpan {
                value: Value::Number(n, _),
                ..
            }) => n
                .parse()
                .map(OrderKey::Position)
                .unwrap_or_else(|_| OrderKey::Expr(n.clone())),
            Expr::Identifier(id) => OrderKey::Column(ident_name(id)),
            Expr::CompoundIdentifier(ids) => OrderKey::Column(ident_name(ids.last().unwrap())),
            other => OrderKey::Expr(other.to_string()),
        })
        .collect()
}

/// Folds unquoted identifiers to lower case, as PostgreSQL does.
pub(crate) fn ident_name(id: &Ident) -> String {
    if id.quote_style.is_some() {
        id.value.clone()
    } else {
        id.value.to_lowercase()
    }
}

fn object_last(name: &ObjectName) -> Option<String> {
    match name.0.last()? {
        ObjectNamePart::Identifier(id) => Some(ident_name(id)),
        _ => None,
    }
}

#[derive(Default)]
struct Scope {
    /// alias or table name -> base table (None for derived tables / CTEs)
    names: HashMap<String, Option<String>>,
    base_tables: Vec<String>,
    derived: usize,
}

struct Walker<'a> {
    text: &'a str,
    ctes: BTreeSet<String>,
    scopes: Vec<Scope>,
    out: QueryStructure,
    sites: Vec<LiteralSite>,
}

enum Leaf {
    Base,
    Other,
}

impl Walker<'_> {
    fn is_cte(&self, name: &ObjectName) -> bool {
        name.0.len() == 1 && object_last(name).is_some_and(|n| self.ctes.contains(&n))
    }

    fn collect_leaves(&self, twj: &TableWithJoins, scope: &mut Scope, leaves: &mut Vec<Leaf>) {
        self.collect_factor(&twj.relation, scope, leaves);
        for j in &twj.joins {
            self.collect_factor(&j.relation, scope, leaves);
        }
    }

    fn collect_factor(&self, f: &TableFactor, scope: &mut Scope, leaves: &mut Vec<Leaf>) {
        match f {
            TableFactor::Table {
                name, alias, args, ..
            } => {
                let Some(tname) = object_last(name) else {
                    leaves.push(Leaf::Other);
                    return;
                };
                let base = args.is_none() && !self.is_cte(name);
                let target = base.then(|| tname.clone());
                if let Some(a) = alias {
                    scope.names.insert(ident_name(&a.name), target.clone());
                } else {
                    scope.names.insert(tname.clone(), target.clone());
                }
                if base {
                    scope.base_tables.push(tname);
                    leaves.push(Leaf::Base);
                } else {
                    scope.derived += 1;
                    leaves.push(Leaf::Other);
                }
            }
            TableFactor::NestedJoin {
                table_with_joins, ..
            } => self.collect_leaves(table_with_joins, scope, leaves),
            TableFactor::Derived { alias, .. }
            | TableFactor::TableFunction { alias, .. }
            | TableFactor::Function { alias, .. }
            | TableFactor::UNNEST { alias, .. } => {
                if let Some(a) = alias {
                    scope.names.insert(ident_name(&a.name), None);
                }
                scope.derived += 1;
                leaves.push(Leaf::Other);
            }
            _ => {
                scope.derived += 1;
                leaves.push(Leaf::Other);
            }
        }
    }

    fn count_joins(twj: &TableWithJoins) -> usize {
        let nested = |f: &TableFactor| match f {
            TableFactor::NestedJoin {
                table_with_joins, ..
            } => Self::count_joins(table_with_joins),
            _ => 0,
        };
        twj.joins.len()
            + nested(&twj.relation)
            + twj.joins.iter().map(|j| nested(&j.relation)).sum::<usize>()
    }

    fn resolve(&self, qualifier: Option<&str>) -> Option<String> {
        match qualifier {
            Some(q) => {
                for s in self.scopes.iter().rev() {
                    if let Some(t) = s.names.get(q) {
                        return t.clone();
                    }
                }
                None
            }
            None => {
                let s = self.scopes.last()?;
                (s.base_tables.len() == 1 && s.derived == 0).then(|| s.base_tables[0].clone())
            }
        }
    }

    fn column_of(&self, e: &Expr) -> Option<(Option<String>, String)> {
        match e {
            Expr::Identifier(id) => Some((self.resolve(None), ident_name(id))),
            Expr::CompoundIdentifier(ids) if ids.len() >= 2 => {
                let q = ident_name(&ids[ids.len() - 2]);
                Some((self.resolve(Some(&q)), ident_name(ids.last().unwrap())))
            }
            Expr::Nested(inner) => self.column_of(inner),
            _ => None,
        }
    }

    /// Literal operand with its byte span in the source text.
    fn literal_of(&self, e: &Expr) -> Option<(LiteralValue, usize, usize)> {
        match e {
            Expr::Value(v) => {
                let lit = literal_value(&v.value)?;
                let (s, e) = self.span_of(v)?;
                Some((lit, s, e))
            }
            Expr::UnaryOp {
                op: UnaryOperator::Minus,
                expr,
            } => match expr.as_ref() {
                Expr::Value(
                    v @ ValueWithSpan {
                        value: Value::Number(n, _),
                        ..
                    },
                ) => {
                    let (s, e) = self.span_of(v)?;
                    let minus = self.text[..s].trim_end();
                    if !minus.ends_with('-') {
                        return None;
                    }
                    Some((LiteralValue::Number(format!("-{n}")), minus.len() - 1, e))
                }
                _ => None,
            },
            Expr::TypedString(ts) => {
                let inner = match &ts.value.value {
                    Value::SingleQuotedString(s) => s.clone(),
                    _ => return None,
                };
                let (s, e) = self.span_of(&ts.value)?;
                Some((
                    LiteralValue::Typed {
                        type_name: ts.data_type.to_string(),
                        value: inner,
                    },
                    s,
                    e,
                ))
            }
            Expr::Cast {
                expr, data_type, ..
            } => match expr.as_ref() {
                Expr::Value(
                    v @ ValueWithSpan {
                        value: Value::SingleQuotedString(inner),
                        ..
                    },
                ) => {
                    let (s, e) = self.span_of(v)?;
                    Some((
                        LiteralValue::Typed {
                            type_name: data_type.to_string(),
                            value: inner.clone(),
                        },
                        s,
                        e,
                    ))
                }
                other => self.literal_of(other),
            },
            Expr::Nested(inner) => self.literal_of(inner),
            _ => None,
        }
    }

    fn span_of(&self, v: &ValueWithSpan) -> Option<(usize, usize)> {
        let s = byte_offset(self.text, v.span.start.line, v.span.start.column)?;
        let e = byte_offset(self.text, v.span.end.line, v.span.end.column)?;
        (s < e && e <= self.text.len()).then_some((s, e))
    }

    fn site(
        &mut self,
        col: &(Option<String>, String),
        op: CmpOp,
        lit: (LiteralValue, usize, usize),
    ) {
        self.sites.push(LiteralSite {
            table: col.0.clone(),
            column: col.1.clone(),
            op,
            value: lit.0,
            start: lit.1,
            end: lit.2,
        });
    }

    fn predicate(&mut self, col: &(Option<String>, String), op: CmpOp, value: String) {
        let p = FilterPredicate {
            table: col.0.clone(),
            column: col.1.clone(),
            op,
            value,
        };
        if !self.out.filter_predicates.contains(&p) {
            self.out.filter_predicates.push(p);
        }
    }

    fn atoms(&mut self, e: &Expr) {
        match e {
            Expr::BinaryOp { left, op, right } => match op {
                BinaryOperator::And | BinaryOperator::Or => {
                    self.atoms(left);
                    self.atoms(right);
                }
                _ => {
                    let Some(cmp) = CmpOp::from_binary(op) else {
                        return;
                    };
                    if let (Some(col), Some(lit)) = (self.column_of(left), self.literal_of(right)) {
                        self.predicate(&col, cmp, right.to_string());
                        self.site(&col, cmp, lit);
                    } else if let (Some(lit), Some(col)) =
                        (self.literal_of(left), self.column_of(right))
                    {
                        let cmp = cmp.flipped();
                        self.predicate(&col, cmp, left.to_string());
                        self.site(&col, cmp, lit);
                    }
                }
            },
            Expr::Nested(inner) => self.atoms(inner),
            Expr::UnaryOp {
                op: UnaryOperator::Not,
                expr,
            } => self.atoms(expr),
            Expr::Between {
                expr,
                negated,
                low,
                high,
            } => {
                let Some(col) = self.column_of(expr) else {
                    return;
                };
                let (Some(lo), Some(hi)) = (self.literal_of(low), self.literal_of(high)) else {
                    return;
                };
                let op = if *negated {
                    CmpOp::NotBetween
                } else {
                    CmpOp::Between
                };
                self.predicate(&col, op, format!("{low} AND {high}"));
                self.site(&col, CmpOp::GtEq, lo);
                self.site(&col, CmpOp::LtEq, hi);
            }
            Expr::InList {
                expr,
                list,
                negated,
            } => {
                let Some(col) = self.column_of(expr) else {
                    return;
                };
                let lits: Vec<_> = list.iter().filter_map(|x| self.literal_of(x)).collect();
                if lits.len() != list.len() || lits.is_empty() {
                    return;
                }
                let rendered: Vec<String> = list.iter().map(|x| x.to_string()).collect();
                let op = if *negated { CmpOp::NotIn } else { CmpOp::In };
                self.predicate(&col, op, format!("({})", rendered.join(", ")));
                for lit in lits {
                    self.site(&col, if *negated { CmpOp::NotEq } else { CmpOp::Eq }, lit);
                }
            }
            Expr::Like {
                negated,
                expr,
                pattern,
                ..
            }
            | Expr::ILike {
                negated,
                expr,
                pattern,
                ..
            } => {
                let Some(col) = self.column_of(expr) else {
                    return;
                };
                let Some(lit) = self.literal_of(pattern) else {
                    return;
                };
                let op = if *negated {
                    CmpOp::NotLike
                } else {
                    CmpOp::Like
                };
                self.predicate(&col, op, pattern.to_string());
                self.site(&col, op, lit);
            }
            _ => {}
        }
    }
}

fn join_constraints(twj: &TableWithJoins) -> Vec<&Expr> {
    let mut out = Vec::new();
    if let TableFactor::NestedJoin {
        table_with_joins, ..
    } = &twj.relation
    {
        out.extend(join_constraints(table_with_joins));
    }
    for j in &twj.joins {
        if let TableFactor::NestedJoin {
            table_with_joins, ..
        } = &j.relation
        {
            out.extend(join_constraints(table_with_joins));
        }
        if let Some(JoinConstraint::On(e)) = constraint(&j.join_operator) {
            out.push(e);
        }
    }
    out
}

fn constraint(op: &JoinOperator) -> Option<&JoinConstraint> {
    match op {
        JoinOperator::Join(c)
        | JoinOperator::Inner(c)
        | JoinOperator::Left(c)
        | JoinOperator::LeftOuter(c)
        | JoinOperator::Right(c)
        | JoinOperator::RightOuter(c)
        | JoinOperator::FullOuter(c)
        | JoinOperator::CrossJoin(c)
        | JoinOperator::Semi(c)
        | JoinOperator::LeftSemi(c)
        | JoinOperator::RightSemi(c)
        | JoinOperator::Anti(c)
        | JoinOperator::LeftAnti(c)
        | JoinOperator::RightAnti(c)
        | JoinOperator::StraightJoin(c) => Some(c),
        _ => None,
    }
}

pub(crate) fn literal_value(v: &Value) -> Option<LiteralValue> {
    Some(match v {
        Value::Number(n, _) => LiteralValue::Number(n.clone()),
        Value::SingleQuotedString(s) | Value::EscapedStringLiteral(s) => {
            LiteralValue::Text(s.clone())
        }
        Value::Boolean(b) => LiteralValue::Bool(*b),
        _ => return None,
    })
}

impl Visitor for Walker<'_> {
    type Break = ();

    fn pre_visit_query(&mut self, q: &Query) -> ControlFlow<()> {
        if let Some(with) = &q.with {
            for cte in &with.cte_tables {
                self.ctes.insert(ident_name(&cte.alias.name));
            }
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_select(&mut self, s: &Select) -> ControlFlow<()> {
        let mut scope = Scope::default();
        let mut any_base_in_list = false;
        for twj in &s.from {
            let mut leaves = Vec::new();
            self.collect_leaves(twj, &mut scope, &mut leaves);
            any_base_in_list |= leaves.iter().any(|l| matches!(l, Leaf::Base));
            self.out.join_count += Self::count_joins(twj);
        }
        if s.from.len() > 1 && any_base_in_list {
            self.out.join_count += s.from.len() - 1;
        }
        self.scopes.push(scope);

        for t in self.scopes.last().unwrap().base_tables.clone() {
            if !self.out.tables.contains(&t) {
                self.out.tables.push(t);
            }
        }
        let mut conditions: Vec<&Expr> = Vec::new();
        for twj in &s.from {
            conditions.extend(join_constraints(twj));
        }
        conditions.extend(s.selection.iter());
        conditions.extend(s.having.iter());
        for c in conditions {
            self.atoms(c);
        }
        ControlFlow::Continue(())
    }

    fn post_visit_select(&mut self, _s: &Select) -> ControlFlow<()> {
        self.scopes.pop();
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, e: &Expr) -> ControlFlow<()> {
        if let Expr::Function(f) = e {
            if let Some(name) = object_last(&f.name) {
                if VOLATILE.contains(&name.as_str()) && !self.out.volatile_functions.contains(&name)
                {
                    self.out.volatile_functions.push(name);
                }
            }
        }
        ControlFlow::Continue(())
    }
}
