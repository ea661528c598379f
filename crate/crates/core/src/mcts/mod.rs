//! Monte-Carlo tree search over the model's next-token distribution.
//!
//! The root is the state right after the seed prompt; each node extends its
//! parent's partial answer by one token. An iteration selects a leaf by UCB,
//! expands it greedily until the model is unsure (top probability at or
//! below `theta`, where `k` children are added) or the answer is complete,
//! completes the answer greedily, scores it by speedup (0 when invalid) and
//! propagates the best score up the path.

mod tree;

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::db::CostEstimate;
use crate::equiv::{CheckDepth, EquivalenceStatus, EquivalenceVerdict, Evidence};
use crate::llm::{LlmError, LlmSession, TokenDistribution};
use crate::pipeline::{
    compute_speedup, validate_sql, OutcomeReason, PreparedQuery, Rejection, RewriteCandidate,
    RewriteContext, RewriteOutcome,
};
use crate::prompts::PromptId;
use crate::sql::SqlQuery;

pub use tree::{is_terminal_text, NodeId, SearchNode, SearchTree};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MctsError {
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MctsConfig {
    pub iter_max: usize,
    /// Children added at an uncertain node.
    pub k: usize,
    /// Expansion threshold on the top token probability.
    pub theta: f64,
    pub c_base: f64,
    pub c: f64,
    /// Maximum length of an answer, in tokens.
    pub sim_budget: usize,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            iter_max: 8,
            k: 2,
            theta: 0.7,
            c_base: 10.0,
            c: 4.0,
            sim_budget: 4096,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<(), MctsError> {
        let bad = |m: &str| Err(MctsError::InvalidConfig(m.into()));
        if self.iter_max < 1 {
            return bad("iter_max must be at least 1");
        }
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad("theta must lie in (0, 1]");
        }
        if self.c_base <= 0.0 || !self.c_base.is_finite() {
            return bad("c_base must be positive");
        }
        if self.c < 0.0 || !self.c.is_finite() {
            return bad("c must be non-negative");
        }
        if self.sim_budget < 1 {
            return bad("sim_budget must be at least 1");
        }
        Ok(())
    }
}

/// Exploration weight of a node visited `visits` times.
pub fn beta(visits: u64, cfg: &MctsConfig) -> f64 {
    ((visits as f64 + cfg.c_base + 1.0) / cfg.c_base).ln() + cfg.c
}

/// UCB score with an explicit exploration weight. `ln(parent_visits)` is
/// clamped at 0 so an unvisited parent contributes no exploration.
pub fn ucb_with_beta(
    child_value: f64,
    beta: f64,
    prob: f64,
    parent_visits: u64,
    child_visits: u64,
) -> f64 {
    let ln = (parent_visits as f64).ln().max(0.0);
    child_value + beta * prob * ln.sqrt() / (1.0 + child_visits as f64)
}

/// UCB score of moving from a parent with `parent_visits` to a child.
pub fn ucb(
    parent_visits: u64,
    child_value: f64,
    child_visits: u64,
    prob: f64,
    cfg: &MctsConfig,
) -> f64 {
    ucb_with_beta(
        child_value,
        beta(parent_visits, cfg),
        prob,
        parent_visits,
        child_visits,
    )
}

/// Seed prompt for the search: the ensemble's winning prompt, or B1 when
/// no prompt improved the query.
pub fn choose_seed_prompt(outcome: &RewriteOutcome) -> PromptId {
    match (outcome.reason, outcome.chosen_prompt) {
        (OutcomeReason::Improved, Some(p)) => p,
        _ => PromptId::B1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialEntry {
    /// Complete answer text as generated.
    pub text: String,
    pub potential: f64,
    /// Set when the text is valid SQL.
    pub query: Option<SqlQuery>,
    pub cost: Option<CostEstimate>,
    pub verdict: Option<EquivalenceVerdict>,
    /// Whether the verdict came from the full multi-seed check.
    pub fully_verified: bool,
}

/// Complete rewrites seen so far, keyed by fingerprint, in discovery order.
#[derive(Debug, Clone, Default)]
pub struct PotentialMap {
    entries: Vec<PotentialEntry>,
    index: HashMap<String, usize>,
}

impl PotentialMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, fingerprint: &str) -> Option<&PotentialEntry> {
        self.index.get(fingerprint).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[PotentialEntry] {
        &self.entries
    }

    fn insert(&mut self, key: String, entry: PotentialEntry) {
        match self.index.get(&key) {
            Some(&i) => self.entries[i] = entry,
            None => {
                self.index.insert(key, self.entries.len());
                self.entries.push(entry);
            }
        }
    }

    /// Highest potential above `floor`; ties go to the earliest entry.
    fn best_above(&self, floor: f64) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.potential > floor && best.is_none_or(|b| e.potential > self.entries[b].potential) {
                best = Some(i);
            }
        }
        best
    }
}

/// What one iteration did, for the trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub selected: NodeId,
    pub expanded_to: NodeId,
    pub children_added: usize,
    pub query: String,
    pub value: f64,
}

/// One search over one seed prompt. Owns its tree.
pub struct Search<'a> {
    ctx: &'a RewriteContext,
    pq: &'a PreparedQuery,
    seed_id: PromptId,
    prompt: String,
    cfg: MctsConfig,
    session: LlmSession,
    pub tree: SearchTree,
    pub potentials: PotentialMap,
    dists: HashMap<String, TokenDistribution>,
    iterations: usize,
    start: Duration,
}

impl<'a> Search<'a> {
    pub fn new(
        ctx: &'a RewriteContext,
        pq: &'a PreparedQuery,
        seed_id: PromptId,
        prompt: impl Into<String>,
        cfg: MctsConfig,
    ) -> Result<Self, MctsError> {
        cfg.validate()?;
        if cfg.k > ctx.llm.config().top_k_limit {
            return Err(MctsError::InvalidConfig(format!(
                "k = {} exceeds the backend's top-k limit {}",
                cfg.k,
                ctx.llm.config().top_k_limit
            )));
        }
        Ok(Self {
            ctx,
            pq,
            seed_id,
            prompt: prompt.into(),
            cfg,
            session: ctx.llm.session(),
            tree: SearchTree::new(),
            potentials: PotentialMap::default(),
            dists: HashMap::new(),
            iterations: 0,
            start: ctx.clock.now(),
        })
    }

    pub fn config(&self) -> &MctsConfig {
        &self.cfg
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Records a known-good rewrite (the ensemble winner) as a candidate.
    pub fn seed_with(&mut self, candidate: &RewriteCandidate) {
        self.potentials.insert(
            candidate.sql.fingerprint().to_string(),
            PotentialEntry {
                text: candidate.sql.text().to_string(),
                potential: candidate.speedup,
                query: Some(candidate.sql.clone()),
                cost: Some(candidate.cost.clone()),
                verdict: Some(candidate.equivalence.clone()),
                fully_verified: true,
            },
        );
    }

    fn distribution(&mut self, partial: &str) -> Result<TokenDistribution, LlmError> {
        if let Some(d) = self.dists.get(partial) {
            return Ok(d.clone());
        }
        let d = self
            .session
            .next_tokens(&self.prompt, partial, self.cfg.k)?;
        self.dists.insert(partial.to_string(), d.clone());
        Ok(d)
    }

    /// Stage 1: walks down by UCB to a node without children, counting
    /// visits on the way. Fully explored subtrees are skipped; ties go to
    /// the earliest child.
    pub fn select(&mut self) -> NodeId {
        self.tree.select(&self.cfg)
    }

    /// Stage 2: greedy single-child hops while the model is confident, then
    /// `k` children at the first uncertain step. Returns the node where
    /// expansion stopped and the number of children added there.
    pub fn expand(&mut self, leaf: NodeId) -> Result<(NodeId, usize), LlmError> {
        let mut cur = leaf;
        loop {
            let node = self.tree.node(cur);
            if node.is_terminal || node.depth >= self.cfg.sim_budget || !node.children.is_empty() {
                return Ok((cur, 0));
            }
            let state = node.state.clone();
            let dist = self.distribution(&state)?;
            if dist.is_empty() {
                return Ok((cur, 0));
            }
            if dist.probs[0] <= self.cfg.theta {
                for (t, p) in dist.iter() {
                    self.tree.add_child(cur, t, p);
                }
                return Ok((cur, dist.len()));
            }
            cur = self.tree.add_child(cur, &dist.tokens[0], dist.probs[0]);
        }
    }

    /// Stage 3: greedy completion of `n`'s state. `None` when the budget ran
    /// out or the model stopped before the answer was complete.
    pub fn complete(&mut self, n: NodeId) -> Result<Option<String>, LlmError> {
        let node = self.tree.node(n);
        let mut partial = node.state.clone();
        let mut depth = node.depth;
        loop {
            if is_terminal_text(&partial) {
                return Ok(Some(partial));
            }
            if depth >= self.cfg.sim_budget {
                return Ok(None);
            }
            let dist = self.distribution(&partial)?;
            let Some(top) = dist.tokens.first() else {
                return Ok(None);
            };
            partial.push_str(top);
            depth += 1;
        }
    }

    /// Potential of a complete answer: its speedup when it is valid SQL and
    /// passes the quick equivalence check, else 0. Cached by fingerprint.
    pub fn potential(&mut self, text: &str) -> f64 {
        let engine = self.ctx.engine.as_ref();
        let query = match validate_sql(engine, text) {
            Ok(q) => q,
            Err(r) => {
                if let Rejection::Backend(m) = &r {
                    log::warn!("engine failed on a search candidate: {m}");
                }
                self.potentials.insert(
                    crate::sql::fingerprint(text),
                    PotentialEntry {
                        text: text.to_string(),
                        potential: 0.0,
                        query: None,
                        cost: None,
                        verdict: None,
                        fully_verified: false,
                    },
                );
                return 0.0;
            }
        };
        if let Some(e) = self.potentials.get(query.fingerprint()) {
            return e.potential;
        }
        let cost = engine.estimate_cost(&query).ok();
        let (potential, verdict) = match &cost {
            None => (0.0, None),
            Some(c) => {
                let verdict = if query.fingerprint() == self.pq.query.fingerprint() {
                    identical()
                } else {
                    self.ctx
                        .oracle
                        .check(&self.pq.query, &query, CheckDepth::Quick)
                };
                let v = if verdict.status.accepts() {
                    compute_speedup(&self.pq.cost, c)
                } else {
                    0.0
                };
                (v, Some(verdict))
            }
        };
        self.potentials.insert(
            query.fingerprint().to_string(),
            PotentialEntry {
                text: text.to_string(),
                potential,
                query: Some(query),
                cost,
                verdict,
                fully_verified: false,
            },
        );
        potential
    }

    /// Runs one select/expand/simulate/backpropagate round. `None` once the
    /// whole tree has been explored.
    pub fn step(&mut self) -> Result<Option<IterationTrace>, LlmError> {
        if self.tree.node(self.tree.root()).exhausted {
            return Ok(None);
        }
        self.iterations += 1;
        let selected = self.select();
        let (node, added) = self.expand(selected)?;
        let completion = self.complete(node)?;
        let value = match &completion {
            Some(text) => self.potential(text),
            None => 0.0,
        };
        self.tree.backpropagate(node, value);
        let n = self.tree.node(node);
        if n.children.is_empty()
            && (n.is_terminal || completion.is_none() || n.depth >= self.cfg.sim_budget)
        {
            self.tree.mark_exhausted(node);
        }
        let trace = IterationTrace {
            iteration: self.iterations,
            selected,
            expanded_to: node,
            children_added: added,
            query: completion.unwrap_or_default(),
            value,
        };
        self.ctx.events.emit(
            "mcts_iteration",
            json!({
                "iteration": trace.iteration,
                "selected_state": self.tree.node(selected).state,
                "expanded_to": trace.expanded_to,
                "children_added": trace.children_added,
                "query": trace.query,
                "value": trace.value,
                "tree_size": self.tree.len(),
            }),
        );
        Ok(Some(trace))
    }

    /// Runs the remaining iterations and returns the best rewrite with
    /// potential above 1, verified in full, or the original.
    pub fn run(mut self) -> RewriteOutcome {
        let mut diagnostics = Vec::new();
        while self.iterations < self.cfg.iter_max {
            match self.step() {
                Ok(Some(_)) => {}
                Ok(None) => break,
                Err(e) => {
                    let mut out = RewriteOutcome::unchanged(self.pq, OutcomeReason::NoImprovement);
                    out.usage = self.session.usage();
                    out.diagnostics.push(format!("search aborted: {e}"));
                    self.ctx
                        .events
                        .emit("mcts_abort", json!({"error": e.to_string()}));
                    return out;
                }
            }
        }
        let winner = self.verified_winner(&mut diagnostics);
        let mut out = RewriteOutcome::unchanged(self.pq, OutcomeReason::NoImprovement);
        out.usage = self.session.usage();
        out.diagnostics = diagnostics;
        if let Some(e) = winner {
            let (Some(sql), Some(cost), Some(verdict)) = (e.query, e.cost, e.verdict) else {
                unreachable!("winning entries are costed and checked");
            };
            out.result = sql.clone();
            out.result_cost = cost.total_cost;
            out.chosen_prompt = Some(self.seed_id);
            out.reason = OutcomeReason::Improved;
            out.candidates.push(RewriteCandidate {
                prompt_id: self.seed_id,
                sql,
                speedup: e.potential,
                cost,
                equivalence: verdict,
                usage: self.session.usage(),
                elapsed: self.ctx.clock.since(self.start),
                repair_attempts: 0,
            });
        }
        self.ctx.events.emit(
            "mcts_result",
            json!({
                "iterations": self.iterations,
                "tree_size": self.tree.len(),
                "potentials": self.potentials.len(),
                "speedup": out.speedup(),
                "tokens": out.usage.total_tokens(),
            }),
        );
        out
    }

    fn verified_winner(&mut self, diagnostics: &mut Vec<String>) -> Option<PotentialEntry> {
        while let Some(i) = self.potentials.best_above(1.0) {
            let e = &mut self.potentials.entries[i];
            if e.fully_verified {
                return Some(e.clone());
            }
            let q = e
                .query
                .clone()
                .expect("positive potential implies valid SQL");
            let verdict = self.ctx.oracle.check(&self.pq.query, &q, CheckDepth::Full);
            e.fully_verified = true;
            if verdict.status.accepts() {
                e.verdict = Some(verdict);
                return Some(e.clone());
            }
            diagnostics.push(format!(
                "search winner rejected by the full check: {:?}",
                verdict.status
            ));
            e.potential = 0.0;
            e.verdict = Some(verdict);
        }
        None
    }
}

fn identical() -> EquivalenceVerdict {
    EquivalenceVerdict {
        status: EquivalenceStatus::Proven,
        evidence: Evidence::Prover("identical text".into()),
        stages_run: Vec::new(),
        diagnostics: Vec::new(),
    }
}

/// Searches from `prompt`, seeding the potential map with the ensemble's
/// winner when there is one.
pub fn run(
    ctx: &RewriteContext,
    pq: &PreparedQuery,
    seed_id: PromptId,
    prompt: &str,
    seed: Option<&RewriteOutcome>,
    cfg: &MctsConfig,
) -> Result<RewriteOutcome, MctsError> {
    let mut search = Search::new(ctx, pq, seed_id, prompt, cfg.clone())?;
    if let Some(w) = seed.and_then(|o| o.winner()) {
        search.seed_with(w);
    }
    Ok(search.run())
}

/// Follows an ensemble (or classifier) outcome with a search seeded by its
/// best prompt, and merges the two: the result is the search's, which can
/// only match or beat the ensemble's since the winner is seeded.
pub fn refine(
    ctx: &RewriteContext,
    pq: &PreparedQuery,
    first: &RewriteOutcome,
    seed_id: PromptId,
    cfg: &MctsConfig,
) -> Result<RewriteOutcome, MctsError> {
    let prompt = ctx
        .prompts
        .seed_prompt(&pq.query, seed_id, pq.prompt_context())
        .map_err(|e| MctsError::InvalidConfig(e.to_string()))?;
    let searched = run(ctx, pq, seed_id, &prompt, Some(first), cfg)?;
    let mut out = first.clone();
    out.usage = first.usage + searched.usage;
    out.diagnostics.extend(searched.diagnostics.iter().cloned());
    if searched.improved() && searched.result_cost < first.result_cost {
        out.result = searched.result;
        out.result_cost = searched.result_cost;
        out.chosen_prompt = searched.chosen_prompt;
        out.reason = OutcomeReason::Improved;
        out.candidates.extend(searched.candidates);
    }
    Ok(out)
}
