//! Random scripted token trees with known terminal potentials, plus the
//! brute-force maximum used as the search oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lithe_core::db::FixedCostEngine;
use lithe_core::equiv::{EquivalenceStatus, FixedOracle};
use lithe_core::llm::TreeNode;

pub const ORIGINAL: &str = "SELECT a FROM t WHERE true";
pub const ORIGINAL_COST: f64 = 100.0;
const COSTS: [f64; 11] = [
    10.0, 20.0, 25.0, 40.0, 50.0, 80.0, 100.0, 125.0, 160.0, 200.0, 400.0,
];

pub struct GeneratedTree {
    pub roots: Vec<TreeNode>,
    /// Every complete answer reachable in the tree with its potential.
    pub terminals: Vec<(String, f64)>,
    /// Nodes where the model hesitates (more than one child).
    pub branch_nodes: usize,
    pub engine: FixedCostEngine,
    pub oracle: FixedOracle,
}

impl GeneratedTree {
    /// Brute-force answer: the largest terminal potential above 1.
    pub fn best_potential(&self) -> Option<f64> {
        self.terminals
            .iter()
            .map(|(_, p)| *p)
            .filter(|p| *p > 1.0)
            .fold(None, |best, p| Some(best.map_or(p, |b: f64| b.max(p))))
    }
}

struct Gen {
    rng: ChaCha8Rng,
    theta: f64,
    next_id: usize,
    max_depth: usize,
    terminals: Vec<(String, f64)>,
    branch_nodes: usize,
    engine: FixedCostEngine,
    oracle: FixedOracle,
}

impl Gen {
    fn confident(&mut self) -> f64 {
        let p = self.rng.gen_range(self.theta + 0.01..=1.0);
        (p * 1000.0).round() / 1000.0
    }

    fn token(&mut self) -> String {
        self.next_id += 1;
        format!(" AND c{:03} > 0", self.next_id)
    }

    /// A complete answer: either broken SQL or a valid rewrite with an
    /// assigned cost (possibly rejected by the equivalence oracle).
    fn terminal(&mut self, prefix: &str) -> String {
        let roll: f64 = self.rng.gen();
        if roll < 0.12 {
            let tok = format!("{} AND;", self.token());
            self.terminals.push((format!("{prefix}{tok}"), 0.0));
            return tok;
        }
        let tok = format!("{};", self.token());
        let text = format!("{prefix}{tok}");
        let cost = COSTS[self.rng.gen_range(0..COSTS.len())];
        self.engine = std::mem::take(&mut self.engine).with_cost(&text, cost);
        if roll < 0.25 {
            self.oracle = self
                .oracle
                .clone()
                .with_verdict(&text, EquivalenceStatus::NotEquivalent);
            self.terminals.push((text, 0.0));
        } else {
            self.terminals.push((text, ORIGINAL_COST / cost));
        }
        tok
    }

    /// Children of the node whose state is `prefix`.
    fn children(&mut self, prefix: &str, depth: usize) -> Vec<TreeNode> {
        let roll: f64 = self.rng.gen();
        if depth >= self.max_depth || roll < 0.1 {
            let p = self.confident();
            let tok = self.terminal(prefix);
            return vec![TreeNode::new(tok, p, vec![])];
        }
        if roll < 0.4 {
            let p = self.confident();
            let tok = self.token();
            let state = format!("{prefix}{tok}");
            let kids = self.children(&state, depth + 1);
            return vec![TreeNode::new(tok, p, kids)];
        }
        self.branch_nodes += 1;
        let p1 = (self.rng.gen_range(0.3..=self.theta) * 1000.0).round() / 1000.0;
        let p2 = (self.rng.gen_range(0.05..=p1.min(1.0 - p1)) * 1000.0).round() / 1000.0;
        let mut out = Vec::new();
        for p in [p1, p2] {
            if self.rng.gen_bool(0.3) {
                let tok = self.terminal(prefix);
                out.push(TreeNode::new(tok, p, vec![]));
            } else {
                let tok = self.token();
                let state = format!("{prefix}{tok}");
                let kids = self.children(&state, depth + 1);
                out.push(TreeNode::new(tok, p, kids));
            }
        }
        out
    }
}

/// Deterministic random tree with at most `max_paths` complete answers and at
/// least one hesitation point.
pub fn random_tree(seed: u64, theta: f64, max_paths: usize) -> GeneratedTree {
    random_tree_between(seed, theta, 2, max_paths)
}

/// Like [`random_tree`] with between `min_paths` and `max_paths` answers.
pub fn random_tree_between(
    seed: u64,
    theta: f64,
    min_paths: usize,
    max_paths: usize,
) -> GeneratedTree {
    let mut attempt = 0u64;
    loop {
        let mut g = Gen {
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(attempt)),
            theta,
            next_id: 0,
            max_depth: if min_paths > 16 {
                14
            } else {
                4 + (seed % 10) as usize
            },
            terminals: Vec::new(),
            branch_nodes: 0,
            engine: FixedCostEngine::new().with_cost(ORIGINAL, ORIGINAL_COST),
            oracle: FixedOracle::new(EquivalenceStatus::LikelyEquivalent),
        };
        let kids = g.children(ORIGINAL, 1);
        let roots = vec![TreeNode::new(ORIGINAL, 0.95, kids)];
        attempt += 1;
        if g.branch_nodes == 0 || g.terminals.len() < min_paths || g.terminals.len() > max_paths {
            continue;
        }
        return GeneratedTree {
            roots,
            terminals: g.terminals,
            branch_nodes: g.branch_nodes,
            engine: g.engine,
            oracle: g.oracle,
        };
    }
}
