use serde::Serialize;

use super::{ucb, MctsConfig};

pub type NodeId = usize;

/// Whether a partial answer is complete (ends with `;`).
pub fn is_terminal_text(s: &str) -> bool {
    s.trim_end().ends_with(';')
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchNode {
    /// Partial answer: the tokens from the root to this node.
    pub state: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub visits: u64,
    /// Best potential seen through this node.
    pub value: f64,
    pub incoming_token: String,
    pub incoming_prob: f64,
    /// Tokens from the root.
    pub depth: usize,
    pub is_terminal: bool,
    /// Nothing below this node is left to explore.
    pub exhausted: bool,
}

/// Arena of search nodes; the root is node 0.
#[derive(Debug, Clone, Serialize)]
pub struct SearchTree {
    nodes: Vec<SearchNode>,
}

impl Default for SearchTree {
    fn default() -> Self {
        Self::new()
    }
}

impl SearchTree {
    pub fn new() -> Self {
        Self {
            nodes: vec![SearchNode {
                state: String::new(),
                parent: None,
                children: Vec::new(),
                visits: 0,
                value: 0.0,
                incoming_token: String::new(),
                incoming_prob: 1.0,
                depth: 0,
                is_terminal: false,
                exhausted: false,
            }],
        }
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: NodeId) -> &SearchNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut SearchNode {
        &mut self.nodes[id]
    }

    pub fn nodes(&self) -> &[SearchNode] {
        &self.nodes
    }

    pub fn add_child(&mut self, parent: NodeId, token: &str, prob: f64) -> NodeId {
        let id = self.nodes.len();
        let p = &self.nodes[parent];
        let state = format!("{}{token}", p.state);
        let node = SearchNode {
            is_terminal: is_terminal_text(&state),
            state,
            parent: Some(parent),
            children: Vec::new(),
            visits: 0,
            value: 0.0,
            incoming_token: token.to_string(),
            incoming_prob: prob,
            depth: p.depth + 1,
            exhausted: false,
        };
        self.nodes.push(node);
        self.nodes[parent].children.push(id);
        id
    }

    /// Greedy UCB descent from the root to a node without children. Every
    /// node on the path, root included, gets one more visit. Exhausted
    /// children are passed over; ties go to the earliest child.
    pub fn select(&mut self, cfg: &MctsConfig) -> NodeId {
        let mut cur = self.root();
        self.nodes[cur].visits += 1;
        loop {
            let n = &self.nodes[cur];
            let mut best: Option<(NodeId, f64)> = None;
            for &c in &n.children {
                let child = &self.nodes[c];
                if child.exhausted {
                    continue;
                }
                let score = ucb(
                    n.visits,
                    child.value,
                    child.visits,
                    child.incoming_prob,
                    cfg,
                );
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((c, score));
                }
            }
            match best {
                Some((c, _)) => {
                    cur = c;
                    self.nodes[cur].visits += 1;
                }
                None => return cur,
            }
        }
    }

    /// Raises `value` to `v` on `n` and each ancestor where it is lower.
    pub fn backpropagate(&mut self, n: NodeId, v: f64) {
        let mut cur = Some(n);
        while let Some(id) = cur {
            let node = &mut self.nodes[id];
            if v > node.value {
                node.value = v;
            }
            cur = node.parent;
        }
    }

    /// Marks `n` explored and every ancestor whose children are now all
    /// explored.
    pub fn mark_exhausted(&mut self, n: NodeId) {
        self.nodes[n].exhausted = true;
        let mut cur = self.nodes[n].parent;
        while let Some(id) = cur {
            let all = self.nodes[id]
                .children
                .iter()
                .all(|&c| self.nodes[c].exhausted);
            if !all {
                break;
            }
            self.nodes[id].exhausted = true;
            cur = self.nodes[id].parent;
        }
    }

    /// Structural invariants: child state = parent state + token, parent
    /// value ≥ child value, terminal nodes are leaves.
    pub fn check(&self) -> Result<(), String> {
        for (id, n) in self.nodes.iter().enumerate() {
            if n.is_terminal && !n.children.is_empty() {
                return Err(format!("terminal node {id} has children"));
            }
            for &c in &n.children {
                let child = &self.nodes[c];
                if child.parent != Some(id) {
                    return Err(format!("node {c} does not point back to {id}"));
                }
                if child.state != format!("{}{}", n.state, child.incoming_token) {
                    return Err(format!("node {c} does not extend {id} by one token"));
                }
                if child.value > n.value {
                    return Err(format!("value of {c} exceeds its parent {id}"));
                }
            }
        }
        Ok(())
    }
}
