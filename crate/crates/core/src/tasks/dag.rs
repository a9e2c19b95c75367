//! Layered-DAG path finding.
//!
//! A graph has a source `s`, a target `t` and one to three layers of middle
//! nodes. `s` always has two successors, every middle node has one or two
//! successors in the next layer and every last-layer node links to `t`, so any
//! walk from `s` along edges reaches `t` and every instance has at least two
//! correct answers. All source-to-target paths have the same length.
//!
//! Prompt: `s t : u1 v1 u2 v2 ... _ _ =` with the edge list shuffled and padded
//! with `_` pairs to a fixed edge capacity, so the prompt length depends only
//! on the node count. Response: the node labels of a path, then EOS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::TokenId;

/// Fixed token ids of the dag-path vocabulary.
pub const FILLER: TokenId = 2;
pub const COLON: TokenId = 3;
pub const EQUALS: TokenId = 4;
pub const FIRST_LABEL: TokenId = 5;
pub const NUM_LABELS: usize = 16;

pub const MIN_NODES: usize = 6;
pub const MAX_NODES: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagGraph {
    pub nodes: Vec<TokenId>,
    pub edges: Vec<(TokenId, TokenId)>,
    pub source: TokenId,
    pub target: TokenId,
}

/// Edge capacity of the prompt for a graph with `nodes` nodes.
pub fn max_edges(nodes: usize) -> usize {
    nodes + nodes / 2
}

pub fn prompt_len(nodes: usize) -> usize {
    4 + 2 * max_edges(nodes)
}

fn num_layers(nodes: usize) -> usize {
    if nodes - 2 <= 6 {
        2
    } else {
        3
    }
}

/// Number of tokens in every correct response, EOS included.
pub fn response_len(nodes: usize) -> usize {
    num_layers(nodes) + 3
}

fn choose_distinct(pool: &[TokenId], k: usize, rng: &mut RngStream) -> Vec<TokenId> {
    let mut pool = pool.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(pool.len()) {
        out.push(pool.swap_remove(rng.below(pool.len())));
    }
    out
}

impl DagGraph {
    /// Sample a layered graph with `nodes` nodes and random labels.
    pub fn random(nodes: usize, rng: &mut RngStream) -> Result<Self> {
        if !(MIN_NODES..=MAX_NODES).contains(&nodes) {
            return Err(Error::InvalidArgument(format!(
                "dag-path supports {MIN_NODES}..={MAX_NODES} nodes, got {nodes}"
            )));
        }
        let all: Vec<TokenId> = (0..NUM_LABELS as TokenId).map(|i| FIRST_LABEL + i).collect();
        let labels = choose_distinct(&all, nodes, rng);
        let source = labels[0];
        let target = labels[nodes - 1];
        let middle = &labels[1..nodes - 1];
        let n_layers = num_layers(nodes);
        let mut layers: Vec<&[TokenId]> = Vec::with_capacity(n_layers);
        let mut start = 0;
        for i in 0..n_layers {
            let size = middle.len() / n_layers + usize::from(i < middle.len() % n_layers);
            layers.push(&middle[start..start + size]);
            start += size;
        }
        let cap = max_edges(nodes);
        loop {
            let mut edges = Vec::new();
            for v in choose_distinct(layers[0], 2, rng) {
                edges.push((source, v));
            }
            for w in layers.windows(2) {
                for &u in w[0] {
                    let deg = 1 + rng.below(2);
                    for v in choose_distinct(w[1], deg, rng) {
                        edges.push((u, v));
                    }
                }
            }
            for &u in layers[n_layers - 1] {
                edges.push((u, target));
            }
            if edges.len() <= cap {
                return Ok(Self {
                    nodes: labels,
                    edges,
                    source,
                    target,
                });
            }
        }
    }

    pub fn has_edge(&self, u: TokenId, v: TokenId) -> bool {
        self.edges.contains(&(u, v))
    }

    pub fn successors(&self, u: TokenId) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = self.edges.iter().filter(|e| e.0 == u).map(|e| e.1).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn is_node(&self, tok: TokenId) -> bool {
        self.nodes.contains(&tok)
    }

    /// All source-to-target paths in lexicographic order.
    pub fn paths(&self, budget: usize) -> Result<Vec<Vec<TokenId>>> {
        let mut out = Vec::new();
        let mut stack = vec![self.source];
        self.dfs(&mut stack, &mut out, budget)?;
        Ok(out)
    }

    fn dfs(&self, stack: &mut Vec<TokenId>, out: &mut Vec<Vec<TokenId>>, budget: usize) -> Result<()> {
        let u = *stack.last().expect("non-empty path");
        if u == self.target {
            if out.len() == budget {
                return Err(Error::EnumerationBudget { budget });
            }
            out.push(stack.clone());
            return Ok(());
        }
        for v in self.successors(u) {
            if stack.contains(&v) {
                continue;
            }
            stack.push(v);
            self.dfs(stack, out, budget)?;
            stack.pop();
        }
        Ok(())
    }

    /// Encode the prompt with the edge list shuffled by `rng`.
    pub fn encode_prompt(&self, rng: &mut RngStream) -> Vec<TokenId> {
        let mut edges = self.edges.clone();
        for i in (1..edges.len()).rev() {
            edges.swap(i, rng.below(i + 1));
        }
        let cap = max_edges(self.nodes.len()).max(edges.len());
        let mut p = Vec::with_capacity(4 + 2 * cap);
        p.extend([self.source, self.target, COLON]);
        for (u, v) in &edges {
            p.extend([*u, *v]);
        }
        p.resize(3 + 2 * cap, FILLER);
        p.push(EQUALS);
        p
    }

    /// Format score of the pre-EOS tokens: 1.0 for a repeat-free run of node
    /// labels from the source to the target terminated by EOS, 0.5 if every
    /// token is a node label but the run is malformed, 0.0 otherwise. Edges are
    /// not checked here.
    pub fn format_score(&self, answer: &[TokenId], has_eos: bool) -> f64 {
        if !answer.iter().all(|&t| self.is_node(t)) {
            return 0.0;
        }
        let mut seen = answer.to_vec();
        seen.sort_unstable();
        seen.dedup();
        let endpoints = answer.first() == Some(&self.source) && answer.last() == Some(&self.target);
        if has_eos && endpoints && seen.len() == answer.len() {
            1.0
        } else {
            0.5
        }
    }

    /// Whether `answer` is a source-to-target walk along edges.
    pub fn is_valid_path(&self, answer: &[TokenId]) -> bool {
        answer.first() == Some(&self.source)
            && answer.last() == Some(&self.target)
            && answer.windows(2).all(|w| self.has_edge(w[0], w[1]))
    }
}
