//! Synthetic verifiable tasks with known fork structure.
//!
//! `arith` has a single correct answer per instance. `dag-path` asks for any
//! source-to-target path in a small layered DAG and has several, so the
//! response positions where correct paths diverge are ground-truth forks.
//! Corpus responses are drawn uniformly among all correct responses.

pub mod arith;
pub mod dag;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::TrainingExample;
use crate::error::{Error, Result};
use crate::rng::{derive_stream, StreamKey};
use crate::vocab::{TokenId, Vocabulary};

pub use dag::DagGraph;

pub const MASK_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;

/// Maximum number of correct responses enumerated for fork detection.
pub const ENUMERATION_BUDGET: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum TaskKind {
    Arith { max_operand: u32 },
    DagPath { nodes: usize },
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Arith { .. } => "arith",
            TaskKind::DagPath { .. } => "dag-path",
        }
    }
}

/// Task family plus its generator seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
}

impl TaskSpec {
    pub fn arith(max_operand: u32, seed: u64) -> Self {
        Self {
            kind: TaskKind::Arith { max_operand },
            seed,
        }
    }

    pub fn dag_path(nodes: usize, seed: u64) -> Result<Self> {
        if !(dag::MIN_NODES..=dag::MAX_NODES).contains(&nodes) {
            return Err(Error::InvalidArgument(format!(
                "dag-path supports {}..={} nodes, got {nodes}",
                dag::MIN_NODES,
                dag::MAX_NODES
            )));
        }
        Ok(Self {
            kind: TaskKind::DagPath { nodes },
            seed,
        })
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut tokens = vec!["<mask>".to_string(), "<eos>".to_string()];
        match self.kind {
            TaskKind::Arith { .. } => {
                tokens.extend((0..10).map(|d| d.to_string()));
                tokens.extend(["+".to_string(), "=".to_string()]);
            }
            TaskKind::DagPath { .. } => {
                tokens.extend(["_", ":", "="].map(String::from));
                tokens.extend((0..dag::NUM_LABELS as u8).map(|i| char::from(b'a' + i).to_string()));
            }
        }
        Vocabulary::new(tokens, MASK_ID, EOS_ID).expect("task vocabularies are well formed")
    }

    /// Longest prompt the generator can emit.
    pub fn max_prompt_len(&self) -> usize {
        match self.kind {
            TaskKind::Arith { max_operand } => 2 * arith::digits(max_operand).len() + 2,
            TaskKind::DagPath { nodes } => dag::prompt_len(nodes),
        }
    }

    /// Tokens in the longest correct response, EOS included.
    pub fn max_response_len(&self) -> usize {
        match self.kind {
            TaskKind::Arith { max_operand } => arith::answer_width(max_operand) + 1,
            TaskKind::DagPath { nodes } => dag::response_len(nodes),
        }
    }

    /// Instance `id`, deterministic in `(seed, id)`.
    pub fn instance(&self, id: u64) -> Result<Instance> {
        let mut rng = derive_stream(self.seed, StreamKey::new("task-instance", id, 0, 0));
        let (prompt, ground) = match self.kind {
            TaskKind::Arith { max_operand } => {
                let n = max_operand as usize + 1;
                let a = rng.below(n) as u32;
                let b = rng.below(n) as u32;
                let answer = arith::encode_answer(a + b, arith::answer_width(max_operand));
                (arith::encode_prompt(a, b), Ground::Arith { a, b, answer })
            }
            TaskKind::DagPath { nodes } => {
                let g = DagGraph::random(nodes, &mut rng)?;
                (g.encode_prompt(&mut rng), Ground::Dag(g))
            }
        };
        let mut inst = Instance {
            id,
            prompt,
            answer_or_graph: ground,
            fork_positions: Vec::new(),
        };
        inst.fork_positions = fork_positions(&inst)?;
        Ok(inst)
    }

    /// Instances `first_id .. first_id + count` and one corpus example per instance.
    pub fn generate_range(&self, first_id: u64, count: usize) -> Result<(Vec<Instance>, Vec<TrainingExample>)> {
        let mut instances = Vec::with_capacity(count);
        let mut corpus = Vec::with_capacity(count);
        for id in first_id..first_id + count as u64 {
            let inst = self.instance(id)?;
            let answers = correct_responses(&inst, ENUMERATION_BUDGET)?;
            let mut rng = derive_stream(self.seed, StreamKey::new("task-corpus", id, 0, 0));
            corpus.push(TrainingExample {
                prompt: inst.prompt.clone(),
                response: answers[rng.below(answers.len())].clone(),
            });
            instances.push(inst);
        }
        Ok((instances, corpus))
    }

    pub fn generate(&self, count: usize) -> Result<(Vec<Instance>, Vec<TrainingExample>)> {
        self.generate_range(0, count)
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Task name as written in configuration (`arith` or `dag-path`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskName {
    Arith,
    DagPath,
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arith" => Ok(TaskName::Arith),
            "dag-path" => Ok(TaskName::DagPath),
            _ => Err(Error::Config(format!("unknown task `{s}` (expected arith or dag-path)"))),
        }
    }
}

/// Ground truth sufficient to verify any response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ground {
    Arith { a: u32, b: u32, answer: Vec<TokenId> },
    Dag(DagGraph),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u64,
    pub prompt: Vec<TokenId>,
    pub answer_or_graph: Ground,
    pub fork_positions: Vec<usize>,
}

/// Outcome of verifying one response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    /// 1.0 iff the response solves the instance. Used for accuracy.
    pub correct: f64,
    /// Format component; always 0 for `arith`.
    pub format: f64,
}

impl Reward {
    /// Reward used for RL training.
    pub fn total(&self) -> f64 {
        self.correct + self.format
    }

    pub fn is_correct(&self) -> bool {
        self.correct > 0.5
    }
}

/// Score the tokens of a completion. Everything after the first EOS is ignored.
pub fn verify(instance: &Instance, tokens: &[TokenId]) -> Reward {
    let cut = tokens.iter().position(|&t| t == EOS_ID);
    let answer = &tokens[..cut.unwrap_or(tokens.len())];
    match &instance.answer_or_graph {
        Ground::Arith { answer: truth, .. } => Reward {
            correct: if answer == truth.as_slice() { 1.0 } else { 0.0 },
            format: 0.0,
        },
        Ground::Dag(g) => {
            let format = g.format_score(answer, cut.is_some());
            let correct = if format == 1.0 && g.is_valid_path(answer) { 1.0 } else { 0.0 };
            Reward { correct, format }
        }
    }
}

/// Every correct response (EOS-terminated), sorted lexicographically.
pub fn correct_responses(instance: &Instance, budget: usize) -> Result<Vec<Vec<TokenId>>> {
    let mut out: Vec<Vec<TokenId>> = match &instance.answer_or_graph {
        Ground::Arith { answer, .. } => vec![answer.clone()],
        Ground::Dag(g) => g.paths(budget)?,
    };
    if out.len() > budget {
        return Err(Error::EnumerationBudget { budget });
    }
    for r in &mut out {
        r.push(EOS_ID);
    }
    out.sort();
    Ok(out)
}

/// A fork at `position` witnessed by two correct responses that agree before it
/// and differ at it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForkWitness {
    pub position: usize,
    pub first: Vec<TokenId>,
    pub second: Vec<TokenId>,
}

/// Forks with witnesses. In sorted order, the first-difference indices of
/// adjacent responses are exactly the fork positions.
pub fn fork_witnesses(instance: &Instance) -> Result<Vec<ForkWitness>> {
    let responses = correct_responses(instance, ENUMERATION_BUDGET)?;
    let mut out: Vec<ForkWitness> = Vec::new();
    for w in responses.windows(2) {
        let k = w[0].iter().zip(&w[1]).position(|(a, b)| a != b).expect("distinct EOS-terminated responses");
        if !out.iter().any(|f| f.position == k) {
            out.push(ForkWitness {
                position: k,
                first: w[0].clone(),
                second: w[1].clone(),
            });
        }
    }
    out.sort_by_key(|f| f.position);
    Ok(out)
}

/// Response indices where at least two tokens continue some correct prefix to a correct response.
pub fn fork_positions(instance: &Instance) -> Result<Vec<usize>> {
    Ok(fork_witnesses(instance)?.into_iter().map(|f| f.position).collect())
}
