//! Pass@k estimation, solved-set coverage, finalization-entropy statistics and
//! the parallel-decoding sweep, with CSV renderings of each.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{decode_many, DecodeConfig, DecodeMode, DecodeTrace, Predictor};
use crate::error::{Error, Result};
use crate::rng::{derive_stream, StreamKey};
use crate::sequence::Completion;
use crate::tasks::{verify, Instance, Reward};
use crate::vocab::{Specials, TokenId};

/// Unbiased Pass@k, `1 - C(n - c, k) / C(n, k)`, via the product
/// `prod_{i<k} (1 - c / (n - i))`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(Error::InvalidArgument(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    if c == 0 {
        return Ok(0.0);
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut fail = 1.0;
    for i in 0..k {
        fail *= 1.0 - c as f64 / (n - i) as f64;
    }
    Ok(1.0 - fail)
}

/// Per-problem correctness of every sample, in sample order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemFlags {
    pub problem_id: u64,
    pub correct: Vec<bool>,
}

impl ProblemFlags {
    pub fn n(&self) -> usize {
        self.correct.len()
    }

    pub fn c(&self) -> usize {
        self.correct.iter().filter(|&&x| x).count()
    }

    /// Whether any of the first `k` samples is correct.
    pub fn solved_within(&self, k: usize) -> bool {
        self.correct.iter().take(k).any(|&x| x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKRow {
    pub problem_id: u64,
    pub n: usize,
    pub c: usize,
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKTable {
    pub k_grid: Vec<usize>,
    pub rows: Vec<PassAtKRow>,
    /// Estimates averaged over problems, one per `k`.
    pub mean: Vec<f64>,
    pub flags: Vec<ProblemFlags>,
}

impl PassAtKTable {
    pub fn from_flags(flags: Vec<ProblemFlags>, k_grid: &[usize]) -> Result<Self> {
        let rows: Vec<PassAtKRow> = flags
            .iter()
            .map(|f| {
                Ok(PassAtKRow {
                    problem_id: f.problem_id,
                    n: f.n(),
                    c: f.c(),
                    estimates: k_grid.iter().map(|&k| pass_at_k(f.n(), f.c(), k)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        let mean = (0..k_grid.len())
            .map(|j| {
                if rows.is_empty() {
                    0.0
                } else {
                    rows.iter().map(|r| r.estimates[j]).sum::<f64>() / rows.len() as f64
                }
            })
            .collect();
        Ok(Self {
            k_grid: k_grid.to_vec(),
            rows,
            mean,
            flags,
        })
    }

    /// Mean estimate at `k`, if `k` is on the grid.
    pub fn mean_at(&self, k: usize) -> Option<f64> {
        self.k_grid.iter().position(|&x| x == k).map(|j| self.mean[j])
    }

    pub fn csv_header(&self) -> String {
        let mut h = "mode,problem_id,n,c".to_string();
        for k in &self.k_grid {
            write!(h, ",pass@{k}").unwrap();
        }
        h
    }

    /// One line per problem, prefixed with `mode`.
    pub fn csv_rows(&self, mode: &str) -> String {
        let mut out = String::new();
        for r in &self.rows {
            write!(out, "{mode},{},{},{}", r.problem_id, r.n, r.c).unwrap();
            for e in &r.estimates {
                write!(out, ",{e}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// All samples drawn for one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemRun {
    pub problem_id: u64,
    pub completions: Vec<Completion>,
    pub traces: Vec<DecodeTrace>,
    pub rewards: Vec<Reward>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassKExperiment {
    pub mode: DecodeMode,
    pub table: PassAtKTable,
    pub runs: Vec<ProblemRun>,
}

impl PassKExperiment {
    /// Fraction of all samples that are correct.
    pub fn accuracy(&self) -> f64 {
        let (c, n) = self.runs.iter().fold((0, 0), |(c, n), r| {
            (c + r.rewards.iter().filter(|x| x.is_correct()).count(), n + r.rewards.len())
        });
        c as f64 / n.max(1) as f64
    }

    /// Mean tokens finalized per denoising step across all samples.
    pub fn tokens_per_step(&self) -> f64 {
        let (tokens, steps) = self.runs.iter().flat_map(|r| &r.traces).fold((0, 0), |(t, s), tr| {
            (t + tr.records.len(), s + tr.steps)
        });
        tokens as f64 / steps.max(1) as f64
    }
}

/// Stream purpose for sample draws under `mode`.
fn sample_purpose(mode: DecodeMode) -> String {
    format!("decode-{mode}")
}

/// `n` decodes per instance; sample `j` of problem `id` uses stream
/// `("decode-<mode>", id, j, 0)`.
pub fn passk_experiment<P: Predictor + ?Sized>(
    predictor: &P,
    instances: &[Instance],
    config: &DecodeConfig,
    n: usize,
    k_grid: &[usize],
    seed: u64,
    specials: Specials,
) -> Result<PassKExperiment> {
    if let Some(&k) = k_grid.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    let purpose = sample_purpose(config.mode);
    let runs: Vec<ProblemRun> = instances
        .par_iter()
        .map(|inst| {
            let mut rngs: Vec<_> = (0..n)
                .map(|j| derive_stream(seed, StreamKey::new(&purpose, inst.id, j as u64, 0)))
                .collect();
            let out = decode_many(predictor, &inst.prompt, config, specials, &mut rngs)?;
            let (completions, traces): (Vec<_>, Vec<_>) = out.into_iter().unzip();
            let rewards = completions.iter().map(|c| verify(inst, c.tokens())).collect();
            Ok(ProblemRun {
                problem_id: inst.id,
                completions,
                traces,
                rewards,
            })
        })
        .collect::<Result<_>>()?;
    let flags = runs
        .iter()
        .map(|r| ProblemFlags {
            problem_id: r.problem_id,
            correct: r.rewards.iter().map(|x| x.is_correct()).collect(),
        })
        .collect();
    Ok(PassKExperiment {
        mode: config.mode,
        table: PassAtKTable::from_flags(flags, k_grid)?,
        runs,
    })
}

/// Four-way partition of problems by which mode solved them within `k` samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub k: usize,
    pub solved: Vec<(u64, bool, bool)>,
    pub exclusive_a: usize,
    pub exclusive_b: usize,
    pub both: usize,
    pub neither: usize,
}

pub const COVERAGE_CSV_HEADER: &str = "mode_a,mode_b,k,exclusive_a,exclusive_b,both,neither";

impl CoverageReport {
    pub fn csv_row(&self, mode_a: &str, mode_b: &str) -> String {
        format!(
            "{mode_a},{mode_b},{},{},{},{},{}",
            self.k, self.exclusive_a, self.exclusive_b, self.both, self.neither
        )
    }
}

/// A problem counts as solved under a mode iff one of its first `k` samples is correct.
pub fn coverage(a: &[ProblemFlags], b: &[ProblemFlags], k: usize) -> Result<CoverageReport> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.problem_id != y.problem_id) {
        return Err(Error::InvalidArgument("coverage needs the same problems in the same order".into()));
    }
    let mut r = CoverageReport {
        k,
        solved: Vec::with_capacity(a.len()),
        exclusive_a: 0,
        exclusive_b: 0,
        both: 0,
        neither: 0,
    };
    for (x, y) in a.iter().zip(b) {
        let (sa, sb) = (x.solved_within(k), y.solved_within(k));
        match (sa, sb) {
            (true, true) => r.both += 1,
            (true, false) => r.exclusive_a += 1,
            (false, true) => r.exclusive_b += 1,
            (false, false) => r.neither += 1,
        }
        r.solved.push((x.problem_id, sa, sb));
    }
    Ok(r)
}

/// Finalization-entropy and bypass statistics for one decode mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEntropy {
    pub mode: String,
    pub fork_mean: f64,
    pub nonfork_mean: f64,
    pub global_mean: f64,
    pub fork_records: usize,
    pub records: usize,
    pub bypass_fork: usize,
    pub bypass_nonfork: usize,
    /// Per finalized token id: (bypassed count, total count).
    pub bypass_by_token: BTreeMap<TokenId, (usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub modes: Vec<ModeEntropy>,
}

pub const ENTROPY_CSV_HEADER: &str =
    "mode,fork_mean,nonfork_mean,global_mean,fork_records,records,bypass_fork,bypass_nonfork";

impl EntropyReport {
    pub fn get(&self, mode: &str) -> Option<&ModeEntropy> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ENTROPY_CSV_HEADER}\n");
        for m in &self.modes {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                m.mode,
                m.fork_mean,
                m.nonfork_mean,
                m.global_mean,
                m.fork_records,
                m.records,
                m.bypass_fork,
                m.bypass_nonfork
            )
            .unwrap();
        }
        out
    }

    /// `mode,token,bypassed,total` rows.
    pub fn bypass_tokens_csv(&self) -> String {
        let mut out = "mode,token,bypassed,total\n".to_string();
        for m in &self.modes {
            for (tok, (b, t)) in &m.bypass_by_token {
                writeln!(out, "{},{tok},{b},{t}", m.mode).unwrap();
            }
        }
        out
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Statistics over the traces of one mode. Fork membership comes from the instance.
pub fn mode_entropy(mode: &str, traces: &[(u64, &DecodeTrace)], instances: &[Instance]) -> Result<ModeEntropy> {
    let forks: BTreeMap<u64, &[usize]> = instances.iter().map(|i| (i.id, i.fork_positions.as_slice())).collect();
    let (mut fork_sum, mut fork_n, mut other_sum, mut other_n) = (0.0, 0, 0.0, 0);
    let (mut bypass_fork, mut bypass_nonfork) = (0, 0);
    let mut by_token: BTreeMap<TokenId, (usize, usize)> = BTreeMap::new();
    for (pid, trace) in traces {
        let fp = forks
            .get(pid)
            .ok_or_else(|| Error::InvalidArgument(format!("trace for unknown problem {pid}")))?;
        for (r, bypassed) in trace.records.iter().zip(trace.bypassed()) {
            let is_fork = fp.contains(&r.position);
            if is_fork {
                fork_sum += r.entropy;
                fork_n += 1;
                bypass_fork += usize::from(bypassed);
            } else {
                other_sum += r.entropy;
                other_n += 1;
                bypass_nonfork += usize::from(bypassed);
            }
            let e = by_token.entry(r.token).or_default();
            e.0 += usize::from(bypassed);
            e.1 += 1;
        }
    }
    Ok(ModeEntropy {
        mode: mode.to_string(),
        fork_mean: mean(fork_sum, fork_n),
        nonfork_mean: mean(other_sum, other_n),
        global_mean: mean(fork_sum + other_sum, fork_n + other_n),
        fork_records: fork_n,
        records: fork_n + other_n,
        bypass_fork,
        bypass_nonfork,
        bypass_by_token: by_token,
    })
}

/// One [`ModeEntropy`] per experiment, over every sample's trace.
pub fn entropy_degradation(experiments: &[&PassKExperiment], instances: &[Instance]) -> Result<EntropyReport> {
    let modes = experiments
        .iter()
        .map(|e| {
            let traces: Vec<(u64, &DecodeTrace)> =
                e.runs.iter().flat_map(|r| r.traces.iter().map(move |t| (r.problem_id, t))).collect();
            mode_entropy(e.mode.as_str(), &traces, instances)
        })
        .collect::<Result<_>>()?;
    Ok(EntropyReport { modes })
}

/// One point of the entropy-bounded decoding sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub accuracy: f64,
    pub tokens_per_step: f64,
}

pub const SWEEP_CSV_HEADER: &str = "gamma,accuracy,tokens_per_step";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.gamma, self.accuracy, self.tokens_per_step)
    }
}

/// Accuracy and mean parallelism of `eb_parallel` decoding at each `gamma`,
/// `n` samples per instance. `gamma = 0` is one token per step.
pub fn eb_sweep<P: Predictor + ?Sized>(
    predictor: &P,
    instances: &[Instance],
    base: &DecodeConfig,
    gammas: &[f64],
    n: usize,
    seed: u64,
    specials: Specials,
) -> Result<Vec<SweepRow>> {
    gammas
        .iter()
        .map(|&gamma| {
            let cfg = DecodeConfig {
                mode: DecodeMode::EbParallel,
                eb_gamma: gamma,
                ..*base
            };
            let exp = passk_experiment(predictor, instances, &cfg, n, &[1], seed, specials)?;
            Ok(SweepRow {
                gamma,
                accuracy: exp.accuracy(),
                tokens_per_step: exp.tokens_per_step(),
            })
        })
        .collect()
}
