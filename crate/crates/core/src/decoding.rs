//! Samplers that unmask an all-mask response, and the per-token trace they record.
//!
//! Every mode starts from prompt + `L_gen` masks and re-predicts from the
//! current state at each step. Modes differ only in which masked positions get
//! finalized:
//!
//! - `ar`: the leftmost masked position.
//! - `confidence`: the `s` positions whose sampled candidate is most probable.
//! - `neg_entropy`: the `s` positions with lowest predictive entropy.
//! - `margin`: the `s` positions with largest top-1 minus top-2 probability.
//! - `eb_parallel`: the longest prefix of the leftmost contiguous masked run
//!   whose cumulative entropy stays within `eb_gamma`, at least one token.
//!
//! Non-AR modes work inside semi-autoregressive blocks of size `B`: block
//! `b + 1` is not touched until block `b` is fully unmasked. Ties in every
//! ranking go to the lowest position. The mask token is never emitted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::{forward, Params, Scalar};
use crate::error::{Error, Result};
use crate::prob::{entropy, sample_unchecked, softmax, top2_margin, without_token};
use crate::rng::RngStream;
use crate::sequence::{Completion, MaskedSequence};
use crate::vocab::{Specials, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Ar,
    Confidence,
    NegEntropy,
    Margin,
    EbParallel,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 5] = [
        DecodeMode::Ar,
        DecodeMode::Confidence,
        DecodeMode::NegEntropy,
        DecodeMode::Margin,
        DecodeMode::EbParallel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::Ar => "ar",
            DecodeMode::Confidence => "confidence",
            DecodeMode::NegEntropy => "neg_entropy",
            DecodeMode::Margin => "margin",
            DecodeMode::EbParallel => "eb_parallel",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown decode mode `{s}`")))
    }
}

/// What `confidence` mode ranks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKey {
    /// Probability of the sampled candidate.
    SampledProb,
    /// Largest probability at the position, whatever was sampled.
    MaxProb,
}

impl FromStr for ConfidenceKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled_prob" => Ok(Self::SampledProb),
            "max_prob" => Ok(Self::MaxProb),
            _ => Err(Error::Config(format!("unknown confidence key `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub block_size: usize,
    pub tokens_per_step: usize,
    pub temperature: f64,
    pub gen_budget: usize,
    pub eb_gamma: f64,
    pub confidence_key: ConfidenceKey,
}

impl DecodeConfig {
    /// One token per step, a single block spanning the whole budget.
    pub fn new(mode: DecodeMode, gen_budget: usize, temperature: f64) -> Self {
        Self {
            mode,
            block_size: gen_budget,
            tokens_per_step: 1,
            temperature,
            gen_budget,
            eb_gamma: 0.0,
            confidence_key: ConfidenceKey::SampledProb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.gen_budget == 0 {
            return bad("gen_budget must be positive".into());
        }
        if self.mode != DecodeMode::Ar {
            if self.block_size == 0 || self.block_size > self.gen_budget {
                return bad(format!("block_size {} must be in 1..={}", self.block_size, self.gen_budget));
            }
            if self.tokens_per_step == 0 || self.tokens_per_step > self.block_size {
                return bad(format!(
                    "tokens_per_step {} must be in 1..={}",
                    self.tokens_per_step, self.block_size
                ));
            }
        }
        if !(self.temperature >= 0.0) {
            return bad(format!("temperature {} must be nonnegative", self.temperature));
        }
        if !(self.eb_gamma >= 0.0) {
            return bad(format!("eb_gamma {} must be nonnegative", self.eb_gamma));
        }
        Ok(())
    }
}

/// One finalized token. `position` is relative to the start of the response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub position: usize,
    pub token: TokenId,
    /// Entropy (nats) of the predictive distribution at the finalization step.
    pub entropy: f64,
    /// Probability of the chosen token under that distribution.
    pub prob: f64,
    pub order_index: usize,
}

/// Finalization records in order, plus the number of denoising steps taken.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub records: Vec<TraceRecord>,
    pub steps: usize,
}

impl DecodeTrace {
    pub fn tokens_per_step(&self) -> f64 {
        self.records.len() as f64 / self.steps as f64
    }

    /// Response positions in finalization order.
    pub fn order(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.position).collect()
    }

    /// Per record: whether some position to its right was finalized at an
    /// earlier step. Tokens finalized in the same step do not bypass each other.
    pub fn bypassed(&self) -> Vec<bool> {
        let mut max_right_before = vec![None; self.records.len()];
        let mut best: Option<usize> = None;
        let mut i = 0;
        while i < self.records.len() {
            let step = self.records[i].step;
            let mut j = i;
            while j < self.records.len() && self.records[j].step == step {
                max_right_before[j] = best;
                j += 1;
            }
            for r in &self.records[i..j] {
                best = Some(best.map_or(r.position, |b: usize| b.max(r.position)));
            }
            i = j;
        }
        self.records
            .iter()
            .zip(max_right_before)
            .map(|(r, m)| m.is_some_and(|m| m > r.position))
            .collect()
    }

    pub fn bypass_count(&self) -> usize {
        self.bypassed().into_iter().filter(|&b| b).count()
    }
}

/// Anything that maps a masked state to per-position distributions over the vocabulary.
pub trait Predictor: Sync {
    /// For every state, the full-vocabulary distribution at each requested
    /// absolute position.
    fn predict(&self, states: &[&MaskedSequence], positions: &[Vec<usize>]) -> Result<Vec<Vec<Vec<f64>>>>;
}

impl<F: Scalar> Predictor for Params<F> {
    fn predict(&self, states: &[&MaskedSequence], positions: &[Vec<usize>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let seqs: Vec<&[TokenId]> = states.iter().map(|s| s.tokens()).collect();
        let cache = forward(self, &seqs)?;
        Ok(positions
            .iter()
            .enumerate()
            .map(|(b, ps)| ps.iter().map(|&p| softmax(cache.logit_row(b, p))).collect())
            .collect())
    }
}

/// Predictive distribution at one masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDist {
    pub position: usize,
    pub probs: Vec<f64>,
}

/// A (position, token) pair chosen by a step function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Finalization {
    pub position: usize,
    pub token: TokenId,
    pub prob: f64,
    pub entropy: f64,
}

fn draw(d: &PositionDist, temperature: f64, mask_id: TokenId, rng: &mut RngStream) -> Finalization {
    let token = sample_unchecked(&without_token(&d.probs, mask_id), temperature, rng) as TokenId;
    Finalization {
        position: d.position,
        token,
        prob: d.probs[token as usize],
        entropy: entropy(&d.probs),
    }
}

/// Keep the `s` candidates with the largest key; ties go to the lower position.
fn top_s(mut scored: Vec<(f64, Finalization)>, s: usize) -> Vec<Finalization> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.position.cmp(&b.1.position)));
    let mut out: Vec<Finalization> = scored.into_iter().take(s.max(1)).map(|x| x.1).collect();
    out.sort_by_key(|f| f.position);
    out
}

/// Sample a candidate at every position and keep the `s` most confident.
pub fn step_confidence(
    dists: &[PositionDist],
    s: usize,
    temperature: f64,
    key: ConfidenceKey,
    mask_id: TokenId,
    rng: &mut RngStream,
) -> Vec<Finalization> {
    let scored = dists
        .iter()
        .map(|d| {
            let f = draw(d, temperature, mask_id, rng);
            let k = match key {
                ConfidenceKey::SampledProb => f.prob,
                ConfidenceKey::MaxProb => d.probs.iter().cloned().fold(0.0, f64::max),
            };
            (k, f)
        })
        .collect();
    top_s(scored, s)
}

/// Keep the `s` lowest-entropy positions.
pub fn step_neg_entropy(
    dists: &[PositionDist],
    s: usize,
    temperature: f64,
    mask_id: TokenId,
    rng: &mut RngStream,
) -> Vec<Finalization> {
    let scored = dists
        .iter()
        .map(|d| {
            let f = draw(d, temperature, mask_id, rng);
            (-f.entropy, f)
        })
        .collect();
    top_s(scored, s)
}

/// Keep the `s` positions with the largest top-1 minus top-2 margin.
pub fn step_margin(
    dists: &[PositionDist],
    s: usize,
    temperature: f64,
    mask_id: TokenId,
    rng: &mut RngStream,
) -> Vec<Finalization> {
    let scored = dists
        .iter()
        .map(|d| (top2_margin(&d.probs), draw(d, temperature, mask_id, rng)))
        .collect();
    top_s(scored, s)
}

/// Finalize the longest prefix of `run` whose summed entropy is at most `gamma`,
/// and always at least its first position. `run` must be contiguous and leftmost.
pub fn step_eb(
    run: &[PositionDist],
    gamma: f64,
    temperature: f64,
    mask_id: TokenId,
    rng: &mut RngStream,
) -> Vec<Finalization> {
    let mut out = Vec::new();
    let mut total = 0.0;
    for d in run {
        let h = entropy(&d.probs);
        if !out.is_empty() && total + h > gamma {
            break;
        }
        total += h;
        out.push(draw(d, temperature, mask_id, rng));
    }
    out
}

/// Positions the current step scores, given the state.
fn step_positions(state: &MaskedSequence, prompt_len: usize, cfg: &DecodeConfig) -> Vec<usize> {
    let first = (prompt_len..state.len())
        .find(|&k| state.is_masked(k))
        .expect("decode loop only runs while masks remain");
    if cfg.mode == DecodeMode::Ar {
        return vec![first];
    }
    let block = (first - prompt_len) / cfg.block_size;
    let end = (prompt_len + (block + 1) * cfg.block_size).min(state.len());
    match cfg.mode {
        DecodeMode::EbParallel => (first..end).take_while(|&k| state.is_masked(k)).collect(),
        _ => (first..end).filter(|&k| state.is_masked(k)).collect(),
    }
}

fn select(dists: &[PositionDist], cfg: &DecodeConfig, mask_id: TokenId, rng: &mut RngStream) -> Vec<Finalization> {
    let (s, t) = (cfg.tokens_per_step, cfg.temperature);
    match cfg.mode {
        DecodeMode::Ar => dists.iter().map(|d| draw(d, t, mask_id, rng)).collect(),
        DecodeMode::Confidence => step_confidence(dists, s, t, cfg.confidence_key, mask_id, rng),
        DecodeMode::NegEntropy => step_neg_entropy(dists, s, t, mask_id, rng),
        DecodeMode::Margin => step_margin(dists, s, t, mask_id, rng),
        DecodeMode::EbParallel => step_eb(dists, cfg.eb_gamma, t, mask_id, rng),
    }
}

/// Decode one response.
pub fn decode<P: Predictor + ?Sized>(
    predictor: &P,
    prompt: &[TokenId],
    config: &DecodeConfig,
    specials: Specials,
    rng: &mut RngStream,
) -> Result<(Completion, DecodeTrace)> {
    let mut out = decode_many(predictor, prompt, config, specials, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one decode"))
}

/// Independent decodes of one prompt advanced in lockstep, one predictor call
/// per step. Decode `i` draws only from `rngs[i]`.
pub fn decode_many<P: Predictor + ?Sized>(
    predictor: &P,
    prompt: &[TokenId],
    config: &DecodeConfig,
    specials: Specials,
    rngs: &mut [RngStream],
) -> Result<Vec<(Completion, DecodeTrace)>> {
    config.validate()?;
    if prompt.contains(&specials.mask_id) {
        return Err(Error::Sequence("prompt contains the mask token".into()));
    }
    let p = prompt.len();
    let n = rngs.len();
    let mut states: Vec<MaskedSequence> =
        (0..n).map(|_| MaskedSequence::all_masked_response(prompt, config.gen_budget, specials.mask_id)).collect();
    let mut traces = vec![DecodeTrace::default(); n];
    loop {
        let active: Vec<usize> = (0..n).filter(|&i| states[i].masked_count() > 0).collect();
        if active.is_empty() {
            break;
        }
        let positions: Vec<Vec<usize>> = active.iter().map(|&i| step_positions(&states[i], p, config)).collect();
        let refs: Vec<&MaskedSequence> = active.iter().map(|&i| &states[i]).collect();
        let probs = predictor.predict(&refs, &positions)?;
        for ((&i, ps), pr) in active.iter().zip(&positions).zip(probs) {
            let dists: Vec<PositionDist> = ps
                .iter()
                .zip(pr)
                .map(|(&position, probs)| PositionDist { position, probs })
                .collect();
            let trace = &mut traces[i];
            for f in select(&dists, config, specials.mask_id, &mut rngs[i]) {
                states[i].fill(f.position, f.token)?;
                trace.records.push(TraceRecord {
                    step: trace.steps,
                    position: f.position - p,
                    token: f.token,
                    entropy: f.entropy,
                    prob: f.prob,
                    order_index: trace.records.len(),
                });
            }
            trace.steps += 1;
        }
    }
    states
        .into_iter()
        .zip(traces)
        .map(|(s, t)| Ok((Completion::new(s.tokens()[p..].to_vec(), specials.eos_id, specials.mask_id)?, t)))
        .collect()
}

/// First line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config: DecodeConfig,
}

/// One record of a trace file, tagged with the problem and sample it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub problem_id: u64,
    pub sample: usize,
    #[serde(flatten)]
    pub record: TraceRecord,
}
