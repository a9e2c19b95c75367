//! The exact left-to-right policy induced by the denoiser.
//!
//! The state for response position `k` observes the prompt and the first `k`
//! response tokens and masks positions `k..L_gen`. The policy at `k` is the
//! softmax of the denoiser's logits at row `k` of that state, so the
//! likelihood of a whole completion is an exact product of `L_gen` factors.
//! Outputs at other masked rows are ignored.

use crate::denoiser::{forward, ForwardCache, Params, Scalar};
use crate::error::{Error, Result};
use crate::prob::{entropy, log_softmax, sample_unchecked, softmax, without_token};
use crate::rng::RngStream;
use crate::sequence::{Completion, MaskedSequence};
use crate::vocab::{Specials, TokenId};

/// Future-masked state: prompt, `prefix`, then `gen_budget - prefix.len()` masks.
pub fn ar_state(prompt: &[TokenId], prefix: &[TokenId], gen_budget: usize, mask_id: TokenId) -> Result<MaskedSequence> {
    if prefix.len() > gen_budget {
        return Err(Error::InvalidArgument(format!(
            "prefix of {} tokens exceeds generation budget {gen_budget}",
            prefix.len()
        )));
    }
    let mut tokens = Vec::with_capacity(prompt.len() + gen_budget);
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(prefix);
    let mut masked = vec![false; tokens.len()];
    tokens.resize(prompt.len() + gen_budget, mask_id);
    masked.resize(tokens.len(), true);
    MaskedSequence::new(tokens, masked, mask_id)
}

/// Next-token distribution over the full vocabulary after `prefix`.
pub fn ar_next_distribution<F: Scalar>(
    params: &Params<F>,
    prompt: &[TokenId],
    prefix: &[TokenId],
    gen_budget: usize,
    mask_id: TokenId,
) -> Result<Vec<f64>> {
    if prefix.len() >= gen_budget {
        return Err(Error::InvalidArgument(format!(
            "no position left after a prefix of {} tokens",
            prefix.len()
        )));
    }
    let state = ar_state(prompt, prefix, gen_budget, mask_id)?;
    let cache = forward(params, &[state.tokens()])?;
    Ok(softmax(cache.logit_row(0, prompt.len() + prefix.len())))
}

/// Per-token log-probabilities of a completion and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogProb {
    pub per_token: Vec<f64>,
    pub total: f64,
}

impl SequenceLogProb {
    pub fn from_tokens(per_token: Vec<f64>) -> Self {
        let total = per_token.iter().sum();
        Self { per_token, total }
    }
}

/// One requested factor: the log-probability of `completion[position]` given the
/// state that masks `position..`.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub prompt: &'a [TokenId],
    pub completion: &'a [TokenId],
    pub position: usize,
}

/// Batched scoring result. Keeps the forward cache so gradients of any weighted
/// sum of the scored log-probabilities can be taken.
pub struct TokenScores<F> {
    pub cache: ForwardCache<F>,
    rows: Vec<usize>,
    targets: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
}

impl<F: Scalar> TokenScores<F> {
    /// Gradient of `sum_j weights[j] * logprobs[j]` with respect to all logits.
    pub fn dlogits(&self, weights: &[f64]) -> Vec<F> {
        assert_eq!(weights.len(), self.rows.len());
        let v = self.cache.vocab();
        let mut d = vec![F::ZERO; self.cache.rows() * v];
        for ((&r, &tgt), &w) in self.rows.iter().zip(&self.targets).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let p = softmax(&self.cache.logits()[r * v..(r + 1) * v]);
            let row = &mut d[r * v..(r + 1) * v];
            for (j, (g, pj)) in row.iter_mut().zip(p).enumerate() {
                let onehot = if j == tgt as usize { 1.0 } else { 0.0 };
                *g = F::from_f64(Into::<f64>::into(*g) + w * (onehot - pj));
            }
        }
        d
    }
}

/// Evaluate many factors with one forward over their future-masked states.
pub fn score_tokens<F: Scalar>(
    params: &Params<F>,
    requests: &[ScoreRequest<'_>],
    mask_id: TokenId,
) -> Result<TokenScores<F>> {
    let states: Vec<MaskedSequence> = requests
        .iter()
        .map(|r| {
            if r.position >= r.completion.len() {
                return Err(Error::InvalidArgument(format!(
                    "position {} outside completion of length {}",
                    r.position,
                    r.completion.len()
                )));
            }
            ar_state(r.prompt, &r.completion[..r.position], r.completion.len(), mask_id)
        })
        .collect::<Result<_>>()?;
    let seqs: Vec<&[TokenId]> = states.iter().map(|s| s.tokens()).collect();
    let cache = forward(params, &seqs)?;
    let mut rows = Vec::with_capacity(requests.len());
    let mut targets = Vec::with_capacity(requests.len());
    let mut logprobs = Vec::with_capacity(requests.len());
    let mut entropies = Vec::with_capacity(requests.len());
    for (j, r) in requests.iter().enumerate() {
        let row = cache.row_index(j, r.prompt.len() + r.position);
        let tgt = r.completion[r.position];
        let lp = log_softmax(cache.logit_row(j, r.prompt.len() + r.position));
        logprobs.push(lp[tgt as usize]);
        entropies.push(entropy(&lp.iter().map(|l| l.exp()).collect::<Vec<_>>()));
        rows.push(row);
        targets.push(tgt);
    }
    Ok(TokenScores {
        cache,
        rows,
        targets,
        logprobs,
        entropies,
    })
}

/// Exact log-likelihood of `completion`, all `L_gen` states in one forward batch.
pub fn ar_sequence_logprob<F: Scalar>(
    params: &Params<F>,
    prompt: &[TokenId],
    completion: &[TokenId],
    mask_id: TokenId,
) -> Result<SequenceLogProb> {
    let requests: Vec<ScoreRequest<'_>> = (0..completion.len())
        .map(|position| ScoreRequest {
            prompt,
            completion,
            position,
        })
        .collect();
    Ok(SequenceLogProb::from_tokens(score_tokens(params, &requests, mask_id)?.logprobs))
}

/// Same quantity as [`ar_sequence_logprob`] with one forward per position.
pub fn ar_sequence_logprob_stepwise<F: Scalar>(
    params: &Params<F>,
    prompt: &[TokenId],
    completion: &[TokenId],
    mask_id: TokenId,
) -> Result<SequenceLogProb> {
    let per_token = (0..completion.len())
        .map(|k| {
            let p = ar_next_distribution(params, prompt, &completion[..k], completion.len(), mask_id)?;
            Ok(p[completion[k] as usize].ln())
        })
        .collect::<Result<_>>()?;
    Ok(SequenceLogProb::from_tokens(per_token))
}

/// A sampled completion with the log-probability and entropy of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub completion: Completion,
    pub logprob: SequenceLogProb,
    pub entropies: Vec<f64>,
}

/// Sample left to right at `temperature`. The mask token is never emitted;
/// recorded log-probabilities and entropies are those of the untempered policy.
pub fn ar_rollout<F: Scalar>(
    params: &Params<F>,
    prompt: &[TokenId],
    gen_budget: usize,
    temperature: f64,
    specials: Specials,
    rng: &mut RngStream,
) -> Result<Rollout> {
    let mut out = ar_rollout_batch(params, prompt, gen_budget, temperature, specials, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one rollout"))
}

/// Several independent rollouts for the same prompt, advanced in lockstep so
/// that each step is one forward call. Rollout `i` draws only from `rngs[i]`.
pub fn ar_rollout_batch<F: Scalar>(
    params: &Params<F>,
    prompt: &[TokenId],
    gen_budget: usize,
    temperature: f64,
    specials: Specials,
    rngs: &mut [RngStream],
) -> Result<Vec<Rollout>> {
    if gen_budget == 0 {
        return Err(Error::InvalidArgument("generation budget must be positive".into()));
    }
    if !(temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    let n = rngs.len();
    let mut states: Vec<MaskedSequence> = (0..n)
        .map(|_| ar_state(prompt, &[], gen_budget, specials.mask_id))
        .collect::<Result<_>>()?;
    let mut logprobs = vec![Vec::with_capacity(gen_budget); n];
    let mut entropies = vec![Vec::with_capacity(gen_budget); n];
    for k in 0..gen_budget {
        let pos = prompt.len() + k;
        let seqs: Vec<&[TokenId]> = states.iter().map(|s| s.tokens()).collect();
        let cache = forward(params, &seqs)?;
        for (i, rng) in rngs.iter_mut().enumerate() {
            let lp = log_softmax(cache.logit_row(i, pos));
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let tok = sample_unchecked(&without_token(&probs, specials.mask_id), temperature, rng) as TokenId;
            logprobs[i].push(lp[tok as usize]);
            entropies[i].push(entropy(&probs));
            states[i].fill(pos, tok)?;
        }
    }
    states
        .into_iter()
        .zip(logprobs)
        .zip(entropies)
        .map(|((s, lp), ent)| {
            let completion = Completion::new(s.tokens()[prompt.len()..].to_vec(), specials.eos_id, specials.mask_id)?;
            if lp.iter().any(|l| !l.is_finite()) {
                return Err(Error::Numeric("non-finite rollout log-probability".into()));
            }
            Ok(Rollout {
                completion,
                logprob: SequenceLogProb::from_tokens(lp),
                entropies: ent,
            })
        })
        .collect()
}
