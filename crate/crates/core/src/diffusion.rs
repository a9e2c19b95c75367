//! Forward masking process, the masked-diffusion training loss and the
//! supervised pretraining loop.
//!
//! The loss for one example at noise level `t` is
//! `(1/t) * sum_{k masked} -log p(x0_k | x_t)`; `t ~ U[0, 1]` is clamped
//! below at [`T_MIN`] to bound the `1/t` weight. Prompt tokens are never
//! masked, and responses are padded with EOS to the generation budget before
//! masking so the model learns to emit EOS padding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{backward, forward, DenoiserConfig, DenoiserParams, Params, Scalar};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamW};
use crate::prob::log_softmax;
use crate::rng::{derive_stream, RngStream, StreamKey};
use crate::sequence::MaskedSequence;
use crate::vocab::TokenId;

/// Lower clamp applied to sampled noise levels.
pub const T_MIN: f64 = 0.01;

/// Examples processed together in one forward/backward call. Fixed so that
/// gradient reduction order never depends on the thread count.
const CHUNK: usize = 8;

/// Masking ratio `t` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("noise level {t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    /// Draw `t ~ U[0, 1]` and clamp at [`T_MIN`].
    pub fn sample(rng: &mut RngStream) -> Self {
        Self(rng.uniform().max(T_MIN))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A clean prompt/response pair. One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl TrainingExample {
    /// Prompt followed by the response padded with EOS to `gen_budget`.
    pub fn padded(&self, gen_budget: usize, eos_id: TokenId) -> Result<Vec<TokenId>> {
        if self.response.len() > gen_budget {
            return Err(Error::InvalidArgument(format!(
                "response of {} tokens exceeds generation budget {gen_budget}",
                self.response.len()
            )));
        }
        let mut x0 = Vec::with_capacity(self.prompt.len() + gen_budget);
        x0.extend_from_slice(&self.prompt);
        x0.extend_from_slice(&self.response);
        x0.resize(self.prompt.len() + gen_budget, eos_id);
        Ok(x0)
    }
}

/// Replace each position at or after `prompt_len` by the mask token with probability `t`.
pub fn forward_mask(
    x0: &[TokenId],
    prompt_len: usize,
    t: NoiseLevel,
    mask_id: TokenId,
    rng: &mut RngStream,
) -> MaskedSequence {
    let mut tokens = x0.to_vec();
    let mut masked = vec![false; x0.len()];
    for k in prompt_len..x0.len() {
        // Always consume one draw per position so streams stay aligned across t.
        if rng.uniform() < t.value() {
            tokens[k] = mask_id;
            masked[k] = true;
        }
    }
    MaskedSequence::new(tokens, masked, mask_id).expect("x0 must not contain the mask token")
}

/// One noised training item.
#[derive(Debug, Clone)]
pub struct NoisedExample {
    pub clean: Vec<TokenId>,
    pub noised: MaskedSequence,
    pub t: NoiseLevel,
}

/// Summed weighted cross-entropy over `items` and its gradient.
///
/// Returns `(sum of per-item losses, gradient of that sum)`.
pub fn masked_ce_loss<F: Scalar>(
    params: &Params<F>,
    items: &[NoisedExample],
) -> Result<(f64, Params<F>)> {
    let seqs: Vec<&[TokenId]> = items.iter().map(|it| it.noised.tokens()).collect();
    let cache = forward(params, &seqs)?;
    let v = cache.vocab();
    let mut dlogits = vec![F::ZERO; cache.rows() * v];
    let mut total = 0.0f64;
    for (b, it) in items.iter().enumerate() {
        let w = 1.0 / it.t.value();
        for k in it.noised.masked_positions() {
            let target = it.clean[k] as usize;
            let lp = log_softmax(cache.logit_row(b, k));
            total += -w * lp[target];
            let r = cache.row_index(b, k);
            let row = &mut dlogits[r * v..(r + 1) * v];
            for j in 0..v {
                let onehot = if j == target { 1.0 } else { 0.0 };
                row[j] = F::from_f64(w * (lp[j].exp() - onehot));
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is {total}")));
    }
    let grad = backward(params, &cache, &dlogits);
    Ok((total, grad))
}

/// Loss and gradient for one example: mask at level `t`, then score masked positions.
///
/// When no position ends up masked the loss and gradient are exactly zero.
pub fn mdm_loss<F: Scalar>(
    params: &Params<F>,
    example: &TrainingExample,
    gen_budget: usize,
    t: NoiseLevel,
    mask_id: TokenId,
    eos_id: TokenId,
    rng: &mut RngStream,
) -> Result<(f64, Params<F>)> {
    if t.value() < T_MIN {
        return Err(Error::InvalidArgument(format!(
            "noise level {} below t_min {T_MIN}",
            t.value()
        )));
    }
    let clean = example.padded(gen_budget, eos_id)?;
    let noised = forward_mask(&clean, example.prompt.len(), t, mask_id, rng);
    if noised.masked_count() == 0 {
        return Ok((0.0, Params::zeros(*params.config())?));
    }
    masked_ce_loss(params, &[NoisedExample { clean, noised, t }])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gen_budget: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 3e-4,
            gen_budget: 32,
        }
    }
}

/// One row of the pretraining metrics CSV (`step,loss,t_mean`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub t_mean: f64,
}

pub const PRETRAIN_CSV_HEADER: &str = "step,loss,t_mean";

impl PretrainLogRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.step, self.loss, self.t_mean)
    }
}

/// Adam on the masked-diffusion loss with per-example independent noise levels.
///
/// Deterministic given `seed`: initialization, batches, noise levels and masks
/// come from derived streams and gradients are reduced in a fixed order.
pub fn pretrain(
    model: DenoiserConfig,
    corpus: &[TrainingExample],
    cfg: &PretrainConfig,
    mask_id: TokenId,
    eos_id: TokenId,
    seed: u64,
    on_step: impl FnMut(&PretrainLogRow),
) -> Result<(DenoiserParams, Vec<PretrainLogRow>)> {
    let mut params = init_params(model, seed)?;
    let mut opt = AdamW::new(AdamConfig::with_lr(cfg.lr), params.len());
    let log = pretrain_steps(&mut params, &mut opt, corpus, cfg, mask_id, eos_id, seed, 0..cfg.steps, on_step)?;
    Ok((params, log))
}

/// Initial parameters used by [`pretrain`] for `seed`.
pub fn init_params(model: DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    DenoiserParams::init(model, &mut derive_stream(seed, StreamKey::new("init", 0, 0, 0)))
}

/// Run steps `steps` of [`pretrain`] in place. Splitting a run into
/// consecutive ranges gives the same result as one call.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_steps(
    params: &mut DenoiserParams,
    opt: &mut AdamW,
    corpus: &[TrainingExample],
    cfg: &PretrainConfig,
    mask_id: TokenId,
    eos_id: TokenId,
    seed: u64,
    steps: std::ops::Range<usize>,
    mut on_step: impl FnMut(&PretrainLogRow),
) -> Result<Vec<PretrainLogRow>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut log = Vec::with_capacity(steps.len());
    for step in steps {
        let mut batch_rng = derive_stream(seed, StreamKey::new("pretrain-batch", 0, 0, step as u64));
        let items: Vec<NoisedExample> = (0..cfg.batch_size)
            .map(|b| {
                let ex = &corpus[batch_rng.below(corpus.len())];
                let mut rng = derive_stream(seed, StreamKey::new("pretrain-mask", b as u64, 0, step as u64));
                let t = NoiseLevel::sample(&mut rng);
                let clean = ex.padded(cfg.gen_budget, eos_id)?;
                let noised = forward_mask(&clean, ex.prompt.len(), t, mask_id, &mut rng);
                Ok(NoisedExample { clean, noised, t })
            })
            .collect::<Result<_>>()?;

        let (loss_sum, grad) = reduce_chunks(params, &items)?;
        let scale = 1.0 / cfg.batch_size as f64;
        let grad: Vec<f64> = grad.into_iter().map(|g| g * scale).collect();
        let row = PretrainLogRow {
            step,
            loss: loss_sum * scale,
            t_mean: items.iter().map(|it| it.t.value()).sum::<f64>() * scale,
        };
        if !row.loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        opt.step(params, &grad)?;
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

/// Evaluate fixed-size chunks in parallel and sum them in chunk order.
fn reduce_chunks(params: &DenoiserParams, items: &[NoisedExample]) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, DenoiserParams)> = items
        .par_chunks(CHUNK)
        .map(|chunk| masked_ce_loss(params, chunk))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; params.len()];
    for (l, g) in parts {
        loss += l;
        for (acc, &x) in grad.iter_mut().zip(g.as_slice()) {
            *acc += x as f64;
        }
    }
    Ok((loss, grad))
}
