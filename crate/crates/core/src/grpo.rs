//! GRPO over the exact left-to-right policy.
//!
//! Per update: snapshot the current parameters as the old policy, draw `G`
//! rollouts per query from it, score them, standardize rewards within each
//! group, then take `update_steps` AdamW steps on
//!
//! ```text
//! J = mean_q (1/G) sum_i (1/|o_i|) sum_{k in S_i} [ min(rho A, clip(rho, 1-eps, 1+eps) A) - beta KL_k ]
//! ```
//!
//! where `rho = exp(l_new - l_old)`, `|o_i|` counts tokens up to and including
//! the first EOS, and `S_i` is either every such token or, when
//! `entropy_top_frac < 1`, the `ceil(frac * |o_i|)` tokens with the highest
//! rollout-time entropy. KL uses the k3 estimator against the old policy.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{backward, DenoiserParams, Params, Scalar};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::policy::{ar_rollout_batch, score_tokens, Rollout, ScoreRequest};
use crate::rng::{derive_stream, StreamKey};
use crate::sequence::Completion;
use crate::tasks::{verify, Instance};
use crate::vocab::{Specials, TokenId};

/// Floor below which a group's reward spread counts as zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Score requests evaluated per forward/backward call.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub queries_per_update: usize,
    pub update_steps: usize,
    pub temperature: f64,
    pub gen_budget: usize,
    pub entropy_top_frac: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            clip_eps: 0.2,
            kl_beta: 0.0,
            lr: 5e-6,
            queries_per_update: 64,
            update_steps: 1,
            temperature: 1.0,
            gen_budget: 32,
            entropy_top_frac: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size {} must be at least 2", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps {} must be in (0, 1)", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0) {
            return bad(format!("kl_beta {} must be nonnegative", self.kl_beta));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.queries_per_update == 0 || self.update_steps == 0 || self.gen_budget == 0 {
            return bad("queries_per_update, update_steps and gen_budget must be positive".into());
        }
        if !(self.temperature >= 0.0) {
            return bad(format!("temperature {} must be nonnegative", self.temperature));
        }
        if !(self.entropy_top_frac > 0.0 && self.entropy_top_frac <= 1.0) {
            return bad(format!("entropy_top_frac {} must be in (0, 1]", self.entropy_top_frac));
        }
        Ok(())
    }
}

/// Group mean, population standard deviation and standardized rewards.
/// All advantages are zero when the standard deviation is below [`STD_FLOOR`].
pub fn compute_advantages(rewards: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let adv = if std < STD_FLOOR {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    (mean, std, adv)
}

/// `min(rho * adv, clip(rho, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_term(rho: f64, adv: f64, eps: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// k3 estimate `exp(d) - d - 1` with `d = l_ref - l_new`.
pub fn kl_token(l_new: f64, l_ref: f64) -> f64 {
    let d = l_ref - l_new;
    d.exp() - d - 1.0
}

/// `G` scored completions for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: u64,
    pub prompt: Vec<TokenId>,
    pub completions: Vec<Completion>,
    pub old_logprobs: Vec<Vec<f64>>,
    pub old_entropies: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(query_id: u64, prompt: Vec<TokenId>, rollouts: Vec<Rollout>, rewards: Vec<f64>) -> Result<Self> {
        if rollouts.len() != rewards.len() {
            return Err(Error::InvalidArgument(format!(
                "{} rollouts but {} rewards",
                rollouts.len(),
                rewards.len()
            )));
        }
        let (mean, std, advantages) = compute_advantages(&rewards);
        let mut completions = Vec::with_capacity(rollouts.len());
        let mut old_logprobs = Vec::with_capacity(rollouts.len());
        let mut old_entropies = Vec::with_capacity(rollouts.len());
        for r in rollouts {
            completions.push(r.completion);
            old_logprobs.push(r.logprob.per_token);
            old_entropies.push(r.entropies);
        }
        Ok(Self {
            query_id,
            prompt,
            completions,
            old_logprobs,
            old_entropies,
            rewards,
            mean,
            std,
            advantages,
        })
    }

    /// Token positions of completion `i` that enter the objective.
    pub fn selected_positions(&self, i: usize, entropy_top_frac: f64) -> Vec<usize> {
        let len = self.completions[i].effective_len();
        if entropy_top_frac >= 1.0 {
            return (0..len).collect();
        }
        let keep = ((entropy_top_frac * len as f64).ceil() as usize).clamp(1, len);
        let ent = &self.old_entropies[i];
        let mut idx: Vec<usize> = (0..len).collect();
        idx.sort_by(|&a, &b| ent[b].total_cmp(&ent[a]).then(a.cmp(&b)));
        idx.truncate(keep);
        idx.sort_unstable();
        idx
    }
}

/// Objective value, its gradient, and the fraction of evaluated tokens whose clip was active.
#[derive(Debug, Clone)]
pub struct GrpoLoss {
    pub objective: f64,
    pub grad: Vec<f64>,
    pub clip_frac: f64,
    pub tokens: usize,
}

struct TokenRef {
    group: usize,
    completion: usize,
    position: usize,
    weight: f64,
}

/// Evaluate the objective and its gradient (for ascent) at `params`.
///
/// Completions with zero advantage are skipped when `kl_beta == 0`, since they
/// contribute nothing to either quantity.
pub fn grpo_loss<F: Scalar>(params: &Params<F>, groups: &[RolloutGroup], config: &GrpoConfig, mask_id: TokenId) -> Result<GrpoLoss> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no rollout groups".into()));
    }
    let mut tokens = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        let n = group.completions.len();
        if group.old_logprobs.len() != n || group.old_entropies.len() != n || group.advantages.len() != n {
            return Err(Error::InvalidArgument(format!("group {} is missing per-completion data", group.query_id)));
        }
        for i in 0..n {
            let len = group.completions[i].effective_len();
            if group.old_logprobs[i].len() < len || group.old_entropies[i].len() < len {
                return Err(Error::InvalidArgument(format!(
                    "group {} completion {i}: old log-probs missing",
                    group.query_id
                )));
            }
            if group.advantages[i] == 0.0 && config.kl_beta == 0.0 {
                continue;
            }
            let weight = 1.0 / (groups.len() as f64 * n as f64 * len as f64);
            for position in group.selected_positions(i, config.entropy_top_frac) {
                tokens.push(TokenRef {
                    group: g,
                    completion: i,
                    position,
                    weight,
                });
            }
        }
    }

    let parts: Vec<(f64, usize, Option<Params<F>>)> = tokens
        .par_chunks(CHUNK)
        .map(|chunk| loss_chunk(params, groups, chunk, config, mask_id))
        .collect::<Result<_>>()?;
    let mut objective = 0.0;
    let mut clipped = 0;
    let mut grad = vec![0.0f64; params.len()];
    for (obj, clip, g) in parts {
        objective += obj;
        clipped += clip;
        if let Some(g) = g {
            for (acc, &x) in grad.iter_mut().zip(g.as_slice()) {
                *acc += Into::<f64>::into(x);
            }
        }
    }
    if !objective.is_finite() {
        return Err(Error::Numeric(format!("objective is {objective}")));
    }
    Ok(GrpoLoss {
        objective,
        grad,
        clip_frac: if tokens.is_empty() { 0.0 } else { clipped as f64 / tokens.len() as f64 },
        tokens: tokens.len(),
    })
}

fn loss_chunk<F: Scalar>(
    params: &Params<F>,
    groups: &[RolloutGroup],
    chunk: &[TokenRef],
    config: &GrpoConfig,
    mask_id: TokenId,
) -> Result<(f64, usize, Option<Params<F>>)> {
    let requests: Vec<ScoreRequest<'_>> = chunk
        .iter()
        .map(|t| ScoreRequest {
            prompt: &groups[t.group].prompt,
            completion: groups[t.group].completions[t.completion].tokens(),
            position: t.position,
        })
        .collect();
    let scores = score_tokens(params, &requests, mask_id)?;
    let (eps, beta) = (config.clip_eps, config.kl_beta);
    let mut objective = 0.0;
    let mut clipped = 0;
    let mut dl = Vec::with_capacity(chunk.len());
    for (t, &l_new) in chunk.iter().zip(&scores.logprobs) {
        let group = &groups[t.group];
        let l_old = group.old_logprobs[t.completion][t.position];
        let adv = group.advantages[t.completion];
        let rho = (l_new - l_old).exp();
        let term = clipped_term(rho, adv, eps);
        let mut d = if rho * adv <= rho.clamp(1.0 - eps, 1.0 + eps) * adv {
            adv * rho
        } else {
            clipped += 1;
            0.0
        };
        let mut value = term;
        if beta > 0.0 {
            value -= beta * kl_token(l_new, l_old);
            d += beta * ((l_old - l_new).exp() - 1.0);
        }
        objective += t.weight * value;
        dl.push(t.weight * d);
    }
    let grad = if dl.iter().any(|&x| x != 0.0) {
        Some(backward(params, &scores.cache, &scores.dlogits(&dl)))
    } else {
        None
    };
    Ok((objective, clipped, grad))
}

/// One row of the RL metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub clip_frac: f64,
    pub mean_entropy: f64,
    pub rollout_secs: f64,
    pub update_secs: f64,
}

pub const METRICS_CSV_HEADER: &str = "update,mean_reward,objective,clip_frac,mean_entropy,rollout_secs,update_secs";

impl UpdateMetrics {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.3}",
            self.update,
            self.mean_reward,
            self.objective,
            self.clip_frac,
            self.mean_entropy,
            self.rollout_secs,
            self.update_secs
        )
    }
}

/// One line of the rollout log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLogLine {
    pub update: usize,
    pub query_id: u64,
    pub rollout_idx: usize,
    pub tokens: Vec<TokenId>,
    pub reward: f64,
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
}

impl RolloutGroup {
    pub fn log_lines(&self, update: usize) -> Vec<RolloutLogLine> {
        (0..self.completions.len())
            .map(|i| RolloutLogLine {
                update,
                query_id: self.query_id,
                rollout_idx: i,
                tokens: self.completions[i].tokens().to_vec(),
                reward: self.rewards[i],
                logprobs: self.old_logprobs[i].clone(),
                entropies: self.old_entropies[i].clone(),
            })
            .collect()
    }
}

/// Draw the groups for update `update`. Queries come from stream
/// `("rl-batch", 0, 0, update)`; rollout `i` of instance `id` uses
/// `("rollout", id, i, update)`.
pub fn collect_groups(
    params: &DenoiserParams,
    instances: &[Instance],
    config: &GrpoConfig,
    specials: Specials,
    seed: u64,
    update: usize,
) -> Result<Vec<RolloutGroup>> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("no training instances".into()));
    }
    let mut pick = derive_stream(seed, StreamKey::new("rl-batch", 0, 0, update as u64));
    let queries: Vec<&Instance> = (0..config.queries_per_update).map(|_| &instances[pick.below(instances.len())]).collect();
    queries
        .par_iter()
        .map(|inst| {
            let mut rngs: Vec<_> = (0..config.group_size)
                .map(|i| derive_stream(seed, StreamKey::new("rollout", inst.id, i as u64, update as u64)))
                .collect();
            let rollouts = ar_rollout_batch(params, &inst.prompt, config.gen_budget, config.temperature, specials, &mut rngs)?;
            let rewards = rollouts.iter().map(|r| verify(inst, r.completion.tokens()).total()).collect();
            RolloutGroup::new(inst.id, inst.prompt.clone(), rollouts, rewards)
        })
        .collect()
}

/// Everything the caller may want to persist after an update.
pub struct RlProgress<'a> {
    pub metrics: &'a UpdateMetrics,
    pub groups: &'a [RolloutGroup],
    pub params: &'a DenoiserParams,
    pub optimizer: &'a AdamW,
}

/// Run updates `updates` in place on `params` and `optimizer`.
///
/// All randomness is keyed by `(seed, update)`, so resuming from a saved
/// `(params, optimizer)` at update `u` reproduces an uninterrupted run.
pub fn train_rl(
    params: &mut DenoiserParams,
    optimizer: &mut AdamW,
    instances: &[Instance],
    config: &GrpoConfig,
    specials: Specials,
    seed: u64,
    updates: std::ops::Range<usize>,
    mut on_update: impl FnMut(RlProgress<'_>) -> Result<()>,
) -> Result<Vec<UpdateMetrics>> {
    config.validate()?;
    let mut log = Vec::with_capacity(updates.len());
    for update in updates {
        let t0 = Instant::now();
        let old = params.clone();
        let groups = collect_groups(&old, instances, config, specials, seed, update)?;
        let rollout_secs = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let mut objective = 0.0;
        let mut clip_frac = 0.0;
        for step in 0..config.update_steps {
            let loss = grpo_loss(params, &groups, config, specials.mask_id)?;
            if step == 0 {
                objective = loss.objective;
            }
            clip_frac = loss.clip_frac;
            let descent: Vec<f64> = loss.grad.iter().map(|g| -g).collect();
            optimizer.step(params, &descent)?;
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged at update {update}")));
        }
        let update_secs = t1.elapsed().as_secs_f64();

        let n_completions: usize = groups.iter().map(|g| g.rewards.len()).sum();
        let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n_completions as f64;
        let (mut ent_sum, mut ent_n) = (0.0, 0usize);
        for g in &groups {
            for (c, e) in g.completions.iter().zip(&g.old_entropies) {
                ent_sum += e[..c.effective_len()].iter().sum::<f64>();
                ent_n += c.effective_len();
            }
        }
        let metrics = UpdateMetrics {
            update,
            mean_reward,
            objective,
            clip_frac,
            mean_entropy: ent_sum / ent_n as f64,
            rollout_secs,
            update_secs,
        };
        on_update(RlProgress {
            metrics: &metrics,
            groups: &groups,
            params,
            optimizer,
        })?;
        log.push(metrics);
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
