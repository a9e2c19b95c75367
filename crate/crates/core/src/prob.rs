//! Probability helpers: softmax, entropy and temperature sampling.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vocab::TokenId;

const SUM_TOLERANCE: f64 = 1e-6;

/// Softmax of a logit row, computed in double precision.
pub fn softmax<F: Copy + Into<f64>>(logits: &[F]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|&x| x.into())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x.into() - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Log-softmax of a logit row.
pub fn log_softmax<F: Copy + Into<f64>>(logits: &[F]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|&x| x.into())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|&x| (x.into() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&x| x.into() - lse).collect()
}

/// Shannon entropy in nats, with `0 * ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Difference between the largest and second-largest probabilities.
pub fn top2_margin(probs: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    if second.is_finite() {
        first - second
    } else {
        first
    }
}

pub fn validate(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Probability("empty vector".into()));
    }
    if let Some(p) = probs.iter().find(|p| p.is_nan() || **p < 0.0) {
        return Err(Error::Probability(format!("entry {p} is NaN or negative")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Probability(format!("sums to {sum}")));
    }
    Ok(())
}

/// Draw a token id from `probs` sharpened by `temperature`.
///
/// Temperature 0 is argmax with lowest-index tie-break; `T > 0` samples from
/// `Softmax(log p / T)`.
pub fn categorical_sample(probs: &[f64], temperature: f64, rng: &mut RngStream) -> Result<TokenId> {
    validate(probs)?;
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::Probability(format!("temperature {temperature}")));
    }
    Ok(sample_unchecked(probs, temperature, rng) as TokenId)
}

pub(crate) fn sample_unchecked(probs: &[f64], temperature: f64, rng: &mut RngStream) -> usize {
    if temperature == 0.0 {
        return argmax(probs);
    }
    let weights: Vec<f64> = if temperature == 1.0 {
        probs.to_vec()
    } else {
        let max_log = probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p.ln())
            .fold(f64::NEG_INFINITY, f64::max);
        probs
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    ((p.ln() - max_log) / temperature).exp()
                } else {
                    0.0
                }
            })
            .collect()
    };
    let total: f64 = weights.iter().sum();
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_nonzero = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last_nonzero
}

/// Copy of `probs` with the mask token's mass removed and the rest renormalised.
pub fn without_token(probs: &[f64], token: TokenId) -> Vec<f64> {
    let mut out = probs.to_vec();
    out[token as usize] = 0.0;
    let z: f64 = out.iter().sum();
    if z > 0.0 {
        for p in &mut out {
            *p /= z;
        }
    } else {
        let uniform = 1.0 / (out.len() - 1) as f64;
        for (i, p) in out.iter_mut().enumerate() {
            *p = if i == token as usize { 0.0 } else { uniform };
        }
    }
    out
}
