//! Forward pass and exact reverse-mode gradient of the denoiser.
//!
//! Architecture: token + learned position embeddings, `n_layers` pre-norm
//! blocks with full (non-causal) multi-head attention and a GELU MLP, a final
//! layer norm, and an untied bias-free output head. Several sequences of
//! different lengths can be stacked into one batch; attention never crosses
//! sequence boundaries.

use super::params::{BlockOffsets, Params};
use super::scalar::{gemm, MatRef, Scalar};
use crate::error::{Error, Result};
use crate::sequence::MaskedSequence;
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
    out: Vec<F>,
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    ln2: LnCache<F>,
    ff_pre: Vec<F>,
    ff_act: Vec<F>,
}

/// Activations retained by [`forward`] for [`backward`].
pub struct ForwardCache<F> {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    seq_offsets: Vec<usize>,
    seq_lens: Vec<usize>,
    prob_offsets: Vec<usize>,
    blocks: Vec<BlockCache<F>>,
    lnf: LnCache<F>,
    logits: Vec<F>,
    vocab: usize,
}

impl<F: Scalar> ForwardCache<F> {
    /// Total number of stacked rows.
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.seq_lens.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Row index of position `pos` of sequence `seq` in the stacked batch.
    pub fn row_index(&self, seq: usize, pos: usize) -> usize {
        assert!(pos < self.seq_lens[seq]);
        self.seq_offsets[seq] + pos
    }

    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    pub fn logit_row(&self, seq: usize, pos: usize) -> &[F] {
        let r = self.row_index(seq, pos);
        &self.logits[r * self.vocab..(r + 1) * self.vocab]
    }

    /// Logits of one sequence as an `L x V` grid.
    pub fn grid(&self, seq: usize) -> LogitsGrid<F> {
        let start = self.seq_offsets[seq] * self.vocab;
        let len = self.seq_lens[seq];
        LogitsGrid {
            rows: len,
            vocab: self.vocab,
            data: self.logits[start..start + len * self.vocab].to_vec(),
        }
    }
}

/// Unnormalised scores `[L x V]`; row `k` holds the prediction for position `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid<F> {
    rows: usize,
    vocab: usize,
    data: Vec<F>,
}

impl<F: Scalar> LogitsGrid<F> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, k: usize) -> &[F] {
        &self.data[k * self.vocab..(k + 1) * self.vocab]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }
}

/// Logits for a single (partially masked) sequence.
pub fn logits<F: Scalar>(params: &Params<F>, input: &MaskedSequence) -> Result<LogitsGrid<F>> {
    Ok(forward(params, &[input.tokens()])?.grid(0))
}

/// Batched forward pass over stacked sequences.
pub fn forward<F: Scalar>(params: &Params<F>, seqs: &[&[TokenId]]) -> Result<ForwardCache<F>> {
    let cfg = *params.config();
    let layout = cfg.layout();
    let (d, v, h) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
    let dh = cfg.head_dim();

    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut seq_offsets = Vec::with_capacity(seqs.len());
    let mut seq_lens = Vec::with_capacity(seqs.len());
    let mut prob_offsets = Vec::with_capacity(seqs.len());
    let mut prob_total = 0;
    for s in seqs {
        if s.len() > cfg.max_len {
            return Err(Error::LengthOverflow {
                len: s.len(),
                max_len: cfg.max_len,
            });
        }
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Sequence(format!("token id {bad} outside vocabulary of {v}")));
        }
        seq_offsets.push(tokens.len());
        seq_lens.push(s.len());
        prob_offsets.push(prob_total);
        prob_total += h * s.len() * s.len();
        tokens.extend_from_slice(s);
        positions.extend(0..s.len());
    }
    let n = tokens.len();

    let tok_emb = params.slice(layout.tok_emb, v * d);
    let pos_emb = params.slice(layout.pos_emb, cfg.max_len * d);
    let mut x = vec![F::ZERO; n * d];
    for r in 0..n {
        let t = tokens[r] as usize;
        let p = positions[r];
        let row = &mut x[r * d..(r + 1) * d];
        for j in 0..d {
            row[j] = tok_emb[t * d + j] + pos_emb[p * d + j];
        }
    }

    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for off in &layout.blocks {
        let ln1 = layer_norm(&x, d, params.slice(off.ln1_g, d), params.slice(off.ln1_b, d));

        let mut qkv = broadcast_bias(params.slice(off.b_qkv, 3 * d), n);
        gemm(
            F::ONE,
            MatRef::rm(&ln1.out, n, d, d),
            MatRef::rm(params.slice(off.w_qkv, d * 3 * d), d, 3 * d, 3 * d),
            F::ONE,
            &mut qkv,
            3 * d,
        );

        let mut probs = vec![F::ZERO; prob_total];
        let mut attn = vec![F::ZERO; n * d];
        for (b, &len) in seq_lens.iter().enumerate() {
            let base = seq_offsets[b];
            for head in 0..h {
                let p = &mut probs[prob_offsets[b] + head * len * len..][..len * len];
                let q = MatRef::rm(&qkv[base * 3 * d + head * dh..], len, dh, 3 * d);
                let k = MatRef::rm(&qkv[base * 3 * d + d + head * dh..], len, dh, 3 * d);
                let val = MatRef::rm(&qkv[base * 3 * d + 2 * d + head * dh..], len, dh, 3 * d);
                gemm(scale, q, k.t(), F::ZERO, p, len);
                softmax_rows(p, len);
                gemm(
                    F::ONE,
                    MatRef::rm(p, len, len, len),
                    val,
                    F::ZERO,
                    &mut attn[base * d + head * dh..],
                    d,
                );
            }
        }

        add_bias_rows(&mut x, params.slice(off.b_o, d));
        gemm(
            F::ONE,
            MatRef::rm(&attn, n, d, d),
            MatRef::rm(params.slice(off.w_o, d * d), d, d, d),
            F::ONE,
            &mut x,
            d,
        );

        let ln2 = layer_norm(&x, d, params.slice(off.ln2_g, d), params.slice(off.ln2_b, d));
        let f = cfg.d_ff;
        let mut ff_pre = broadcast_bias(params.slice(off.b_1, f), n);
        gemm(
            F::ONE,
            MatRef::rm(&ln2.out, n, d, d),
            MatRef::rm(params.slice(off.w_1, d * f), d, f, f),
            F::ONE,
            &mut ff_pre,
            f,
        );
        let ff_act: Vec<F> = ff_pre.iter().map(|&z| gelu(z)).collect();
        add_bias_rows(&mut x, params.slice(off.b_2, d));
        gemm(
            F::ONE,
            MatRef::rm(&ff_act, n, f, f),
            MatRef::rm(params.slice(off.w_2, f * d), f, d, d),
            F::ONE,
            &mut x,
            d,
        );

        blocks.push(BlockCache {
            ln1,
            qkv,
            probs,
            attn,
            ln2,
            ff_pre,
            ff_act,
        });
    }

    let lnf = layer_norm(&x, d, params.slice(layout.lnf_g, d), params.slice(layout.lnf_b, d));
    let mut logits = vec![F::ZERO; n * v];
    gemm(
        F::ONE,
        MatRef::rm(&lnf.out, n, d, d),
        MatRef::rm(params.slice(layout.head, d * v), d, v, v),
        F::ZERO,
        &mut logits,
        v,
    );

    Ok(ForwardCache {
        tokens,
        positions,
        seq_offsets,
        seq_lens,
        prob_offsets,
        blocks,
        lnf,
        logits,
        vocab: v,
    })
}

/// Exact gradient of a scalar loss given `d loss / d logits` for every stacked row.
///
/// `dlogits` has the same `[rows x V]` shape as [`ForwardCache::logits`]; rows
/// that do not enter the loss are zero.
pub fn backward<F: Scalar>(params: &Params<F>, cache: &ForwardCache<F>, dlogits: &[F]) -> Params<F> {
    let cfg = *params.config();
    let layout = cfg.layout();
    let (d, v, h, f) = (cfg.d_model, cfg.vocab_size, cfg.n_heads, cfg.d_ff);
    let dh = cfg.head_dim();
    let n = cache.rows();
    assert_eq!(dlogits.len(), n * v, "dlogits shape");

    let mut grad = Params::zeros(cfg).expect("config already validated");

    // Output head.
    gemm(
        F::ONE,
        MatRef::rm(&cache.lnf.out, n, d, d).t(),
        MatRef::rm(dlogits, n, v, v),
        F::ZERO,
        grad.slice_mut(layout.head, d * v),
        v,
    );
    let mut d_lnf = vec![F::ZERO; n * d];
    gemm(
        F::ONE,
        MatRef::rm(dlogits, n, v, v),
        MatRef::rm(params.slice(layout.head, d * v), d, v, v).t(),
        F::ZERO,
        &mut d_lnf,
        d,
    );
    let mut dx = vec![F::ZERO; n * d];
    layer_norm_backward(
        &cache.lnf,
        d,
        params.slice(layout.lnf_g, d),
        &d_lnf,
        &mut dx,
        &mut grad,
        layout.lnf_g,
        layout.lnf_b,
    );

    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    for (off, bc) in layout.blocks.iter().zip(&cache.blocks).rev() {
        let off: &BlockOffsets = off;

        // MLP branch: x_out = x_mid + gelu(ln2(x_mid) W1 + b1) W2 + b2
        gemm(
            F::ONE,
            MatRef::rm(&bc.ff_act, n, f, f).t(),
            MatRef::rm(&dx, n, d, d),
            F::ZERO,
            grad.slice_mut(off.w_2, f * d),
            d,
        );
        col_sum_into(&dx, d, grad.slice_mut(off.b_2, d));
        let mut d_ff = vec![F::ZERO; n * f];
        gemm(
            F::ONE,
            MatRef::rm(&dx, n, d, d),
            MatRef::rm(params.slice(off.w_2, f * d), f, d, d).t(),
            F::ZERO,
            &mut d_ff,
            f,
        );
        for (g, &z) in d_ff.iter_mut().zip(&bc.ff_pre) {
            *g *= gelu_grad(z);
        }
        gemm(
            F::ONE,
            MatRef::rm(&bc.ln2.out, n, d, d).t(),
            MatRef::rm(&d_ff, n, f, f),
            F::ZERO,
            grad.slice_mut(off.w_1, d * f),
            f,
        );
        col_sum_into(&d_ff, f, grad.slice_mut(off.b_1, f));
        let mut d_ln2 = vec![F::ZERO; n * d];
        gemm(
            F::ONE,
            MatRef::rm(&d_ff, n, f, f),
            MatRef::rm(params.slice(off.w_1, d * f), d, f, f).t(),
            F::ZERO,
            &mut d_ln2,
            d,
        );
        layer_norm_backward(
            &bc.ln2,
            d,
            params.slice(off.ln2_g, d),
            &d_ln2,
            &mut dx,
            &mut grad,
            off.ln2_g,
            off.ln2_b,
        );

        // Attention branch: x_mid = x_in + attn(ln1(x_in)) W_o + b_o
        gemm(
            F::ONE,
            MatRef::rm(&bc.attn, n, d, d).t(),
            MatRef::rm(&dx, n, d, d),
            F::ZERO,
            grad.slice_mut(off.w_o, d * d),
            d,
        );
        col_sum_into(&dx, d, grad.slice_mut(off.b_o, d));
        let mut d_attn = vec![F::ZERO; n * d];
        gemm(
            F::ONE,
            MatRef::rm(&dx, n, d, d),
            MatRef::rm(params.slice(off.w_o, d * d), d, d, d).t(),
            F::ZERO,
            &mut d_attn,
            d,
        );

        let mut d_qkv = vec![F::ZERO; n * 3 * d];
        for (b, &len) in cache.seq_lens.iter().enumerate() {
            let base = cache.seq_offsets[b];
            let mut dp = vec![F::ZERO; len * len];
            for head in 0..h {
                let p = &bc.probs[cache.prob_offsets[b] + head * len * len..][..len * len];
                let q_off = base * 3 * d + head * dh;
                let k_off = q_off + d;
                let v_off = q_off + 2 * d;
                let d_out = MatRef::rm(&d_attn[base * d + head * dh..], len, dh, d);
                let val = MatRef::rm(&bc.qkv[v_off..], len, dh, 3 * d);
                gemm(F::ONE, d_out, val.t(), F::ZERO, &mut dp, len);
                gemm(
                    F::ONE,
                    MatRef::rm(p, len, len, len).t(),
                    d_out,
                    F::ZERO,
                    &mut d_qkv[v_off..],
                    3 * d,
                );
                // softmax backward, in place on dp
                for i in 0..len {
                    let prow = &p[i * len..(i + 1) * len];
                    let drow = &mut dp[i * len..(i + 1) * len];
                    let mut dot = 0.0f64;
                    for j in 0..len {
                        dot += (drow[j] * prow[j]).into();
                    }
                    let dot = F::from_f64(dot);
                    for j in 0..len {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                }
                let q = MatRef::rm(&bc.qkv[q_off..], len, dh, 3 * d);
                let k = MatRef::rm(&bc.qkv[k_off..], len, dh, 3 * d);
                gemm(scale, MatRef::rm(&dp, len, len, len), k, F::ZERO, &mut d_qkv[q_off..], 3 * d);
                gemm(
                    scale,
                    MatRef::rm(&dp, len, len, len).t(),
                    q,
                    F::ZERO,
                    &mut d_qkv[k_off..],
                    3 * d,
                );
            }
        }
        gemm(
            F::ONE,
            MatRef::rm(&bc.ln1.out, n, d, d).t(),
            MatRef::rm(&d_qkv, n, 3 * d, 3 * d),
            F::ZERO,
            grad.slice_mut(off.w_qkv, d * 3 * d),
            3 * d,
        );
        col_sum_into(&d_qkv, 3 * d, grad.slice_mut(off.b_qkv, 3 * d));
        let mut d_ln1 = vec![F::ZERO; n * d];
        gemm(
            F::ONE,
            MatRef::rm(&d_qkv, n, 3 * d, 3 * d),
            MatRef::rm(params.slice(off.w_qkv, d * 3 * d), d, 3 * d, 3 * d).t(),
            F::ZERO,
            &mut d_ln1,
            d,
        );
        layer_norm_backward(
            &bc.ln1,
            d,
            params.slice(off.ln1_g, d),
            &d_ln1,
            &mut dx,
            &mut grad,
            off.ln1_g,
            off.ln1_b,
        );
    }

    // Embeddings.
    for r in 0..n {
        let t = cache.tokens[r] as usize;
        let p = cache.positions[r];
        let src = &dx[r * d..(r + 1) * d];
        {
            let g = grad.slice_mut(layout.tok_emb + t * d, d);
            for j in 0..d {
                g[j] += src[j];
            }
        }
        let g = grad.slice_mut(layout.pos_emb + p * d, d);
        for j in 0..d {
            g[j] += src[j];
        }
    }
    grad
}

fn broadcast_bias<F: Scalar>(bias: &[F], rows: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(bias.len() * rows);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn add_bias_rows<F: Scalar>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (a, &b) in row.iter_mut().zip(bias) {
            *a += b;
        }
    }
}

fn col_sum_into<F: Scalar>(x: &[F], cols: usize, out: &mut [F]) {
    let mut acc = vec![0.0f64; cols];
    for row in x.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.into();
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o += F::from_f64(a);
    }
}

fn softmax_rows<F: Scalar>(s: &mut [F], len: usize) {
    for row in s.chunks_exact_mut(len) {
        let mut max = row[0];
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        let mut z = 0.0f64;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += (*x).into();
        }
        let inv = F::from_f64(1.0 / z);
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

fn layer_norm<F: Scalar>(x: &[F], d: usize, gain: &[F], bias: &[F]) -> LnCache<F> {
    let n = x.len() / d;
    let mut xhat = vec![F::ZERO; n * d];
    let mut out = vec![F::ZERO; n * d];
    let mut rstd = vec![F::ZERO; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|&v| v.into()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v.into() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = F::from_f64(rs);
        for j in 0..d {
            let xh = F::from_f64((row[j].into() - mean) * rs);
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * gain[j] + bias[j];
        }
    }
    LnCache { xhat, rstd, out }
}

/// Accumulates the input gradient into `dx` and parameter gradients into `grad`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<F: Scalar>(
    cache: &LnCache<F>,
    d: usize,
    gain: &[F],
    dout: &[F],
    dx: &mut [F],
    grad: &mut Params<F>,
    g_off: usize,
    b_off: usize,
) {
    let n = cache.rstd.len();
    let mut dg = vec![0.0f64; d];
    let mut db = vec![0.0f64; d];
    let mut dxhat = vec![F::ZERO; d];
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dy = &dout[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0f64;
        let mut mean_dxhat_xhat = 0.0f64;
        for j in 0..d {
            dg[j] += (dy[j] * xh[j]).into();
            db[j] += dy[j].into();
            dxhat[j] = dy[j] * gain[j];
            mean_dxhat += dxhat[j].into();
            mean_dxhat_xhat += (dxhat[j] * xh[j]).into();
        }
        let m1 = F::from_f64(mean_dxhat / d as f64);
        let m2 = F::from_f64(mean_dxhat_xhat / d as f64);
        let rs = cache.rstd[r];
        let out = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] += rs * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    for (g, v) in grad.slice_mut(g_off, d).iter_mut().zip(dg) {
        *g += F::from_f64(v);
    }
    for (g, v) in grad.slice_mut(b_off, d).iter_mut().zip(db) {
        *g += F::from_f64(v);
    }
}

fn gelu<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let u = F::from_f64(GELU_C) * (x + F::from_f64(GELU_A) * x * x * x);
    half * x * (F::ONE + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let du = c * (F::ONE + F::from_f64(3.0) * a * x * x);
    half * (F::ONE + t) + half * x * (F::ONE - t * t) * du
}
