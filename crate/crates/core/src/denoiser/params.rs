use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Shape hyper-parameters of the bidirectional denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl DenoiserConfig {
    /// Desk-scale defaults for a given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            d_ff: 128,
            max_len: 96,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::ModelConfig(msg.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be finite and non-negative");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Name, shape and flat offset of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

/// Tensor declaration order. Checkpoints serialise tensors in this order.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head: usize,
}

impl Layout {
    fn new(c: &DenoiserConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec {
                name,
                shape,
                offset: total,
            };
            total += spec.len();
            let off = spec.offset;
            tensors.push(spec);
            off
        };
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![c.max_len, d]);
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            blocks.push(BlockOffsets {
                ln1_g: push(format!("block{l}.ln1.gain"), vec![d]),
                ln1_b: push(format!("block{l}.ln1.bias"), vec![d]),
                w_qkv: push(format!("block{l}.attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: push(format!("block{l}.attn.b_qkv"), vec![3 * d]),
                w_o: push(format!("block{l}.attn.w_o"), vec![d, d]),
                b_o: push(format!("block{l}.attn.b_o"), vec![d]),
                ln2_g: push(format!("block{l}.ln2.gain"), vec![d]),
                ln2_b: push(format!("block{l}.ln2.bias"), vec![d]),
                w_1: push(format!("block{l}.ff.w_1"), vec![d, f]),
                b_1: push(format!("block{l}.ff.b_1"), vec![f]),
                w_2: push(format!("block{l}.ff.w_2"), vec![f, d]),
                b_2: push(format!("block{l}.ff.b_2"), vec![d]),
            });
        }
        let lnf_g = push("final_ln.gain".into(), vec![d]);
        let lnf_b = push("final_ln.bias".into(), vec![d]);
        let head = push("head".into(), vec![d, v]);
        Self {
            tensors,
            total,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head,
        }
    }
}

/// All denoiser weights stored in one flat buffer laid out by [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    config: DenoiserConfig,
    layout_total: usize,
    data: Vec<F>,
}

pub type DenoiserParams = Params<f32>;

impl<F: Scalar> Params<F> {
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let total = config.layout().total;
        Ok(Self {
            config,
            layout_total: total,
            data: vec![F::ZERO; total],
        })
    }

    /// Normal(0, init_std) matrices and embeddings; unit gains; zero biases.
    pub fn init(config: DenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let layout = config.layout();
        let normal = Normal::new(0.0, config.init_std.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::ModelConfig(e.to_string()))?;
        for spec in &layout.tensors {
            let is_gain = spec.name.ends_with(".gain");
            let is_bias = spec.shape.len() == 1 && !is_gain;
            for x in &mut p.data[spec.range()] {
                *x = if is_gain {
                    F::ONE
                } else if is_bias || config.init_std == 0.0 {
                    F::ZERO
                } else {
                    F::from_f64(normal.sample(rng))
                };
            }
        }
        Ok(p)
    }

    pub fn from_vec(config: DenoiserConfig, data: Vec<F>) -> Result<Self> {
        config.validate()?;
        let total = config.layout().total;
        if data.len() != total {
            return Err(Error::ModelConfig(format!(
                "expected {total} parameters, got {}",
                data.len()
            )));
        }
        Ok(Self {
            config,
            layout_total: total,
            data,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.layout_total
    }

    pub fn is_empty(&self) -> bool {
        self.layout_total == 0
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Lossless-as-possible cast to another element type.
    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            config: self.config,
            layout_total: self.layout_total,
            data: self.data.iter().map(|&x| G::from_f64(x.into())).collect(),
        }
    }

    pub(crate) fn slice(&self, offset: usize, len: usize) -> &[F] {
        &self.data[offset..offset + len]
    }

    pub(crate) fn slice_mut(&mut self, offset: usize, len: usize) -> &mut [F] {
        &mut self.data[offset..offset + len]
    }
}
