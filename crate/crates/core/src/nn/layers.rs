use rand::Rng;

use super::graph::{Graph, Var};
use super::ops::AttentionOutput;
use super::params::{normal, uniform_fan_in, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, &[out_dim, in_dim], in_dim),
        )?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                uniform_fan_in(rng, &[out_dim], in_dim),
            )?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], F::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Position-wise two-layer network with ReLU between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            hidden: Linear::new(store, &format!("{name}.w1"), dim, hidden, true, rng)?,
            output: Linear::new(store, &format!("{name}.w2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout)?;
        self.output.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::InvalidArgument(format!(
                "model dim {model_dim} not divisible by {num_heads} heads"
            )));
        }
        Ok(AttentionConfig {
            model_dim,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub cfg: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            cfg,
        })
    }

    /// Returns the projected output and the `[heads, Lq, Lk]` weights.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        key_padding: Option<&[bool]>,
    ) -> Result<(Var, Tensor<F>)> {
        let q = self.query.forward(g, q_in)?;
        let k = self.key.forward(g, k_in)?;
        let v = self.value.forward(g, v_in)?;
        let AttentionOutput { context, weights } =
            g.attention(q, k, v, self.cfg.num_heads, key_padding)?;
        Ok((self.out.forward(g, context)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    /// Rows drawn from `normal(0, dim^-1/2)`.
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (dim as f64).powf(-0.5);
        Ok(Embedding {
            table: store.add(format!("{name}.table"), normal(rng, &[vocab, dim], std))?,
            vocab,
            dim,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding(ids, t)
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<F: Real>(len: usize, dim: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, dim], data).expect("shape product")
}
