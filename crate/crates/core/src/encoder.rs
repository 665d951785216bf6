//! Convolutional front end followed by a transformer encoder stack.
//!
//! The front end subsamples time and frequency by four and stands in for the
//! positional encoding, so the encoder adds none.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::params::uniform_fan_in;
use crate::nn::{
    AttentionConfig, FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamId,
    ParamStore, Real, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub vocab: usize,
    pub mel_bins: usize,
    pub conv_channels: [usize; 2],
    /// Norm after the residual add instead of before the sublayer.
    pub post_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 12,
            dec_layers: 6,
            heads: 4,
            d_model: 256,
            ffn: 2048,
            dropout: 0.1,
            vocab: 5000,
            mel_bins: 80,
            conv_channels: [64, 128],
            post_norm: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the synthetic end-to-end runs.
    pub fn tiny(vocab: usize, mel_bins: usize) -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 3,
            heads: 4,
            d_model: 128,
            ffn: 512,
            dropout: 0.1,
            vocab,
            mel_bins,
            conv_channels: [16, 32],
            post_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("mel_bins", self.mel_bins),
            ("conv_channels[0]", self.conv_channels[0]),
            ("conv_channels[1]", self.conv_channels[1]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d_model {} not divisible by model.heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.d_model, self.heads).expect("validated")
    }
}

/// Output length of the front end: `ceil(ceil(t / 2) / 2)`.
pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2)
}

#[derive(Clone, Debug)]
pub struct ConvFrontend {
    conv: [(ParamId, ParamId); 2],
    proj: Linear,
}

impl ConvFrontend {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let [c1, c2] = cfg.conv_channels;
        let mut conv = |i: usize, cin: usize, cout: usize| -> Result<(ParamId, ParamId)> {
            let fan_in = cin * 9;
            Ok((
                store.add(
                    format!("{name}.conv.{i}.weight"),
                    uniform_fan_in(rng, &[cout, cin, 3, 3], fan_in),
                )?,
                store.add(format!("{name}.conv.{i}.bias"), uniform_fan_in(rng, &[cout], fan_in))?,
            ))
        };
        let conv = [conv(0, 1, c1)?, conv(1, c1, c2)?];
        let freq = subsampled_len(cfg.mel_bins);
        let proj = Linear::new(store, &format!("{name}.proj"), c2 * freq, cfg.d_model, true, rng)?;
        Ok(ConvFrontend { conv, proj })
    }

    /// `[T, F]` features to a `[T', d]` sequence.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("conv_frontend", format!("features {s:?}")));
        }
        // Features are constants; the front end is the first differentiable stage.
        let img = g.value(features).clone().reshape(&[1, s[0], s[1]])?;
        let mut x = g.input(img);
        for (w, b) in self.conv {
            let (w, b) = (g.param(w), g.param(b));
            x = g.conv2d_3x3_s2(x, w, b)?;
            x = g.relu(x);
        }
        let seq = g.maps_to_sequence(x)?;
        self.proj.forward(g, seq)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg.attention(), rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.ffn, rng)?,
        })
    }

    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, cfg: &ModelConfig) -> Result<Var> {
        let x = residual(g, x, &self.norm1, cfg, |g, h| {
            Ok(self.self_attn.forward(g, h, h, h, None)?.0)
        })?;
        residual(g, x, &self.norm2, cfg, |g, h| self.ffn.forward(g, h, cfg.dropout))
    }
}

/// One residual sublayer: `x + drop(f(norm(x)))`, or `norm(x + drop(f(x)))` post-norm.
pub(crate) fn residual<F: Real>(
    g: &mut Graph<'_, F>,
    x: Var,
    norm: &LayerNorm,
    cfg: &ModelConfig,
    f: impl FnOnce(&mut Graph<'_, F>, Var) -> Result<Var>,
) -> Result<Var> {
    if cfg.post_norm {
        let y = f(g, x)?;
        let y = g.dropout(y, cfg.dropout)?;
        let s = g.add(x, y)?;
        norm.forward(g, s)
    } else {
        let h = norm.forward(g, x)?;
        let y = f(g, h)?;
        let y = g.dropout(y, cfg.dropout)?;
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub frontend: ConvFrontend,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

/// Graph nodes of one encoded utterance.
#[derive(Clone, Debug)]
pub struct EncoderForward {
    /// `[T', d]` after the final norm.
    pub h_enc: Var,
    /// Output of each block; the last entry is `h_enc`.
    pub layer_states: Vec<Var>,
}

impl Encoder {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let frontend = ConvFrontend::new(store, "encoder.frontend", cfg, rng)?;
        let layers = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(store, &format!("encoder.layers.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", cfg.d_model)?;
        Ok(Encoder {
            frontend,
            layers,
            norm,
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        features: &Tensor<F>,
        cfg: &ModelConfig,
    ) -> Result<EncoderForward> {
        if features.shape().len() != 2 || features.cols() != cfg.mel_bins {
            return Err(Error::shape(
                "encode",
                format!("features {:?}, expected [T, {}]", features.shape(), cfg.mel_bins),
            ));
        }
        let input = g.input(features.clone());
        let mut x = self.frontend.forward(g, input)?;
        x = g.dropout(x, cfg.dropout)?;
        let mut layer_states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(g, x, cfg)?;
            layer_states.push(x);
        }
        let h_enc = self.norm.forward(g, x)?;
        if let Some(last) = layer_states.last_mut() {
            *last = h_enc;
        }
        Ok(EncoderForward {
            h_enc,
            layer_states,
        })
    }
}

/// Padded batch of encoder outputs.
#[derive(Clone, Debug)]
pub struct EncoderOutput<F> {
    /// `[B, T'_max, d]`; rows past an utterance's length are zero.
    pub h_enc: Tensor<F>,
    pub lengths: Vec<usize>,
}

impl<F: Real> EncoderOutput<F> {
    /// The unpadded `[T'_b, d]` slice of item `b`.
    pub fn item(&self, b: usize) -> Tensor<F> {
        let s = self.h_enc.shape();
        let (t, d) = (s[1], s[2]);
        let data = self.h_enc.data()[b * t * d..(b * t + self.lengths[b]) * d].to_vec();
        Tensor::new(&[self.lengths[b], d], data).expect("consistent")
    }

    /// `true` for padded positions of item `b`.
    pub fn padding_mask(&self, b: usize) -> Vec<bool> {
        (0..self.h_enc.shape()[1]).map(|i| i >= self.lengths[b]).collect()
    }
}

/// Encodes a padded `[B, T, F]` batch in eval mode. Each item is run at its
/// own length, so padding never influences valid positions.
pub fn encode_batch<F: Real>(
    store: &ParamStore<F>,
    encoder: &Encoder,
    cfg: &ModelConfig,
    features: &Tensor<F>,
    lengths: &[usize],
) -> Result<EncoderOutput<F>> {
    let s = features.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::shape("encode", format!("batch {s:?}")));
    }
    let (b, t, f) = (s[0], s[1], s[2]);
    if lengths.len() != b {
        return Err(Error::shape("encode", format!("{} lengths for batch of {b}", lengths.len())));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t) {
        return Err(Error::InvalidArgument(format!(
            "length {bad} outside 1..={t} of the padded batch"
        )));
    }
    let t_out = subsampled_len(t);
    let d = cfg.d_model;
    let mut out = vec![F::zero(); b * t_out * d];
    let mut out_lengths = Vec::with_capacity(b);
    for (i, &len) in lengths.iter().enumerate() {
        let item = Tensor::new(&[len, f], features.data()[i * t * f..(i * t + len) * f].to_vec())?;
        let mut g = Graph::new(store);
        let enc = encoder.forward(&mut g, &item, cfg)?;
        let h = g.value(enc.h_enc);
        out[i * t_out * d..i * t_out * d + h.len()].copy_from_slice(h.data());
        out_lengths.push(h.rows());
    }
    Ok(EncoderOutput {
        h_enc: Tensor::new(&[b, t_out, d], out)?,
        lengths: out_lengths,
    })
}

/// Pads feature sequences into a `[B, T_max, F]` batch.
pub fn pad_features(items: &[&FeatureSequence]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let f = first.frames.cols();
    let t = items.iter().map(|s| s.frames.rows()).max().unwrap_or(0);
    let mut data = vec![0.0f32; items.len() * t * f];
    let mut lengths = Vec::with_capacity(items.len());
    for (i, s) in items.iter().enumerate() {
        if s.frames.cols() != f {
            return Err(Error::shape("pad_features", "mixed mel bin counts"));
        }
        data[i * t * f..i * t * f + s.frames.len()].copy_from_slice(s.frames.data());
        lengths.push(s.frames.rows());
    }
    Ok((Tensor::new(&[items.len(), t, f], data)?, lengths))
}
