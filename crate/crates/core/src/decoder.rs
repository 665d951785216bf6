//! Bidirectional transformer decoder over masked transcripts, the masked-LM
//! objective, and mask-predict refinement.

use rand::seq::index::sample;
use rand::Rng;

use crate::ctc::{MaskedHypothesis, Vocabulary, MASK};
use crate::encoder::{residual, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{
    log_sum_exp, sinusoidal_positions, Embedding, FeedForward, Graph, LayerNorm, Linear,
    MultiHeadAttention, ParamStore, Real, Tensor, Var,
};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Embedding,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderForward<F> {
    /// `[L, |V|]`.
    pub logits: Var,
    /// Output of each block; the last entry is after the final norm.
    pub layer_states: Vec<Var>,
    /// Per layer `[heads, L, L]` self-attention weights.
    pub self_attention: Vec<Tensor<F>>,
}

impl Decoder {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let embed = Embedding::new(store, "decoder.embed", cfg.vocab, d, rng)?;
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for i in 0..cfg.dec_layers {
            let n = format!("decoder.layers.{i}");
            layers.push(DecoderLayer {
                norm1: LayerNorm::new(store, &format!("{n}.norm1"), d)?,
                self_attn: MultiHeadAttention::new(store, &format!("{n}.self_attn"), cfg.attention(), rng)?,
                norm2: LayerNorm::new(store, &format!("{n}.norm2"), d)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{n}.cross_attn"), cfg.attention(), rng)?,
                norm3: LayerNorm::new(store, &format!("{n}.norm3"), d)?,
                ffn: FeedForward::new(store, &format!("{n}.ffn"), d, cfg.ffn, rng)?,
            });
        }
        Ok(Decoder {
            embed,
            layers,
            norm: LayerNorm::new(store, "decoder.norm", d)?,
            out: Linear::new(store, "decoder.out", d, cfg.vocab, true, rng)?,
        })
    }

    /// Runs the decoder over `tokens` attending to `memory` (`[T', d]`).
    /// No causal mask: every position sees the whole template.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        memory: Var,
        memory_padding: Option<&[bool]>,
        cfg: &ModelConfig,
    ) -> Result<DecoderForward<F>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("decoder input is empty".into()));
        }
        let d = cfg.d_model;
        let emb = self.embed.forward(g, tokens)?;
        let emb = g.scale(emb, F::of((d as f64).sqrt()));
        let pos = g.input(sinusoidal_positions(tokens.len(), d));
        let mut x = g.add(emb, pos)?;
        x = g.dropout(x, cfg.dropout)?;
        let mut layer_states = Vec::with_capacity(self.layers.len());
        let mut self_attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut weights = None;
            x = residual(g, x, &layer.norm1, cfg, |g, h| {
                let (y, w) = layer.self_attn.forward(g, h, h, h, None)?;
                weights = Some(w);
                Ok(y)
            })?;
            self_attention.push(weights.expect("sublayer ran"));
            x = residual(g, x, &layer.norm2, cfg, |g, h| {
                Ok(layer.cross_attn.forward(g, h, memory, memory, memory_padding)?.0)
            })?;
            x = residual(g, x, &layer.norm3, cfg, |g, h| layer.ffn.forward(g, h, cfg.dropout))?;
            layer_states.push(x);
        }
        let h = self.norm.forward(g, x)?;
        if let Some(last) = layer_states.last_mut() {
            *last = h;
        }
        let logits = self.out.forward(g, h)?;
        Ok(DecoderForward {
            logits,
            layer_states,
            self_attention,
        })
    }
}

/// Masks between 1 and `L` positions of `target`, count drawn uniformly.
/// Returns the hypothesis and the sorted masked positions.
pub fn mlm_corrupt<R: Rng>(target: &[usize], rng: &mut R) -> Result<(MaskedHypothesis, Vec<usize>)> {
    let l = target.len();
    if l == 0 {
        return Err(Error::InvalidArgument("cannot mask an empty target".into()));
    }
    let n = rng.random_range(1..=l);
    let mut positions = sample(rng, l, n).into_vec();
    positions.sort_unstable();
    let mut hyp = MaskedHypothesis {
        tokens: target.to_vec(),
        confidence: vec![1.0; l],
        is_masked: vec![false; l],
    };
    for &p in &positions {
        hyp.tokens[p] = MASK;
        hyp.is_masked[p] = true;
        hyp.confidence[p] = 0.0;
    }
    Ok((hyp, positions))
}

/// Label-smoothed cross-entropy averaged over `positions`, with its gradient
/// with respect to the logits.
pub fn mlm_loss<F: Real>(
    logits: &Tensor<F>,
    target: &[usize],
    positions: &[usize],
    smoothing: f64,
) -> Result<(F, Tensor<F>)> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument("masked-LM loss over an empty position set".into()));
    }
    let (l, v) = (logits.rows(), logits.cols());
    if target.len() != l || v < 2 {
        return Err(Error::shape(
            "mlm_loss",
            format!("logits {:?} vs target length {}", logits.shape(), target.len()),
        ));
    }
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("smoothing {smoothing} outside [0, 1]")));
    }
    let on = 1.0 - smoothing;
    let off = smoothing / (v - 1) as f64;
    let scale = 1.0 / positions.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for &p in positions {
        let gold = *target.get(p).ok_or_else(|| {
            Error::InvalidArgument(format!("masked position {p} outside length {l}"))
        })?;
        if gold >= v {
            return Err(Error::InvalidArgument(format!("target id {gold} outside vocabulary")));
        }
        let row = logits.row(p);
        let lse = log_sum_exp(row).f64();
        let mut sum_all = 0.0;
        for &z in row {
            sum_all += z.f64() - lse;
        }
        let lp_gold = row[gold].f64() - lse;
        loss += -(on * lp_gold + off * (sum_all - lp_gold));
        let g = &mut grad.data_mut()[p * v..(p + 1) * v];
        for (j, (gj, &z)) in g.iter_mut().zip(row).enumerate() {
            let q = if j == gold { on } else { off };
            *gj = *gj + F::of(((z.f64() - lse).exp() - q) * scale);
        }
    }
    Ok((F::of(loss * scale), grad))
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn mlm_loss(
        &mut self,
        logits: Var,
        target: &[usize],
        positions: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let (loss, grad) = mlm_loss(self.value(logits), target, positions, smoothing)?;
        self.attach_loss(logits, loss, grad)
    }
}

/// Best non-reserved token and its probability for one logit row.
pub(crate) fn best_token<F: Real>(row: &[F]) -> (usize, f64) {
    let lse = log_sum_exp(row).f64();
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, &z) in row.iter().enumerate() {
        if !Vocabulary::is_reserved(j) && z.f64() > best.1 {
            best = (j, z.f64());
        }
    }
    (best.0, (best.1 - lse).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPredictOutput {
    pub tokens: Vec<usize>,
    /// Positions committed at each iteration.
    pub commits: Vec<Vec<usize>>,
}

impl MaskPredictOutput {
    pub fn iterations(&self) -> usize {
        self.commits.len()
    }
}

/// Easy-first iterative refinement. Each iteration predicts every masked
/// position and commits the `ceil(M0 / max_iter)` most probable; the last
/// allowed iteration commits all that remain. Committed tokens are final.
///
/// `predict` maps the current template to `[L, |V|]` logits.
pub fn mask_predict<F: Real>(
    hyp: &MaskedHypothesis,
    max_iter: usize,
    mut predict: impl FnMut(&[usize]) -> Result<Tensor<F>>,
) -> Result<MaskPredictOutput> {
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be positive".into()));
    }
    let mut tokens = hyp.tokens.clone();
    let mut masked: Vec<usize> = (0..tokens.len()).filter(|&i| hyp.is_masked[i]).collect();
    let per_iter = masked.len().div_ceil(max_iter);
    let mut commits = Vec::new();
    while !masked.is_empty() && commits.len() < max_iter {
        let logits = predict(&tokens)?;
        if logits.rows() != tokens.len() {
            return Err(Error::shape(
                "mask_predict",
                format!("{} logit rows for {} tokens", logits.rows(), tokens.len()),
            ));
        }
        let mut scored: Vec<(usize, usize, f64)> = masked
            .iter()
            .map(|&p| {
                let (tok, prob) = best_token(logits.row(p));
                (p, tok, prob)
            })
            .collect();
        if scored.iter().any(|s| s.1 == usize::MAX) {
            return Err(Error::InvalidArgument("vocabulary has no non-reserved symbols".into()));
        }
        let last = commits.len() + 1 == max_iter;
        let take = if last { scored.len() } else { per_iter.min(scored.len()) };
        scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let mut done: Vec<usize> = Vec::with_capacity(take);
        for &(p, tok, _) in &scored[..take] {
            tokens[p] = tok;
            done.push(p);
        }
        done.sort_unstable();
        masked.retain(|p| done.binary_search(p).is_err());
        commits.push(done);
    }
    Ok(MaskPredictOutput { tokens, commits })
}
