//! Intent recognition over frozen representation sequences: multihot intent
//! encoding, a class-attention head, and projection onto valid intents.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CommandGrammar, Intent};
use crate::nn::params::normal;
use crate::nn::{
    AttentionConfig, FeedForward, Graph, LayerNorm, Linear, ParamId, ParamStore, Real, Tensor, Var,
};
use crate::rng::substream;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before scoring.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitKind {
    Action,
    Argument,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBit {
    pub kind: BitKind,
    /// Action name, or `slot=value` for arguments.
    pub name: String,
}

/// Layout of the multihot intent vector: one bit per action, then one per
/// (slot, value) pair, plus the enumerated legal combinations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct IntentSchema {
    label_bits: Vec<LabelBit>,
    valid: Vec<Intent>,
    valid_set: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaRepr {
    label_bits: Vec<LabelBit>,
    valid: Vec<Intent>,
}

impl TryFrom<SchemaRepr> for IntentSchema {
    type Error = Error;
    fn try_from(r: SchemaRepr) -> Result<Self> {
        IntentSchema::new(r.label_bits, r.valid)
    }
}

impl From<IntentSchema> for SchemaRepr {
    fn from(s: IntentSchema) -> Self {
        SchemaRepr {
            label_bits: s.label_bits,
            valid: s.valid,
        }
    }
}

impl IntentSchema {
    pub fn new(label_bits: Vec<LabelBit>, valid: Vec<Intent>) -> Result<Self> {
        if valid.is_empty() {
            return Err(Error::Intent("schema has no valid combinations".into()));
        }
        let mut schema = IntentSchema {
            label_bits,
            valid: Vec::new(),
            valid_set: Vec::new(),
            index: HashMap::new(),
        };
        for intent in valid {
            let v = schema.multihot(&intent)?;
            if schema.index.insert(v.clone(), schema.valid_set.len()).is_some() {
                return Err(Error::Intent(format!("duplicate valid intent `{intent}`")));
            }
            schema.valid_set.push(v);
            schema.valid.push(intent);
        }
        Ok(schema)
    }

    pub fn from_grammar(grammar: &CommandGrammar) -> Result<Self> {
        let mut bits: Vec<LabelBit> = grammar
            .actions
            .iter()
            .map(|a| LabelBit {
                kind: BitKind::Action,
                name: a.name.clone(),
            })
            .collect();
        for s in &grammar.slots {
            for v in &s.values {
                bits.push(LabelBit {
                    kind: BitKind::Argument,
                    name: format!("{}={v}", s.name),
                });
            }
        }
        Self::new(bits, grammar.valid_intents())
    }

    pub fn label_bits(&self) -> &[LabelBit] {
        &self.label_bits
    }

    pub fn num_bits(&self) -> usize {
        self.label_bits.len()
    }

    pub fn valid_intents(&self) -> &[Intent] {
        &self.valid
    }

    pub fn valid_set(&self) -> &[Vec<u8>] {
        &self.valid_set
    }

    fn bit(&self, kind: BitKind, name: &str) -> Option<usize> {
        self.label_bits
            .iter()
            .position(|b| b.kind == kind && b.name == name)
    }

    fn multihot(&self, intent: &Intent) -> Result<Vec<u8>> {
        let mut v = vec![0u8; self.label_bits.len()];
        let a = self
            .bit(BitKind::Action, &intent.action)
            .ok_or_else(|| Error::Intent(format!("unknown action `{}`", intent.action)))?;
        v[a] = 1;
        for (slot, value) in &intent.args {
            let b = self
                .bit(BitKind::Argument, &format!("{slot}={value}"))
                .ok_or_else(|| Error::Intent(format!("unknown argument `{slot}={value}`")))?;
            v[b] = 1;
        }
        Ok(v)
    }

    /// Multihot vector of a legal intent.
    pub fn encode(&self, intent: &Intent) -> Result<Vec<u8>> {
        let v = self.multihot(intent)?;
        if !self.index.contains_key(&v) {
            return Err(Error::Intent(format!("`{intent}` is not a valid combination")));
        }
        Ok(v)
    }

    pub fn decode(&self, multihot: &[u8]) -> Result<Intent> {
        if multihot.len() != self.label_bits.len() {
            return Err(Error::Intent(format!(
                "vector of {} bits for a {}-bit schema",
                multihot.len(),
                self.label_bits.len()
            )));
        }
        self.index
            .get(multihot)
            .map(|&i| self.valid[i].clone())
            .ok_or_else(|| Error::Intent("vector is not a valid combination".into()))
    }

    /// Index into the valid set of an intent.
    pub fn index_of(&self, intent: &Intent) -> Result<usize> {
        let v = self.encode(intent)?;
        Ok(self.index[&v])
    }
}

/// Mean over bits of the logistic loss, and its gradient with respect to the logits.
pub fn bce_loss<F: Real>(logits: &[F], targets: &[u8]) -> Result<(F, Vec<F>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::shape(
            "bce_loss",
            format!("{} logits vs {} targets", logits.len(), targets.len()),
        ));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        let (z, t) = (z.f64(), t as f64);
        // softplus(z) - t z, computed without overflow
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let sig = 1.0 / (1.0 + (-z).exp());
        grad.push(F::of((sig - t) / n));
    }
    Ok((F::of(loss / n), grad))
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn bce_loss(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let value = self.value(logits);
        let (loss, grad) = bce_loss(value.data(), targets)?;
        let grad = Tensor::new(value.shape(), grad)?;
        self.attach_loss(logits, loss, grad)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// The valid combination with the lowest cross-entropy against `probs`.
/// Ties resolve to the lowest index in the valid set.
pub fn enforce_structure(probs: &[f64], schema: &IntentSchema) -> Result<(usize, Intent)> {
    if probs.len() != schema.num_bits() {
        return Err(Error::shape(
            "enforce_structure",
            format!("{} probabilities for {} bits", probs.len(), schema.num_bits()),
        ));
    }
    let logs: Vec<(f64, f64)> = probs
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            (-p.ln(), -(1.0 - p).ln())
        })
        .collect();
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, v) in schema.valid_set().iter().enumerate() {
        let ce: f64 = v
            .iter()
            .zip(&logs)
            .map(|(&b, &(on, off))| if b == 1 { on } else { off })
            .sum();
        if ce < best.1 {
            best = (i, ce);
        }
    }
    if best.0 == usize::MAX {
        return Err(Error::Intent("no finite-cost valid combination".into()));
    }
    Ok((best.0, schema.valid_intents()[best.0].clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SluConfig {
    /// Width of the incoming representations.
    pub input_dim: usize,
    /// Width of the class vector.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub classifier_hidden: usize,
}

impl Default for SluConfig {
    fn default() -> Self {
        SluConfig {
            input_dim: 256,
            d: 128,
            heads: 4,
            layers: 2,
            ffn: 1024,
            classifier_hidden: 1024,
        }
    }
}

impl SluConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("d", self.d),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn", self.ffn),
            ("classifier_hidden", self.classifier_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("slu.{name} must be positive")));
            }
        }
        AttentionConfig::new(self.d, self.heads).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// One class-attention layer. The class vector is the only query; keys and
/// values come from the sequence alone.
#[derive(Clone, Debug)]
pub struct ClassAttentionLayer {
    pub norm_x: LayerNorm,
    pub norm_cls: LayerNorm,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub heads: usize,
}

impl ClassAttentionLayer {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        AttentionConfig::new(d, heads)?;
        Ok(ClassAttentionLayer {
            norm_x: LayerNorm::new(store, &format!("{name}.norm_x"), d)?,
            norm_cls: LayerNorm::new(store, &format!("{name}.norm_cls"), d)?,
            key: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn, rng)?,
            heads,
        })
    }

    /// `x` is `[L, d]`, `cls` is `[1, d]`. Returns the updated class vector
    /// and the `[heads, L]` attention weights.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        cls: Var,
        padding: Option<&[bool]>,
    ) -> Result<(Var, Tensor<F>)> {
        let xn = self.norm_x.forward(g, x)?;
        let q = self.norm_cls.forward(g, cls)?;
        let k = self.key.forward(g, xn)?;
        let v = self.value.forward(g, xn)?;
        let att = g.attention(q, k, v, self.heads, padding)?;
        let y = self.out.forward(g, att.context)?;
        let cls = g.add(cls, y)?;
        let h = self.norm_ffn.forward(g, cls)?;
        let h = self.ffn.forward(g, h, 0.0)?;
        let cls = g.add(cls, h)?;
        let s = att.weights.shape();
        let weights = att.weights.clone().reshape(&[s[0], s[2]])?;
        Ok((cls, weights))
    }
}

#[derive(Clone, Debug)]
pub struct ClassAttentionHead {
    pub cfg: SluConfig,
    pub input_proj: Linear,
    pub cls: ParamId,
    pub layers: Vec<ClassAttentionLayer>,
    pub norm: LayerNorm,
    pub hidden: Linear,
    pub classifier: Linear,
}

pub struct SluForward<F> {
    /// `[1, bits]`.
    pub logits: Var,
    /// Per layer `[heads, L]`, exactly as used in the forward pass.
    pub attention: Vec<Tensor<F>>,
}

impl ClassAttentionHead {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        cfg: &SluConfig,
        num_bits: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let input_proj = Linear::new(store, "slu.input_proj", cfg.input_dim, d, true, rng)?;
        let cls = store.add("slu.cls", normal(rng, &[1, d], (d as f64).powf(-0.5)))?;
        let layers = (0..cfg.layers)
            .map(|i| ClassAttentionLayer::new(store, &format!("slu.layers.{i}"), d, cfg.heads, cfg.ffn, rng))
            .collect::<Result<_>>()?;
        Ok(ClassAttentionHead {
            cfg: cfg.clone(),
            input_proj,
            cls,
            layers,
            norm: LayerNorm::new(store, "slu.norm", d)?,
            hidden: Linear::new(store, "slu.classifier.hidden", d, cfg.classifier_hidden, true, rng)?,
            classifier: Linear::new(store, "slu.classifier.out", cfg.classifier_hidden, num_bits, true, rng)?,
        })
    }

    /// Fresh head with parameters from the `slu-init` substream of `seed`.
    pub fn init<F: Real>(cfg: &SluConfig, num_bits: usize, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let head = Self::new(&mut store, cfg, num_bits, &mut substream(seed, "slu-init"))?;
        Ok((head, store))
    }

    pub fn num_bits(&self, store: &ParamStore<impl Real>) -> usize {
        store.get(self.classifier.weight).value.shape()[0]
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        reprs: Var,
        padding: Option<&[bool]>,
    ) -> Result<SluForward<F>> {
        let s = g.shape(reprs);
        if s.len() != 2 || s[1] != self.cfg.input_dim || s[0] == 0 {
            return Err(Error::shape(
                "intent_forward",
                format!("representations {s:?}, expected [L, {}]", self.cfg.input_dim),
            ));
        }
        let x = self.input_proj.forward(g, reprs)?;
        let mut cls = g.param(self.cls);
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (c, w) = layer.forward(g, x, cls, padding)?;
            cls = c;
            attention.push(w);
        }
        let h = self.norm.forward(g, cls)?;
        let h = self.hidden.forward(g, h)?;
        let h = g.relu(h);
        let logits = self.classifier.forward(g, h)?;
        Ok(SluForward { logits, attention })
    }

    /// Eval-mode logits and attention for one representation sequence.
    pub fn predict<F: Real>(&self, store: &ParamStore<F>, reprs: &Tensor<F>) -> Result<(Vec<f64>, Vec<Tensor<F>>)> {
        let mut g = Graph::new(store);
        let x = g.input(reprs.clone());
        let out = self.forward(&mut g, x, None)?;
        let logits = g.value(out.logits).data().iter().map(|v| v.f64()).collect();
        Ok((logits, out.attention))
    }
}

/// Class-attention weights of one utterance, keyed layer -> head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub schema_version: u32,
    pub id: String,
    pub tokens: Vec<String>,
    pub prediction: Intent,
    pub layers: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

impl AttentionReport {
    /// Builds a report from captured `[heads, L]` weights. Positions flagged in
    /// `padding` are dropped.
    pub fn new<F: Real>(
        id: &str,
        tokens: &[String],
        prediction: Intent,
        attention: &[Tensor<F>],
        padding: Option<&[bool]>,
    ) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for (li, w) in attention.iter().enumerate() {
            let (h, l) = (w.shape()[0], w.shape()[1]);
            let keep: Vec<usize> = (0..l).filter(|&j| !padding.is_some_and(|p| p[j])).collect();
            if keep.len() != tokens.len() {
                return Err(Error::shape(
                    "attention report",
                    format!("{} tokens for {} unpadded positions", tokens.len(), keep.len()),
                ));
            }
            let heads = (0..h)
                .map(|hi| {
                    let row = w.row(hi);
                    (hi.to_string(), keep.iter().map(|&j| row[j].f64()).collect())
                })
                .collect();
            layers.insert(li.to_string(), heads);
        }
        Ok(AttentionReport {
            schema_version: 1,
            id: id.to_string(),
            tokens: tokens.to_vec(),
            prediction,
            layers,
        })
    }

    /// Self-contained heatmap: tokens along x, one row per (layer, head).
    pub fn to_svg(&self) -> String {
        const CELL: usize = 44;
        const LEFT: usize = 90;
        const TOP: usize = 40;
        let rows: Vec<(String, &Vec<f64>)> = self
            .layers
            .iter()
            .flat_map(|(l, heads)| heads.iter().map(move |(h, w)| (format!("L{l} H{h}"), w)))
            .collect();
        let width = LEFT + CELL * self.tokens.len() + 10;
        let height = TOP + CELL * rows.len() + 70;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<text x="4" y="16">{}: {}</text>"#, xml(&self.id), xml(&self.prediction.to_string()));
        for (r, (label, weights)) in rows.iter().enumerate() {
            let y = TOP + r * CELL;
            let _ = writeln!(s, r#"<text x="4" y="{}">{label}</text>"#, y + CELL / 2 + 4);
            for (c, &w) in weights.iter().enumerate() {
                let shade = 255 - (w.clamp(0.0, 1.0) * 255.0).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="white"><title>{w:.4}</title></rect>"#,
                    LEFT + c * CELL
                );
            }
        }
        let base = TOP + CELL * rows.len() + 14;
        for (c, tok) in self.tokens.iter().enumerate() {
            let x = LEFT + c * CELL + CELL / 2;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{base}" text-anchor="end" transform="rotate(-45 {x} {base})">{}</text>"#,
                xml(tok)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests;
