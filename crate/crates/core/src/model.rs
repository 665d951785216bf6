//! The pretrained speech model: encoder, CTC head and masked-LM decoder,
//! plus the inference pipelines built on them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{greedy_decode, mask_low_confidence, GreedyDecode, MaskedHypothesis, Vocabulary};
use crate::decoder::{mask_predict, Decoder, DecoderForward, MaskPredictOutput};
use crate::encoder::{Encoder, EncoderForward, ModelConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, FeatureStats, MelConfig};
use crate::nn::{Graph, Linear, ParamStore, Real, Tensor, Var};
use crate::rng::substream;

pub const CONFIDENCE_THRESHOLD: f64 = 0.9;
pub const MAX_REFINE_ITERS: usize = 10;

#[derive(Clone, Debug)]
pub struct SpeechModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub ctc_head: Linear,
    pub decoder: Decoder,
}

impl SpeechModel {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, cfg, rng)?;
        let ctc_head = Linear::new(store, "ctc.head", cfg.d_model, cfg.vocab, true, rng)?;
        let decoder = Decoder::new(store, cfg, rng)?;
        Ok(SpeechModel {
            cfg: cfg.clone(),
            encoder,
            ctc_head,
            decoder,
        })
    }

    /// Fresh model with parameters drawn from the `init` substream of `seed`.
    pub fn init<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, cfg, &mut substream(seed, "init"))?;
        Ok((model, store))
    }

    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, features: &Tensor<F>) -> Result<EncoderForward> {
        self.encoder.forward(g, features, &self.cfg)
    }

    /// `[T', |V|]` log-posteriors of the CTC head.
    pub fn ctc_log_probs<F: Real>(&self, g: &mut Graph<'_, F>, h_enc: Var) -> Result<Var> {
        let z = self.ctc_head.forward(g, h_enc)?;
        Ok(g.log_softmax(z))
    }

    pub fn decode<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        memory: Var,
    ) -> Result<DecoderForward<F>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab
            )));
        }
        self.decoder.forward(g, tokens, memory, None, &self.cfg)
    }
}

/// A model layer whose states can be exported (`encoder.11`, `decoder.4`, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerId {
    Encoder(usize),
    Decoder(usize),
}

impl LayerId {
    /// Penultimate decoder layer, the default SLU input.
    pub fn default_for(cfg: &ModelConfig) -> Self {
        LayerId::Decoder(cfg.dec_layers.saturating_sub(2))
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let (i, n) = match *self {
            LayerId::Encoder(i) => (i, cfg.enc_layers),
            LayerId::Decoder(i) => (i, cfg.dec_layers),
        };
        if i >= n {
            return Err(Error::InvalidArgument(format!("unknown layer `{self}` ({n} layers)")));
        }
        Ok(())
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Encoder(i) => write!(f, "encoder.{i}"),
            LayerId::Decoder(i) => write!(f, "decoder.{i}"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown layer `{s}`; expected encoder.N or decoder.N"));
        let (stack, idx) = s.split_once('.').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        match stack {
            "encoder" => Ok(LayerId::Encoder(idx)),
            "decoder" => Ok(LayerId::Decoder(idx)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for LayerId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerId> for String {
    fn from(l: LayerId) -> String {
        l.to_string()
    }
}

#[derive(Clone, Debug)]
pub struct Recognition {
    pub greedy: GreedyDecode,
    /// Decoder template: the greedy output with low-confidence positions masked.
    pub template: MaskedHypothesis,
    /// Set when the greedy output was empty and a single mask stood in for it.
    pub empty_fallback: bool,
    pub refined: Option<MaskPredictOutput>,
}

impl Recognition {
    /// Best available token sequence: refined if refinement ran, else greedy.
    pub fn tokens(&self) -> &[usize] {
        match &self.refined {
            Some(r) => &r.tokens,
            None => &self.greedy.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSequence {
    /// `[L, d]`; `L` is the template length for decoder layers, `T'` for encoder layers.
    pub vectors: Tensor<f32>,
    pub source_layer: LayerId,
    /// Template tokens the decoder consumed.
    pub tokens: Vec<usize>,
    pub empty_fallback: bool,
}

/// A pretrained model bundled with everything needed to run it on raw features.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub model: SpeechModel,
    pub store: ParamStore<f32>,
    pub vocab: Vocabulary,
    pub stats: FeatureStats,
    pub mel: MelConfig,
}

impl Backbone {
    pub fn new(model: SpeechModel, store: ParamStore<f32>, vocab: Vocabulary, stats: FeatureStats, mel: MelConfig) -> Result<Self> {
        if vocab.len() != model.cfg.vocab {
            return Err(Error::Config(format!(
                "vocabulary has {} symbols but the model expects {}",
                vocab.len(),
                model.cfg.vocab
            )));
        }
        if stats.mean.len() != model.cfg.mel_bins || mel.mel_bins != model.cfg.mel_bins {
            return Err(Error::Config("feature statistics do not match model.mel_bins".into()));
        }
        Ok(Backbone {
            model,
            store,
            vocab,
            stats,
            mel,
        })
    }

    pub fn prepare(&self, features: &FeatureSequence) -> Result<Tensor<f32>> {
        self.stats.normalize(features)
    }

    /// Greedy CTC decode, confidence masking and, when `max_iter > 0`,
    /// mask-predict refinement.
    pub fn recognize(&self, features: &FeatureSequence, max_iter: usize) -> Result<Recognition> {
        let x = self.prepare(features)?;
        let mut g = Graph::new(&self.store);
        let enc = self.model.encode(&mut g, &x)?;
        let lp = self.model.ctc_log_probs(&mut g, enc.h_enc)?;
        let greedy = greedy_decode(g.value(lp));
        let (template, empty_fallback) = template_from(&greedy)?;
        let refined = if max_iter > 0 {
            let memory = g.value(enc.h_enc).clone();
            Some(self.refine(&template, &memory, max_iter)?)
        } else {
            None
        };
        Ok(Recognition {
            greedy,
            template,
            empty_fallback,
            refined,
        })
    }

    pub fn refine(&self, template: &MaskedHypothesis, memory: &Tensor<f32>, max_iter: usize) -> Result<MaskPredictOutput> {
        mask_predict(template, max_iter, |tokens| {
            let mut g = Graph::new(&self.store);
            let m = g.input(memory.clone());
            let out = self.model.decode(&mut g, tokens, m)?;
            Ok(g.value(out.logits).clone())
        })
    }

    /// Encode, greedy-decode, mask, one decoder pass (or full refinement with
    /// `refine`), then return the states of `layer`.
    pub fn extract(&self, features: &FeatureSequence, layer: LayerId, refine: bool) -> Result<RepresentationSequence> {
        layer.check(&self.model.cfg)?;
        let x = self.prepare(features)?;
        let mut g = Graph::new(&self.store);
        let enc = self.model.encode(&mut g, &x)?;
        let lp = self.model.ctc_log_probs(&mut g, enc.h_enc)?;
        let greedy = greedy_decode(g.value(lp));
        let (template, empty_fallback) = template_from(&greedy)?;
        if let LayerId::Encoder(i) = layer {
            return Ok(RepresentationSequence {
                vectors: g.value(enc.layer_states[i]).clone(),
                source_layer: layer,
                tokens: template.tokens,
                empty_fallback,
            });
        }
        let tokens = if refine {
            let memory = g.value(enc.h_enc).clone();
            self.refine(&template, &memory, MAX_REFINE_ITERS)?.tokens
        } else {
            template.tokens
        };
        let dec = self.model.decode(&mut g, &tokens, enc.h_enc)?;
        let LayerId::Decoder(i) = layer else { unreachable!() };
        Ok(RepresentationSequence {
            vectors: g.value(dec.layer_states[i]).clone(),
            source_layer: layer,
            tokens,
            empty_fallback,
        })
    }
}

fn template_from(greedy: &GreedyDecode) -> Result<(MaskedHypothesis, bool)> {
    if greedy.tokens.is_empty() {
        log::debug!("empty greedy decode; using a single-mask template");
        return Ok((MaskedHypothesis::all_masked(1), true));
    }
    Ok((
        mask_low_confidence(&greedy.tokens, &greedy.confidence, CONFIDENCE_THRESHOLD)?,
        false,
    ))
}
