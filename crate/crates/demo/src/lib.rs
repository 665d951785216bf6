//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain-Rust twin so the logic is tested natively.

use maskslu::ctc::{greedy_decode, mask_low_confidence, UNK};
use maskslu::features::{log_mel, synth_utterance, CommandGrammar, MelConfig, SynthSpec};
use maskslu::nn::Tensor;
use maskslu::train::noam_lr;
use maskslu::{Error, Result};
use wasm_bindgen::prelude::*;

const VOICE_SEED: u64 = 7;
const BLANK_SYMBOL: &str = "_";

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major `[frames, bins]` log-Mel energies of a synthesized utterance.
#[wasm_bindgen]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f32>,
    words: Vec<String>,
}

#[wasm_bindgen]
impl Spectrogram {
    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[wasm_bindgen(getter)]
    pub fn bins(&self) -> usize {
        self.bins
    }

    #[wasm_bindgen(getter)]
    pub fn data(&self) -> Vec<f32> {
        self.data.clone()
    }

    /// The words actually rendered (unknown words are dropped).
    #[wasm_bindgen(getter)]
    pub fn words(&self) -> String {
        self.words.join(" ")
    }
}

pub fn spectrogram(text: &str, noise_snr_db: f64, mel_bins: usize, seed: u64) -> Result<Spectrogram> {
    let grammar = CommandGrammar::grabo_like();
    let vocab = grammar.words();
    let words: Vec<String> = text
        .split_whitespace()
        .map(str::to_lowercase)
        .filter(|w| vocab.contains(w))
        .collect();
    if words.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no known words; try e.g. `{}`",
            grammar.realize(&grammar.valid_intents()[0], 0)?.join(" ")
        )));
    }
    let spec = SynthSpec {
        noise_snr_db,
        ..SynthSpec::for_words(&vocab, VOICE_SEED)
    };
    let audio = synth_utterance(&words, &spec, seed)?;
    let mel = MelConfig {
        mel_bins,
        ..MelConfig::default()
    };
    let f = log_mel(&audio, mel.mel_bins, mel.frame_length_ms, mel.frame_shift_ms)?;
    Ok(Spectrogram {
        frames: f.num_frames(),
        bins: f.num_bins(),
        data: f.frames.into_data(),
        words,
    })
}

/// Synthesizes `text` from the built-in command vocabulary and returns its log-Mel features.
#[wasm_bindgen(js_name = logMel)]
pub fn log_mel_js(text: &str, noise_snr_db: f64, mel_bins: usize, seed: u32) -> std::result::Result<Spectrogram, JsError> {
    spectrogram(text, noise_snr_db, mel_bins, seed as u64).map_err(js_err)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Collapsed {
    pub tokens: Vec<String>,
    pub confidence: Vec<f64>,
    /// Tokens with low-confidence positions shown as `<mask>`.
    pub template: Vec<String>,
}

/// Parses `label:prob` frames (`_` is the blank), builds per-frame scores where
/// the label gets `prob` and every other symbol less, then decodes greedily
/// and masks tokens below `threshold`.
pub fn collapse_frames(frames: &str, threshold: f64) -> Result<Collapsed> {
    let mut symbols: Vec<String> = vec![BLANK_SYMBOL.into(), "<mask>".into(), "<pad>".into(), "<unk>".into()];
    let mut path = Vec::new();
    for item in frames.split_whitespace() {
        let (label, p) = match item.rsplit_once(':') {
            Some((l, p)) => {
                let p: f64 = p
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad probability in `{item}`")))?;
                (l, p)
            }
            None => (item, 1.0),
        };
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
        let id = match symbols.iter().position(|s| s == label) {
            Some(i) => i,
            None => {
                symbols.push(label.to_string());
                symbols.len() - 1
            }
        };
        path.push((id, p));
    }
    if path.is_empty() {
        return Err(Error::InvalidArgument("no frames given".into()));
    }
    let v = symbols.len();
    let mut lp = Vec::with_capacity(path.len() * v);
    for &(id, p) in &path {
        // Spread the remainder evenly, capped so the label stays the argmax.
        let rest = ((1.0 - p) / (v - 1) as f64).min(p / 2.0).max(1e-12);
        lp.extend((0..v).map(|k| if k == id { p.max(1e-12).ln() } else { rest.ln() }));
    }
    let dec = greedy_decode(&Tensor::new(&[path.len(), v], lp)?);
    let hyp = mask_low_confidence(&dec.tokens, &dec.confidence, threshold)?;
    let name = |id: usize| if id == UNK { "<unk>".to_string() } else { symbols[id].clone() };
    Ok(Collapsed {
        tokens: dec.tokens.iter().map(|&k| name(k)).collect(),
        confidence: dec.confidence,
        template: hyp.tokens.iter().map(|&k| name(k)).collect(),
    })
}

/// Greedy CTC collapse of `label:prob` frames plus confidence masking, as JSON
/// `{tokens, confidence, template}`.
#[wasm_bindgen(js_name = collapseFrames)]
pub fn collapse_frames_js(frames: &str, threshold: f64) -> std::result::Result<String, JsError> {
    let c = collapse_frames(frames, threshold).map_err(js_err)?;
    let quote = |xs: &[String]| xs.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(",");
    let conf = c.confidence.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
    Ok(format!(
        "{{\"tokens\":[{}],\"confidence\":[{conf}],\"template\":[{}]}}",
        quote(&c.tokens),
        quote(&c.template)
    ))
}

/// Learning rate at steps `1..=steps`.
pub fn noam_curve(steps: u32, warmup: u32, peak: f64) -> Result<Vec<f64>> {
    (1..=steps as u64).map(|s| noam_lr(s, warmup as u64, peak)).collect()
}

#[wasm_bindgen(js_name = noamCurve)]
pub fn noam_curve_js(steps: u32, warmup: u32, peak: f64) -> std::result::Result<Vec<f64>, JsError> {
    noam_curve(steps, warmup, peak).map_err(js_err)
}
