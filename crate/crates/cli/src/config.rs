//! Run configuration: one TOML document, defaults for every field, dotted
//! command-line overrides, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use maskslu::encoder::ModelConfig;
use maskslu::eval::CurveOptions;
use maskslu::features::{MelConfig, SynthSpec};
use maskslu::model::LayerId;
use maskslu::slu::SluConfig;
use maskslu::train::TrainConfig;
use maskslu::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub token_duration_ms: f64,
    pub noise_snr_db: f64,
    /// Fixes the token-to-tone mapping; keep it equal across splits.
    pub voice_seed: u64,
    pub sample_rate_hz: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            token_duration_ms: 150.0,
            noise_snr_db: 30.0,
            voice_seed: 7,
            sample_rate_hz: 16_000,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self, words: &[String]) -> SynthSpec {
        SynthSpec {
            token_duration_ms: self.token_duration_ms,
            noise_snr_db: self.noise_snr_db,
            sample_rate_hz: self.sample_rate_hz,
            ..SynthSpec::for_words(words, self.voice_seed)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    /// Representation layer; defaults to the penultimate decoder layer.
    pub layer: Option<LayerId>,
    /// Run mask-predict refinement before extracting.
    pub refine: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub grammar: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for corpus generation and learning-curve sampling.
    pub seed: u64,
    pub features: MelConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub slu: SluConfig,
    pub slu_train: TrainConfig,
    pub finetune: TrainConfig,
    pub extract: ExtractConfig,
    pub curve: CurveOptions,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            features: MelConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            slu: SluConfig::default(),
            slu_train: TrainConfig::slu(),
            finetune: TrainConfig::finetune(),
            extract: ExtractConfig::default(),
            curve: CurveOptions::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Recursively overlays `src` onto `dst`. Keys absent from `dst` are kept so
/// that deserialisation can reject them by name.
fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Table(d), Value::Table(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("malformed config key `{key}`")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Defaults, overlaid with the document at `path` (if any) and then with
    /// `overrides` (`dotted.key`, raw value) in order.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = Value::try_from(RunConfig::default()).map_err(|e| cfg_err(e.to_string()))?;
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?;
            let user: Value = toml::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?;
            merge(&mut doc, user);
        }
        for (k, v) in overrides {
            set_path(&mut doc, k, parse_literal(v))?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.slu.validate()?;
        self.pretrain.validate()?;
        self.slu_train.validate()?;
        self.finetune.validate()?;
        if self.model.mel_bins != self.features.mel_bins {
            return Err(cfg_err(format!(
                "model.mel_bins = {} but features.mel_bins = {}",
                self.model.mel_bins, self.features.mel_bins
            )));
        }
        if let Some(l) = self.extract.layer {
            l.check(&self.model)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

/// Splits `--section.key=value` / `--section.key value` arguments (any long
/// flag containing a dot) out of `args`.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| cfg_err(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}
