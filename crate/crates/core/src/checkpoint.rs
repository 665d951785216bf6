//! Tensor archives: a JSON header followed by little-endian `f32` payloads.
//!
//! Layout: 8-byte magic, `u64` LE header length, UTF-8 JSON header, then the
//! tensors back to back in header order. The header carries each tensor's
//! name and shape plus an arbitrary `meta` document.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ctc::Vocabulary;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureStats, MelConfig};
use crate::model::{Backbone, LayerId, SpeechModel};
use crate::nn::{ParamStore, Tensor};
use crate::slu::{ClassAttentionHead, IntentSchema, SluConfig};

const MAGIC: &[u8; 8] = b"MSLUARC\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<M> {
    format_version: u32,
    meta: M,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Archive<M> {
    pub meta: M,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl<M> Archive<M> {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_archive<'a, M: Serialize>(
    path: &Path,
    meta: &M,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let tensors: Vec<(&str, &Tensor<f32>)> = tensors.into_iter().collect();
    let mut seen = HashSet::new();
    for (n, _) in &tensors {
        if !seen.insert(*n) {
            return Err(Error::Format(format!("tensor `{n}` written twice")));
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 4).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename so an interrupted save never leaves a torn archive.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_archive<M: DeserializeOwned>(path: &Path) -> Result<Archive<M>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a tensor archive"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let probe: serde_json::Value = serde_json::from_slice(body)?;
    match probe.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(bad(&format!("unsupported format_version {v}"))),
        None => return Err(bad("missing format_version")),
    }
    let header: Header<M> = serde_json::from_value(probe)?;
    let mut off = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(off..off + 4 * n)
            .ok_or_else(|| bad(&format!("truncated payload for `{}`", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((e.name, Tensor::new(&e.shape, data)?));
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}

/// Everything needed to rebuild a pretrained backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneMeta {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub stats: FeatureStats,
    pub mel: MelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SluMeta {
    pub config: SluConfig,
    pub schema: IntentSchema,
    pub layer: LayerId,
    /// Whether representations were extracted after mask-predict refinement.
    pub refine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub backbone: Option<BackboneMeta>,
    pub slu: Option<SluMeta>,
    /// The training configuration that produced this checkpoint.
    pub train: Option<serde_json::Value>,
    pub epoch: usize,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
}

/// A checkpoint on disk: metadata plus named parameter (and optimizer) tensors.
pub type Checkpoint = Archive<CheckpointMeta>;

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_archive(path)
}

/// Copies archive tensors into every parameter of `store`, requiring each
/// parameter to be present exactly once with a matching shape.
pub fn fill_store(store: &mut ParamStore<f32>, ckpt: &Checkpoint, prefixes: &[&str]) -> Result<()> {
    let mut seen = HashSet::new();
    let lookup: BTreeMap<&str, &Tensor<f32>> = ckpt
        .tensors
        .iter()
        .map(|(n, t)| {
            if !seen.insert(n.as_str()) {
                return Err(Error::Format(format!("tensor `{n}` appears twice")));
            }
            Ok((n.as_str(), t))
        })
        .collect::<Result<_>>()?;
    for (_, p) in store.iter_mut() {
        if !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            continue;
        }
        let t = lookup
            .get(p.name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{}`", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter `{}`: checkpoint shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = (*t).clone();
    }
    Ok(())
}

pub const BACKBONE_PREFIXES: [&str; 3] = ["encoder.", "ctc.", "decoder."];

impl Backbone {
    pub fn meta(&self) -> BackboneMeta {
        BackboneMeta {
            model: self.model.cfg.clone(),
            vocab: self.vocab.clone(),
            stats: self.stats.clone(),
            mel: self.mel,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt
            .meta
            .backbone
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint has no backbone".into()))?;
        let (model, mut store) = SpeechModel::init::<f32>(&meta.model, 0)?;
        fill_store(&mut store, ckpt, &BACKBONE_PREFIXES)?;
        Backbone::new(model, store, meta.vocab.clone(), meta.stats.clone(), meta.mel)
    }
}

/// A trained intent head together with its schema and input layer.
#[derive(Clone, Debug)]
pub struct SluModel {
    pub head: ClassAttentionHead,
    pub store: ParamStore<f32>,
    pub meta: SluMeta,
}

impl SluModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt
            .meta
            .slu
            .clone()
            .ok_or_else(|| Error::Format("checkpoint has no SLU head".into()))?;
        let (head, mut store) = ClassAttentionHead::init::<f32>(&meta.config, meta.schema.num_bits(), 0)?;
        fill_store(&mut store, ckpt, &["slu."])?;
        Ok(SluModel { head, store, meta })
    }
}

/// Writes a backbone, optionally with an intent head, to one checkpoint.
pub fn save_model(
    path: &Path,
    backbone: &Backbone,
    slu: Option<&SluModel>,
    train: Option<serde_json::Value>,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
) -> Result<()> {
    let meta = CheckpointMeta {
        backbone: Some(backbone.meta()),
        slu: slu.map(|s| s.meta.clone()),
        train,
        epoch,
        step: 0,
        metrics,
    };
    let head = slu.into_iter().flat_map(|s| param_tensors(&s.store));
    write_archive(path, &meta, param_tensors(&backbone.store).chain(head))
}

/// Parameter tensors of `store` as archive entries.
pub fn param_tensors(store: &ParamStore<f32>) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
    store.iter().map(|(_, p)| (p.name.as_str(), &p.value))
}
