//! Metrics, the low-resource learning-curve protocol, and representation /
//! attention export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_archive, SluModel};
use crate::error::{Error, Result};
use crate::features::{write_manifest, Intent, ManifestEntry};
use crate::model::{Backbone, LayerId};
use crate::nn::Tensor;
use crate::par::par_map;
use crate::rng::{derive_seed, substream};
use crate::slu::{enforce_structure, sigmoid, AttentionReport, IntentSchema, SluConfig};
use crate::train::{slu_predict, train_slu, SluExample, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn check_aligned(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("{what}: {a} predictions for {b} references")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty evaluation set")));
    }
    Ok(())
}

/// Exact-match rate over whole intents (action and every slot).
pub fn intent_accuracy<T: PartialEq>(predictions: &[T], references: &[T]) -> Result<f64> {
    check_aligned("intent_accuracy", predictions.len(), references.len())?;
    let hits = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / references.len() as f64)
}

/// Micro-averaged F1 over pooled bit decisions; 0 when undefined.
pub fn micro_f1(predictions: &[Vec<u8>], references: &[Vec<u8>]) -> Result<f64> {
    check_aligned("micro_f1", predictions.len(), references.len())?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, r) in predictions.iter().zip(references) {
        if p.len() != r.len() {
            return Err(Error::InvalidArgument(format!(
                "micro_f1: multihot of {} bits against {}",
                p.len(),
                r.len()
            )));
        }
        for (&pb, &rb) in p.iter().zip(r) {
            match (pb != 0, rb != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    Ok(if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    })
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (x != y) as usize).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Summed edit distance over total reference length.
pub fn token_error_rate<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "token_error_rate: {} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("token_error_rate: empty reference corpus".into()));
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| levenshtein(h, r)).sum();
    Ok(edits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub reference: String,
    pub predicted: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemPrediction {
    pub id: String,
    pub reference: Intent,
    pub predicted: Intent,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub num_utterances: usize,
    pub accuracy: f64,
    pub micro_f1: f64,
    /// Keyed by action.
    pub per_class: BTreeMap<String, ClassScores>,
    /// Reference/prediction pairs that disagree, most frequent first.
    pub confusions: Vec<Confusion>,
    pub ter: Option<f64>,
    pub runtime_seconds: f64,
    pub predictions: Vec<ItemPrediction>,
}

/// Scores structured predictions against references.
pub fn build_report(
    schema: &IntentSchema,
    items: &[(String, Vec<String>)],
    predictions: &[Intent],
    references: &[Intent],
    ter: Option<f64>,
    runtime_seconds: f64,
) -> Result<EvalReport> {
    let accuracy = intent_accuracy(predictions, references)?;
    let encode = |xs: &[Intent]| xs.iter().map(|i| schema.encode(i)).collect::<Result<Vec<_>>>();
    let micro = micro_f1(&encode(predictions)?, &encode(references)?)?;
    let mut per_class = BTreeMap::new();
    let actions: std::collections::BTreeSet<&str> = references
        .iter()
        .chain(predictions)
        .map(|i| i.action.as_str())
        .collect();
    for a in actions {
        let tp = predictions
            .iter()
            .zip(references)
            .filter(|(p, r)| p.action == a && r.action == a)
            .count();
        let predicted = predictions.iter().filter(|p| p.action == a).count();
        let support = references.iter().filter(|r| r.action == a).count();
        let ratio = |n: usize| if n > 0 { tp as f64 / n as f64 } else { 0.0 };
        per_class.insert(
            a.to_string(),
            ClassScores {
                precision: ratio(predicted),
                recall: ratio(support),
                support,
            },
        );
    }
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (p, r) in predictions.iter().zip(references) {
        if p != r {
            *counts.entry((r.to_string(), p.to_string())).or_default() += 1;
        }
    }
    let mut confusions: Vec<Confusion> = counts
        .into_iter()
        .map(|((reference, predicted), count)| Confusion {
            reference,
            predicted,
            count,
        })
        .collect();
    confusions.sort_by_key(|c| std::cmp::Reverse(c.count));
    let predictions = items
        .iter()
        .zip(predictions.iter().zip(references))
        .map(|((id, tokens), (p, r))| ItemPrediction {
            id: id.clone(),
            reference: r.clone(),
            predicted: p.clone(),
            tokens: tokens.clone(),
        })
        .collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        num_utterances: references.len(),
        accuracy,
        micro_f1: micro,
        per_class,
        confusions,
        ter,
        runtime_seconds,
        predictions,
    })
}

/// Evaluates a trained head on prepared examples.
pub fn evaluate_slu(slu: &SluModel, examples: &[SluExample], ter: Option<f64>) -> Result<EvalReport> {
    let t0 = Instant::now();
    let (preds, _) = slu_predict(&slu.head, &slu.store, &slu.meta.schema, examples)?;
    let refs: Vec<Intent> = examples.iter().map(|e| e.intent.clone()).collect();
    let items: Vec<(String, Vec<String>)> = examples.iter().map(|e| (e.id.clone(), e.tokens.clone())).collect();
    build_report(&slu.meta.schema, &items, &preds, &refs, ter, t0.elapsed().as_secs_f64())
}

/// How examples are grouped into classes for per-class sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKey {
    #[default]
    Action,
    Combination,
}

impl ClassKey {
    fn of(self, intent: &Intent) -> String {
        match self {
            ClassKey::Action => intent.action.clone(),
            ClassKey::Combination => intent.to_string(),
        }
    }
}

/// Draws up to `per_class` examples of every class. Returns sorted pool
/// indices and whether some class had fewer than requested.
pub fn sample_per_class(intents: &[Intent], per_class: usize, key: ClassKey, seed: u64) -> (Vec<usize>, bool) {
    let mut classes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, intent) in intents.iter().enumerate() {
        classes.entry(key.of(intent)).or_default().push(i);
    }
    let mut rng = substream(seed, "subset");
    let mut chosen = Vec::new();
    let mut short = false;
    for (_, mut idx) in classes {
        idx.shuffle(&mut rng);
        short |= idx.len() < per_class;
        chosen.extend(idx.into_iter().take(per_class));
    }
    chosen.sort_unstable();
    (chosen, short)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRepeat {
    pub repeat: usize,
    pub seed: u64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub train_utterances: usize,
    /// Some class had fewer examples than requested; all of them were used.
    pub truncated: bool,
    pub subset: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurvePoint {
    /// Examples per class.
    pub size: usize,
    pub repeats: Vec<CurveRepeat>,
    pub mean_micro_f1: f64,
    pub std_micro_f1: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveOptions {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub class_key: ClassKey,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions {
            sizes: vec![1, 2, 4, 8, 16],
            repeats: 3,
            seed: 1,
            class_key: ClassKey::Action,
        }
    }
}

/// Seed of repeat `r`; with the size it fixes the subset and the head init.
pub fn repeat_seed(root: u64, repeat: usize) -> u64 {
    derive_seed(root, "curve-repeat", repeat as u64)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// For every size and repeat: sample a per-class subset of `pool`, train a
/// fresh head, score it on `test`. Cells run in parallel.
pub fn learning_curve(
    pool: &[SluExample],
    test: &[SluExample],
    schema: &IntentSchema,
    slu_cfg: &SluConfig,
    layer: LayerId,
    train_cfg: &TrainConfig,
    opts: &CurveOptions,
) -> Result<Vec<LearningCurvePoint>> {
    if opts.sizes.is_empty() || opts.repeats == 0 {
        return Err(Error::Config("learning curve needs at least one size and one repeat".into()));
    }
    if opts.sizes.contains(&0) {
        return Err(Error::Config("learning-curve sizes must be positive".into()));
    }
    let pool_ids: std::collections::HashSet<&str> = pool.iter().map(|e| e.id.as_str()).collect();
    if test.iter().any(|e| pool_ids.contains(e.id.as_str())) {
        return Err(Error::Data("test split overlaps the training pool".into()));
    }
    let intents: Vec<Intent> = pool.iter().map(|e| e.intent.clone()).collect();
    let cells: Vec<(usize, usize)> = opts
        .sizes
        .iter()
        .flat_map(|&s| (0..opts.repeats).map(move |r| (s, r)))
        .collect();
    let results = par_map(&cells, |&(size, r)| -> Result<CurveRepeat> {
        let seed = repeat_seed(opts.seed, r);
        let (idx, truncated) = sample_per_class(&intents, size, opts.class_key, derive_seed(seed, "size", size as u64));
        if truncated {
            log::warn!("size {size}: some classes have fewer examples; using all of them");
        }
        let subset: Vec<SluExample> = idx.iter().map(|&i| pool[i].clone()).collect();
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let out = train_slu(&subset, &[], schema, slu_cfg, layer, false, &cfg)?;
        let report = evaluate_slu(&out.model, test, None)?;
        Ok(CurveRepeat {
            repeat: r,
            seed,
            micro_f1: report.micro_f1,
            accuracy: report.accuracy,
            train_utterances: subset.len(),
            truncated,
            subset: subset.iter().map(|e| e.id.clone()).collect(),
        })
    });
    let mut results = results.into_iter();
    let mut points = Vec::new();
    for &size in &opts.sizes {
        let repeats: Vec<CurveRepeat> = results.by_ref().take(opts.repeats).collect::<Result<_>>()?;
        let f1: Vec<f64> = repeats.iter().map(|r| r.micro_f1).collect();
        let acc: Vec<f64> = repeats.iter().map(|r| r.accuracy).collect();
        let (mean_micro_f1, std_micro_f1) = mean_std(&f1);
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        points.push(LearningCurvePoint {
            size,
            repeats,
            mean_micro_f1,
            std_micro_f1,
            mean_accuracy,
            std_accuracy,
        });
    }
    for w in points.windows(2) {
        if w[1].mean_micro_f1 + w[1].std_micro_f1 < w[0].mean_micro_f1 {
            log::warn!(
                "learning curve dips: size {} F1 {:.3} < size {} F1 {:.3}",
                w[1].size,
                w[1].mean_micro_f1,
                w[0].size,
                w[0].mean_micro_f1
            );
        }
    }
    Ok(points)
}

pub fn curve_csv(points: &[LearningCurvePoint]) -> String {
    let mut s = String::from("size,repeat,seed,micro_f1,accuracy\n");
    for p in points {
        for r in &p.repeats {
            writeln!(s, "{},{},{},{:.6},{:.6}", p.size, r.repeat, r.seed, r.micro_f1, r.accuracy).unwrap();
        }
    }
    s
}

#[derive(Serialize)]
struct CurveDocument<'a> {
    schema_version: u32,
    options: &'a CurveOptions,
    points: &'a [LearningCurvePoint],
}

/// Writes `curve.csv`, `curve.json` and one audit manifest per cell under
/// `subsets/`.
pub fn write_curve(
    dir: &Path,
    points: &[LearningCurvePoint],
    opts: &CurveOptions,
    entries: &BTreeMap<String, ManifestEntry>,
) -> Result<()> {
    let sub = dir.join("subsets");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let csv = dir.join("curve.csv");
    fs::write(&csv, curve_csv(points)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("curve.json");
    let doc = CurveDocument {
        schema_version: REPORT_SCHEMA_VERSION,
        options: opts,
        points,
    };
    fs::write(&json, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&json, e))?;
    for p in points {
        for r in &p.repeats {
            let rows: Vec<&ManifestEntry> = r.subset.iter().filter_map(|id| entries.get(id)).collect();
            write_manifest(&sub.join(format!("size{}_repeat{}.jsonl", p.size, r.repeat)), rows)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationIndexEntry {
    pub layer: LayerId,
    pub shape: Vec<usize>,
    pub token_string: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<Intent>,
}

/// Mean over positions, one vector per sequence.
pub fn mean_pool(reprs: &Tensor<f32>) -> Vec<f32> {
    let rows = reprs.rows();
    let mut acc = vec![0f64; reprs.cols()];
    for r in 0..rows {
        for (a, &v) in acc.iter_mut().zip(reprs.row(r)) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|a| (a / rows as f64) as f32).collect()
}

/// Writes the `[L, d]` sequences (or, with `pool`, their `[1, d]` means) to
/// `<stem>.bin` and the per-utterance index to `<stem>.json`.
pub fn export_representations(
    dir: &Path,
    stem: &str,
    examples: &[SluExample],
    layer: LayerId,
    pool: bool,
) -> Result<BTreeMap<String, RepresentationIndexEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = BTreeMap::new();
    let mut tensors = Vec::with_capacity(examples.len());
    for ex in examples {
        let t = if pool {
            let m = mean_pool(&ex.reprs);
            Tensor::new(&[1, m.len()], m)?
        } else {
            ex.reprs.clone()
        };
        if index.contains_key(&ex.id) {
            return Err(Error::Data(format!("duplicate utterance id {}", ex.id)));
        }
        index.insert(
            ex.id.clone(),
            RepresentationIndexEntry {
                layer,
                shape: t.shape().to_vec(),
                token_string: ex.tokens.join(" "),
                intent: Some(ex.intent.clone()),
            },
        );
        tensors.push((ex.id.as_str(), t));
    }
    let archive = dir.join(format!("{stem}.bin"));
    write_archive(&archive, &index, tensors.iter().map(|(n, t)| (*n, t)))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&json, e))?;
    Ok(index)
}

/// Per-utterance class-attention report with the structured prediction.
pub fn attention_report(slu: &SluModel, example: &SluExample) -> Result<AttentionReport> {
    let (logits, attention) = slu.head.predict(&slu.store, &example.reprs)?;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let (_, prediction) = enforce_structure(&probs, &slu.meta.schema)?;
    AttentionReport::new(&example.id, &example.tokens, prediction, &attention, None)
}

/// Writes `<id>.json` and `<id>.svg` for every example.
pub fn export_attention(dir: &Path, slu: &SluModel, examples: &[SluExample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ex in examples {
        let report = attention_report(slu, ex)?;
        let stem: String = ex
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
        let svg = dir.join(format!("{stem}.svg"));
        fs::write(&svg, report.to_svg()).map_err(|e| Error::io(&svg, e))?;
    }
    Ok(())
}

/// ASR token error rate of a backbone's greedy (or refined) output.
pub fn backbone_ter(backbone: &Backbone, utts: &[crate::features::Utterance], max_iter: usize) -> Result<f64> {
    let pairs: Vec<Result<(Vec<String>, Vec<String>)>> = par_map(utts, |u| {
        let rec = backbone.recognize(&u.features, max_iter)?;
        Ok((backbone.vocab.decode(rec.tokens()), u.entry.tokens()))
    });
    let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    token_error_rate(&hyps, &refs)
}
