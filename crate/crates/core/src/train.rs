//! Optimisation: hybrid CTC + masked-LM pretraining, frozen SLU training and
//! partial fine-tuning.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    param_tensors, write_archive, Checkpoint, CheckpointMeta, SluMeta, SluModel,
};
use crate::ctc::{greedy_decode, MaskedHypothesis, Vocabulary};
use crate::decoder::mlm_corrupt;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{intent_accuracy, token_error_rate};
use crate::features::{FeatureStats, Intent, MelConfig, Utterance};
use crate::model::{Backbone, LayerId, SpeechModel, CONFIDENCE_THRESHOLD};
use crate::nn::{Graph, Grads, ParamStore, Tensor, Var};
use crate::par::par_map;
use crate::rng::{derive_seed, substream};
use crate::slu::{enforce_structure, sigmoid, ClassAttentionHead, IntentSchema, SluConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// CTC weight in the hybrid loss.
    pub rho: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub peak_lr: f64,
    /// Noam warmup; 0 keeps the learning rate constant at `peak_lr`.
    pub warmup_steps: u64,
    pub smoothing: f64,
    pub seed: u64,
    /// Parameter-name prefixes held fixed.
    pub freeze: Vec<String>,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Masked-LM loss over every position instead of the masked ones.
    pub loss_all_positions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            rho: 0.3,
            epochs: 200,
            batch_size: 32,
            accum_steps: 8,
            peak_lr: 0.4,
            warmup_steps: 25_000,
            smoothing: 0.1,
            seed: 1,
            freeze: Vec::new(),
            early_stop_patience: 0,
            loss_all_positions: false,
        }
    }

    pub fn slu() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 512,
            accum_steps: 1,
            peak_lr: 0.005,
            warmup_steps: 0,
            freeze: vec!["encoder.".into(), "ctc.".into(), "decoder.".into()],
            early_stop_patience: 10,
            ..TrainConfig::pretrain()
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            peak_lr: 1e-4,
            early_stop_patience: 5,
            freeze: Vec::new(),
            ..TrainConfig::slu()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Config("epochs, batch_size and accum_steps must be positive".into()));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1]", self.smoothing)));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if self.warmup_steps == 0 {
            Ok(self.peak_lr)
        } else {
            noam_lr(step, self.warmup_steps, self.peak_lr)
        }
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.freeze.iter().any(|p| name.starts_with(p.as_str()))
    }
}

pub fn hybrid_loss(l_ctc: f64, l_dec: f64, rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside [0, 1]")));
    }
    Ok(rho * l_ctc + (1.0 - rho) * l_dec)
}

/// Linear warmup to `peak` at `warmup`, then inverse-square-root decay.
pub fn noam_lr(step: u64, warmup: u64, peak: f64) -> Result<f64> {
    if step < 1 || warmup < 1 {
        return Err(Error::InvalidArgument("noam_lr needs step >= 1 and warmup >= 1".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(peak * (s / w).min((w / s).sqrt()))
}

/// Adam with bias correction; moments are kept per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Vec<f32>>>,
    v: Vec<Option<Vec<f32>>>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    /// Applies one update to the trainable parameters. A non-finite gradient
    /// skips the whole step and returns `false`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64) -> bool {
        if !grads.all_finite() {
            log::warn!("non-finite gradient; skipping optimizer step {}", self.step + 1);
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi as f64 / c1;
                let vh = *vi as f64 / c2;
                *w -= (lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
        true
    }

    /// Moment tensors named `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (id, p) in store.iter() {
            let i = id.index();
            if let (Some(m), Some(v)) = (&self.m[i], &self.v[i]) {
                let shape = p.value.shape();
                out.push((format!("adam.m.{}", p.name), Tensor::new(shape, m.clone()).expect("shape")));
                out.push((format!("adam.v.{}", p.name), Tensor::new(shape, v.clone()).expect("shape")));
            }
        }
        out
    }

    pub fn restore(store: &ParamStore<f32>, ckpt: &Checkpoint) -> Self {
        let mut adam = Adam::new(store.len());
        adam.step = ckpt.meta.step;
        for (id, p) in store.iter() {
            if let (Some(m), Some(v)) = (
                ckpt.get(&format!("adam.m.{}", p.name)),
                ckpt.get(&format!("adam.v.{}", p.name)),
            ) {
                adam.m[id.index()] = Some(m.data().to_vec());
                adam.v[id.index()] = Some(v.data().to_vec());
            }
        }
        adam
    }
}

/// Normalised features and target ids for one transcribed utterance.
#[derive(Clone, Debug)]
pub struct AsrExample {
    pub id: String,
    pub features: Tensor<f32>,
    pub target: Vec<usize>,
}

pub fn asr_examples(utts: &[Utterance], vocab: &Vocabulary, stats: &FeatureStats) -> Result<Vec<AsrExample>> {
    utts.iter()
        .map(|u| {
            let target = vocab.encode(&u.entry.tokens()).map_err(|e| {
                Error::Data(format!("{}: {e} (vocabulary mismatch)", u.entry.id))
            })?;
            if target.is_empty() {
                return Err(Error::Data(format!("{}: empty transcript", u.entry.id)));
            }
            Ok(AsrExample {
                id: u.entry.id.clone(),
                features: stats.normalize(&u.features)?,
                target,
            })
        })
        .collect()
}

/// Loss components of one utterance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UtteranceLoss {
    /// Length-normalised CTC loss; `None` when the target cannot be aligned.
    pub ctc: Option<f64>,
    pub mlm: f64,
    pub total: f64,
}

/// Hybrid loss and gradients of one utterance. `item_seed` keys the dropout
/// masks and the masked-LM corruption.
pub fn utterance_step(
    model: &SpeechModel,
    store: &ParamStore<f32>,
    ex: &AsrExample,
    cfg: &TrainConfig,
    item_seed: u64,
) -> Result<(UtteranceLoss, Grads<f32>)> {
    let mut g = Graph::training(store, derive_seed(item_seed, "dropout", 0));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(item_seed, "mask", 0));
    let enc = model.encode(&mut g, &ex.features)?;
    let lp = model.ctc_log_probs(&mut g, enc.h_enc)?;
    let ctc = match g.ctc_loss(lp, &ex.target)? {
        Some(v) => Some(g.scale(v, 1.0 / ex.target.len() as f32)),
        None => {
            log::warn!("{}: target longer than the subsampled input; CTC term skipped", ex.id);
            None
        }
    };
    let (hyp, masked) = mlm_corrupt(&ex.target, &mut mask_rng)?;
    let positions: Vec<usize> = if cfg.loss_all_positions {
        (0..ex.target.len()).collect()
    } else {
        masked
    };
    let dec = model.decode(&mut g, &hyp.tokens, enc.h_enc)?;
    let mlm = g.mlm_loss(dec.logits, &ex.target, &positions, cfg.smoothing)?;
    let rho = cfg.rho as f32;
    let mut terms: Vec<(Var, f32)> = vec![(mlm, 1.0 - rho)];
    if let Some(c) = ctc {
        terms.push((c, rho));
    }
    let total = g.weighted_sum(&terms)?;
    let loss = UtteranceLoss {
        ctc: ctc.map(|c| g.value(c).data()[0] as f64),
        mlm: g.value(mlm).data()[0] as f64,
        total: g.value(total).data()[0] as f64,
    };
    Ok((loss, g.backward(total)?))
}

/// Per-utterance losses and the summed gradient over a batch, reduced in
/// item order so the result does not depend on thread scheduling.
fn batch_step(
    model: &SpeechModel,
    store: &ParamStore<f32>,
    batch: &[(&AsrExample, u64)],
    cfg: &TrainConfig,
) -> Result<(Vec<UtteranceLoss>, Grads<f32>)> {
    let results = par_map(batch, |(ex, seed)| utterance_step(model, store, ex, cfg, *seed));
    let mut sum = Grads::new(store.len());
    let mut losses = Vec::with_capacity(batch.len());
    for r in results {
        let (l, g) = r?;
        losses.push(l);
        sum.accumulate(g);
    }
    Ok((losses, sum))
}

/// Mean gradient over one optimizer step's utterances, computed in
/// micro-batches of `batch_size` and accumulated.
pub fn effective_batch_gradient(
    model: &SpeechModel,
    store: &ParamStore<f32>,
    items: &[(&AsrExample, u64)],
    cfg: &TrainConfig,
) -> Result<(Vec<UtteranceLoss>, Grads<f32>)> {
    let mut grads = Grads::new(store.len());
    let mut losses = Vec::with_capacity(items.len());
    for micro in items.chunks(cfg.batch_size) {
        let (l, g) = batch_step(model, store, micro, cfg)?;
        losses.extend(l);
        grads.accumulate(g);
    }
    grads.scale(1.0 / items.len().max(1) as f32);
    Ok((losses, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ctc: f64,
    pub mlm: f64,
    pub ter: f64,
    pub skipped_ctc: usize,
    pub seconds: f64,
}

pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation TER.
    pub best: Backbone,
    pub best_epoch: usize,
    pub best_ter: f64,
    pub history: Vec<EpochRecord>,
}

/// Greedy-decode token error rate of `backbone` on prepared examples.
pub fn validation_ter(model: &SpeechModel, store: &ParamStore<f32>, examples: &[AsrExample]) -> Result<f64> {
    let hyps: Vec<Result<Vec<usize>>> = par_map(examples, |ex| {
        let mut g = Graph::new(store);
        let enc = model.encode(&mut g, &ex.features)?;
        let lp = model.ctc_log_probs(&mut g, enc.h_enc)?;
        Ok(greedy_decode(g.value(lp)).tokens)
    });
    let hyps: Vec<Vec<usize>> = hyps.into_iter().collect::<Result<_>>()?;
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    token_error_rate(&hyps, &refs)
}

/// Vocabulary of every word in the transcripts.
pub fn build_vocabulary(utts: &[Utterance]) -> Result<Vocabulary> {
    let mut words: Vec<String> = utts.iter().flat_map(|u| u.entry.tokens()).collect();
    words.sort();
    words.dedup();
    if words.is_empty() {
        return Err(Error::Data("no transcribed tokens to build a vocabulary from".into()));
    }
    Vocabulary::new(&words)
}

/// Hybrid CTC + masked-LM pretraining.
///
/// With `out_dir`, writes `metrics.jsonl` (one line per epoch), `best.ckpt`
/// and `last.ckpt` (the latter with optimizer state, for `resume`).
pub fn pretrain(
    train: &[Utterance],
    valid: &[Utterance],
    model_cfg: &ModelConfig,
    mel: &MelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training manifest".into()));
    }
    if valid.is_empty() {
        return Err(Error::Data("empty validation manifest".into()));
    }
    let (mut backbone, mut adam, start_epoch, mut best_ter, mut best_epoch) = match resume {
        Some(ck) => {
            let bb = Backbone::from_checkpoint(ck)?;
            let adam = Adam::restore(&bb.store, ck);
            let best = ck.meta.metrics.get("best_ter").copied().unwrap_or(f64::INFINITY);
            let best_epoch = ck.meta.metrics.get("best_epoch").map_or(0, |&e| e as usize);
            (bb, adam, ck.meta.epoch + 1, best, best_epoch)
        }
        None => {
            let vocab = build_vocabulary(train)?;
            let stats = FeatureStats::compute(train.iter().map(|u| &u.features))?;
            let cfg_m = ModelConfig {
                vocab: vocab.len(),
                mel_bins: mel.mel_bins,
                ..model_cfg.clone()
            };
            if model_cfg.vocab != cfg_m.vocab {
                log::info!("model vocabulary sized to {} symbols from the transcripts", vocab.len());
            }
            let (model, store) = SpeechModel::init::<f32>(&cfg_m, cfg.seed)?;
            let adam = Adam::new(store.len());
            (Backbone::new(model, store, vocab, stats, *mel)?, adam, 1, f64::INFINITY, 0)
        }
    };
    backbone.store.set_trainable(|n| !cfg.is_frozen(n));
    let train_ex = asr_examples(train, &backbone.vocab, &backbone.stats)?;
    let valid_ex = asr_examples(valid, &backbone.vocab, &backbone.stats)?;
    let mut best = backbone.clone();
    let mut history = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let effective = cfg.batch_size * cfg.accum_steps;
    for epoch in start_epoch..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        order.shuffle(&mut substream(derive_seed(cfg.seed, "shuffle", epoch as u64), "order"));
        let (mut sum_loss, mut sum_ctc, mut sum_mlm) = (0.0, 0.0, 0.0);
        let (mut n_ctc, mut skipped) = (0usize, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(effective) {
            let items: Vec<(&AsrExample, u64)> = chunk
                .iter()
                .map(|&i| (&train_ex[i], derive_seed(cfg.seed, "item", (epoch as u64) << 32 | i as u64)))
                .collect();
            let (losses, grads) = effective_batch_gradient(&backbone.model, &backbone.store, &items, cfg)?;
            for l in losses {
                sum_loss += l.total;
                sum_mlm += l.mlm;
                match l.ctc {
                    Some(c) => {
                        sum_ctc += c;
                        n_ctc += 1;
                    }
                    None => skipped += 1,
                }
            }
            lr = cfg.lr(adam.step + 1)?;
            adam.step(&mut backbone.store, &grads, lr);
        }
        let ter = validation_ter(&backbone.model, &backbone.store, &valid_ex)?;
        let n = train_ex.len() as f64;
        let rec = EpochRecord {
            epoch,
            step: adam.step,
            lr,
            loss: sum_loss / n,
            ctc: if n_ctc > 0 { sum_ctc / n_ctc as f64 } else { f64::NAN },
            mlm: sum_mlm / n,
            ter,
            skipped_ctc: skipped,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} ctc {:.4} mlm {:.4} ter {:.4} lr {:.2e}",
            rec.loss,
            rec.ctc,
            rec.mlm,
            rec.ter,
            rec.lr
        );
        if ter < best_ter {
            best_ter = ter;
            best_epoch = epoch;
            best = backbone.clone();
        }
        if let Some(dir) = out_dir {
            append_jsonl(&dir.join("metrics.jsonl"), &rec)?;
            let mut metrics = BTreeMap::from([
                ("loss".to_string(), rec.loss),
                ("ter".to_string(), ter),
                ("best_ter".to_string(), best_ter),
                ("best_epoch".to_string(), best_epoch as f64),
            ]);
            let train_json = serde_json::to_value(cfg)?;
            let meta = CheckpointMeta {
                backbone: Some(backbone.meta()),
                slu: None,
                train: Some(train_json.clone()),
                epoch,
                step: adam.step,
                metrics: metrics.clone(),
            };
            let state = adam.state_tensors(&backbone.store);
            write_archive(
                &dir.join("last.ckpt"),
                &meta,
                param_tensors(&backbone.store).chain(state.iter().map(|(n, t)| (n.as_str(), t))),
            )?;
            if best_epoch == epoch {
                metrics.insert("ter".into(), ter);
                write_archive(
                    &dir.join("best.ckpt"),
                    &CheckpointMeta {
                        backbone: Some(best.meta()),
                        train: Some(train_json),
                        metrics,
                        ..meta
                    },
                    param_tensors(&best.store),
                )?;
            }
        }
        history.push(rec);
    }
    if best_ter.is_infinite() {
        best = backbone;
    }
    Ok(PretrainOutcome {
        best,
        best_epoch,
        best_ter,
        history,
    })
}

/// Appends one JSON document as a line.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Input to the intent head: one representation sequence and its label.
#[derive(Clone, Debug)]
pub struct SluExample {
    pub id: String,
    pub reprs: Tensor<f32>,
    pub tokens: Vec<String>,
    pub intent: Intent,
    pub target: Vec<u8>,
}

/// Extracts `layer` representations for every utterance with the frozen
/// backbone; `target` is left empty.
pub fn representations(backbone: &Backbone, utts: &[Utterance], layer: LayerId, refine: bool) -> Result<Vec<SluExample>> {
    par_map(utts, |u| {
        let r = backbone.extract(&u.features, layer, refine)?;
        Ok(SluExample {
            id: u.entry.id.clone(),
            tokens: backbone.vocab.decode(&r.tokens),
            reprs: r.vectors,
            intent: u.entry.intent.clone(),
            target: Vec::new(),
        })
    })
    .into_iter()
    .collect()
}

/// [`representations`] with multi-hot targets from `schema`.
pub fn slu_examples(
    backbone: &Backbone,
    utts: &[Utterance],
    schema: &IntentSchema,
    layer: LayerId,
    refine: bool,
) -> Result<Vec<SluExample>> {
    let targets = utts
        .iter()
        .map(|u| {
            schema
                .encode(&u.entry.intent)
                .map_err(|e| Error::Data(format!("{}: {e} (schema mismatch)", u.entry.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ex = representations(backbone, utts, layer, refine)?;
    for (e, t) in ex.iter_mut().zip(targets) {
        e.target = t;
    }
    Ok(ex)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SluEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub valid_accuracy: f64,
    pub valid_loss: f64,
}

pub struct SluOutcome {
    pub model: SluModel,
    pub best_epoch: usize,
    pub history: Vec<SluEpochRecord>,
}

/// Structured predictions and mean BCE of a head over examples.
pub fn slu_predict(
    head: &ClassAttentionHead,
    store: &ParamStore<f32>,
    schema: &IntentSchema,
    examples: &[SluExample],
) -> Result<(Vec<Intent>, f64)> {
    let out: Vec<Result<(Intent, f64)>> = par_map(examples, |ex| {
        let (logits, _) = head.predict(store, &ex.reprs)?;
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let (_, intent) = enforce_structure(&probs, schema)?;
        let (loss, _) = crate::slu::bce_loss(&logits, &ex.target)?;
        Ok((intent, loss))
    });
    let mut preds = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    for r in out {
        let (p, l) = r?;
        preds.push(p);
        loss += l;
    }
    Ok((preds, loss / examples.len().max(1) as f64))
}

fn accuracy_of(preds: &[Intent], examples: &[SluExample]) -> Result<f64> {
    let refs: Vec<Intent> = examples.iter().map(|e| e.intent.clone()).collect();
    intent_accuracy(preds, &refs)
}

/// Trains a fresh class-attention head on frozen representations with
/// early stopping on validation accuracy (training accuracy when `valid`
/// is empty). Returns the best epoch's parameters.
pub fn train_slu(
    train: &[SluExample],
    valid: &[SluExample],
    schema: &IntentSchema,
    slu_cfg: &SluConfig,
    layer: LayerId,
    refine: bool,
    cfg: &TrainConfig,
) -> Result<SluOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no SLU training examples".into()));
    }
    let input_dim = train[0].reprs.cols();
    let slu_cfg = SluConfig {
        input_dim,
        ..slu_cfg.clone()
    };
    let (head, mut store) = ClassAttentionHead::init::<f32>(&slu_cfg, schema.num_bits(), cfg.seed)?;
    let mut adam = Adam::new(store.len());
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_store = store.clone();
    let mut best_epoch = 0;
    let mut since = 0;
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(derive_seed(cfg.seed, "slu-shuffle", epoch as u64), "order"));
        let mut sum_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let results = par_map(chunk, |&i| -> Result<(f64, Grads<f32>)> {
                let mut g = Graph::new(&store);
                let x = g.input(train[i].reprs.clone());
                let out = head.forward(&mut g, x, None)?;
                let loss = g.bce_loss(out.logits, &train[i].target)?;
                Ok((g.value(loss).data()[0] as f64, g.backward(loss)?))
            });
            let mut grads = Grads::new(store.len());
            for r in results {
                let (l, g) = r?;
                sum_loss += l;
                grads.accumulate(g);
            }
            grads.scale(1.0 / chunk.len() as f32);
            let lr = cfg.lr(adam.step + 1)?;
            adam.step(&mut store, &grads, lr);
        }
        let (train_preds, _) = slu_predict(&head, &store, schema, train)?;
        let train_acc = accuracy_of(&train_preds, train)?;
        let (valid_acc, valid_loss) = if valid.is_empty() {
            (train_acc, sum_loss / train.len() as f64)
        } else {
            let (p, l) = slu_predict(&head, &store, schema, valid)?;
            (accuracy_of(&p, valid)?, l)
        };
        history.push(SluEpochRecord {
            epoch,
            loss: sum_loss / train.len() as f64,
            train_accuracy: train_acc,
            valid_accuracy: valid_acc,
            valid_loss,
        });
        // Patience tracks accuracy; equal accuracy at lower loss still
        // refreshes the kept parameters.
        let improved = valid_acc > best.0;
        if improved || (valid_acc == best.0 && valid_loss < best.1) {
            best = (valid_acc, valid_loss);
            best_store = store.clone();
            best_epoch = epoch;
        }
        if improved {
            since = 0;
        } else {
            since += 1;
            if cfg.early_stop_patience > 0 && since >= cfg.early_stop_patience {
                log::info!("early stop after epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }
    Ok(SluOutcome {
        model: SluModel {
            head,
            store: best_store,
            meta: SluMeta {
                config: slu_cfg,
                schema: schema.clone(),
                layer,
                refine,
            },
        },
        best_epoch,
        history,
    })
}

/// Which backbone parameters fine-tuning may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Unfreeze {
    /// The last `n` decoder blocks.
    DecoderLast(usize),
    /// Every decoder parameter.
    Decoder,
    /// Decoder and encoder; needs an explicit override.
    All,
    /// Head only.
    None,
}

impl std::str::FromStr for Unfreeze {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(Unfreeze::Decoder),
            "encoder" | "all" => Ok(Unfreeze::All),
            "none" => Ok(Unfreeze::None),
            _ => s
                .strip_prefix("decoder_last")
                .and_then(|n| n.parse().ok())
                .map(Unfreeze::DecoderLast)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown unfreeze spec `{s}` (decoder_lastN, decoder, encoder, none)"
                    ))
                }),
        }
    }
}

impl Unfreeze {
    pub fn trainable(&self, name: &str, cfg: &ModelConfig) -> bool {
        match self {
            Unfreeze::None => false,
            Unfreeze::All => !name.starts_with("ctc."),
            Unfreeze::Decoder => name.starts_with("decoder."),
            Unfreeze::DecoderLast(n) => {
                let first = cfg.dec_layers.saturating_sub(*n);
                (first..cfg.dec_layers).any(|i| name.starts_with(&format!("decoder.layers.{i}.")))
            }
        }
    }
}

pub struct FinetuneOutcome {
    pub backbone: Backbone,
    pub slu: SluModel,
    pub best_epoch: usize,
    pub history: Vec<SluEpochRecord>,
}

struct FinetuneExample {
    features: Tensor<f32>,
    memory: Tensor<f32>,
    template: MaskedHypothesis,
    target: Vec<u8>,
    intent: Intent,
}

/// Jointly updates the SLU head and the unfrozen backbone layers with one
/// decoder pass per utterance. The encoder stays frozen unless
/// `allow_encoder` is set together with [`Unfreeze::All`].
pub fn finetune(
    backbone: &Backbone,
    slu: &SluModel,
    train: &[Utterance],
    valid: &[Utterance],
    unfreeze: &Unfreeze,
    allow_encoder: bool,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if *unfreeze == Unfreeze::All && !allow_encoder {
        return Err(Error::Config(
            "unfreezing the encoder degrades it; pass the explicit override to proceed".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Data("no fine-tuning examples".into()));
    }
    let layer = match slu.meta.layer {
        LayerId::Decoder(i) => i,
        LayerId::Encoder(_) => {
            return Err(Error::Config("fine-tuning needs an SLU head on decoder representations".into()))
        }
    };
    let schema = &slu.meta.schema;
    let model_cfg = backbone.model.cfg.clone();
    // One joint store: backbone parameters followed by the head's.
    let mut store = backbone.store.clone();
    let mut rng = substream(0, "unused");
    let head = ClassAttentionHead::new(&mut store, &slu.meta.config, schema.num_bits(), &mut rng)?;
    for (_, p) in slu.store.iter() {
        let id = store.id(&p.name).expect("same construction");
        store.get_mut(id).value = p.value.clone();
    }
    store.set_trainable(|n| n.starts_with("slu.") || unfreeze.trainable(n, &model_cfg));
    let encoder_trainable = store.iter().any(|(_, p)| p.trainable && p.name.starts_with("encoder."));

    let prep = |utts: &[Utterance]| -> Result<Vec<FinetuneExample>> {
        par_map(utts, |u| {
            let target = schema
                .encode(&u.entry.intent)
                .map_err(|e| Error::Data(format!("{}: {e} (schema mismatch)", u.entry.id)))?;
            let features = backbone.prepare(&u.features)?;
            let mut g = Graph::new(&backbone.store);
            let enc = backbone.model.encode(&mut g, &features)?;
            let lp = backbone.model.ctc_log_probs(&mut g, enc.h_enc)?;
            let greedy = greedy_decode(g.value(lp));
            let template = if greedy.tokens.is_empty() {
                MaskedHypothesis::all_masked(1)
            } else {
                crate::ctc::mask_low_confidence(&greedy.tokens, &greedy.confidence, CONFIDENCE_THRESHOLD)?
            };
            Ok(FinetuneExample {
                memory: g.value(enc.h_enc).clone(),
                features,
                template,
                target,
                intent: u.entry.intent.clone(),
            })
        })
        .into_iter()
        .collect()
    };
    let train_ex = prep(train)?;
    let valid_ex = prep(valid)?;
    let model = &backbone.model;

    let forward = |g: &mut Graph<'_, f32>, ex: &FinetuneExample| -> Result<Var> {
        let memory = if encoder_trainable {
            model.encode(g, &ex.features)?.h_enc
        } else {
            g.input(ex.memory.clone())
        };
        let dec = model.decode(g, &ex.template.tokens, memory)?;
        Ok(head.forward(g, dec.layer_states[layer], None)?.logits)
    };
    let evaluate = |store: &ParamStore<f32>, exs: &[FinetuneExample]| -> Result<(f64, f64)> {
        let out: Vec<Result<(Intent, f64)>> = par_map(exs, |ex| {
            let mut g = Graph::new(store);
            let logits = forward(&mut g, ex)?;
            let z: Vec<f64> = g.value(logits).data().iter().map(|&v| v as f64).collect();
            let probs: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            let (loss, _) = crate::slu::bce_loss(&z, &ex.target)?;
            Ok((enforce_structure(&probs, schema)?.1, loss))
        });
        let mut correct = 0usize;
        let mut loss = 0.0;
        for (r, ex) in out.into_iter().zip(exs) {
            let (p, l) = r?;
            correct += (p == ex.intent) as usize;
            loss += l;
        }
        let n = exs.len().max(1) as f64;
        Ok((correct as f64 / n, loss / n))
    };

    let mut adam = Adam::new(store.len());
    let (acc0, loss0) = evaluate(&store, if valid_ex.is_empty() { &train_ex } else { &valid_ex })?;
    let mut best = (acc0, loss0);
    let mut best_store = store.clone();
    let mut best_epoch = 0;
    let mut since = 0;
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        order.shuffle(&mut substream(derive_seed(cfg.seed, "ft-shuffle", epoch as u64), "order"));
        let mut sum_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let results = par_map(chunk, |&i| -> Result<(f64, Grads<f32>)> {
                let seed = derive_seed(cfg.seed, "ft-item", (epoch as u64) << 32 | i as u64);
                let mut g = Graph::training(&store, seed);
                let logits = forward(&mut g, &train_ex[i])?;
                let loss = g.bce_loss(logits, &train_ex[i].target)?;
                Ok((g.value(loss).data()[0] as f64, g.backward(loss)?))
            });
            let mut grads = Grads::new(store.len());
            for r in results {
                let (l, g) = r?;
                sum_loss += l;
                grads.accumulate(g);
            }
            grads.scale(1.0 / chunk.len() as f32);
            let lr = cfg.lr(adam.step + 1)?;
            adam.step(&mut store, &grads, lr);
        }
        let (train_acc, _) = evaluate(&store, &train_ex)?;
        let (valid_acc, valid_loss) = if valid_ex.is_empty() {
            (train_acc, sum_loss / train_ex.len() as f64)
        } else {
            evaluate(&store, &valid_ex)?
        };
        history.push(SluEpochRecord {
            epoch,
            loss: sum_loss / train_ex.len() as f64,
            train_accuracy: train_acc,
            valid_accuracy: valid_acc,
            valid_loss,
        });
        // Patience tracks accuracy; equal accuracy at lower loss still
        // refreshes the kept parameters.
        let improved = valid_acc > best.0;
        if improved || (valid_acc == best.0 && valid_loss < best.1) {
            best = (valid_acc, valid_loss);
            best_store = store.clone();
            best_epoch = epoch;
        }
        if improved {
            since = 0;
        } else {
            since += 1;
            if cfg.early_stop_patience > 0 && since >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let mut bb = backbone.clone();
    let mut head_store = slu.store.clone();
    for (_, p) in best_store.iter() {
        let target = if p.name.starts_with("slu.") { &mut head_store } else { &mut bb.store };
        let id = target.id(&p.name).expect("shared names");
        target.get_mut(id).value = p.value.clone();
    }
    Ok(FinetuneOutcome {
        backbone: bb,
        slu: SluModel {
            head: slu.head.clone(),
            store: head_store,
            meta: slu.meta.clone(),
        },
        best_epoch,
        history,
    })
}
