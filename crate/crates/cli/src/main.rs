mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskslu::checkpoint::{load_checkpoint, save_model, SluModel};
use maskslu::eval::{
    backbone_ter, evaluate_slu, export_attention, export_representations, learning_curve,
    sample_per_class, write_curve, ClassKey, CurveOptions, EvalReport,
};
use maskslu::features::{generate_corpus, load_audio, load_corpus, log_mel, write_corpus, CommandGrammar, Utterance};
use maskslu::model::{Backbone, LayerId, MAX_REFINE_ITERS};
use maskslu::slu::IntentSchema;
use maskslu::train::{append_jsonl, finetune, pretrain, representations, slu_examples, train_slu, Unfreeze};
use maskslu::{Error, Result};
use serde::Serialize;

use crate::config::{extract_overrides, RunConfig};

/// Hybrid CTC + masked-LM speech encoder-decoder with a class-attention
/// intent head. Any config field can be overridden as `--section.key VALUE`.
#[derive(Parser, Debug)]
#[command(name = "maskslu", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded numerics (bit-exact reruns).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Write directly into --out instead of a fresh timestamped subdirectory.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic spoken-command corpus (WAVs + manifest.jsonl).
    Synth {
        /// Command grammar; the built-in robot-arm grammar when omitted.
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Hybrid CTC + masked-LM pretraining.
    Pretrain {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a `last.ckpt`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train an intent head on frozen backbone representations.
    TrainSlu {
        #[command(flatten)]
        data: SluData,
        /// Pretrained backbone checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample this many training utterances per class first.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long, value_enum, default_value = "action")]
        class_key: ClassKeyArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly update the intent head and the last backbone layers.
    Finetune {
        #[command(flatten)]
        data: SluData,
        /// Checkpoint holding a backbone and an intent head.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "decoder_last4")]
        unfreeze: String,
        /// Acknowledge that unfreezing the encoder degrades it.
        #[arg(long)]
        i_know: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Low-resource learning curve over per-class training sizes.
    Curve {
        /// Pool the training subsets are drawn from.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Comma-separated examples-per-class sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export representations or attention weights.
    Export {
        #[command(subcommand)]
        what: ExportKind,
    },
    /// Transcribe one audio file.
    Decode {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask-predict iterations; 0 disables refinement.
        #[arg(long, default_value_t = MAX_REFINE_ITERS)]
        max_iter: usize,
    },
}

#[derive(Subcommand, Debug)]
enum ExportKind {
    /// Mean-pooled utterance embeddings with a JSON index (for external projection).
    Embeddings {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: Option<LayerId>,
        /// Also write the full per-position sequences.
        #[arg(long)]
        sequences: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-attention weights per utterance as JSON + SVG.
    Attention {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only these utterance ids (comma-separated).
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SluData {
    /// Training manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Grammar file defining the intent schema; built-in grammar when omitted.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ClassKeyArg {
    Action,
    Combination,
}

impl From<ClassKeyArg> for ClassKey {
    fn from(k: ClassKeyArg) -> Self {
        match k {
            ClassKeyArg::Action => ClassKey::Action,
            ClassKeyArg::Combination => ClassKey::Combination,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = match extract_overrides(args) {
        Ok(x) => x,
        Err(e) => return fail(e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), overrides)?;
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx {
        cfg,
        overwrite: cli.overwrite,
    };
    match cli.cmd {
        Command::Synth { grammar, out, n, seed } => ctx.synth(grammar, &out, n, seed),
        Command::Pretrain { train, valid, out, resume } => ctx.pretrain(train, valid, &out, resume),
        Command::TrainSlu {
            data,
            checkpoint,
            per_class,
            class_key,
            out,
        } => ctx.train_slu(&data, &checkpoint, per_class, class_key.into(), &out),
        Command::Finetune {
            data,
            checkpoint,
            unfreeze,
            i_know,
            out,
        } => ctx.finetune(&data, &checkpoint, &unfreeze, i_know, &out),
        Command::Eval { manifest, checkpoint, out } => ctx.eval(&manifest, &checkpoint, out.as_deref()),
        Command::Curve {
            manifest,
            test,
            checkpoint,
            schema,
            sizes,
            repeats,
            seed,
            out,
        } => {
            let d = &ctx.cfg.curve;
            let opts = CurveOptions {
                sizes: sizes.unwrap_or_else(|| d.sizes.clone()),
                repeats: repeats.unwrap_or(d.repeats),
                seed: seed.unwrap_or(d.seed),
                class_key: d.class_key,
            };
            ctx.curve(&manifest, &test, &checkpoint, schema.as_deref(), &opts, &out)
        }
        Command::Export { what } => match what {
            ExportKind::Embeddings {
                manifest,
                checkpoint,
                layer,
                sequences,
                out,
            } => ctx.export_embeddings(&manifest, &checkpoint, layer, sequences, &out),
            ExportKind::Attention {
                manifest,
                checkpoint,
                ids,
                out,
            } => ctx.export_attention(&manifest, &checkpoint, ids, &out),
        },
        Command::Decode {
            audio,
            checkpoint,
            max_iter,
        } => ctx.decode(&audio, &checkpoint, max_iter),
    }
}

struct Ctx {
    cfg: RunConfig,
    overwrite: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn need(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("no {what} manifest (flag or paths.{what})")))
}

fn load_grammar(path: Option<&Path>) -> Result<CommandGrammar> {
    match path {
        None => Ok(CommandGrammar::grabo_like()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            CommandGrammar::parse(&text, &p.display().to_string())
        }
    }
}

fn load_checked(path: &Path) -> Result<maskslu::checkpoint::Checkpoint> {
    if !path.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", path.display())));
    }
    load_checkpoint(path)
}

impl Ctx {
    /// Resolves the output directory and records the configuration in it.
    fn out_dir(&self, out: &Path) -> Result<PathBuf> {
        let dir = if self.overwrite {
            out.to_path_buf()
        } else {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
            let mut dir = out.join(&stamp);
            let mut k = 1;
            while dir.exists() {
                dir = out.join(format!("{stamp}-{k}"));
                k += 1;
            }
            dir
        };
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let lock = dir.join("config.lock");
        fs::write(&lock, self.cfg.to_toml()).map_err(|e| Error::Io { path: lock, source: e })?;
        println!("{}", dir.display());
        Ok(dir)
    }

    fn schema_path<'a>(&'a self, flag: Option<&'a Path>) -> Option<&'a Path> {
        flag.or(self.cfg.paths.grammar.as_deref())
    }

    fn synth(&self, grammar: Option<PathBuf>, out: &Path, n: usize, seed: Option<u64>) -> Result<()> {
        let grammar = load_grammar(self.schema_path(grammar.as_deref()))?;
        let spec = self.cfg.synth.spec(&grammar.words());
        let items = generate_corpus(&grammar, &spec, n, seed.unwrap_or(self.cfg.seed))?;
        let dir = self.out_dir(out)?;
        let manifest = write_corpus(&dir, &items)?;
        log::info!("wrote {} utterances to {}", items.len(), manifest.display());
        Ok(())
    }

    fn load(&self, manifest: &Path, mel: &maskslu::features::MelConfig) -> Result<Vec<Utterance>> {
        let utts = load_corpus(manifest, mel)?;
        if utts.is_empty() {
            return Err(Error::Data(format!("{} is empty", manifest.display())));
        }
        Ok(utts)
    }

    fn pretrain(&self, train: Option<PathBuf>, valid: Option<PathBuf>, out: &Path, resume: Option<PathBuf>) -> Result<()> {
        let train = need(train.or(self.cfg.paths.train.clone()), "train")?;
        let valid = need(valid.or(self.cfg.paths.valid.clone()), "valid")?;
        let resume = resume.map(|p| load_checked(&p)).transpose()?;
        let mel = match &resume {
            Some(ck) => {
                let bb = ck.meta.backbone.as_ref().ok_or_else(|| Error::Format("resume checkpoint has no backbone".into()))?;
                if bb.mel != self.cfg.features || bb.model.d_model != self.cfg.model.d_model {
                    return Err(Error::Config("resume checkpoint conflicts with the configured features/model".into()));
                }
                bb.mel
            }
            None => self.cfg.features,
        };
        let train_u = self.load(&train, &mel)?;
        let valid_u = self.load(&valid, &mel)?;
        let dir = self.out_dir(out)?;
        let res = pretrain(&train_u, &valid_u, &self.cfg.model, &mel, &self.cfg.pretrain, Some(&dir), resume.as_ref())?;
        println!("best epoch {} validation TER {:.4}", res.best_epoch, res.best_ter);
        Ok(())
    }

    fn layer(&self, backbone: &Backbone) -> Result<LayerId> {
        let layer = self.cfg.extract.layer.unwrap_or_else(|| LayerId::default_for(&backbone.model.cfg));
        layer.check(&backbone.model.cfg)?;
        Ok(layer)
    }

    fn report(&self, dir: &Path, name: &str, backbone: &Backbone, slu: &SluModel, utts: &[Utterance]) -> Result<EvalReport> {
        let ex = slu_examples(backbone, utts, &slu.meta.schema, slu.meta.layer, slu.meta.refine)?;
        let ter = backbone_ter(backbone, utts, 0)?;
        let report = evaluate_slu(slu, &ex, Some(ter))?;
        write_json(&dir.join(name), &report)?;
        println!(
            "{name}: accuracy {:.4} micro-F1 {:.4} TER {:.4} ({} utterances)",
            report.accuracy, report.micro_f1, ter, report.num_utterances
        );
        Ok(report)
    }

    fn train_slu(&self, data: &SluData, checkpoint: &Path, per_class: Option<usize>, key: ClassKey, out: &Path) -> Result<()> {
        let backbone = Backbone::from_checkpoint(&load_checked(checkpoint)?)?;
        let schema = IntentSchema::from_grammar(&load_grammar(self.schema_path(data.schema.as_deref()))?)?;
        let layer = self.layer(&backbone)?;
        let refine = self.cfg.extract.refine;
        let mut train = self.load(&need(data.manifest.clone().or(self.cfg.paths.train.clone()), "train")?, &backbone.mel)?;
        if let Some(k) = per_class {
            let intents: Vec<_> = train.iter().map(|u| u.entry.intent.clone()).collect();
            let (idx, short) = sample_per_class(&intents, k, key, self.cfg.slu_train.seed);
            if short {
                log::warn!("some classes have fewer than {k} examples; using all of them");
            }
            train = idx.into_iter().map(|i| train[i].clone()).collect();
        }
        let valid = match data.valid.clone().or(self.cfg.paths.valid.clone()) {
            Some(p) => self.load(&p, &backbone.mel)?,
            None => Vec::new(),
        };
        let dir = self.out_dir(out)?;
        let tr = slu_examples(&backbone, &train, &schema, layer, refine)?;
        let va = slu_examples(&backbone, &valid, &schema, layer, refine)?;
        let res = train_slu(&tr, &va, &schema, &self.cfg.slu, layer, refine, &self.cfg.slu_train)?;
        for h in &res.history {
            append_jsonl(&dir.join("history.jsonl"), h)?;
        }
        let best = res.history.get(res.best_epoch.saturating_sub(1));
        let metrics = BTreeMap::from([("valid_accuracy".to_string(), best.map_or(0.0, |h| h.valid_accuracy))]);
        save_model(
            &dir.join("slu.ckpt"),
            &backbone,
            Some(&res.model),
            Some(serde_json::to_value(&self.cfg.slu_train)?),
            res.best_epoch,
            metrics,
        )?;
        if let Some(test) = data.test.clone().or(self.cfg.paths.test.clone()) {
            let test_u = self.load(&test, &backbone.mel)?;
            self.report(&dir, "report.json", &backbone, &res.model, &test_u)?;
        }
        Ok(())
    }

    fn finetune(&self, data: &SluData, checkpoint: &Path, unfreeze: &str, i_know: bool, out: &Path) -> Result<()> {
        let ck = load_checked(checkpoint)?;
        let backbone = Backbone::from_checkpoint(&ck)?;
        let slu = SluModel::from_checkpoint(&ck)?;
        if let Some(p) = self.schema_path(data.schema.as_deref()) {
            let schema = IntentSchema::from_grammar(&load_grammar(Some(p))?)?;
            if schema != slu.meta.schema {
                return Err(Error::Data("schema differs from the one the head was trained with".into()));
            }
        }
        let unfreeze: Unfreeze = unfreeze.parse()?;
        if unfreeze == Unfreeze::All && !i_know {
            return Err(Error::Config("--unfreeze encoder degrades the encoder; pass --i-know to proceed".into()));
        }
        let train = self.load(&need(data.manifest.clone().or(self.cfg.paths.train.clone()), "train")?, &backbone.mel)?;
        let valid = match data.valid.clone().or(self.cfg.paths.valid.clone()) {
            Some(p) => self.load(&p, &backbone.mel)?,
            None => Vec::new(),
        };
        let dir = self.out_dir(out)?;
        let res = finetune(&backbone, &slu, &train, &valid, &unfreeze, i_know, &self.cfg.finetune)?;
        for h in &res.history {
            append_jsonl(&dir.join("history.jsonl"), h)?;
        }
        save_model(
            &dir.join("finetuned.ckpt"),
            &res.backbone,
            Some(&res.slu),
            Some(serde_json::to_value(&self.cfg.finetune)?),
            res.best_epoch,
            BTreeMap::new(),
        )?;
        if let Some(test) = data.test.clone().or(self.cfg.paths.test.clone()) {
            let test_u = self.load(&test, &backbone.mel)?;
            self.report(&dir, "report.json", &res.backbone, &res.slu, &test_u)?;
        }
        Ok(())
    }

    fn eval(&self, manifest: &Path, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
        let ck = load_checked(checkpoint)?;
        let backbone = Backbone::from_checkpoint(&ck)?;
        let utts = self.load(manifest, &backbone.mel)?;
        if ck.meta.slu.is_none() {
            let ter = backbone_ter(&backbone, &utts, 0)?;
            let refined = backbone_ter(&backbone, &utts, MAX_REFINE_ITERS)?;
            println!("TER greedy {ter:.4} refined {refined:.4} ({} utterances)", utts.len());
            if let Some(o) = out {
                let dir = self.out_dir(o)?;
                write_json(&dir.join("report.json"), &serde_json::json!({
                    "schema_version": maskslu::eval::REPORT_SCHEMA_VERSION,
                    "num_utterances": utts.len(),
                    "ter": ter,
                    "ter_refined": refined,
                }))?;
            }
            return Ok(());
        }
        let slu = SluModel::from_checkpoint(&ck)?;
        match out {
            Some(o) => {
                let dir = self.out_dir(o)?;
                self.report(&dir, "report.json", &backbone, &slu, &utts)?;
            }
            None => {
                let ex = slu_examples(&backbone, &utts, &slu.meta.schema, slu.meta.layer, slu.meta.refine)?;
                let r = evaluate_slu(&slu, &ex, Some(backbone_ter(&backbone, &utts, 0)?))?;
                println!(
                    "accuracy {:.4} micro-F1 {:.4} TER {:.4} ({} utterances)",
                    r.accuracy,
                    r.micro_f1,
                    r.ter.unwrap_or(f64::NAN),
                    r.num_utterances
                );
            }
        }
        Ok(())
    }

    fn curve(&self, manifest: &Path, test: &Path, checkpoint: &Path, schema: Option<&Path>, opts: &CurveOptions, out: &Path) -> Result<()> {
        let backbone = Backbone::from_checkpoint(&load_checked(checkpoint)?)?;
        let schema = IntentSchema::from_grammar(&load_grammar(self.schema_path(schema))?)?;
        let layer = self.layer(&backbone)?;
        let pool_u = self.load(manifest, &backbone.mel)?;
        let test_u = self.load(test, &backbone.mel)?;
        let dir = self.out_dir(out)?;
        let pool = slu_examples(&backbone, &pool_u, &schema, layer, self.cfg.extract.refine)?;
        let test_ex = slu_examples(&backbone, &test_u, &schema, layer, self.cfg.extract.refine)?;
        let points = learning_curve(&pool, &test_ex, &schema, &self.cfg.slu, layer, &self.cfg.slu_train, opts)?;
        let entries = pool_u.iter().map(|u| (u.entry.id.clone(), u.entry.clone())).collect();
        write_curve(&dir, &points, opts, &entries)?;
        for p in &points {
            println!(
                "size {:>3}: micro-F1 {:.4} +- {:.4}  accuracy {:.4} +- {:.4}",
                p.size, p.mean_micro_f1, p.std_micro_f1, p.mean_accuracy, p.std_accuracy
            );
        }
        Ok(())
    }

    fn export_embeddings(&self, manifest: &Path, checkpoint: &Path, layer: Option<LayerId>, sequences: bool, out: &Path) -> Result<()> {
        let backbone = Backbone::from_checkpoint(&load_checked(checkpoint)?)?;
        let layer = match layer {
            Some(l) => {
                l.check(&backbone.model.cfg)?;
                l
            }
            None => self.layer(&backbone)?,
        };
        let utts = self.load(manifest, &backbone.mel)?;
        let ex = representations(&backbone, &utts, layer, self.cfg.extract.refine)?;
        let dir = self.out_dir(out)?;
        export_representations(&dir, "embeddings", &ex, layer, true)?;
        if sequences {
            export_representations(&dir, "representations", &ex, layer, false)?;
        }
        Ok(())
    }

    fn export_attention(&self, manifest: &Path, checkpoint: &Path, ids: Option<Vec<String>>, out: &Path) -> Result<()> {
        let ck = load_checked(checkpoint)?;
        let backbone = Backbone::from_checkpoint(&ck)?;
        let slu = SluModel::from_checkpoint(&ck)?;
        let mut utts = self.load(manifest, &backbone.mel)?;
        if let Some(ids) = ids {
            utts.retain(|u| ids.contains(&u.entry.id));
            if utts.is_empty() {
                return Err(Error::Data("none of the requested ids are in the manifest".into()));
            }
        }
        let ex = slu_examples(&backbone, &utts, &slu.meta.schema, slu.meta.layer, slu.meta.refine)?;
        let dir = self.out_dir(out)?;
        export_attention(&dir, &slu, &ex)
    }

    fn decode(&self, audio: &Path, checkpoint: &Path, max_iter: usize) -> Result<()> {
        let backbone = Backbone::from_checkpoint(&load_checked(checkpoint)?)?;
        let signal = load_audio(audio)?;
        let m = &backbone.mel;
        let feats = log_mel(&signal, m.mel_bins, m.frame_length_ms, m.frame_shift_ms)?;
        let rec = backbone.recognize(&feats, max_iter)?;
        let greedy = backbone.vocab.decode(&rec.greedy.tokens).join(" ");
        let template: Vec<String> = rec
            .template
            .tokens
            .iter()
            .map(|&t| backbone.vocab.symbol(t).to_string())
            .collect();
        println!("greedy:  {greedy}");
        println!("masked:  {}", template.join(" "));
        if let Some(r) = &rec.refined {
            println!("refined: {}", backbone.vocab.decode(&r.tokens).join(" "));
        }
        let conf: Vec<String> = rec.greedy.confidence.iter().map(|c| format!("{c:.3}")).collect();
        println!("confidence: {}", conf.join(" "));
        Ok(())
    }
}

