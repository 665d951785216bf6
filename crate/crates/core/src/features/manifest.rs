use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::audio::{load_audio, save_audio, AudioSignal};
use super::grammar::{CommandGrammar, Intent};
use super::mel::{log_mel, FeatureSequence, MelConfig};
use super::synth::{synth_utterance, SynthSpec};
use crate::error::{Error, Result};
use crate::par::par_map;
use crate::rng::substream;

pub const NUM_SPEAKERS: usize = 5;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of a JSON-Lines manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest's directory.
    pub audio: String,
    /// Space-separated tokens.
    pub text: String,
    pub intent: Intent,
    pub speaker: String,
}

impl ManifestEntry {
    pub fn tokens(&self) -> Vec<String> {
        self.text.split_whitespace().map(str::to_string).collect()
    }
}

#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub entry: ManifestEntry,
    pub audio: AudioSignal,
}

/// An utterance with extracted features, ready for the models.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub entry: ManifestEntry,
    pub features: FeatureSequence,
}

/// Draws `n` utterances. Intents cycle through shuffled permutations of the
/// valid set (uniform marginals, full coverage once `n >= |valid|`); the
/// template and speaker are drawn uniformly. Audio for item `i` uses seed `seed + i`.
pub fn generate_corpus(
    grammar: &CommandGrammar,
    spec: &SynthSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<CorpusItem>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one utterance".into()));
    }
    let valid = grammar.valid_intents();
    if valid.is_empty() {
        return Err(Error::Data("grammar has no valid intent combinations".into()));
    }
    let mut rng = substream(seed, "corpus");
    let mut plan = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::new();
    for i in 0..n {
        if order.is_empty() {
            order = (0..valid.len()).collect();
            order.shuffle(&mut rng);
        }
        let intent = valid[order.pop().expect("refilled")].clone();
        let templates = grammar
            .action(&intent.action)
            .expect("valid intent")
            .templates
            .len();
        let tpl = rng.random_range(0..templates);
        let speaker = rng.random_range(0..NUM_SPEAKERS);
        plan.push((i, intent, tpl, speaker));
    }
    let voices: Vec<SynthSpec> = (0..NUM_SPEAKERS)
        .map(|s| spec.for_speaker(s, NUM_SPEAKERS))
        .collect();
    par_map(&plan, |(i, intent, tpl, speaker)| {
        let tokens = grammar.realize(intent, *tpl)?;
        let audio = synth_utterance(&tokens, &voices[*speaker], seed.wrapping_add(*i as u64))?;
        let id = format!("s{seed}-utt{i:06}");
        Ok(CorpusItem {
            entry: ManifestEntry {
                audio: format!("wav/{id}.wav"),
                id,
                text: tokens.join(" "),
                intent: intent.clone(),
                speaker: format!("spk{speaker}"),
            },
            audio,
        })
    })
    .into_iter()
    .collect()
}

/// Writes `wav/*.wav` and `manifest.jsonl` under `out_dir`; returns the manifest path.
pub fn write_corpus(out_dir: &Path, items: &[CorpusItem]) -> Result<PathBuf> {
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    for it in items {
        save_audio(&out_dir.join(&it.entry.audio), &it.audio)?;
    }
    let path = out_dir.join(MANIFEST_FILE);
    write_manifest(&path, items.iter().map(|i| &i.entry))?;
    Ok(path)
}

/// Generates and writes a synthetic corpus.
pub fn synth_corpus(
    grammar: &CommandGrammar,
    spec: &SynthSpec,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    let items = generate_corpus(grammar, spec, n, seed)?;
    write_corpus(out_dir, &items)
}

pub fn write_manifest<'a>(path: &Path, entries: impl IntoIterator<Item = &'a ManifestEntry>) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(entry);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", path.display())));
    }
    Ok(out)
}

/// Applies the 16-bit quantisation of a WAV write/read round trip.
pub fn quantize_pcm16(audio: &AudioSignal) -> AudioSignal {
    AudioSignal {
        samples: audio
            .samples
            .iter()
            .map(|&s| (s.clamp(-1.0, 1.0) * 32767.0).round() / 32768.0)
            .collect(),
        sample_rate_hz: audio.sample_rate_hz,
    }
}

/// Features for in-memory corpus items, identical to loading their WAV files.
pub fn featurize(items: &[CorpusItem], mel: &MelConfig) -> Result<Vec<Utterance>> {
    par_map(items, |it| {
        let audio = quantize_pcm16(&it.audio);
        Ok(Utterance {
            entry: it.entry.clone(),
            features: log_mel(&audio, mel.mel_bins, mel.frame_length_ms, mel.frame_shift_ms)?,
        })
    })
    .into_iter()
    .collect()
}

/// Loads a manifest and computes features for every referenced WAV file.
pub fn load_corpus(manifest: &Path, mel: &MelConfig) -> Result<Vec<Utterance>> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    par_map(&entries, |e| {
        let audio = load_audio(&base.join(&e.audio))?;
        Ok(Utterance {
            entry: e.clone(),
            features: log_mel(&audio, mel.mel_bins, mel.frame_length_ms, mel.frame_shift_ms)?,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn setup() -> (CommandGrammar, SynthSpec) {
        let g = CommandGrammar::grabo_like();
        let s = SynthSpec::for_words(&g.words(), 3);
        (g, s)
    }

    #[test]
    fn coverage_at_twenty_per_combo() {
        let (g, s) = setup();
        let items = generate_corpus(&g, &s, 720, 9).unwrap();
        let mut counts: BTreeMap<Intent, usize> = BTreeMap::new();
        for it in &items {
            *counts.entry(it.entry.intent.clone()).or_default() += 1;
            assert!(!g.realize(&it.entry.intent, 0).unwrap().is_empty());
        }
        for v in g.valid_intents() {
            assert!(counts.get(&v).copied().unwrap_or(0) >= 1, "{v} missing");
        }
    }

    #[test]
    fn single_line_manifest_and_determinism() {
        let (g, s) = setup();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = synth_corpus(&g, &s, 1, 4, d1.path()).unwrap();
        let p2 = synth_corpus(&g, &s, 1, 4, d2.path()).unwrap();
        let b1 = fs::read(&p1).unwrap();
        assert_eq!(b1, fs::read(&p2).unwrap());
        let text = String::from_utf8(b1).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["id", "audio", "text", "intent", "speaker"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["intent"].get("action").is_some() && v["intent"].get("args").is_some());
        assert_eq!(
            fs::read(d1.path().join("wav/s4-utt000000.wav")).unwrap(),
            fs::read(d2.path().join("wav/s4-utt000000.wav")).unwrap()
        );
    }

    #[test]
    fn disk_and_memory_features_agree() {
        let (g, s) = setup();
        let d = tempfile::tempdir().unwrap();
        let items = generate_corpus(&g, &s, 3, 1).unwrap();
        let p = write_corpus(d.path(), &items).unwrap();
        let mel = MelConfig {
            mel_bins: 40,
            ..MelConfig::default()
        };
        let a = load_corpus(&p, &mel).unwrap();
        let b = featurize(&items, &mel).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.entry, y.entry);
            assert_eq!(x.features, y.features);
        }
    }

    #[test]
    fn errors() {
        let (g, s) = setup();
        assert!(generate_corpus(&g, &s, 0, 1).is_err());
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("m.jsonl");
        fs::write(&p, "{\"id\": 1}\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Data(_))));
    }
}
