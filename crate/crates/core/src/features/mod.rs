//! Audio ingestion, log-Mel features and the synthetic spoken-command corpus.

pub mod audio;
pub mod grammar;
pub mod manifest;
pub mod mel;
pub mod synth;

pub use audio::{load_audio, save_audio, AudioSignal};
pub use grammar::{CommandGrammar, Intent};
pub use manifest::{
    featurize, generate_corpus, load_corpus, read_manifest, synth_corpus, write_corpus,
    write_manifest, CorpusItem, ManifestEntry, Utterance,
};
pub use mel::{log_mel, FeatureSequence, FeatureStats, MelConfig};
pub use synth::{synth_utterance, SynthSpec, Tone};
