//! Deterministic tone-based speech stand-in: each token is rendered as a
//! short harmonic tone with a token-specific fundamental and overtone profile.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::audio::AudioSignal;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub base_hz: f64,
    /// Relative amplitude of harmonics 1, 2, 3, ...
    pub harmonics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub token_to_tone: BTreeMap<String, Tone>,
    pub token_duration_ms: f64,
    pub noise_snr_db: f64,
    pub seed: u64,
    pub sample_rate_hz: u32,
}

const LOWEST_HZ: f64 = 150.0;
const HIGHEST_HZ: f64 = 3500.0;
const RAMP_MS: f64 = 12.0;

impl SynthSpec {
    /// Assigns log-spaced fundamentals (in sorted word order) and random
    /// overtone profiles to `words`.
    pub fn for_words(words: &[String], seed: u64) -> Self {
        let mut sorted = words.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut rng = substream(seed, "tones");
        let n = sorted.len().max(2);
        let ratio = (HIGHEST_HZ / LOWEST_HZ).powf(1.0 / (n - 1) as f64);
        let token_to_tone = sorted
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                let harmonics = (0..4)
                    .map(|h| if h == 0 { 1.0 } else { rng.random_range(0.1..0.9) })
                    .collect();
                (
                    w,
                    Tone {
                        base_hz: LOWEST_HZ * ratio.powi(i as i32),
                        harmonics,
                    },
                )
            })
            .collect();
        SynthSpec {
            token_to_tone,
            token_duration_ms: 150.0,
            noise_snr_db: 30.0,
            seed,
            sample_rate_hz: 16000,
        }
    }

    /// Voice of speaker `index`: fundamentals shifted by up to +-1.5 %.
    pub fn for_speaker(&self, index: usize, num_speakers: usize) -> Self {
        let offset = if num_speakers <= 1 {
            0.0
        } else {
            -0.015 + 0.03 * index as f64 / (num_speakers - 1) as f64
        };
        let mut s = self.clone();
        for t in s.token_to_tone.values_mut() {
            t.base_hz *= 1.0 + offset;
        }
        s
    }

    pub fn samples_per_token(&self) -> usize {
        (self.token_duration_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 || !(self.token_duration_ms > 0.0) {
            return Err(Error::InvalidArgument(
                "synth needs positive sample rate and token duration".into(),
            ));
        }
        let mut seen: Vec<f64> = self.token_to_tone.values().map(|t| t.base_hz).collect();
        seen.sort_by(f64::total_cmp);
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(
                "distinct tokens need distinct base frequencies".into(),
            ));
        }
        Ok(())
    }
}

/// Renders `tokens` as concatenated tone segments plus white noise at the
/// configured SNR. Deterministic in `(tokens, spec, rng_seed)`.
pub fn synth_utterance(tokens: &[String], spec: &SynthSpec, rng_seed: u64) -> Result<AudioSignal> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot synthesize an empty utterance".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let per = spec.samples_per_token();
    let sr = spec.sample_rate_hz as f64;
    let nyquist = sr / 2.0;
    let ramp = ((RAMP_MS * sr / 1000.0) as usize).min(per / 2).max(1);
    let mut samples = Vec::with_capacity(per * tokens.len());
    for tok in tokens {
        let tone = spec
            .token_to_tone
            .get(tok)
            .ok_or_else(|| Error::UnknownToken(tok.clone()))?;
        let phases: Vec<f64> = tone
            .harmonics
            .iter()
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        let gain = 0.4 * rng.random_range(0.8..1.0) / tone.harmonics.iter().sum::<f64>();
        for j in 0..per {
            let t = j as f64 / sr;
            let env = if j < ramp {
                0.5 - 0.5 * (PI * j as f64 / ramp as f64).cos()
            } else if j >= per - ramp {
                0.5 - 0.5 * (PI * (per - 1 - j) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let mut v = 0.0;
            for (h, (&amp, &ph)) in tone.harmonics.iter().zip(&phases).enumerate() {
                let f = tone.base_hz * (h + 1) as f64;
                if f < nyquist {
                    v += amp * (2.0 * PI * f * t + ph).sin();
                }
            }
            samples.push(v * gain * env);
        }
    }
    let power = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
    let noise_std = (power / 10f64.powf(spec.noise_snr_db / 10.0)).sqrt();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("finite std");
        for v in &mut samples {
            *v += normal.sample(&mut rng);
        }
    }
    AudioSignal::new(
        samples.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
        spec.sample_rate_hz,
    )
}
