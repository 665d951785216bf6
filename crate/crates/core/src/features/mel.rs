use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::audio::AudioSignal;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Energies below this are clamped before the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub mel_bins: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            mel_bins: 80,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
        }
    }
}

/// `T x F` log-Mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor<f32>,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.cols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the HTK mel scale between 0 Hz and Nyquist,
/// with unit peak height.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[mel_bins][fft_size / 2 + 1]`
    weights: Vec<Vec<f64>>,
    edges_mel: Vec<f64>,
    pub fft_size: usize,
    pub sample_rate_hz: u32,
}

impl MelFilterbank {
    pub fn new(sample_rate_hz: u32, fft_size: usize, mel_bins: usize) -> Self {
        let n_freq = fft_size / 2 + 1;
        let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
        let edges_mel: Vec<f64> = (0..mel_bins + 2)
            .map(|i| top * i as f64 / (mel_bins + 1) as f64)
            .collect();
        let weights = (0..mel_bins)
            .map(|b| {
                let (lo, c, hi) = (edges_mel[b], edges_mel[b + 1], edges_mel[b + 2]);
                (0..n_freq)
                    .map(|k| {
                        let m = hz_to_mel(k as f64 * sample_rate_hz as f64 / fft_size as f64);
                        let up = (m - lo) / (c - lo);
                        let down = (hi - m) / (hi - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        MelFilterbank {
            weights,
            edges_mel,
            fft_size,
            sample_rate_hz,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.weights.len()
    }

    pub fn center_hz(&self, bin: usize) -> f64 {
        mel_to_hz(self.edges_mel[bin + 1])
    }

    pub fn weights(&self, bin: usize) -> &[f64] {
        &self.weights[bin]
    }

    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(magnitude).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn ms_to_samples(ms: f64, rate: u32) -> usize {
    (ms * rate as f64 / 1000.0).round() as usize
}

/// Frame geometry in samples: `(frame_len, shift, fft_size)`.
pub fn frame_geometry(sample_rate_hz: u32, frame_length_ms: f64, frame_shift_ms: f64) -> (usize, usize, usize) {
    let len = ms_to_samples(frame_length_ms, sample_rate_hz).max(1);
    let shift = ms_to_samples(frame_shift_ms, sample_rate_hz).max(1);
    (len, shift, len.next_power_of_two())
}

/// Number of frames `1 + floor((n - frame_len) / shift)`, or `None` when the
/// signal is shorter than one frame.
pub fn num_frames(num_samples: usize, frame_len: usize, shift: usize) -> Option<usize> {
    (num_samples >= frame_len).then(|| 1 + (num_samples - frame_len) / shift)
}

/// Log-Mel filterbank features: Hann window, magnitude spectrum, triangular
/// mel weighting, natural log with floor.
pub fn log_mel(
    signal: &AudioSignal,
    mel_bins: usize,
    frame_length_ms: f64,
    frame_shift_ms: f64,
) -> Result<FeatureSequence> {
    if mel_bins == 0 {
        return Err(Error::InvalidArgument("mel_bins must be at least 1".into()));
    }
    if !(frame_length_ms > 0.0 && frame_shift_ms > 0.0 && frame_length_ms >= frame_shift_ms) {
        return Err(Error::InvalidArgument(format!(
            "frame length {frame_length_ms} ms must be >= shift {frame_shift_ms} ms > 0"
        )));
    }
    let (flen, shift, nfft) = frame_geometry(signal.sample_rate_hz, frame_length_ms, frame_shift_ms);
    let t = num_frames(signal.samples.len(), flen, shift).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "audio of {} samples is shorter than one {flen}-sample frame",
            signal.samples.len()
        ))
    })?;
    let bank = MelFilterbank::new(signal.sample_rate_hz, nfft, mel_bins);
    let window = hann(flen);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut mag = vec![0.0; nfft / 2 + 1];
    let mut out = Vec::with_capacity(t * mel_bins);
    for f in 0..t {
        let frame = &signal.samples[f * shift..f * shift + flen];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < flen {
                Complex::new(frame[i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        out.extend(
            bank.apply(&mag)
                .into_iter()
                .map(|e| e.max(LOG_FLOOR).ln() as f32),
        );
    }
    Ok(FeatureSequence {
        frames: Tensor::new(&[t, mel_bins], out)?,
        frame_length_ms,
        frame_shift_ms,
    })
}

/// Per-bin mean and standard deviation over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    pub fn identity(bins: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; bins],
            std: vec![1.0; bins],
        }
    }

    pub fn compute<'a>(features: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for f in features {
            let bins = f.num_bins();
            if sum.is_empty() {
                sum = vec![0.0; bins];
                sq = vec![0.0; bins];
            } else if sum.len() != bins {
                return Err(Error::Data("inconsistent mel bin counts".into()));
            }
            for r in 0..f.num_frames() {
                for (j, &v) in f.frames.row(r).iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
            }
            n += f.num_frames();
        }
        if n == 0 {
            return Err(Error::Data("no frames to compute statistics".into()));
        }
        let nf = n as f64;
        Ok(FeatureStats {
            mean: sum.iter().map(|s| (s / nf) as f32).collect(),
            std: sum
                .iter()
                .zip(&sq)
                .map(|(s, q)| ((q / nf - (s / nf).powi(2)).max(0.0).sqrt().max(1e-5)) as f32)
                .collect(),
        })
    }

    pub fn normalize(&self, f: &FeatureSequence) -> Result<Tensor<f32>> {
        if f.num_bins() != self.mean.len() {
            return Err(Error::shape(
                "normalize",
                format!("{} bins vs stats for {}", f.num_bins(), self.mean.len()),
            ));
        }
        let c = f.num_bins();
        let mut data = f.frames.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
        Tensor::new(f.frames.shape(), data)
    }
}
