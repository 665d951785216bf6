use std::path::Path;

use crate::error::{Error, Result};

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(AudioSignal {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Reads a 16-bit PCM mono WAV file, scaling samples by 1/32768.
pub fn load_audio(path: &Path) -> Result<AudioSignal> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM mono, got {} channel(s), {} bits, {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples: Vec<f32> = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_error(path, e))?;
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: empty audio payload", path.display())));
    }
    AudioSignal::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples are clamped to `[-1, 1]` before quantisation.
pub fn save_audio(path: &Path, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &signal.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}
