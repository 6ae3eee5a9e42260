//! Audio ingestion and log-Mel feature extraction.
//!
//! The feature pipeline mirrors the preprocessing of the encoder's base
//! architecture: audio is resampled to 16 kHz, padded or trimmed to a fixed
//! duration, and converted to an 80-channel log-magnitude Mel spectrogram
//! over 25 ms windows with a 10 ms hop.
//!
//! All operations here are pure functions of their inputs and are safe to
//! call concurrently.

mod mel;
mod resample;
mod stft;
mod store;
mod wav;

pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz};
pub use resample::resample;
pub use stft::stft_magnitude;
pub use store::{read_melf, write_melf, FeatureStore, MELF_VERSION};
pub use wav::{load_wav, write_wav_i16};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

/// Errors from audio ingestion and feature extraction.
#[derive(Debug, Error)]
pub enum DspError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported WAV file {path}: {reason}")]
    UnsupportedWav { path: PathBuf, reason: String },
    #[error("audio contains zero samples")]
    ZeroLengthAudio,
    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("clip sample rate {found} Hz does not match feature config {expected} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("mel filter row {row} is empty; reduce n_mels or raise n_fft")]
    DegenerateFilter { row: usize },
    #[error("bad feature file {path}: {reason}")]
    BadFeatureFile { path: PathBuf, reason: String },
    #[error("no feature entry for utterance {utterance_id}")]
    MissingFeature { utterance_id: String },
}

/// A mono waveform with its sample rate. Samples are normalized amplitudes
/// in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, DspError> {
        if samples.is_empty() {
            return Err(DspError::ZeroLengthAudio);
        }
        if sample_rate == 0 {
            return Err(DspError::InvalidConfig("sample_rate must be > 0".into()));
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::NonFiniteSample { index });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Parameters of the log-Mel front end.
///
/// The defaults produce the canonical 80 x 3000 feature matrix: 16 kHz audio,
/// 25 ms Hann windows every 10 ms, 400-point FFT, 80 Mel channels up to the
/// 8 kHz Nyquist, over a fixed 30 s input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub target_duration_s: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25,
            hop_ms: 10,
            n_fft: 400,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8_000.0,
            target_duration_s: 30.0,
        }
    }
}

impl FeatureConfig {
    /// Window length in samples; must equal `n_fft`.
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as usize * self.window_ms as usize) / 1000
    }

    /// Hop length in samples (160 at defaults).
    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as usize * self.hop_ms as usize) / 1000
    }

    /// Fixed model-input length in samples (480000 at defaults).
    pub fn target_samples(&self) -> usize {
        (self.target_duration_s * f64::from(self.sample_rate)).round() as usize
    }

    /// Frames produced for the fixed input length (3000 at defaults).
    pub fn target_frames(&self) -> usize {
        let hop = self.hop_samples();
        self.target_samples().div_ceil(hop)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.sample_rate == 0 {
            return Err(DspError::InvalidConfig("sample_rate must be > 0".into()));
        }
        if self.hop_samples() == 0 {
            return Err(DspError::InvalidConfig("hop must be >= 1 sample".into()));
        }
        if self.window_samples() != self.n_fft {
            return Err(DspError::InvalidConfig(format!(
                "window length {} samples must equal n_fft {}",
                self.window_samples(),
                self.n_fft
            )));
        }
        if self.n_mels == 0 {
            return Err(DspError::InvalidConfig("n_mels must be > 0".into()));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(DspError::InvalidConfig(format!(
                "need 0 <= f_min < f_max <= {nyquist} Hz"
            )));
        }
        if self.target_duration_s <= 0.0 || self.target_samples() == 0 {
            return Err(DspError::InvalidConfig(
                "target_duration_s must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A log-Mel feature matrix of shape `n_mels x n_frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
    pub utterance_id: String,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Zero-pad on the right or truncate so the clip has exactly
/// `target_duration_s * sample_rate` samples.
pub fn pad_or_trim(clip: &AudioClip, target_duration_s: f64) -> AudioClip {
    let target = (target_duration_s * f64::from(clip.sample_rate)).round() as usize;
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}

/// Log-Mel energies after the `log10` floor but before the dynamic-range
/// clamp and affine normalization. Split out so the scaling behaviour of the
/// compressor can be tested in isolation.
pub(crate) fn log_mel_floored(
    clip: &AudioClip,
    config: &FeatureConfig,
) -> Result<Array2<f32>, DspError> {
    config.validate()?;
    if clip.sample_rate != config.sample_rate {
        return Err(DspError::SampleRateMismatch {
            expected: config.sample_rate,
            found: clip.sample_rate,
        });
    }
    let padded = pad_or_trim(clip, config.target_duration_s);
    let magnitudes = stft_magnitude(&padded.samples, config)?;
    let power = magnitudes.mapv(|m| m * m);
    let filters = mel_filterbank(config)?;
    let mel = filters.dot(&power);
    Ok(mel.mapv(|e| e.max(1e-10).log10()))
}

/// Full feature pipeline: pad/trim, magnitude STFT, power, Mel filterbank,
/// `log10` with a `1e-10` floor, clamp to 8 decades below the peak, then map
/// `x -> (x + 4) / 4`.
pub fn log_mel(
    clip: &AudioClip,
    config: &FeatureConfig,
    utterance_id: &str,
) -> Result<MelSpectrogram, DspError> {
    let mut log_spec = log_mel_floored(clip, config)?;
    let max = log_spec.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let floor = max - 8.0;
    log_spec.mapv_inplace(|x| (x.max(floor) + 4.0) / 4.0);
    Ok(MelSpectrogram {
        values: log_spec,
        utterance_id: utterance_id.to_string(),
    })
}
