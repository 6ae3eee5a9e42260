//! PCM WAV ingestion and the 16-bit writer used by the synthetic corpus.

use super::{AudioClip, DspError};
use std::path::Path;

/// Load a PCM WAV file (8/16/24/32-bit integer or 32-bit float) as a mono
/// clip at the file's native sample rate. Stereo and multi-channel audio is
/// downmixed by channel mean; integer samples are scaled to `[-1, 1]`.
pub fn load_wav(path: &Path) -> Result<AudioClip, DspError> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(DspError::UnsupportedWav {
            path: path.to_path_buf(),
            reason: "zero channels".into(),
        });
    }

    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(DspError::UnsupportedWav {
                    path: path.to_path_buf(),
                    reason: format!("{}-bit float samples", spec.bits_per_sample),
                });
            }
            let mut reader = reader;
            reader
                .samples::<f32>()
                .map(|s| s.map_err(|e| map_hound(path, e)))
                .collect::<Result<_, _>>()?
        }
        hound::SampleFormat::Int => {
            let scale = match spec.bits_per_sample {
                8 => 1.0 / 128.0,
                16 => 1.0 / 32_768.0,
                24 => 1.0 / 8_388_608.0,
                32 => 1.0 / 2_147_483_648.0,
                bits => {
                    return Err(DspError::UnsupportedWav {
                        path: path.to_path_buf(),
                        reason: format!("{bits}-bit integer samples"),
                    })
                }
            };
            let mut reader = reader;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale).map_err(|e| map_hound(path, e)))
                .collect::<Result<_, _>>()?
        }
    };

    if interleaved.is_empty() {
        return Err(DspError::ZeroLengthAudio);
    }
    if let Some(index) = interleaved.iter().position(|s| !s.is_finite()) {
        return Err(DspError::NonFiniteSample { index });
    }

    let samples: Vec<f32> = if channels == 1 {
        interleaved.iter().map(|s| s.clamp(-1.0, 1.0)).collect()
    } else {
        interleaved
            .chunks(channels)
            .map(|frame| {
                let sum: f32 = frame.iter().sum();
                (sum / channels as f32).clamp(-1.0, 1.0)
            })
            .collect()
    };

    AudioClip::new(samples, spec.sample_rate)
}

/// Write a mono clip as 16-bit PCM. Samples are clamped to `[-1, 1]` first.
pub fn write_wav_i16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), DspError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| DspError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
    }
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32_767.0).round() as i16;
        writer.write_sample(v).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

fn map_hound(path: &Path, err: hound::Error) -> DspError {
    match err {
        hound::Error::IoError(source) => DspError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DspError::UnsupportedWav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}
