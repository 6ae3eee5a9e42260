//! Mel filterbank construction.

use super::{DspError, FeatureConfig};
use ndarray::Array2;

/// Mel scale: `m(f) = 2595 * log10(1 + f / 700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Inverse of [`hz_to_mel`].
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank of shape `n_mels x (n_fft / 2 + 1)`.
///
/// Filter centers are uniformly spaced on the mel scale between `f_min` and
/// `f_max`. Each triangle is scaled by `2 / (f_hi - f_lo)` so it integrates
/// to one over Hz. Every row is nonnegative with a single contiguous support
/// interval; a row with no nonzero bin means the FFT cannot resolve that
/// filter and is reported as [`DspError::DegenerateFilter`].
pub fn mel_filterbank(config: &FeatureConfig) -> Result<Array2<f32>, DspError> {
    config.validate()?;
    let n_bins = config.n_fft / 2 + 1;
    let n_mels = config.n_mels;

    let mel_min = hz_to_mel(config.f_min);
    let mel_max = hz_to_mel(config.f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_min + (mel_max - mel_min) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * f64::from(config.sample_rate) / config.n_fft as f64)
        .collect();

    let mut filters = Array2::<f32>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (f_lo, f_center, f_hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let up = f_center - f_lo;
        let down = f_hi - f_center;
        let area_norm = 2.0 / (f_hi - f_lo);
        let mut any = false;
        for (k, &f) in bin_hz.iter().enumerate() {
            let rise = if up > 0.0 { (f - f_lo) / up } else { -1.0 };
            let fall = if down > 0.0 { (f_hi - f) / down } else { -1.0 };
            let w = rise.min(fall).max(0.0) * area_norm;
            if w > 0.0 {
                filters[(m, k)] = w as f32;
                any = true;
            }
        }
        if !any {
            return Err(DspError::DegenerateFilter { row: m });
        }
    }
    Ok(filters)
}
