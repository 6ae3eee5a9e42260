//! Short-time Fourier transform with centered frames.

use super::{DspError, FeatureConfig};
use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

/// Magnitude STFT of shape `(n_fft / 2 + 1) x n_frames`.
///
/// Frames are Hann-windowed and centered: the signal is reflect-padded by
/// `n_fft / 2` on both ends, and frame `t` starts at `t * hop` in the padded
/// signal, so `n_frames = ceil(len / hop)` for every input length >= 1.
pub fn stft_magnitude(samples: &[f32], config: &FeatureConfig) -> Result<Array2<f32>, DspError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(DspError::ZeroLengthAudio);
    }
    let n_fft = config.n_fft;
    let hop = config.hop_samples();
    let n_bins = n_fft / 2 + 1;
    let n_frames = samples.len().div_ceil(hop);
    let pad = n_fft / 2;

    let window = hann_window(n_fft);
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(n_fft);

    let mut out = Array2::<f32>::zeros((n_bins, n_frames));
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); n_fft];
    for t in 0..n_frames {
        for (i, slot) in buf.iter_mut().enumerate() {
            let src = t * hop + i;
            let idx = reflect_index(src as isize - pad as isize, samples.len());
            *slot = Complex::new(samples[idx] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, value) in buf.iter().take(n_bins).enumerate() {
            out[(k, t)] = value.norm();
        }
    }
    Ok(out)
}

/// Periodic Hann window: `0.5 * (1 - cos(2 pi n / N))`.
pub(crate) fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (0.5 * (1.0 - phase.cos())) as f32
        })
        .collect()
}

/// Fold an out-of-range index back into `[0, len)` by reflection without
/// repeating the edge sample (numpy-style "reflect").
pub(crate) fn reflect_index(mut i: isize, len: usize) -> usize {
    debug_assert!(len > 0);
    if len == 1 {
        return 0;
    }
    let last = (len - 1) as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config() -> FeatureConfig {
        FeatureConfig::default()
    }

    /// Naive O(N^2) DFT magnitudes of one Hann-windowed frame, computed in
    /// f64 with no shared code path.
    fn naive_frame_dft(frame: &[f32]) -> Vec<f64> {
        let n = frame.len();
        let windowed: Vec<f64> = frame
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos());
                f64::from(s) * w
            })
            .collect();
        (0..=n / 2)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (i, &v) in windowed.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn frame_count_for_default_input() {
        let samples = vec![0.1f32; 480_000];
        let m = stft_magnitude(&samples, &config()).unwrap();
        assert_eq!(m.dim(), (201, 3000));
    }

    #[test]
    fn zero_input_gives_zero_magnitudes() {
        let samples = vec![0.0f32; 4000];
        let m = stft_magnitude(&samples, &config()).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            stft_magnitude(&[], &config()),
            Err(DspError::ZeroLengthAudio)
        ));
    }

    #[test]
    fn sine_at_exact_bin_concentrates_energy() {
        // A tone at k * sr / n_fft lands exactly on DFT bin k. Under a Hann
        // window the energy spreads over bins k-1..=k+1 (the window's
        // three-tap spectrum), with bin k the largest. Verified against a
        // naive single-frame DFT.
        let k = 30usize;
        let freq = k as f64 * 16_000.0 / 400.0;
        let samples: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin() as f32)
            .collect();
        let m = stft_magnitude(&samples, &config()).unwrap();

        // A frame far from the reflect-padded edges.
        let t = 50usize;
        let col: Vec<f64> = (0..201).map(|b| f64::from(m[(b, t)]).powi(2)).collect();
        let total: f64 = col.iter().sum();
        let peak = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, k);
        let neighborhood: f64 = col[k - 1] + col[k] + col[k + 1];
        assert!(
            neighborhood / total >= 0.99,
            "bins k-1..=k+1 carry {:.4} of column energy",
            neighborhood / total
        );
        // Hann main lobe puts 2/3 of that energy on the center bin.
        assert!(col[k] / total > 0.6);

        // Cross-check the same frame against the naive DFT.
        let hop = 160;
        let start = t * hop - 200;
        let frame = &samples[start..start + 400];
        let reference = naive_frame_dft(frame);
        let ref_total: f64 = reference.iter().map(|v| v * v).sum();
        let ref_peak = reference
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(ref_peak, k);
        let ref_neighborhood: f64 = (k - 1..=k + 1).map(|b| reference[b] * reference[b]).sum();
        assert!(ref_neighborhood / ref_total >= 0.99);
    }

    #[test]
    fn matches_naive_dft_on_noise_frame() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f32> = (0..2_000).map(|_| rng.random_range(-0.5..0.5)).collect();
        let m = stft_magnitude(&samples, &config()).unwrap();

        let t = 5usize;
        let start = t * 160 - 200;
        let frame = &samples[start..start + 400];
        let reference = naive_frame_dft(frame);
        for (b, &r) in reference.iter().enumerate() {
            assert!(
                (f64::from(m[(b, t)]) - r).abs() < 1e-3,
                "bin {b}: {} vs {r}",
                m[(b, t)]
            );
        }
    }

    #[test]
    fn reflect_index_folds_like_numpy() {
        // pad=3 over [a b c d]: c b a | a b c d | c b a
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 2), 1);
        assert_eq!(reflect_index(9, 1), 0);
    }

    proptest! {
        #[test]
        fn frame_count_law(len in 1usize..20_000) {
            let samples = vec![0.0f32; len];
            let m = stft_magnitude(&samples, &config()).unwrap();
            prop_assert_eq!(m.ncols(), len.div_ceil(160));
        }
    }
}
