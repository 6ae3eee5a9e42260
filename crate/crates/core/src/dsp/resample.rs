//! Band-limited sample-rate conversion.

use super::{AudioClip, DspError};

/// Zero crossings of the sinc kernel on each side (at the lower of the two
/// Nyquist frequencies). More crossings sharpen the transition band.
const KERNEL_ZERO_CROSSINGS: usize = 32;

/// Resample with a windowed-sinc interpolation kernel evaluated at the
/// rational phase of each output sample (polyphase evaluation of the
/// band-limited reconstruction filter).
///
/// The output has exactly `round(len * target / source)` samples. When the
/// rates already match the clip is returned unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, DspError> {
    if target_rate == 0 {
        return Err(DspError::InvalidConfig("target_rate must be > 0".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }

    let source_rate = clip.sample_rate;
    let g = gcd(u64::from(source_rate), u64::from(target_rate));
    let up = u64::from(target_rate) / g; // interpolation factor L
    let down = u64::from(source_rate) / g; // decimation factor M

    let n_in = clip.samples.len() as u64;
    let n_out = ((n_in * u64::from(target_rate)) + u64::from(source_rate) / 2)
        / u64::from(source_rate);

    // Cutoff relative to the source Nyquist: 1.0 when upsampling, L/M when
    // downsampling. The kernel half-width stretches accordingly.
    let ratio = up as f64 / down as f64;
    let cutoff = ratio.min(1.0);
    let half_width = (KERNEL_ZERO_CROSSINGS as f64 / cutoff).ceil() as i64;

    let x = &clip.samples;
    let mut out = Vec::with_capacity(n_out as usize);
    for j in 0..n_out {
        // Source-domain position of output sample j: j * M / L.
        let num = j * down;
        let base = (num / up) as i64;
        let frac = (num % up) as f64 / up as f64;

        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        for i in -half_width..=half_width {
            let u = i as f64 - frac;
            let w = kernel(u, cutoff, half_width as f64);
            if w == 0.0 {
                continue;
            }
            norm += w;
            let idx = base + i;
            if idx >= 0 && (idx as usize) < x.len() {
                acc += w * f64::from(x[idx as usize]);
            }
        }
        // Normalizing each phase's taps keeps the passband gain at exactly 1.
        out.push(if norm != 0.0 { (acc / norm) as f32 } else { 0.0 });
    }

    AudioClip::new(out, target_rate)
}

/// Windowed sinc: `cutoff * sinc(cutoff * u)` under a Hann window of the
/// given half-width.
fn kernel(u: f64, cutoff: f64, half_width: f64) -> f64 {
    if u.abs() > half_width {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (std::f64::consts::PI * u / half_width).cos());
    cutoff * sinc(cutoff * u) * window
}

fn sinc(v: f64) -> f64 {
    if v == 0.0 {
        1.0
    } else {
        let pv = std::f64::consts::PI * v;
        pv.sin() / pv
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}
