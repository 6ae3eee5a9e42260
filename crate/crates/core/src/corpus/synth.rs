//! Synthetic stand-in corpus.
//!
//! Real dysarthric speech corpora are license-restricted, so desk-scale runs
//! use generated audio with the same catalog structure: the fixed 28-speaker
//! census (13 control + 15 pathology across four intelligibility tiers) and
//! the same per-speaker task inventory, optionally scaled down.
//!
//! The audio is not meant to sound like speech; it only has to make the
//! classes separable. Each class sits on its own base tone family, every
//! pathology tier adds amplitude tremor and noise whose rate and level grow
//! with severity, and a syllable-like envelope slows down across tiers.
//! Generation is deterministic: every utterance derives its own RNG stream
//! from the corpus seed and its id, so outputs are byte-identical for a
//! given seed regardless of scheduling.

use super::{
    save_manifest, Cohort, CorpusError, Gender, Manifest, SpeakerRecord, Task, Tier,
    UtteranceRecord,
};
use crate::dsp::write_wav_i16;
use crate::io_util::{derive_seed, fnv1a64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Size and audio parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub common_words: usize,
    pub uncommon_words: usize,
    pub digits: usize,
    pub letters: usize,
    pub commands: usize,
    pub repetitions: u8,
    pub sample_rate: u32,
    pub duration_s: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            common_words: 100,
            uncommon_words: 300,
            digits: 10,
            letters: 26,
            commands: 19,
            repetitions: 3,
            sample_rate: 16_000,
            duration_s: 1.0,
        }
    }
}

impl SynthSpec {
    /// Scale the per-task file counts, keeping each at least 1.
    pub fn scaled(&self, factor: f64) -> SynthSpec {
        let scale = |n: usize| (((n as f64) * factor).round() as usize).max(1);
        SynthSpec {
            common_words: scale(self.common_words),
            uncommon_words: scale(self.uncommon_words),
            digits: scale(self.digits),
            letters: scale(self.letters),
            commands: scale(self.commands),
            ..self.clone()
        }
    }

    /// Files contributed by each speaker.
    pub fn files_per_speaker(&self) -> usize {
        let reps = self.repetitions as usize;
        (self.digits + self.letters + self.commands + self.common_words) * reps
            + self.uncommon_words
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.repetitions == 0 || self.repetitions > 3 {
            return Err(CorpusError::InvalidSynthSpec(
                "repetitions must be in 1..=3".into(),
            ));
        }
        if self.sample_rate == 0 {
            return Err(CorpusError::InvalidSynthSpec("sample_rate must be > 0".into()));
        }
        if self.duration_s <= 0.0 {
            return Err(CorpusError::InvalidSynthSpec("duration_s must be > 0".into()));
        }
        Ok(())
    }
}

fn pathology(id: &str, gender: Gender, age: Option<u32>, pct: f64, tier: Tier) -> SpeakerRecord {
    SpeakerRecord {
        speaker_id: id.to_string(),
        cohort: Cohort::Pathology,
        gender,
        age,
        intelligibility_pct: Some(pct),
        tier,
    }
}

fn control(id: &str, gender: Gender) -> SpeakerRecord {
    SpeakerRecord {
        speaker_id: id.to_string(),
        cohort: Cohort::Control,
        gender,
        age: None,
        intelligibility_pct: None,
        tier: Tier::Control,
    }
}

/// The fixed speaker census: 15 pathology speakers with their documented
/// intelligibility percentages and 13 control speakers.
pub fn census_speakers() -> Vec<SpeakerRecord> {
    use Gender::{Female, Male};
    let mut speakers = vec![
        pathology("M09", Male, Some(18), 86.0, Tier::High),
        pathology("M14", Male, Some(44), 90.0, Tier::High),
        pathology("M10", Male, Some(21), 93.0, Tier::High),
        pathology("M08", Male, Some(28), 95.0, Tier::High),
        pathology("F05", Female, Some(22), 95.0, Tier::High),
        pathology("M05", Male, Some(21), 58.0, Tier::Medium),
        pathology("M11", Male, Some(48), 62.0, Tier::Medium),
        pathology("F04", Female, Some(18), 62.0, Tier::Medium),
        pathology("M07", Male, Some(58), 28.0, Tier::Low),
        pathology("F02", Female, Some(30), 29.0, Tier::Low),
        pathology("M16", Male, Some(40), 43.0, Tier::Low),
        pathology("M04", Male, None, 2.0, Tier::VeryLow),
        pathology("F03", Female, Some(51), 6.0, Tier::VeryLow),
        pathology("M12", Male, Some(19), 7.0, Tier::VeryLow),
        pathology("M01", Male, None, 17.0, Tier::VeryLow),
    ];
    for i in 1..=7 {
        speakers.push(control(&format!("CM{i:02}"), Male));
    }
    for i in 1..=6 {
        speakers.push(control(&format!("CF{i:02}"), Female));
    }
    speakers
}

/// Build the catalog for a synthetic corpus without touching the
/// filesystem. Audio paths are `<prefix>/<speaker>/<utterance>.wav`.
pub fn build_census_manifest(spec: &SynthSpec, prefix: &Path) -> Result<Manifest, CorpusError> {
    spec.validate()?;
    let speakers = census_speakers();
    let mut utterances = Vec::with_capacity(speakers.len() * spec.files_per_speaker());
    let tasks: [(Task, &str, usize); 5] = [
        (Task::Digit, "D", spec.digits),
        (Task::Letter, "L", spec.letters),
        (Task::Command, "C", spec.commands),
        (Task::CommonWord, "CW", spec.common_words),
        (Task::UncommonWord, "UW", spec.uncommon_words),
    ];
    for s in &speakers {
        for (task, code, count) in tasks {
            let reps = if task == Task::UncommonWord {
                1
            } else {
                spec.repetitions
            };
            for idx in 0..count {
                for rep in 1..=reps {
                    let utterance_id = format!("{}_{}{:03}_R{}", s.speaker_id, code, idx, rep);
                    utterances.push(UtteranceRecord {
                        utterance_id: utterance_id.clone(),
                        speaker_id: s.speaker_id.clone(),
                        task,
                        repetition: rep,
                        audio_path: prefix.join(&s.speaker_id).join(format!("{utterance_id}.wav")),
                        label: s.tier,
                    });
                }
            }
        }
    }
    Manifest::new(speakers, utterances)
}

/// Per-tier acoustic signature: base tone frequency, tremor rate/depth,
/// noise level, syllable rate. Tremor is the cohort cue (absent for
/// control), and tier shifts every knob so the five classes stay apart.
fn tier_acoustics(tier: Tier) -> (f64, f64, f64, f64, f64) {
    match tier {
        Tier::Control => (210.0, 0.0, 0.0, 0.015, 4.0),
        Tier::High => (330.0, 3.0, 0.55, 0.05, 3.2),
        Tier::Medium => (450.0, 5.0, 0.60, 0.09, 2.6),
        Tier::Low => (570.0, 7.0, 0.65, 0.14, 2.0),
        Tier::VeryLow => (690.0, 9.0, 0.70, 0.20, 1.5),
    }
}

/// Render the waveform of one utterance.
pub(crate) fn render_utterance(
    spec: &SynthSpec,
    speaker: &SpeakerRecord,
    utterance: &UtteranceRecord,
    corpus_seed: u64,
) -> Vec<f32> {
    let (base_hz, tremor_hz, tremor_depth, noise_std, syllable_hz) =
        tier_acoustics(speaker.tier);

    // Stable per-speaker and per-word detuning.
    let speaker_factor = 1.0 + ((fnv1a64(speaker.speaker_id.as_bytes()) % 9) as f64 - 4.0) / 100.0;
    let word_key = fnv1a64(
        utterance
            .utterance_id
            .rsplit_once("_R")
            .map(|(stem, _)| stem)
            .unwrap_or(&utterance.utterance_id)
            .as_bytes(),
    );
    let word_factor = 1.0 + ((word_key % 11) as f64 - 5.0) / 110.0;
    let h2 = 0.25 + 0.25 * ((word_key >> 8) % 7) as f64 / 7.0;
    let h3 = 0.10 + 0.20 * ((word_key >> 16) % 5) as f64 / 5.0;

    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, &utterance.utterance_id));
    let phase: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("valid normal");

    let f0 = base_hz * speaker_factor * word_factor;
    let n = (spec.duration_s * f64::from(spec.sample_rate)).round() as usize;
    let dt = 1.0 / f64::from(spec.sample_rate);
    let tau = std::f64::consts::TAU;

    (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            let carrier = (tau * f0 * t + phase[0]).sin()
                + h2 * (tau * 2.0 * f0 * t + phase[1]).sin()
                + h3 * (tau * 3.0 * f0 * t + phase[2]).sin();
            let syllable = 0.6 + 0.4 * (tau * syllable_hz * t + phase[3]).sin();
            let tremor = 1.0 - tremor_depth * (0.5 + 0.5 * (tau * tremor_hz * t + phase[4]).sin());
            let noise: f64 = rand::Rng::sample(&mut rng, normal) * noise_std;
            let x = 0.5 * carrier * syllable * tremor + noise;
            x.clamp(-0.97, 0.97) as f32
        })
        .collect()
}

/// Generate a synthetic corpus on disk: one WAV per utterance under
/// `<out_dir>/<speaker>/` plus `manifest.csv` at the corpus root. Returns
/// the manifest. Fully deterministic for a given `(spec, seed)`.
pub fn synth_corpus(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<Manifest, CorpusError> {
    let manifest = build_census_manifest(spec, Path::new(""))?;
    std::fs::create_dir_all(out_dir).map_err(|source| CorpusError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    manifest
        .utterances()
        .par_iter()
        .try_for_each(|u| -> Result<(), CorpusError> {
            let speaker = manifest.speaker(&u.speaker_id).expect("validated");
            let samples = render_utterance(spec, speaker, u, seed);
            let path = out_dir.join(&u.audio_path);
            write_wav_i16(&path, &samples, spec.sample_rate)?;
            Ok(())
        })?;

    save_manifest(&out_dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_census_has_expected_inventory() {
        let spec = SynthSpec::default();
        assert_eq!(spec.files_per_speaker(), 765);
        let m = build_census_manifest(&spec, Path::new("")).unwrap();
        assert_eq!(m.speakers().len(), 28);
        assert_eq!(m.utterances().len(), 28 * 765);
        let controls = m
            .speakers()
            .iter()
            .filter(|s| s.cohort == Cohort::Control)
            .count();
        assert_eq!(controls, 13);
        for tier in [Tier::High, Tier::Medium, Tier::Low, Tier::VeryLow] {
            let n = m.speakers().iter().filter(|s| s.tier == tier).count();
            let expected = match tier {
                Tier::High => 5,
                Tier::Medium | Tier::Low => 3,
                Tier::VeryLow => 4,
                Tier::Control => unreachable!(),
            };
            assert_eq!(n, expected, "{tier:?}");
        }
    }

    #[test]
    fn scaled_spec_counts() {
        let spec = SynthSpec::default().scaled(0.1);
        assert_eq!(spec.common_words, 10);
        assert_eq!(spec.uncommon_words, 30);
        assert_eq!(spec.digits, 1);
        assert_eq!(spec.letters, 3);
        assert_eq!(spec.commands, 2);
        // (1 + 3 + 2 + 10) * 3 + 30
        assert_eq!(spec.files_per_speaker(), 78);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = SynthSpec {
            duration_s: 0.05,
            ..SynthSpec::default()
        };
        let m = build_census_manifest(&spec, Path::new("")).unwrap();
        let u = &m.utterances()[0];
        let s = m.speaker(&u.speaker_id).unwrap();
        let a = render_utterance(&spec, s, u, 7);
        let b = render_utterance(&spec, s, u, 7);
        assert_eq!(a, b);
        let c = render_utterance(&spec, s, u, 8);
        assert_ne!(a, c, "different seeds must differ");
    }

    #[test]
    fn same_seed_gives_byte_identical_wavs() {
        let spec = SynthSpec {
            common_words: 1,
            uncommon_words: 1,
            digits: 1,
            letters: 1,
            commands: 1,
            repetitions: 1,
            duration_s: 0.05,
            ..SynthSpec::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let m = synth_corpus(&spec, 42, dir_a.path()).unwrap();
        synth_corpus(&spec, 42, dir_b.path()).unwrap();
        for u in m.utterances().iter().take(20) {
            let a = std::fs::read(dir_a.path().join(&u.audio_path)).unwrap();
            let b = std::fs::read(dir_b.path().join(&u.audio_path)).unwrap();
            assert_eq!(a, b, "wav bytes differ for {}", u.utterance_id);
        }
        // manifest loads back
        let loaded = super::super::load_manifest(&dir_a.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded, m);
    }

    #[test]
    fn tiers_have_distinct_base_tones() {
        let mut seen = std::collections::BTreeSet::new();
        for tier in Tier::ALL {
            let (f, ..) = tier_acoustics(tier);
            assert!(seen.insert(f as u64));
        }
    }
}
