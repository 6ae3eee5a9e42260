//! Corpus catalog, speaker-disjoint splits, and the synthetic corpus.
//!
//! The catalog mirrors the structure of an isolated-word dysarthric speech
//! corpus: 13 control and 15 pathology speakers, the latter banded into four
//! intelligibility tiers, each speaker contributing digits, letters,
//! computer commands, common words, and uncommon words. Train/test splits
//! built here are speaker-disjoint by construction, and a checker verifies
//! that property for any split.

mod manifest;
mod split;
mod synth;

pub use manifest::{load_manifest, save_manifest};
pub use split::{
    build_binary_split, build_multiclass_split, check_speaker_disjoint, default_binary_train_pair,
    multiclass_train_speakers, LabelScheme, LeakReport, SplitSpec, TaskSet,
};
pub use synth::{build_census_manifest, census_speakers, synth_corpus, SynthSpec};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate utterance id {0}")]
    DuplicateUtterance(String),
    #[error("utterance {utterance_id} references undefined speaker {speaker_id}")]
    DanglingSpeaker {
        utterance_id: String,
        speaker_id: String,
    },
    #[error("speaker {0} defined twice with conflicting attributes")]
    ConflictingSpeaker(String),
    #[error("speaker {speaker_id}: intelligibility {pct}% is inconsistent with tier {tier:?}")]
    TierBandViolation {
        speaker_id: String,
        pct: f64,
        tier: Tier,
    },
    #[error("speaker {0}: control speakers carry no intelligibility percentage")]
    ControlWithIntelligibility(String),
    #[error("speaker {0}: pathology speakers need an intelligibility percentage")]
    MissingIntelligibility(String),
    #[error("utterance {utterance_id}: repetition {repetition} invalid for task {task:?}")]
    InvalidRepetition {
        utterance_id: String,
        task: Task,
        repetition: u8,
    },
    #[error("unknown speaker {0}")]
    UnknownSpeaker(String),
    #[error("unknown utterance {0}")]
    UnknownUtterance(String),
    #[error("speaker {speaker_id} is {found:?}, expected {expected:?}")]
    WrongTier {
        speaker_id: String,
        expected: Tier,
        found: Tier,
    },
    #[error("speaker {speaker_id} has no files for the requested task set")]
    InsufficientFiles { speaker_id: String },
    #[error("class {tier:?} has {found} speakers, need at least 2")]
    ClassTooSmall { tier: Tier, found: usize },
    #[error("invalid synthesis parameters: {0}")]
    InvalidSynthSpec(String),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Control,
    Pathology,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

/// Intelligibility class. `Control` doubles as the class of healthy
/// speakers, so this enum is also the five-way label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Control,
    High,
    Medium,
    Low,
    VeryLow,
}

impl Tier {
    pub const ALL: [Tier; 5] = [
        Tier::Control,
        Tier::High,
        Tier::Medium,
        Tier::Low,
        Tier::VeryLow,
    ];

    pub const PATHOLOGY: [Tier; 4] = [Tier::High, Tier::Medium, Tier::Low, Tier::VeryLow];

    /// Index in the five-way label space (Control = 0).
    pub fn class_index(self) -> usize {
        match self {
            Tier::Control => 0,
            Tier::High => 1,
            Tier::Medium => 2,
            Tier::Low => 3,
            Tier::VeryLow => 4,
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Tier::Control => "Control",
            Tier::High => "High",
            Tier::Medium => "Medium",
            Tier::Low => "Low",
            Tier::VeryLow => "Very Low",
        }
    }

    /// Tier implied by an intelligibility percentage, if it falls in one of
    /// the documented bands.
    pub fn from_intelligibility(pct: f64) -> Option<Tier> {
        if pct <= 17.0 {
            Some(Tier::VeryLow)
        } else if (28.0..=43.0).contains(&pct) {
            Some(Tier::Low)
        } else if (58.0..=62.0).contains(&pct) {
            Some(Tier::Medium)
        } else if pct >= 86.0 {
            Some(Tier::High)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Digit,
    Letter,
    Command,
    CommonWord,
    UncommonWord,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Digit,
        Task::Letter,
        Task::Command,
        Task::CommonWord,
        Task::UncommonWord,
    ];

    /// Uncommon words are recorded once; everything else up to three times.
    pub fn max_repetitions(self) -> u8 {
        match self {
            Task::UncommonWord => 1,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    pub cohort: Cohort,
    pub gender: Gender,
    pub age: Option<u32>,
    pub intelligibility_pct: Option<f64>,
    pub tier: Tier,
}

impl SpeakerRecord {
    fn validate(&self) -> Result<(), CorpusError> {
        match self.cohort {
            Cohort::Control => {
                if self.tier != Tier::Control {
                    return Err(CorpusError::TierBandViolation {
                        speaker_id: self.speaker_id.clone(),
                        pct: self.intelligibility_pct.unwrap_or(-1.0),
                        tier: self.tier,
                    });
                }
                if self.intelligibility_pct.is_some() {
                    return Err(CorpusError::ControlWithIntelligibility(
                        self.speaker_id.clone(),
                    ));
                }
            }
            Cohort::Pathology => {
                let pct = self.intelligibility_pct.ok_or_else(|| {
                    CorpusError::MissingIntelligibility(self.speaker_id.clone())
                })?;
                if Tier::from_intelligibility(pct) != Some(self.tier) {
                    return Err(CorpusError::TierBandViolation {
                        speaker_id: self.speaker_id.clone(),
                        pct,
                        tier: self.tier,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub task: Task,
    pub repetition: u8,
    pub audio_path: PathBuf,
    /// Five-way class label, always the tier of the speaker.
    pub label: Tier,
}

/// Validated corpus catalog. Speakers are kept sorted by id; utterances keep
/// their construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    speakers: Vec<SpeakerRecord>,
    utterances: Vec<UtteranceRecord>,
    speaker_index: BTreeMap<String, usize>,
    utterance_index: BTreeMap<String, usize>,
}

impl Manifest {
    /// Build a manifest, checking referential integrity, id uniqueness,
    /// repetition limits, tier banding, and label consistency.
    pub fn new(
        mut speakers: Vec<SpeakerRecord>,
        utterances: Vec<UtteranceRecord>,
    ) -> Result<Self, CorpusError> {
        speakers.sort_by(|a, b| a.speaker_id.cmp(&b.speaker_id));
        let mut speaker_index = BTreeMap::new();
        for (i, s) in speakers.iter().enumerate() {
            s.validate()?;
            if speaker_index.insert(s.speaker_id.clone(), i).is_some() {
                return Err(CorpusError::ConflictingSpeaker(s.speaker_id.clone()));
            }
        }
        let mut utterance_index = BTreeMap::new();
        for (i, u) in utterances.iter().enumerate() {
            if utterance_index.insert(u.utterance_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateUtterance(u.utterance_id.clone()));
            }
            let speaker = speaker_index
                .get(&u.speaker_id)
                .map(|&j| &speakers[j])
                .ok_or_else(|| CorpusError::DanglingSpeaker {
                    utterance_id: u.utterance_id.clone(),
                    speaker_id: u.speaker_id.clone(),
                })?;
            if u.repetition == 0 || u.repetition > u.task.max_repetitions() {
                return Err(CorpusError::InvalidRepetition {
                    utterance_id: u.utterance_id.clone(),
                    task: u.task,
                    repetition: u.repetition,
                });
            }
            if u.label != speaker.tier {
                return Err(CorpusError::MalformedRow {
                    line: i + 2,
                    reason: format!(
                        "utterance {} labeled {:?} but speaker {} is {:?}",
                        u.utterance_id, u.label, u.speaker_id, speaker.tier
                    ),
                });
            }
        }
        Ok(Self {
            speakers,
            utterances,
            speaker_index,
            utterance_index,
        })
    }

    pub fn speakers(&self) -> &[SpeakerRecord] {
        &self.speakers
    }

    pub fn utterances(&self) -> &[UtteranceRecord] {
        &self.utterances
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerRecord> {
        self.speaker_index.get(id).map(|&i| &self.speakers[i])
    }

    pub fn utterance(&self, id: &str) -> Option<&UtteranceRecord> {
        self.utterance_index.get(id).map(|&i| &self.utterances[i])
    }

    /// Utterances of one speaker, in manifest order.
    pub fn utterances_of<'a>(
        &'a self,
        speaker_id: &'a str,
    ) -> impl Iterator<Item = &'a UtteranceRecord> + 'a {
        self.utterances
            .iter()
            .filter(move |u| u.speaker_id == speaker_id)
    }

    /// Distinct speakers behind a set of utterance ids.
    pub fn speakers_of_utterances<'a, I>(&self, ids: I) -> Result<BTreeSet<String>, CorpusError>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut out = BTreeSet::new();
        for id in ids {
            let u = self
                .utterance(id)
                .ok_or_else(|| CorpusError::UnknownUtterance(id.clone()))?;
            out.insert(u.speaker_id.clone());
        }
        Ok(out)
    }

    /// Class label of an utterance under a label scheme.
    pub fn label_of(&self, utterance_id: &str, scheme: LabelScheme) -> Result<usize, CorpusError> {
        let u = self
            .utterance(utterance_id)
            .ok_or_else(|| CorpusError::UnknownUtterance(utterance_id.to_string()))?;
        Ok(match scheme {
            LabelScheme::Binary => {
                if u.label == Tier::Control {
                    0
                } else {
                    1
                }
            }
            LabelScheme::Multiclass5 => u.label.class_index(),
        })
    }
}
