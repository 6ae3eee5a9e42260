//! Speaker-disjoint train/test split construction and verification.

use super::{Cohort, CorpusError, Manifest, Task, Tier, UtteranceRecord};
use crate::io_util::atomic_write;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// Repetition of common words, digits, and letters used for experiments.
/// Uncommon words only exist as repetition 1.
const EXPERIMENT_REPETITION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    Binary,
    Multiclass5,
}

impl LabelScheme {
    pub fn n_classes(self) -> usize {
        match self {
            LabelScheme::Binary => 2,
            LabelScheme::Multiclass5 => 5,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            LabelScheme::Binary => vec!["Control".into(), "Pathology".into()],
            LabelScheme::Multiclass5 => Tier::ALL
                .iter()
                .map(|t| t.display_name().to_string())
                .collect(),
        }
    }
}

/// Which task subset a multiclass experiment draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSet {
    Words,
    DigitsLetters,
}

/// A train/test assignment over utterance ids. Built so that no speaker
/// contributes to both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub experiment_name: String,
    pub label_scheme: LabelScheme,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitSpec {
    pub fn save_json(&self, path: &Path) -> Result<(), CorpusError> {
        let json = serde_json::to_vec_pretty(self).map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        atomic_write(path, &json).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self, CorpusError> {
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Speakers that contribute to both sides of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    pub offending_speakers: Vec<String>,
}

/// Verify the anti-leakage law: no speaker may contribute utterances to both
/// the train and the test side. Returns `None` when the split is clean and a
/// report naming the shared speakers otherwise. Unresolvable utterance ids
/// are an error, not a violation.
pub fn check_speaker_disjoint(
    split: &SplitSpec,
    manifest: &Manifest,
) -> Result<Option<LeakReport>, CorpusError> {
    let train = manifest.speakers_of_utterances(&split.train_ids)?;
    let test = manifest.speakers_of_utterances(&split.test_ids)?;
    let offending: Vec<String> = train.intersection(&test).cloned().collect();
    if offending.is_empty() {
        Ok(None)
    } else {
        Ok(Some(LeakReport {
            offending_speakers: offending,
        }))
    }
}

/// The word-task file set of one speaker: common words at the experiment
/// repetition plus all uncommon words.
fn word_files<'a>(
    manifest: &'a Manifest,
    speaker_id: &'a str,
) -> impl Iterator<Item = &'a UtteranceRecord> + 'a {
    manifest.utterances_of(speaker_id).filter(|u| match u.task {
        Task::CommonWord => u.repetition == EXPERIMENT_REPETITION,
        Task::UncommonWord => true,
        _ => false,
    })
}

/// The digits-and-letters file set of one speaker, one repetition each.
fn digit_letter_files<'a>(
    manifest: &'a Manifest,
    speaker_id: &'a str,
) -> impl Iterator<Item = &'a UtteranceRecord> + 'a {
    manifest.utterances_of(speaker_id).filter(|u| {
        matches!(u.task, Task::Digit | Task::Letter) && u.repetition == EXPERIMENT_REPETITION
    })
}

fn task_files<'a>(
    manifest: &'a Manifest,
    speaker_id: &'a str,
    task_set: TaskSet,
) -> Vec<&'a UtteranceRecord> {
    match task_set {
        TaskSet::Words => word_files(manifest, speaker_id).collect(),
        TaskSet::DigitsLetters => digit_letter_files(manifest, speaker_id).collect(),
    }
}

fn require_speaker<'a>(
    manifest: &'a Manifest,
    id: &str,
) -> Result<&'a super::SpeakerRecord, CorpusError> {
    manifest
        .speaker(id)
        .ok_or_else(|| CorpusError::UnknownSpeaker(id.to_string()))
}

/// Conventional training pair of pathology speakers for each binary
/// experiment (the control pair is always `CM01`, `CF02`).
pub fn default_binary_train_pair(tier: Tier) -> Option<[&'static str; 2]> {
    match tier {
        Tier::High => Some(["F05", "M14"]),
        Tier::Medium => Some(["F04", "M11"]),
        Tier::Low => Some(["F02", "M16"]),
        Tier::VeryLow => Some(["F03", "M12"]),
        Tier::Control => None,
    }
}

/// Fixed two-speaker training set of every class in the multiclass
/// experiments.
pub fn multiclass_train_speakers() -> [(Tier, [&'static str; 2]); 5] {
    [
        (Tier::Control, ["CM01", "CF02"]),
        (Tier::High, ["M14", "F05"]),
        (Tier::Medium, ["M11", "F04"]),
        (Tier::Low, ["M16", "F02"]),
        (Tier::VeryLow, ["M12", "F03"]),
    ]
}

/// Build the two-class split for one intelligibility tier.
///
/// Train: the word-task files of two control speakers and two pathology
/// speakers of the requested tier. Test: the word-task files of every other
/// speaker, across all tiers. On the full corpus census this yields 1600
/// train files (800 + 800) and 9600 test files (4400 control + 5200
/// pathology) for each tier choice.
pub fn build_binary_split(
    manifest: &Manifest,
    tier: Tier,
    train_control: &[String; 2],
    train_pathology: &[String; 2],
) -> Result<SplitSpec, CorpusError> {
    if tier == Tier::Control {
        return Err(CorpusError::WrongTier {
            speaker_id: "<tier>".into(),
            expected: Tier::Medium,
            found: Tier::Control,
        });
    }
    for id in train_control {
        let s = require_speaker(manifest, id)?;
        if s.cohort != Cohort::Control {
            return Err(CorpusError::WrongTier {
                speaker_id: id.clone(),
                expected: Tier::Control,
                found: s.tier,
            });
        }
    }
    for id in train_pathology {
        let s = require_speaker(manifest, id)?;
        if s.tier != tier {
            return Err(CorpusError::WrongTier {
                speaker_id: id.clone(),
                expected: tier,
                found: s.tier,
            });
        }
    }

    let train_speakers: BTreeSet<&str> = train_control
        .iter()
        .chain(train_pathology.iter())
        .map(String::as_str)
        .collect();
    if train_speakers.len() != 4 {
        return Err(CorpusError::ConflictingSpeaker(
            "training speakers must be distinct".into(),
        ));
    }

    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for s in manifest.speakers() {
        let files = task_files(manifest, &s.speaker_id, TaskSet::Words);
        if train_speakers.contains(s.speaker_id.as_str()) {
            if files.is_empty() {
                return Err(CorpusError::InsufficientFiles {
                    speaker_id: s.speaker_id.clone(),
                });
            }
            train_ids.extend(files.iter().map(|u| u.utterance_id.clone()));
        } else {
            test_ids.extend(files.iter().map(|u| u.utterance_id.clone()));
        }
    }

    let tier_name = match tier {
        Tier::High => "high",
        Tier::Medium => "medium",
        Tier::Low => "low",
        Tier::VeryLow => "very_low",
        Tier::Control => unreachable!(),
    };
    Ok(SplitSpec {
        experiment_name: format!("binary_{tier_name}"),
        label_scheme: LabelScheme::Binary,
        train_ids,
        test_ids,
    })
}

/// Build the five-class split over the given task set.
///
/// Train: the fixed two speakers per class from
/// [`multiclass_train_speakers`]. Test: every remaining speaker's files of
/// the same task set. On the full census the digits-and-letters variant
/// yields 360 train files (72 per class) and 648 test files (396 control +
/// 252 pathology); the words variant yields 800 train files per class.
pub fn build_multiclass_split(
    manifest: &Manifest,
    task_set: TaskSet,
) -> Result<SplitSpec, CorpusError> {
    for tier in Tier::ALL {
        let found = manifest.speakers().iter().filter(|s| s.tier == tier).count();
        if found < 2 {
            return Err(CorpusError::ClassTooSmall { tier, found });
        }
    }

    let mut train_speakers: BTreeSet<&str> = BTreeSet::new();
    for (tier, pair) in multiclass_train_speakers() {
        for id in pair {
            let s = require_speaker(manifest, id)?;
            if s.tier != tier {
                return Err(CorpusError::WrongTier {
                    speaker_id: id.to_string(),
                    expected: tier,
                    found: s.tier,
                });
            }
            train_speakers.insert(id);
        }
    }

    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for s in manifest.speakers() {
        let files = task_files(manifest, &s.speaker_id, task_set);
        if train_speakers.contains(s.speaker_id.as_str()) {
            if files.is_empty() {
                return Err(CorpusError::InsufficientFiles {
                    speaker_id: s.speaker_id.clone(),
                });
            }
            train_ids.extend(files.iter().map(|u| u.utterance_id.clone()));
        } else {
            test_ids.extend(files.iter().map(|u| u.utterance_id.clone()));
        }
    }

    let name = match task_set {
        TaskSet::Words => "multiclass_words",
        TaskSet::DigitsLetters => "multiclass_digits_letters",
    };
    Ok(SplitSpec {
        experiment_name: name.to_string(),
        label_scheme: LabelScheme::Multiclass5,
        train_ids,
        test_ids,
    })
}
