//! Manifest CSV serialization.
//!
//! One UTF-8 CSV with header
//! `speaker_id,cohort,gender,age,intelligibility_pct,tier,utterance_id,task,repetition,audio_path`.
//! Rows are denormalized utterances carrying their speaker's attributes. Two
//! degenerate row shapes are accepted: a row with empty utterance columns
//! declares a speaker without utterances, and a row with empty speaker
//! attribute columns references a speaker declared on some other row (if no
//! such declaration exists the load fails with `DanglingSpeaker`).

use super::{
    Cohort, CorpusError, Gender, Manifest, SpeakerRecord, Task, Tier, UtteranceRecord,
};
use crate::io_util::atomic_write;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const HEADER: [&str; 10] = [
    "speaker_id",
    "cohort",
    "gender",
    "age",
    "intelligibility_pct",
    "tier",
    "utterance_id",
    "task",
    "repetition",
    "audio_path",
];

fn cohort_str(c: Cohort) -> &'static str {
    match c {
        Cohort::Control => "control",
        Cohort::Pathology => "pathology",
    }
}

fn gender_str(g: Gender) -> &'static str {
    match g {
        Gender::Male => "male",
        Gender::Female => "female",
    }
}

fn tier_str(t: Tier) -> &'static str {
    match t {
        Tier::Control => "control",
        Tier::High => "high",
        Tier::Medium => "medium",
        Tier::Low => "low",
        Tier::VeryLow => "very_low",
    }
}

fn task_str(t: Task) -> &'static str {
    match t {
        Task::Digit => "digit",
        Task::Letter => "letter",
        Task::Command => "command",
        Task::CommonWord => "common_word",
        Task::UncommonWord => "uncommon_word",
    }
}

fn parse_cohort(s: &str) -> Option<Cohort> {
    match s {
        "control" => Some(Cohort::Control),
        "pathology" => Some(Cohort::Pathology),
        _ => None,
    }
}

fn parse_gender(s: &str) -> Option<Gender> {
    match s {
        "male" => Some(Gender::Male),
        "female" => Some(Gender::Female),
        _ => None,
    }
}

fn parse_tier(s: &str) -> Option<Tier> {
    match s {
        "control" => Some(Tier::Control),
        "high" => Some(Tier::High),
        "medium" => Some(Tier::Medium),
        "low" => Some(Tier::Low),
        "very_low" => Some(Tier::VeryLow),
        _ => None,
    }
}

fn parse_task(s: &str) -> Option<Task> {
    match s {
        "digit" => Some(Task::Digit),
        "letter" => Some(Task::Letter),
        "command" => Some(Task::Command),
        "common_word" => Some(Task::CommonWord),
        "uncommon_word" => Some(Task::UncommonWord),
        _ => None,
    }
}

/// Load and validate a manifest CSV.
pub fn load_manifest(path: &Path) -> Result<Manifest, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CorpusError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => CorpusError::Csv(e),
        })?;

    {
        let headers = reader.headers()?;
        let found: Vec<&str> = headers.iter().collect();
        if found != HEADER {
            return Err(CorpusError::MalformedRow {
                line: 1,
                reason: format!("header must be {:?}, found {:?}", HEADER.join(","), found),
            });
        }
    }

    let mut speakers: BTreeMap<String, SpeakerRecord> = BTreeMap::new();
    let mut pending_reference_rows: Vec<(usize, String)> = Vec::new();
    let mut utterances: Vec<UtteranceRecord> = Vec::new();

    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after the header
        let record = record?;
        if record.len() != HEADER.len() {
            return Err(CorpusError::MalformedRow {
                line,
                reason: format!("expected {} fields, found {}", HEADER.len(), record.len()),
            });
        }
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let bad = |reason: String| CorpusError::MalformedRow { line, reason };

        let speaker_id = field(0).to_string();
        if speaker_id.is_empty() {
            return Err(bad("speaker_id is required".into()));
        }

        let speaker_cells = [field(1), field(2), field(3), field(4), field(5)];
        let has_speaker_attrs = speaker_cells.iter().any(|c| !c.is_empty());
        if has_speaker_attrs {
            let cohort = parse_cohort(field(1))
                .ok_or_else(|| bad(format!("bad cohort {:?}", field(1))))?;
            let gender = parse_gender(field(2))
                .ok_or_else(|| bad(format!("bad gender {:?}", field(2))))?;
            let age = if field(3).is_empty() {
                None
            } else {
                Some(
                    field(3)
                        .parse::<u32>()
                        .map_err(|e| bad(format!("bad age: {e}")))?,
                )
            };
            let intelligibility_pct = if field(4).is_empty() {
                None
            } else {
                let pct = field(4)
                    .parse::<f64>()
                    .map_err(|e| bad(format!("bad intelligibility_pct: {e}")))?;
                if !(0.0..=100.0).contains(&pct) {
                    return Err(bad(format!("intelligibility_pct {pct} out of [0,100]")));
                }
                Some(pct)
            };
            let tier =
                parse_tier(field(5)).ok_or_else(|| bad(format!("bad tier {:?}", field(5))))?;
            let rec = SpeakerRecord {
                speaker_id: speaker_id.clone(),
                cohort,
                gender,
                age,
                intelligibility_pct,
                tier,
            };
            if let Some(existing) = speakers.get(&speaker_id) {
                if *existing != rec {
                    return Err(CorpusError::ConflictingSpeaker(speaker_id));
                }
            } else {
                speakers.insert(speaker_id.clone(), rec);
            }
        }

        let utterance_cells = [field(6), field(7), field(8), field(9)];
        let has_utterance = utterance_cells.iter().any(|c| !c.is_empty());
        if !has_utterance {
            if !has_speaker_attrs {
                return Err(bad("row has neither speaker attributes nor an utterance".into()));
            }
            continue; // speaker-declaration row
        }

        let utterance_id = field(6).to_string();
        if utterance_id.is_empty() {
            return Err(bad("utterance_id is required".into()));
        }
        let task = parse_task(field(7)).ok_or_else(|| bad(format!("bad task {:?}", field(7))))?;
        let repetition = field(8)
            .parse::<u8>()
            .map_err(|e| bad(format!("bad repetition: {e}")))?;
        if field(9).is_empty() {
            return Err(bad("audio_path is required".into()));
        }
        let audio_path = PathBuf::from(field(9));

        if !has_speaker_attrs {
            pending_reference_rows.push((utterances.len(), utterance_id.clone()));
        }
        utterances.push(UtteranceRecord {
            utterance_id,
            speaker_id,
            task,
            repetition,
            audio_path,
            // patched below once all speakers are known
            label: Tier::Control,
        });
    }

    // Resolve labels from speaker tiers; reference-only rows must now find
    // their speaker.
    for u in &mut utterances {
        match speakers.get(&u.speaker_id) {
            Some(s) => u.label = s.tier,
            None => {
                return Err(CorpusError::DanglingSpeaker {
                    utterance_id: u.utterance_id.clone(),
                    speaker_id: u.speaker_id.clone(),
                })
            }
        }
    }
    drop(pending_reference_rows);

    Manifest::new(speakers.into_values().collect(), utterances)
}

/// Write a manifest CSV (atomic). Every utterance row carries full speaker
/// attributes; speakers without utterances get a declaration row.
pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<(), CorpusError> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer
        .write_record(HEADER)
        .map_err(CorpusError::Csv)?;

    let speaker_fields = |s: &SpeakerRecord| {
        [
            s.speaker_id.clone(),
            cohort_str(s.cohort).to_string(),
            gender_str(s.gender).to_string(),
            s.age.map(|a| a.to_string()).unwrap_or_default(),
            s.intelligibility_pct
                .map(|p| format!("{p}"))
                .unwrap_or_default(),
            tier_str(s.tier).to_string(),
        ]
    };

    for u in manifest.utterances() {
        let s = manifest
            .speaker(&u.speaker_id)
            .expect("manifest is validated");
        let mut row: Vec<String> = speaker_fields(s).to_vec();
        row.push(u.utterance_id.clone());
        row.push(task_str(u.task).to_string());
        row.push(u.repetition.to_string());
        row.push(u.audio_path.to_string_lossy().into_owned());
        writer.write_record(&row).map_err(CorpusError::Csv)?;
    }
    for s in manifest.speakers() {
        if manifest.utterances_of(&s.speaker_id).next().is_none() {
            let mut row: Vec<String> = speaker_fields(s).to_vec();
            row.extend([String::new(), String::new(), String::new(), String::new()]);
            writer.write_record(&row).map_err(CorpusError::Csv)?;
        }
    }

    let bytes = writer
        .into_inner()
        .map_err(|e| CorpusError::MalformedRow {
            line: 0,
            reason: e.to_string(),
        })?;
    atomic_write(path, &bytes).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_manifest() -> Manifest {
        let speakers = vec![
            SpeakerRecord {
                speaker_id: "CM01".into(),
                cohort: Cohort::Control,
                gender: Gender::Male,
                age: None,
                intelligibility_pct: None,
                tier: Tier::Control,
            },
            SpeakerRecord {
                speaker_id: "M05".into(),
                cohort: Cohort::Pathology,
                gender: Gender::Male,
                age: Some(21),
                intelligibility_pct: Some(58.0),
                tier: Tier::Medium,
            },
        ];
        let utterances = vec![
            UtteranceRecord {
                utterance_id: "CM01_CW001_R1".into(),
                speaker_id: "CM01".into(),
                task: Task::CommonWord,
                repetition: 1,
                audio_path: "CM01/CM01_CW001_R1.wav".into(),
                label: Tier::Control,
            },
            UtteranceRecord {
                utterance_id: "M05_UW001_R1".into(),
                speaker_id: "M05".into(),
                task: Task::UncommonWord,
                repetition: 1,
                audio_path: "M05/M05_UW001_R1.wav".into(),
                label: Tier::Medium,
            },
        ];
        Manifest::new(speakers, utterances).unwrap()
    }

    #[test]
    fn roundtrip_preserves_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = sample_manifest();
        save_manifest(&path, &m).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn two_row_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "speaker_id,cohort,gender,age,intelligibility_pct,tier,utterance_id,task,repetition,audio_path\n\
             CM01,control,male,,,control,u1,digit,1,CM01/u1.wav\n\
             M05,pathology,male,21,58,medium,u2,letter,2,M05/u2.wav\n",
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.utterances().len(), 2);
        assert_eq!(m.speakers().len(), 2);
        assert_eq!(m.utterance("u2").unwrap().label, Tier::Medium);
    }

    #[test]
    fn reference_row_to_unknown_speaker_dangles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "speaker_id,cohort,gender,age,intelligibility_pct,tier,utterance_id,task,repetition,audio_path\n\
             M99,,,,,,u1,digit,1,M99/u1.wav\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(CorpusError::DanglingSpeaker { .. })
        ));
    }

    #[test]
    fn duplicate_utterance_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "speaker_id,cohort,gender,age,intelligibility_pct,tier,utterance_id,task,repetition,audio_path\n\
             CM01,control,male,,,control,u1,digit,1,a.wav\n\
             CM01,control,male,,,control,u1,digit,2,b.wav\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(CorpusError::DuplicateUtterance(_))
        ));
    }

    #[test]
    fn malformed_field_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "speaker_id,cohort,gender,age,intelligibility_pct,tier,utterance_id,task,repetition,audio_path\n\
             CM01,control,male,,,control,u1,digit,not_a_number,a.wav\n",
        )
        .unwrap();
        match load_manifest(&path) {
            Err(CorpusError::MalformedRow { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(CorpusError::MalformedRow { line: 1, .. })
        ));
    }
}
