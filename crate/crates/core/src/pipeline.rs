//! Stage-chaining helpers used by the CLI and the end-to-end tests:
//! feature extraction over a manifest, a full training run with checkpoint
//! and history on disk, and evaluation of a stored checkpoint.

use crate::corpus::{CorpusError, Manifest, SplitSpec};
use crate::dsp::{self, FeatureConfig, FeatureStore};
use crate::eval::{self, Evaluation, ReportFormat};
use crate::lora::LoraConfig;
use crate::model::{EncoderConfig, EncoderModel};
use crate::train::{self, TrainConfig, TrainHistory};
use crate::{Error, Result};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// Extract features for every utterance in the manifest into a store at
/// `out_dir`. Relative audio paths resolve against `audio_base`. Existing
/// feature files are reused unless `force` is set; the index is rewritten
/// either way. Returns the store and how many files were freshly computed.
pub fn extract_features(
    manifest: &Manifest,
    audio_base: &Path,
    config: &FeatureConfig,
    out_dir: &Path,
    force: bool,
) -> Result<(FeatureStore, usize)> {
    config.validate().map_err(Error::Dsp)?;
    let mut store = FeatureStore::create(out_dir).map_err(Error::Dsp)?;

    let jobs: Vec<_> = manifest
        .utterances()
        .iter()
        .map(|u| {
            let wav = if u.audio_path.is_absolute() {
                u.audio_path.clone()
            } else {
                audio_base.join(&u.audio_path)
            };
            (u.utterance_id.clone(), wav)
        })
        .collect();

    let fresh: Vec<Result<Option<String>>> = jobs
        .par_iter()
        .map(|(id, wav)| {
            let target = store.path_for(id);
            if !force && target.exists() {
                return Ok(None);
            }
            let compute = || -> Result<(), crate::DspError> {
                let clip = dsp::load_wav(wav)?;
                let clip = dsp::resample(&clip, config.sample_rate)?;
                let mel = dsp::log_mel(&clip, config, id)?;
                dsp::write_melf(&target, &mel)
            };
            compute().map_err(|source| {
                Error::Corpus(CorpusError::Dsp(annotate_utterance(source, id)))
            })?;
            Ok(Some(id.clone()))
        })
        .collect();

    let mut computed = 0;
    for result in fresh {
        if result?.is_some() {
            computed += 1;
        }
    }
    for (id, _) in &jobs {
        store.record(id);
    }
    store.write_index().map_err(Error::Dsp)?;
    Ok((store, computed))
}

// Feature failures during batch extraction must name the offending
// utterance; wrap the inner reason into the missing-feature style message.
fn annotate_utterance(err: crate::DspError, utterance_id: &str) -> crate::DspError {
    match err {
        crate::DspError::Io { path, source } => crate::DspError::Io {
            path: PathBuf::from(format!("{} (utterance {utterance_id})", path.display())),
            source,
        },
        crate::DspError::UnsupportedWav { path, reason } => crate::DspError::UnsupportedWav {
            path,
            reason: format!("{reason} (utterance {utterance_id})"),
        },
        other => other,
    }
}

/// Artifacts of one training run.
pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub history_path: PathBuf,
    pub history: TrainHistory,
}

/// Initialize an encoder, attach adapters when configured, train it on the
/// split, and write `checkpoint/` plus `history.jsonl` under `out_dir`.
/// All randomness is derived from the three config seeds.
pub fn train_experiment(
    split: &SplitSpec,
    manifest: &Manifest,
    store: &FeatureStore,
    encoder_config: &EncoderConfig,
    lora_config: Option<&LoraConfig>,
    train_config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut model = EncoderModel::<f32>::init(encoder_config).map_err(Error::Model)?;
    if let Some(lora) = lora_config {
        let adapter_seed = crate::io_util::derive_seed(encoder_config.seed, "adapters");
        model = crate::lora::wrap_model(model, lora, adapter_seed).map_err(Error::Lora)?;
    }

    let history =
        train::train(&mut model, split, manifest, store, train_config).map_err(Error::Train)?;

    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let checkpoint_dir = out_dir.join("checkpoint");
    train::save_checkpoint(&checkpoint_dir, &model, lora_config, Some(train_config))
        .map_err(Error::Checkpoint)?;
    let history_path = out_dir.join("history.jsonl");
    history.write_jsonl(&history_path).map_err(Error::Train)?;

    Ok(TrainOutcome {
        checkpoint_dir,
        history_path,
        history,
    })
}

/// Artifacts of one evaluation.
pub struct EvalOutcome {
    pub evaluation: Evaluation,
    pub predictions_path: PathBuf,
    pub metrics_json_path: PathBuf,
    pub report_md_path: PathBuf,
}

/// Load a checkpoint, score the split's test side, and write
/// `predictions.csv`, `metrics.json`, and `report.md` under `out_dir`.
pub fn evaluate_checkpoint(
    checkpoint_dir: &Path,
    split: &SplitSpec,
    manifest: &Manifest,
    store: &FeatureStore,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    let (model, _meta) = train::load_checkpoint::<f32>(checkpoint_dir).map_err(Error::Checkpoint)?;
    let evaluation = eval::evaluate(&model, split, manifest, store).map_err(Error::Eval)?;

    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let predictions_path = out_dir.join(format!("{}_predictions.csv", split.experiment_name));
    eval::write_predictions_csv(&predictions_path, &evaluation.predictions)
        .map_err(Error::Eval)?;

    let reports = [evaluation.report.clone()];
    let metrics_json_path = out_dir.join(format!("{}_metrics.json", split.experiment_name));
    write_text(
        &metrics_json_path,
        &eval::render_report(&reports, ReportFormat::Json),
    )?;
    let report_md_path = out_dir.join(format!("{}_report.md", split.experiment_name));
    write_text(
        &report_md_path,
        &eval::render_report(&reports, ReportFormat::Markdown),
    )?;

    Ok(EvalOutcome {
        evaluation,
        predictions_path,
        metrics_json_path,
        report_md_path,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::io_util::atomic_write(path, text.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
