//! Low-rank adaptation of the encoder's attention projections.
//!
//! Wrapping freezes every base parameter and adds trainable rank-`r`
//! factors `A` and `B` to the chosen projections; only the adapters and the
//! classification head receive gradients. `B` starts at zero, so an adapted
//! model computes exactly what the base model computed until the first
//! optimizer step. Merging collapses each adapted projection back to a
//! single matrix `W + (alpha / r) * B * A`.

use crate::model::{EncoderConfig, EncoderModel, LoraAdapter, Projection, Scalar};
use crate::train::checkpoint::{
    self, read_tensor_files, write_tensor_files, CheckpointError, CheckpointKind, CheckpointMeta,
};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {rank} exceeds projection dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("model has no adapters")]
    NotAdapted,
    #[error("adapter tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Attention projections an adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Query,
    Key,
    Value,
    Output,
}

impl ProjectionKind {
    const ORDER: [ProjectionKind; 4] = [
        ProjectionKind::Query,
        ProjectionKind::Key,
        ProjectionKind::Value,
        ProjectionKind::Output,
    ];
}

/// Adapter hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scaling numerator; `None` means `rank`, i.e. a scaling of 1.
    pub alpha: Option<f64>,
    pub target_projections: Vec<ProjectionKind>,
    /// Standard deviation of the random init of factor `A`.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: None,
            target_projections: vec![ProjectionKind::Query, ProjectionKind::Value],
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }

    pub fn validate(&self) -> Result<(), LoraError> {
        if self.rank == 0 {
            return Err(LoraError::InvalidConfig("rank must be >= 1".into()));
        }
        if self.target_projections.is_empty() {
            return Err(LoraError::InvalidConfig(
                "at least one target projection required".into(),
            ));
        }
        if let Some(alpha) = self.alpha {
            if alpha <= 0.0 {
                return Err(LoraError::InvalidConfig("alpha must be > 0".into()));
            }
        }
        if self.init_std < 0.0 {
            return Err(LoraError::InvalidConfig("init_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Freeze the base model and attach adapters to every target projection in
/// every block. The head stays trainable; everything else is frozen.
pub fn wrap_model<T: Scalar>(
    mut model: EncoderModel<T>,
    config: &LoraConfig,
    seed: u64,
) -> Result<EncoderModel<T>, LoraError> {
    config.validate()?;
    let d = model.config().d_model;
    if config.rank > d {
        return Err(LoraError::RankTooLarge {
            rank: config.rank,
            dim: d,
        });
    }

    model.set_all_trainable(false);
    let scaling = T::from_f64(config.scaling()).expect("finite scaling");
    let normal = rand_distr::Normal::new(0.0f64, config.init_std).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for block in &mut model.blocks {
        for kind in ProjectionKind::ORDER {
            if !config.target_projections.contains(&kind) {
                continue;
            }
            let slot = match kind {
                ProjectionKind::Query => &mut block.attn.query,
                ProjectionKind::Key => &mut block.attn.key,
                ProjectionKind::Value => &mut block.attn.value,
                ProjectionKind::Output => &mut block.attn.out,
            };
            let base = match slot {
                Projection::Plain(linear) => linear.clone(),
                Projection::Adapted { .. } => {
                    return Err(LoraError::InvalidConfig(
                        "model is already adapted".into(),
                    ))
                }
            };
            let (d_out, d_in) = base.weight.dim();
            let a = Array2::from_shape_fn((config.rank, d_in), |_| {
                T::from_f64(normal.sample(&mut rng)).expect("finite draw")
            });
            let b = Array2::zeros((d_out, config.rank));
            *slot = Projection::Adapted {
                base,
                adapter: LoraAdapter { a, b, scaling },
            };
        }
    }

    model.head.trainable = true;
    Ok(model)
}

/// Collapse every adapter into its base weight, producing a plain model
/// with all parameters trainable and no adapter structures left.
pub fn merge<T: Scalar>(mut model: EncoderModel<T>) -> EncoderModel<T> {
    for block in &mut model.blocks {
        for slot in [
            &mut block.attn.query,
            &mut block.attn.key,
            &mut block.attn.value,
            &mut block.attn.out,
        ] {
            if let Projection::Adapted { base, adapter } = slot {
                let delta = adapter.b.dot(&adapter.a) * adapter.scaling;
                let mut merged = base.clone();
                merged.weight = &base.weight + &delta;
                *slot = Projection::Plain(merged);
            }
        }
    }
    model.set_all_trainable(true);
    model
}

/// The compact trainable state of an adapted model: adapter factors plus the
/// classification head, with the configs needed to re-attach them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub encoder: EncoderConfig,
    pub lora: LoraConfig,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Extract the adapter factors and head from an adapted model.
pub fn adapter_state<T: Scalar>(
    model: &EncoderModel<T>,
    lora: &LoraConfig,
) -> Result<AdapterState, LoraError> {
    let mut tensors = Vec::new();
    model.for_each_param(&mut |name, shape, data, _| {
        if name.ends_with(".lora_a") || name.ends_with(".lora_b") || name.starts_with("head.") {
            tensors.push((
                name.to_string(),
                shape.to_vec(),
                data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            ));
        }
    });
    if !tensors.iter().any(|(n, _, _)| n.ends_with(".lora_a")) {
        return Err(LoraError::NotAdapted);
    }
    Ok(AdapterState {
        encoder: model.config().clone(),
        lora: lora.clone(),
        tensors,
    })
}

impl AdapterState {
    /// Copy the stored tensors onto a model wrapped with a matching config.
    pub fn apply<T: Scalar>(&self, model: &mut EncoderModel<T>) -> Result<(), LoraError> {
        // collect the target shapes first so mismatches fail before any write
        let mut expected: std::collections::BTreeMap<String, Vec<usize>> =
            std::collections::BTreeMap::new();
        model.for_each_param(&mut |name, shape, _, _| {
            expected.insert(name.to_string(), shape.to_vec());
        });
        for (name, shape, _) in &self.tensors {
            match expected.get(name) {
                Some(found) if found == shape => {}
                Some(found) => {
                    return Err(LoraError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: found.clone(),
                    })
                }
                None => {
                    return Err(LoraError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: vec![],
                    })
                }
            }
        }
        let by_name: std::collections::BTreeMap<&str, &Vec<f32>> = self
            .tensors
            .iter()
            .map(|(n, _, d)| (n.as_str(), d))
            .collect();
        model.for_each_param_mut(&mut |name, _, data, _| {
            if let Some(values) = by_name.get(name) {
                for (dst, src) in data.iter_mut().zip(values.iter()) {
                    *dst = T::from_f32(*src).expect("finite value");
                }
            }
        });
        Ok(())
    }

    /// Write the adapter directory: `config.json` flagged as adapter-only
    /// plus the shared tensor blob/index pair.
    pub fn save(&self, dir: &Path) -> Result<(), LoraError> {
        let meta = CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            kind: CheckpointKind::Adapter,
            encoder: self.encoder.clone(),
            lora: Some(self.lora.clone()),
            train: None,
        };
        crate::io_util::atomic_write_dir(dir, |tmp| {
            checkpoint::write_meta(tmp, &meta)?;
            write_tensor_files(tmp, &self.tensors)?;
            Ok(())
        })
        .map_err(|source| {
            LoraError::Checkpoint(CheckpointError::Io {
                path: dir.to_path_buf(),
                source,
            })
        })
    }

    pub fn load(dir: &Path) -> Result<Self, LoraError> {
        let meta = checkpoint::read_meta(dir)?;
        if meta.kind != CheckpointKind::Adapter {
            return Err(LoraError::InvalidConfig(format!(
                "{} is not an adapter directory",
                dir.display()
            )));
        }
        let lora = meta
            .lora
            .ok_or_else(|| LoraError::InvalidConfig("adapter meta lacks lora config".into()))?;
        Ok(Self {
            encoder: meta.encoder,
            lora,
            tensors: read_tensor_files(dir)?,
        })
    }

    /// Total bytes of the stored tensors.
    pub fn tensor_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, _, d)| d.len() * 4).sum()
    }
}
