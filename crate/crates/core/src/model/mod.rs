//! Transformer audio encoder with a classification head.
//!
//! The architecture follows the published encoder shape of the pretrained
//! family it is sized after (two-conv stem, sinusoidal positions, pre-norm
//! blocks, final layer norm) so externally trained weights could be imported
//! through the checkpoint format, but every dimension is free config and toy
//! models train from random initialization. Forward, backward, and the
//! optimizer-facing parameter registry are all explicit; no autodiff
//! framework is involved.

mod encoder;
mod layers;
mod scalar;

pub use encoder::{EncoderModel, ForwardTape};
pub use scalar::Scalar;

pub(crate) use layers::{LoraAdapter, Projection};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
}

/// How encoder hidden states are reduced before the head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub max_frames: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// MLP width; `None` means `4 * d_model`.
    pub d_mlp: Option<usize>,
    pub n_classes: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            max_frames: 3000,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_mlp: None,
            n_classes: 2,
            dropout: 0.0,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn mlp_width(&self) -> usize {
        self.d_mlp.unwrap_or(4 * self.d_model)
    }

    /// Sequence length after the stride-2 stem.
    pub fn seq_len(&self) -> usize {
        self.max_frames.div_ceil(2)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_mels == 0 || self.max_frames < 2 {
            return fail("need n_mels >= 1 and max_frames >= 2".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return fail("d_model, n_heads, n_layers must all be >= 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return fail("d_model must be even for the sinusoid table".into());
        }
        if self.n_classes < 2 {
            return fail("n_classes must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.mlp_width() == 0 {
            return fail("d_mlp must be >= 1".into());
        }
        Ok(())
    }

    /// Closed-form parameter count of the plain (unadapted) model.
    pub fn param_count_formula(&self) -> usize {
        let d = self.d_model;
        let dm = self.mlp_width();
        let conv1 = d * self.n_mels * 3 + d;
        let conv2 = d * d * 3 + d;
        // ln1 + q(w,b) + k(w) + v(w,b) + out(w,b) + ln2 + mlp1 + mlp2
        let block = 2 * d
            + (d * d + d)
            + (d * d)
            + (d * d + d)
            + (d * d + d)
            + 2 * d
            + (dm * d + dm)
            + (d * dm + d);
        conv1 + conv2 + self.n_layers * block + 2 * d + (self.n_classes * d + self.n_classes)
    }
}

/// Named gradient tensors, one entry per trainable parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    map: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    /// Accumulate a gradient tensor under a name. Entries are kept in
    /// standard layout so optimizers can walk them as flat slices.
    pub(crate) fn add(&mut self, name: String, grad: ArrayD<T>) {
        let grad = if grad.is_standard_layout() {
            grad
        } else {
            grad.as_standard_layout().into_owned()
        };
        match self.map.get_mut(&name) {
            Some(existing) => *existing = &*existing + &grad,
            None => {
                self.map.insert(name, grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Element-wise sum with another gradient set (same keys).
    pub fn merge(&mut self, other: Gradients<T>) {
        for (name, grad) in other.map {
            self.add(name, grad);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for grad in self.map.values_mut() {
            grad.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Self::new()
    }
}
