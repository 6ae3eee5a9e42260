//! Optimizers over the model's named-parameter registry.

use crate::model::{EncoderModel, Gradients, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay (beta1 0.9, beta2 0.999, eps 1e-8,
    /// weight decay 0).
    #[default]
    AdamW,
    /// Plain stochastic gradient descent, kept for ablations.
    Sgd,
}

pub(crate) struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    /// First/second moment per parameter name (AdamW only).
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
const WEIGHT_DECAY: f64 = 0.0;

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update. Only parameters with a gradient entry move; the
    /// gradient set carries exactly the trainable parameters.
    pub fn step(&mut self, model: &mut EncoderModel<T>, grads: &Gradients<T>) {
        self.step += 1;
        let lr = T::from_f64(self.lr).expect("finite lr");
        match self.kind {
            OptimizerKind::Sgd => {
                model.for_each_param_mut(&mut |name, _, data, _| {
                    if let Some(grad) = grads.get(name) {
                        let g = grad.as_slice().expect("contiguous gradient");
                        for (p, &gv) in data.iter_mut().zip(g.iter()) {
                            *p = *p - lr * gv;
                        }
                    }
                });
            }
            OptimizerKind::AdamW => {
                let beta1 = T::from_f64(BETA1).unwrap();
                let beta2 = T::from_f64(BETA2).unwrap();
                let one = T::one();
                let eps = T::from_f64(EPS).unwrap();
                let wd = T::from_f64(WEIGHT_DECAY).unwrap();
                let bias1 = T::from_f64(1.0 - BETA1.powi(self.step as i32)).unwrap();
                let bias2 = T::from_f64(1.0 - BETA2.powi(self.step as i32)).unwrap();
                let moments = &mut self.moments;
                model.for_each_param_mut(&mut |name, _, data, _| {
                    let Some(grad) = grads.get(name) else {
                        return;
                    };
                    let g = grad.as_slice().expect("contiguous gradient");
                    let (m, v) = moments
                        .entry(name.to_string())
                        .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (one - beta1) * g[i];
                        v[i] = beta2 * v[i] + (one - beta2) * g[i] * g[i];
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        data[i] =
                            data[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};

    fn toy() -> EncoderModel<f64> {
        let cfg = EncoderConfig {
            n_mels: 4,
            max_frames: 6,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_mlp: Some(8),
            n_classes: 2,
            seed: 1,
            ..EncoderConfig::default()
        };
        let mut m = EncoderModel::<f64>::init(&cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        m.head.weight.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        m
    }

    fn one_grad(model: &EncoderModel<f64>) -> Gradients<f64> {
        let cfg = model.config().clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mel = ndarray::Array2::from_shape_fn((cfg.n_mels, cfg.max_frames), |_| {
            rng.random_range(-1.0..1.0)
        });
        let (_, tape) = model.forward_train(&mel, &mut rng).unwrap();
        model.backward(&tape, &Array1::from_vec(vec![1.0, -1.0]))
    }

    fn snapshot(model: &EncoderModel<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        model.for_each_param(&mut |_, _, data, _| out.extend_from_slice(data));
        out
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut model = toy();
        let grads = one_grad(&model);
        let head_grad = grads.get("head.weight").unwrap().as_slice().unwrap()[0];
        let before = model.head.weight.as_slice().unwrap()[0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.step(&mut model, &grads);
        let after = model.head.weight.as_slice().unwrap()[0];
        assert!((after - (before - 0.1 * head_grad)).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        // with bias correction the first AdamW step is lr * g / (|g| + eps)
        let mut model = toy();
        let grads = one_grad(&model);
        let head_grad = grads.get("head.weight").unwrap().as_slice().unwrap()[0];
        assert!(head_grad != 0.0);
        let before = model.head.weight.as_slice().unwrap()[0];
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 1e-3);
        opt.step(&mut model, &grads);
        let after = model.head.weight.as_slice().unwrap()[0];
        let expected = before - 1e-3 * head_grad.signum();
        assert!((after - expected).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut model = toy();
        model.set_all_trainable(false);
        model.head.trainable = true;
        let grads = one_grad(&model);
        let before = snapshot(&model);
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.5);
        opt.step(&mut model, &grads);
        let after = snapshot(&model);
        let mut names = Vec::new();
        model.for_each_param(&mut |name, _, data, _| {
            names.push((name.to_string(), data.len()));
        });
        let mut idx = 0;
        for (name, len) in names {
            let changed = before[idx..idx + len]
                .iter()
                .zip(&after[idx..idx + len])
                .any(|(a, b)| a != b);
            if name.starts_with("head.") {
                assert!(changed, "head must move");
            } else {
                assert!(!changed, "{name} is frozen and must not move");
            }
            idx += len;
        }
    }
}
