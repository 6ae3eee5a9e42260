//! The audio encoder: conv stem, sinusoidal positions, pre-norm transformer
//! blocks, and a mean-pool classification head.

use super::layers::{
    dropout_mask, gelu, gelu_grad, softmax_rows, softmax_rows_backward, Conv1d, LayerNorm,
    LayerNormCtx, Linear, Projection,
};
use super::scalar::{lit, Scalar};
use super::{EncoderConfig, Gradients, ModelError};
use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

#[derive(Debug, Clone)]
pub(crate) struct Attention<T> {
    pub query: Projection<T>,
    pub key: Projection<T>,
    pub value: Projection<T>,
    pub out: Projection<T>,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
}

/// Transformer audio encoder with a classification head.
///
/// Input is an `n_mels x max_frames` feature matrix; the two-convolution
/// stem halves the time axis, sinusoidal position encodings are added, and
/// `n_layers` pre-norm blocks of full self-attention plus a GELU MLP run
/// before a final layer norm. The head mean-pools over time and maps to
/// `n_classes` logits. The head starts at zero, so an untrained model emits
/// uniform logits.
#[derive(Debug, Clone)]
pub struct EncoderModel<T: Scalar> {
    pub(crate) config: EncoderConfig,
    pub(crate) conv1: Conv1d<T>,
    pub(crate) conv2: Conv1d<T>,
    /// Sinusoidal position table, `[seq_len, d_model]`. Derived from the
    /// config, not a parameter.
    pub(crate) pos: Array2<T>,
    pub(crate) blocks: Vec<Block<T>>,
    pub(crate) final_norm: LayerNorm<T>,
    pub(crate) head: Linear<T>,
}

/// Cached activations of one training forward pass, consumed by
/// [`EncoderModel::backward`]. Holding a tape is the proof that a forward
/// pass happened.
pub struct ForwardTape<T: Scalar> {
    mel: Array2<T>,
    conv1_pre: Array2<T>,
    conv1_act: Array2<T>,
    conv2_pre: Array2<T>,
    blocks: Vec<BlockTape<T>>,
    final_ln: LayerNormCtx<T>,
    pooled: Array1<T>,
}

struct BlockTape<T> {
    ln1: LayerNormCtx<T>,
    /// ln1 output, input of the q/k/v projections.
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    u_q: Option<Array2<T>>,
    u_k: Option<Array2<T>>,
    u_v: Option<Array2<T>>,
    /// Per-head attention probabilities.
    probs: Vec<Array2<T>>,
    /// Concatenated head outputs, input of the out projection.
    concat: Array2<T>,
    u_out: Option<Array2<T>>,
    attn_mask: Option<Array2<T>>,
    ln2: LayerNormCtx<T>,
    /// ln2 output, input of the first MLP linear.
    b: Array2<T>,
    mlp_pre: Array2<T>,
    mlp_act: Array2<T>,
    mlp_mask: Option<Array2<T>>,
}

/// Whisper-style sinusoid table: first half of the channels are sines, the
/// second half cosines, over geometrically spaced timescales.
fn sinusoid_table<T: Scalar>(positions: usize, d_model: usize) -> Array2<T> {
    let half = d_model / 2;
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    let increment = (10_000f64).ln() / denom;
    Array2::from_shape_fn((positions, d_model), |(p, c)| {
        let i = c % half;
        let angle = p as f64 * (-(increment) * i as f64).exp();
        if c < half {
            lit(angle.sin())
        } else {
            lit(angle.cos())
        }
    })
}

fn init_matrix<T: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<T> {
    let normal = rand_distr::Normal::new(0.0f64, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| lit(normal.sample(rng)))
}

fn plain_linear<T: Scalar>(
    rng: &mut ChaCha8Rng,
    name: String,
    d_out: usize,
    d_in: usize,
    std: f64,
    bias: bool,
) -> Linear<T> {
    Linear {
        weight: init_matrix(rng, d_out, d_in, std),
        bias: bias.then(|| Array1::zeros(d_out)),
        name,
        trainable: true,
    }
}

impl<T: Scalar> EncoderModel<T> {
    /// Deterministic random initialization: weights from a normal with
    /// std 0.02, biases zero, head entirely zero.
    pub fn init(config: &EncoderConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let d_mlp = config.mlp_width();
        let std = 0.02;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let conv1 = Conv1d {
            weight: init_matrix(&mut rng, d, config.n_mels * 3, std),
            bias: Array1::zeros(d),
            name: "conv1".into(),
            c_in: config.n_mels,
            kernel: 3,
            stride: 1,
            padding: 1,
            trainable: true,
        };
        let conv2 = Conv1d {
            weight: init_matrix(&mut rng, d, d * 3, std),
            bias: Array1::zeros(d),
            name: "conv2".into(),
            c_in: d,
            kernel: 3,
            stride: 2,
            padding: 1,
            trainable: true,
        };

        let blocks = (0..config.n_layers)
            .map(|i| {
                let p = |part: &str| format!("blocks.{i}.{part}");
                Block {
                    ln1: LayerNorm::new(p("ln1"), d),
                    attn: Attention {
                        query: Projection::Plain(plain_linear(
                            &mut rng,
                            p("attn.query"),
                            d,
                            d,
                            std,
                            true,
                        )),
                        // the key projection carries no bias: shifting every
                        // key equally cancels inside the row softmax
                        key: Projection::Plain(plain_linear(
                            &mut rng,
                            p("attn.key"),
                            d,
                            d,
                            std,
                            false,
                        )),
                        value: Projection::Plain(plain_linear(
                            &mut rng,
                            p("attn.value"),
                            d,
                            d,
                            std,
                            true,
                        )),
                        out: Projection::Plain(plain_linear(
                            &mut rng,
                            p("attn.out"),
                            d,
                            d,
                            std,
                            true,
                        )),
                        n_heads: config.n_heads,
                    },
                    ln2: LayerNorm::new(p("ln2"), d),
                    mlp1: plain_linear(&mut rng, p("mlp1"), d_mlp, d, std, true),
                    mlp2: plain_linear(&mut rng, p("mlp2"), d, d_mlp, std, true),
                }
            })
            .collect();

        Ok(Self {
            pos: sinusoid_table(config.seq_len(), d),
            conv1,
            conv2,
            blocks,
            final_norm: LayerNorm::new("final_norm".into(), d),
            head: Linear {
                weight: Array2::zeros((config.n_classes, d)),
                bias: Some(Array1::zeros(config.n_classes)),
                name: "head".into(),
                trainable: true,
            },
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_input(&self, mel: &Array2<T>) -> Result<(), ModelError> {
        let expected = [self.config.n_mels, self.config.max_frames];
        let found = [mel.nrows(), mel.ncols()];
        if expected != found {
            return Err(ModelError::ShapeMismatch {
                what: "encoder input".into(),
                expected: expected.to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    /// Conv stem + positions: `[n_mels, frames] -> [frames / 2, d_model]`.
    /// Returns every intermediate so the training tape can keep them.
    fn stem(&self, mel: &Array2<T>) -> StemActivations<T> {
        let conv1_pre = self.conv1.forward(mel);
        let conv1_act = conv1_pre.mapv(gelu);
        let conv2_pre = self.conv2.forward(&conv1_act);
        let seq = conv2_pre
            .mapv(gelu)
            .reversed_axes()
            .as_standard_layout()
            .into_owned()
            + &self.pos;
        StemActivations {
            conv1_pre,
            conv1_act,
            conv2_pre,
            seq,
        }
    }

    fn attention_forward(
        &self,
        attn: &Attention<T>,
        a: &Array2<T>,
    ) -> (Array2<T>, AttentionIntermediate<T>) {
        let n = a.nrows();
        let d = a.ncols();
        let heads = attn.n_heads;
        let hd = d / heads;
        let scale = lit::<T>((hd as f64).powf(-0.5));

        let (q, u_q) = attn.query.forward_cached(a);
        let (k, u_k) = attn.key.forward_cached(a);
        let (v, u_v) = attn.value.forward_cached(a);

        let mut probs = Vec::with_capacity(heads);
        let mut concat = Array2::<T>::zeros((n, d));
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t()) * scale;
            softmax_rows(&mut scores);
            let oh = scores.dot(&vh);
            concat.slice_mut(cols).assign(&oh);
            probs.push(scores);
        }
        let (y, u_out) = attn.out.forward_cached(&concat);
        (
            y,
            AttentionIntermediate {
                q,
                k,
                v,
                u_q,
                u_k,
                u_v,
                probs,
                concat,
                u_out,
            },
        )
    }

    /// Deterministic inference forward: returns `n_classes` logits.
    pub fn forward(&self, mel: &Array2<T>) -> Result<Array1<T>, ModelError> {
        self.check_input(mel)?;
        let mut x = self.stem(mel).seq;
        for block in &self.blocks {
            let a = block.ln1.forward(&x);
            let (attn_out, _) = self.attention_forward(&block.attn, &a);
            x = x + attn_out;
            let b = block.ln2.forward(&x);
            let act = block.mlp1.forward(&b).mapv(gelu);
            let mlp_out = block.mlp2.forward(&act);
            x = x + mlp_out;
        }
        let hidden = self.final_norm.forward(&x);
        Ok(self.pool_and_head(&hidden))
    }

    /// Hidden states after the final norm, before pooling.
    pub fn encode(&self, mel: &Array2<T>) -> Result<Array2<T>, ModelError> {
        self.check_input(mel)?;
        let mut x = self.stem(mel).seq;
        for block in &self.blocks {
            let a = block.ln1.forward(&x);
            let (attn_out, _) = self.attention_forward(&block.attn, &a);
            x = x + attn_out;
            let b = block.ln2.forward(&x);
            let act = block.mlp1.forward(&b).mapv(gelu);
            x = x + block.mlp2.forward(&act);
        }
        Ok(self.final_norm.forward(&x))
    }

    /// Mean-pool over time, then the affine head.
    pub fn pool_and_head(&self, hidden: &Array2<T>) -> Array1<T> {
        let pooled = hidden.mean_axis(Axis(0)).expect("non-empty sequence");
        let pooled2 = pooled.view().insert_axis(Axis(0)).into_owned();
        self.head.forward(&pooled2).row(0).into_owned()
    }

    /// Training forward: records every intermediate needed by
    /// [`Self::backward`] and applies dropout when configured.
    pub fn forward_train<R: rand::Rng>(
        &self,
        mel: &Array2<T>,
        rng: &mut R,
    ) -> Result<(Array1<T>, ForwardTape<T>), ModelError> {
        self.check_input(mel)?;
        let p = self.config.dropout;
        let StemActivations {
            conv1_pre,
            conv1_act,
            conv2_pre,
            seq: mut x,
        } = self.stem(mel);

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, ln1) = block.ln1.forward_cached(&x);
            let (mut attn_out, inter) = self.attention_forward(&block.attn, &a);
            let attn_mask = if p > 0.0 {
                let mask = dropout_mask::<T, R>(attn_out.dim(), p, rng);
                attn_out = attn_out * &mask;
                Some(mask)
            } else {
                None
            };
            let x2 = x + attn_out;

            let (b, ln2) = block.ln2.forward_cached(&x2);
            let mlp_pre = block.mlp1.forward(&b);
            let mlp_act = mlp_pre.mapv(gelu);
            let mut mlp_out = block.mlp2.forward(&mlp_act);
            let mlp_mask = if p > 0.0 {
                let mask = dropout_mask::<T, R>(mlp_out.dim(), p, rng);
                mlp_out = mlp_out * &mask;
                Some(mask)
            } else {
                None
            };
            let x3 = &x2 + &mlp_out;

            blocks.push(BlockTape {
                ln1,
                a,
                q: inter.q,
                k: inter.k,
                v: inter.v,
                u_q: inter.u_q,
                u_k: inter.u_k,
                u_v: inter.u_v,
                probs: inter.probs,
                concat: inter.concat,
                u_out: inter.u_out,
                attn_mask,
                ln2,
                b,
                mlp_pre,
                mlp_act,
                mlp_mask,
            });
            x = x3;
        }

        let (hidden, final_ln) = self.final_norm.forward_cached(&x);
        let pooled = hidden.mean_axis(Axis(0)).expect("non-empty sequence");
        let pooled2 = pooled.view().insert_axis(Axis(0)).into_owned();
        let logits = self.head.forward(&pooled2).row(0).into_owned();

        Ok((
            logits,
            ForwardTape {
                mel: mel.clone(),
                conv1_pre,
                conv1_act,
                conv2_pre,
                blocks,
                final_ln,
                pooled,
            },
        ))
    }

    /// Backpropagate a logit gradient through the recorded forward pass.
    /// Returns gradients for every trainable parameter; frozen parameters
    /// have no entry.
    pub fn backward(&self, tape: &ForwardTape<T>, dlogits: &Array1<T>) -> Gradients<T> {
        let mut grads = Gradients::new();
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let hd = d / heads;
        let scale = lit::<T>((hd as f64).powf(-0.5));

        // head
        let dlogits2 = dlogits.view().insert_axis(Axis(0)).into_owned();
        let pooled2 = tape.pooled.view().insert_axis(Axis(0)).into_owned();
        let dpooled2 = self.head.backward(&pooled2, &dlogits2, &mut grads);

        // mean pool: distribute over rows
        let n = tape.final_ln.xhat.nrows();
        let inv_n = T::one() / lit::<T>(n as f64);
        let dpooled = dpooled2.row(0).into_owned() * inv_n;
        let dhidden = dpooled
            .broadcast((n, d))
            .expect("broadcast row gradient")
            .to_owned();

        let mut dx = self.final_norm.backward(&tape.final_ln, &dhidden, &mut grads);

        for (block, t) in self.blocks.iter().zip(tape.blocks.iter()).rev() {
            // MLP branch
            let mut dmlp_out = dx.clone();
            if let Some(mask) = &t.mlp_mask {
                dmlp_out = dmlp_out * mask;
            }
            let dact = block.mlp2.backward(&t.mlp_act, &dmlp_out, &mut grads);
            let dpre = dact * t.mlp_pre.mapv(gelu_grad);
            let db = block.mlp1.backward(&t.b, &dpre, &mut grads);
            let dx2 = &dx + &block.ln2.backward(&t.ln2, &db, &mut grads);

            // attention branch
            let mut dattn_out = dx2.clone();
            if let Some(mask) = &t.attn_mask {
                dattn_out = dattn_out * mask;
            }
            let dconcat =
                block
                    .attn
                    .out
                    .backward(&t.concat, t.u_out.as_ref(), &dattn_out, &mut grads);

            let seq = t.a.nrows();
            let mut dq = Array2::<T>::zeros((seq, d));
            let mut dk = Array2::<T>::zeros((seq, d));
            let mut dv = Array2::<T>::zeros((seq, d));
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let doh = dconcat.slice(cols);
                let p = &t.probs[h];
                let vh = t.v.slice(cols);
                let qh = t.q.slice(cols);
                let kh = t.k.slice(cols);

                let dp = doh.dot(&vh.t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                let ds = softmax_rows_backward(p, &dp);
                dq.slice_mut(cols).assign(&(ds.dot(&kh) * scale));
                dk.slice_mut(cols).assign(&(ds.t().dot(&qh) * scale));
            }

            let mut da = block.attn.query.backward(&t.a, t.u_q.as_ref(), &dq, &mut grads);
            da = da + block.attn.key.backward(&t.a, t.u_k.as_ref(), &dk, &mut grads);
            da = da + block.attn.value.backward(&t.a, t.u_v.as_ref(), &dv, &mut grads);

            dx = dx2 + block.ln1.backward(&t.ln1, &da, &mut grads);
        }

        // positions are an additive constant; gradient passes through
        let dconv2_act = dx.reversed_axes().as_standard_layout().into_owned();
        let dconv2_pre = dconv2_act * tape.conv2_pre.mapv(gelu_grad);
        let dconv1_act = self
            .conv2
            .backward(&tape.conv1_act, &dconv2_pre, &mut grads, true)
            .expect("requested dx");
        let dconv1_pre = dconv1_act * tape.conv1_pre.mapv(gelu_grad);
        self.conv1
            .backward(&tape.mel, &dconv1_pre, &mut grads, false);

        grads
    }

    /// Visit `(name, shape, data, trainable)` of every parameter, in a fixed
    /// structural order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &[usize], &[T], bool)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        for block in &self.blocks {
            block.ln1.visit(f);
            block.attn.query.visit(f);
            block.attn.key.visit(f);
            block.attn.value.visit(f);
            block.attn.out.visit(f);
            block.ln2.visit(f);
            block.mlp1.visit(f);
            block.mlp2.visit(f);
        }
        self.final_norm.visit(f);
        self.head.visit(f);
    }

    /// Mutable variant of [`Self::for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T], bool)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        for block in &mut self.blocks {
            block.ln1.visit_mut(f);
            block.attn.query.visit_mut(f);
            block.attn.key.visit_mut(f);
            block.attn.value.visit_mut(f);
            block.attn.out.visit_mut(f);
            block.ln2.visit_mut(f);
            block.mlp1.visit_mut(f);
            block.mlp2.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
        self.head.visit_mut(f);
    }

    /// Number of parameters currently marked trainable.
    pub fn count_trainable(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, _, data, trainable| {
            if trainable {
                n += data.len();
            }
        });
        n
    }

    /// Total parameter count regardless of freeze state.
    pub fn count_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, _, data, _| n += data.len());
        n
    }

    /// Mark every parameter trainable or frozen.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.conv1.trainable = trainable;
        self.conv2.trainable = trainable;
        for block in &mut self.blocks {
            block.ln1.trainable = trainable;
            block.attn.query.base_mut().trainable = trainable;
            block.attn.key.base_mut().trainable = trainable;
            block.attn.value.base_mut().trainable = trainable;
            block.attn.out.base_mut().trainable = trainable;
            block.ln2.trainable = trainable;
            block.mlp1.trainable = trainable;
            block.mlp2.trainable = trainable;
        }
        self.final_norm.trainable = trainable;
        self.head.trainable = trainable;
    }

    /// True if every parameter is finite.
    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(&mut |_, _, data, _| {
            if data.iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }
}

struct AttentionIntermediate<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    u_q: Option<Array2<T>>,
    u_k: Option<Array2<T>>,
    u_v: Option<Array2<T>>,
    probs: Vec<Array2<T>>,
    concat: Array2<T>,
    u_out: Option<Array2<T>>,
}

struct StemActivations<T> {
    conv1_pre: Array2<T>,
    conv1_act: Array2<T>,
    conv2_pre: Array2<T>,
    seq: Array2<T>,
}
