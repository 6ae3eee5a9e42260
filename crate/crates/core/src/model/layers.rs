//! Layer primitives with explicit forward and backward passes.
//!
//! Every layer exposes `forward` (pure, used at inference) and a cached
//! variant whose context feeds the matching `backward`. Gradients are pushed
//! into a [`Gradients`] sink keyed by parameter name; frozen parameters
//! contribute nothing.

use super::scalar::{lit, Scalar};
use super::Gradients;
use ndarray::{Array1, Array2, Axis};

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct Linear<T> {
    pub name: String,
    /// `[d_out, d_in]`
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
    pub trainable: bool,
}

impl<T: Scalar> Linear<T> {
    /// `y = x W^T (+ b)` for row-major `x: [n, d_in]`.
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Backward through the layer. `x` is the cached input, `dy` the output
    /// gradient. Returns the input gradient.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grads: &mut Gradients<T>) -> Array2<T> {
        if self.trainable {
            grads.add(format!("{}.weight", self.name), dy.t().dot(x).into_dyn());
            if self.bias.is_some() {
                grads.add(
                    format!("{}.bias", self.name),
                    dy.sum_axis(Axis(0)).into_dyn(),
                );
            }
        }
        dy.dot(&self.weight)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T], bool)) {
        f(
            &format!("{}.weight", self.name),
            &[self.weight.nrows(), self.weight.ncols()],
            self.weight.as_slice().expect("contiguous"),
            self.trainable,
        );
        if let Some(b) = &self.bias {
            f(
                &format!("{}.bias", self.name),
                &[b.len()],
                b.as_slice().expect("contiguous"),
                self.trainable,
            );
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T], bool)) {
        let name = format!("{}.weight", self.name);
        let shape = [self.weight.nrows(), self.weight.ncols()];
        f(
            &name,
            &shape,
            self.weight.as_slice_mut().expect("contiguous"),
            self.trainable,
        );
        if let Some(b) = &mut self.bias {
            let name = format!("{}.bias", self.name);
            let shape = [b.len()];
            f(
                &name,
                &shape,
                b.as_slice_mut().expect("contiguous"),
                self.trainable,
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Low-rank adapter around a linear projection
// ---------------------------------------------------------------------------

/// Additive low-rank update `y += (alpha / rank) * (x A^T) B^T` next to a
/// frozen base projection. `B` starts at zero so a freshly adapted layer is
/// exactly the base layer.
#[derive(Debug, Clone)]
pub(crate) struct LoraAdapter<T> {
    /// `[rank, d_in]`
    pub a: Array2<T>,
    /// `[d_out, rank]`
    pub b: Array2<T>,
    pub scaling: T,
}

#[derive(Debug, Clone)]
pub(crate) enum Projection<T> {
    Plain(Linear<T>),
    Adapted {
        base: Linear<T>,
        adapter: LoraAdapter<T>,
    },
}

impl<T: Scalar> Projection<T> {
    pub fn base(&self) -> &Linear<T> {
        match self {
            Projection::Plain(l) => l,
            Projection::Adapted { base, .. } => base,
        }
    }

    pub fn base_mut(&mut self) -> &mut Linear<T> {
        match self {
            Projection::Plain(l) => l,
            Projection::Adapted { base, .. } => base,
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        match self {
            Projection::Plain(l) => l.forward(x),
            Projection::Adapted { base, adapter } => {
                let mut y = base.forward(x);
                let u = x.dot(&adapter.a.t());
                y = y + u.dot(&adapter.b.t()) * adapter.scaling;
                y
            }
        }
    }

    /// Forward that also returns the adapter intermediate `u = x A^T`
    /// (needed for the adapter gradients).
    pub fn forward_cached(&self, x: &Array2<T>) -> (Array2<T>, Option<Array2<T>>) {
        match self {
            Projection::Plain(l) => (l.forward(x), None),
            Projection::Adapted { base, adapter } => {
                let u = x.dot(&adapter.a.t());
                let y = base.forward(x) + u.dot(&adapter.b.t()) * adapter.scaling;
                (y, Some(u))
            }
        }
    }

    pub fn backward(
        &self,
        x: &Array2<T>,
        u: Option<&Array2<T>>,
        dy: &Array2<T>,
        grads: &mut Gradients<T>,
    ) -> Array2<T> {
        match self {
            Projection::Plain(l) => l.backward(x, dy, grads),
            Projection::Adapted { base, adapter } => {
                let u = u.expect("adapted projection needs its cached intermediate");
                let mut dx = base.backward(x, dy, grads);
                let du = dy.dot(&adapter.b) * adapter.scaling;
                grads.add(
                    format!("{}.lora_a", base.name),
                    du.t().dot(x).into_dyn(),
                );
                grads.add(
                    format!("{}.lora_b", base.name),
                    (dy.t().dot(u) * adapter.scaling).into_dyn(),
                );
                dx = dx + du.dot(&adapter.a);
                dx
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Projection::Plain(l) => l.param_count(),
            Projection::Adapted { base, adapter } => {
                base.param_count() + adapter.a.len() + adapter.b.len()
            }
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T], bool)) {
        match self {
            Projection::Plain(l) => l.visit(f),
            Projection::Adapted { base, adapter } => {
                base.visit(f);
                f(
                    &format!("{}.lora_a", base.name),
                    &[adapter.a.nrows(), adapter.a.ncols()],
                    adapter.a.as_slice().expect("contiguous"),
                    true,
                );
                f(
                    &format!("{}.lora_b", base.name),
                    &[adapter.b.nrows(), adapter.b.ncols()],
                    adapter.b.as_slice().expect("contiguous"),
                    true,
                );
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T], bool)) {
        match self {
            Projection::Plain(l) => l.visit_mut(f),
            Projection::Adapted { base, adapter } => {
                base.visit_mut(f);
                let name = format!("{}.lora_a", base.name);
                let shape = [adapter.a.nrows(), adapter.a.ncols()];
                f(
                    &name,
                    &shape,
                    adapter.a.as_slice_mut().expect("contiguous"),
                    true,
                );
                let name = format!("{}.lora_b", base.name);
                let shape = [adapter.b.nrows(), adapter.b.ncols()];
                f(
                    &name,
                    &shape,
                    adapter.b.as_slice_mut().expect("contiguous"),
                    true,
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm<T> {
    pub name: String,
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub eps: T,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCtx<T> {
    /// Normalized input `(x - mean) / std`, per row.
    pub xhat: Array2<T>,
    /// `1 / std` per row.
    pub inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: String, dim: usize) -> Self {
        Self {
            name,
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: lit(1e-5),
            trainable: true,
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCtx<T>) {
        let (n, d) = x.dim();
        let inv_d = T::one() / lit::<T>(d as f64);
        let mut xhat = Array2::<T>::zeros((n, d));
        let mut inv_std = Array1::<T>::zeros(n);
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v - mean;
                    c * c
                })
                .sum::<T>()
                * inv_d;
            let istd = T::one() / (var + self.eps).sqrt();
            inv_std[r] = istd;
            for (c, &v) in row.iter().enumerate() {
                xhat[(r, c)] = (v - mean) * istd;
            }
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCtx { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ctx: &LayerNormCtx<T>,
        dy: &Array2<T>,
        grads: &mut Gradients<T>,
    ) -> Array2<T> {
        let (n, d) = dy.dim();
        let inv_d = T::one() / lit::<T>(d as f64);
        if self.trainable {
            let dgamma = (dy * &ctx.xhat).sum_axis(Axis(0));
            let dbeta = dy.sum_axis(Axis(0));
            grads.add(format!("{}.gamma", self.name), dgamma.into_dyn());
            grads.add(format!("{}.beta", self.name), dbeta.into_dyn());
        }
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::<T>::zeros((n, d));
        for r in 0..n {
            let row_dxhat = dxhat.row(r);
            let row_xhat = ctx.xhat.row(r);
            let m1 = row_dxhat.iter().copied().sum::<T>() * inv_d;
            let m2 = row_dxhat
                .iter()
                .zip(row_xhat.iter())
                .map(|(&a, &b)| a * b)
                .sum::<T>()
                * inv_d;
            let istd = ctx.inv_std[r];
            for c in 0..d {
                dx[(r, c)] = istd * (row_dxhat[c] - m1 - row_xhat[c] * m2);
            }
        }
        dx
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T], bool)) {
        f(
            &format!("{}.gamma", self.name),
            &[self.gamma.len()],
            self.gamma.as_slice().expect("contiguous"),
            self.trainable,
        );
        f(
            &format!("{}.beta", self.name),
            &[self.beta.len()],
            self.beta.as_slice().expect("contiguous"),
            self.trainable,
        );
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T], bool)) {
        let name = format!("{}.gamma", self.name);
        let shape = [self.gamma.len()];
        f(
            &name,
            &shape,
            self.gamma.as_slice_mut().expect("contiguous"),
            self.trainable,
        );
        let name = format!("{}.beta", self.name);
        let shape = [self.beta.len()];
        f(
            &name,
            &shape,
            self.beta.as_slice_mut().expect("contiguous"),
            self.trainable,
        );
    }
}

// ---------------------------------------------------------------------------
// 1-D convolution (im2col)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct Conv1d<T> {
    pub name: String,
    /// `[c_out, c_in * kernel]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub trainable: bool,
}

impl<T: Scalar> Conv1d<T> {
    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &Array2<T>) -> Array2<T> {
        let (c_in, t_in) = x.dim();
        debug_assert_eq!(c_in, self.c_in);
        let t_out = self.out_len(t_in);
        let mut cols = Array2::<T>::zeros((c_in * self.kernel, t_out));
        for t in 0..t_out {
            let start = (t * self.stride) as isize - self.padding as isize;
            for ci in 0..c_in {
                for j in 0..self.kernel {
                    let src = start + j as isize;
                    if src >= 0 && (src as usize) < t_in {
                        cols[(ci * self.kernel + j, t)] = x[(ci, src as usize)];
                    }
                }
            }
        }
        cols
    }

    /// `x: [c_in, t_in] -> [c_out, t_out]`.
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let cols = self.im2col(x);
        let mut y = self.weight.dot(&cols);
        let bias_col = self.bias.view().insert_axis(Axis(1));
        y += &bias_col;
        y
    }

    /// Backward from `dy: [c_out, t_out]`. Returns the input gradient when
    /// `need_dx` is set (the first convolution of the stem can skip it).
    pub fn backward(
        &self,
        x: &Array2<T>,
        dy: &Array2<T>,
        grads: &mut Gradients<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        let cols = self.im2col(x);
        if self.trainable {
            grads.add(
                format!("{}.weight", self.name),
                dy.dot(&cols.t()).into_dyn(),
            );
            grads.add(
                format!("{}.bias", self.name),
                dy.sum_axis(Axis(1)).into_dyn(),
            );
        }
        if !need_dx {
            return None;
        }
        let dcols = self.weight.t().dot(dy);
        let (c_in, t_in) = x.dim();
        let t_out = dy.ncols();
        let mut dx = Array2::<T>::zeros((c_in, t_in));
        for t in 0..t_out {
            let start = (t * self.stride) as isize - self.padding as isize;
            for ci in 0..c_in {
                for j in 0..self.kernel {
                    let src = start + j as isize;
                    if src >= 0 && (src as usize) < t_in {
                        dx[(ci, src as usize)] += dcols[(ci * self.kernel + j, t)];
                    }
                }
            }
        }
        Some(dx)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn weight_shape(&self) -> [usize; 3] {
        [self.weight.nrows(), self.c_in, self.kernel]
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T], bool)) {
        f(
            &format!("{}.weight", self.name),
            &self.weight_shape(),
            self.weight.as_slice().expect("contiguous"),
            self.trainable,
        );
        f(
            &format!("{}.bias", self.name),
            &[self.bias.len()],
            self.bias.as_slice().expect("contiguous"),
            self.trainable,
        );
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T], bool)) {
        let name = format!("{}.weight", self.name);
        let shape = self.weight_shape();
        f(
            &name,
            &shape,
            self.weight.as_slice_mut().expect("contiguous"),
            self.trainable,
        );
        let name = format!("{}.bias", self.name);
        let shape = [self.bias.len()];
        f(
            &name,
            &shape,
            self.bias.as_slice_mut().expect("contiguous"),
            self.trainable,
        );
    }
}

// ---------------------------------------------------------------------------
// Activations and softmax
// ---------------------------------------------------------------------------

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximation GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = lit::<T>(GELU_K);
    let c = lit::<T>(GELU_C);
    let half = lit::<T>(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

/// Derivative of [`gelu`] (of the approximation itself, so analytic and
/// numeric gradients agree exactly).
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = lit::<T>(GELU_K);
    let c = lit::<T>(GELU_C);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * k * (T::one() + three * c * x * x)
}

/// Row-wise softmax with max subtraction, in place.
pub(crate) fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward through a row-wise softmax: `ds = p * (dp - rowsum(dp * p))`.
pub(crate) fn softmax_rows_backward<T: Scalar>(p: &Array2<T>, dp: &Array2<T>) -> Array2<T> {
    let mut ds = Array2::<T>::zeros(p.dim());
    for r in 0..p.nrows() {
        let dot = p
            .row(r)
            .iter()
            .zip(dp.row(r).iter())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        for c in 0..p.ncols() {
            ds[(r, c)] = p[(r, c)] * (dp[(r, c)] - dot);
        }
    }
    ds
}

/// Inverted dropout mask: entries are `0` with probability `p`, otherwise
/// `1 / (1 - p)`.
pub(crate) fn dropout_mask<T: Scalar, R: rand::Rng>(
    shape: (usize, usize),
    p: f64,
    rng: &mut R,
) -> Array2<T> {
    let keep = T::one() / lit::<T>(1.0 - p);
    Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_matches_manual() {
        let l = Linear::<f64> {
            name: "l".into(),
            weight: ndarray::array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            bias: Some(ndarray::array![0.5, -0.5, 1.0]),
            trainable: true,
        };
        let x = ndarray::array![[1.0, 1.0]];
        let y = l.forward(&x);
        assert_eq!(y, ndarray::array![[3.5, 6.5, 12.0]]);
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let ln = LayerNorm::<f64>::new("ln".into(), 4);
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0], [-2.0, 0.0, 2.0, 8.0]];
        let y = ln.forward(&x);
        for row in y.outer_iter() {
            let mean: f64 = row.sum() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_matches_manual_stride_two() {
        // c_in=1, kernel=3, stride=2, padding=1 over [1 2 3 4]
        let conv = Conv1d::<f64> {
            name: "c".into(),
            weight: ndarray::array![[1.0, 1.0, 1.0]],
            bias: ndarray::array![0.0],
            c_in: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
            trainable: true,
        };
        let x = ndarray::array![[1.0, 2.0, 3.0, 4.0]];
        let y = conv.forward(&x);
        // windows: [0 1 2], [2 3 4] -> sums 3, 9
        assert_eq!(y, ndarray::array![[3.0, 9.0]]);
        assert_eq!(conv.out_len(4), 2);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = ndarray::array![[0.0f64, 1.0, 2.0], [5.0, 5.0, 5.0]];
        softmax_rows(&mut m);
        for row in m.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((m[(1, 0)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let eps = 1e-6;
            let num = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            let ana = gelu_grad(x);
            assert!((num - ana).abs() < 1e-8, "x={x}: {num} vs {ana}");
        }
    }

    #[test]
    fn dropout_mask_is_identity_at_zero_p() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask::<f64, _>((3, 3), 0.0, &mut rng);
        assert!(m.iter().all(|&v| v == 1.0));
    }
}
