use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::{Matrix, Param};
use crate::scalar::{matmul, Scalar};

/// Whether batch normalization uses batch statistics (and updates its running
/// estimates) or the frozen running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Spatial layout of a convolutional activation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// Fully connected layer `y = x · W + b`, with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform `±1/sqrt(in)` initialization.
    pub fn new<R: Rng>(in_features: usize, out_features: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
        };
        let weight = Param::new(draw(in_features * out_features));
        let bias = bias.then(|| Param::new(draw(out_features)));
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        assert_eq!(x.cols, self.in_features, "linear input width");
        let mut y = Matrix::zeros(x.rows, self.out_features);
        matmul(
            &x.data,
            (x.rows, x.cols),
            false,
            &self.weight.value,
            (self.in_features, self.out_features),
            false,
            &mut y.data,
            false,
        );
        if let Some(b) = &self.bias {
            for row in y.data.chunks_exact_mut(self.out_features) {
                for (v, &bv) in row.iter_mut().zip(&b.value) {
                    *v += bv;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx`.
    pub fn backward(&mut self, x: &Matrix<T>, grad_out: &Matrix<T>) -> Matrix<T> {
        matmul(
            &x.data,
            (x.rows, x.cols),
            true,
            &grad_out.data,
            (grad_out.rows, grad_out.cols),
            false,
            &mut self.weight.grad,
            true,
        );
        if let Some(b) = &mut self.bias {
            for row in grad_out.iter_rows() {
                for (g, &v) in b.grad.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut grad_in = Matrix::zeros(x.rows, self.in_features);
        matmul(
            &grad_out.data,
            (grad_out.rows, grad_out.cols),
            false,
            &self.weight.value,
            (self.in_features, self.out_features),
            true,
            &mut grad_in.data,
            false,
        );
        grad_in
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.weight];
        if let Some(b) = &self.bias {
            out.push(b);
        }
        out
    }
}

/// Square-kernel 2-D convolution over NHWC activation matrices, padding `k/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `(k·k·in) × out`, rows ordered `(ky, kx, in_channel)`.
    pub weight: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-normal initialization (fan-in, ReLU gain).
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1 && stride >= 1, "odd kernel and positive stride");
        let fan_in = kernel * kernel * in_channels;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weight = (0..fan_in * out_channels)
            .map(|_| T::from_f64_lossy(normal.sample(rng)))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::new(weight),
        }
    }

    pub fn output_geometry(&self, g: Geometry) -> Geometry {
        let pad = self.kernel / 2;
        Geometry {
            batch: g.batch,
            height: (g.height + 2 * pad - self.kernel) / self.stride + 1,
            width: (g.width + 2 * pad - self.kernel) / self.stride + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Unfolds receptive fields into rows of a `(rows_out) × (k·k·in)` matrix.
    fn im2col(&self, x: &Matrix<T>, g: Geometry) -> Matrix<T> {
        let og = self.output_geometry(g);
        let k = self.kernel;
        let pad = k / 2;
        let c = self.in_channels;
        let mut cols = Matrix::zeros(og.rows(), self.patch_len());
        for n in 0..g.batch {
            for oy in 0..og.height {
                for ox in 0..og.width {
                    let r = (n * og.height + oy) * og.width + ox;
                    let dst = cols.row_mut(r);
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            let src = (n * g.height + iy as usize) * g.width + ix as usize;
                            let off = (ky * k + kx) * c;
                            dst[off..off + c].copy_from_slice(x.row(src));
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, grad_cols: &Matrix<T>, g: Geometry) -> Matrix<T> {
        let og = self.output_geometry(g);
        let k = self.kernel;
        let pad = k / 2;
        let c = self.in_channels;
        let mut grad_in = Matrix::zeros(g.rows(), c);
        for n in 0..g.batch {
            for oy in 0..og.height {
                for ox in 0..og.width {
                    let r = (n * og.height + oy) * og.width + ox;
                    let src = grad_cols.row(r);
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            let dst_row = (n * g.height + iy as usize) * g.width + ix as usize;
                            let off = (ky * k + kx) * c;
                            for (d, &s) in grad_in.row_mut(dst_row).iter_mut().zip(&src[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }

    /// Returns the output and the unfolded input needed by `backward`.
    pub fn forward(&self, x: &Matrix<T>, g: Geometry) -> (Matrix<T>, Geometry, Option<Matrix<T>>) {
        assert_eq!(x.cols, self.in_channels, "conv input channels");
        assert_eq!(x.rows, g.rows(), "conv input rows");
        let og = self.output_geometry(g);
        let mut y = Matrix::zeros(og.rows(), self.out_channels);
        let cols = if self.is_pointwise() {
            None
        } else {
            Some(self.im2col(x, g))
        };
        let a = cols.as_ref().unwrap_or(x);
        matmul(
            &a.data,
            (a.rows, a.cols),
            false,
            &self.weight.value,
            (self.patch_len(), self.out_channels),
            false,
            &mut y.data,
            false,
        );
        (y, og, cols)
    }

    /// `cols` is what `forward` returned (or `None` for pointwise kernels, with `x` the input).
    pub fn backward(
        &mut self,
        x: &Matrix<T>,
        cols: Option<&Matrix<T>>,
        g: Geometry,
        grad_out: &Matrix<T>,
    ) -> Matrix<T> {
        let a = cols.unwrap_or(x);
        matmul(
            &a.data,
            (a.rows, a.cols),
            true,
            &grad_out.data,
            (grad_out.rows, grad_out.cols),
            false,
            &mut self.weight.grad,
            true,
        );
        let mut grad_cols = Matrix::zeros(a.rows, self.patch_len());
        matmul(
            &grad_out.data,
            (grad_out.rows, grad_out.cols),
            false,
            &self.weight.value,
            (self.patch_len(), self.out_channels),
            true,
            &mut grad_cols.data,
            false,
        );
        if self.is_pointwise() {
            grad_cols
        } else {
            self.col2im(&grad_cols, g)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    /// Weight of the current batch in the running-statistics average.
    pub momentum: f64,
    pub eps: f64,
    /// Learnable per-channel scale and shift.
    pub affine: bool,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
            affine: false,
        }
    }
}

/// Batch normalization over the rows of an activation matrix, per column.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased batch variance into `running_var`:
/// `running = (1 - momentum) * running + momentum * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub features: usize,
    pub config: BnConfig,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub gamma: Option<Param<T>>,
    pub beta: Option<Param<T>>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    mode: Mode,
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(features: usize, config: BnConfig) -> Self {
        let affine = config.affine;
        Self {
            features,
            config,
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            gamma: affine.then(|| Param::new(vec![T::one(); features])),
            beta: affine.then(|| Param::new(vec![T::zero(); features])),
        }
    }

    /// Per-column mean and biased variance.
    pub fn batch_stats(x: &Matrix<T>) -> (Vec<T>, Vec<T>) {
        let n = T::from_usize(x.rows).expect("row count");
        let mut mean = vec![T::zero(); x.cols];
        for row in x.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); x.cols];
        for row in x.iter_rows() {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        (mean, var)
    }

    fn normalize(&self, x: &Matrix<T>, mean: &[T], var: &[T]) -> (Matrix<T>, Matrix<T>, Vec<T>) {
        let eps = T::from_f64_lossy(self.config.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(x.rows, x.cols);
        for (dst, src) in xhat.data.chunks_exact_mut(x.cols).zip(x.iter_rows()) {
            for j in 0..x.cols {
                dst[j] = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let y = match (&self.gamma, &self.beta) {
            (Some(g), Some(b)) => {
                let mut y = xhat.clone();
                for row in y.data.chunks_exact_mut(x.cols) {
                    for j in 0..x.cols {
                        row[j] = row[j] * g.value[j] + b.value[j];
                    }
                }
                y
            }
            _ => xhat.clone(),
        };
        (y, xhat, inv_std)
    }

    /// Normalizes `x`; in train mode also advances the running statistics.
    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> (Matrix<T>, BnCache<T>) {
        assert_eq!(x.cols, self.features, "batch-norm width");
        let (y, xhat, inv_std) = match mode {
            Mode::Train => {
                assert!(x.rows > 1, "train-mode batch norm needs more than one value per channel");
                let (mean, var) = Self::batch_stats(x);
                let out = self.normalize(x, &mean, &var);
                let m = T::from_f64_lossy(self.config.momentum);
                let n = T::from_usize(x.rows).expect("row count");
                let unbias = n / (n - T::one());
                for j in 0..self.features {
                    self.running_mean[j] = (T::one() - m) * self.running_mean[j] + m * mean[j];
                    self.running_var[j] = (T::one() - m) * self.running_var[j] + m * var[j] * unbias;
                }
                out
            }
            Mode::Eval => self.normalize(x, &self.running_mean, &self.running_var),
        };
        (y, BnCache { mode, xhat, inv_std })
    }

    /// Eval-mode normalization without caching or mutation.
    pub fn infer(&self, x: &Matrix<T>) -> Matrix<T> {
        self.normalize(x, &self.running_mean, &self.running_var).0
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Matrix<T>) -> Matrix<T> {
        let cols = self.features;
        let xhat = &cache.xhat;
        if let (Some(g), Some(b)) = (&mut self.gamma, &mut self.beta) {
            for (dy, xh) in grad_out.iter_rows().zip(xhat.iter_rows()) {
                for j in 0..cols {
                    g.grad[j] += dy[j] * xh[j];
                    b.grad[j] += dy[j];
                }
            }
        }
        let scale: Vec<T> = match &self.gamma {
            Some(g) => g.value.clone(),
            None => vec![T::one(); cols],
        };
        let mut grad_in = Matrix::zeros(grad_out.rows, cols);
        match cache.mode {
            Mode::Eval => {
                for (dst, dy) in grad_in.data.chunks_exact_mut(cols).zip(grad_out.iter_rows()) {
                    for j in 0..cols {
                        dst[j] = dy[j] * scale[j] * cache.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                let n = T::from_usize(grad_out.rows).expect("row count");
                let mut sum_d = vec![T::zero(); cols];
                let mut sum_dx = vec![T::zero(); cols];
                for (dy, xh) in grad_out.iter_rows().zip(xhat.iter_rows()) {
                    for j in 0..cols {
                        let d = dy[j] * scale[j];
                        sum_d[j] += d;
                        sum_dx[j] += d * xh[j];
                    }
                }
                for ((dst, dy), xh) in grad_in
                    .data
                    .chunks_exact_mut(cols)
                    .zip(grad_out.iter_rows())
                    .zip(xhat.iter_rows())
                {
                    for j in 0..cols {
                        let d = dy[j] * scale[j];
                        dst[j] = cache.inv_std[j] / n * (n * d - sum_d[j] - xh[j] * sum_dx[j]);
                    }
                }
            }
        }
        grad_in
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        if let Some(g) = &mut self.gamma {
            out.push(g);
        }
        if let Some(b) = &mut self.beta {
            out.push(b);
        }
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.gamma.iter().chain(self.beta.iter()).collect()
    }
}

pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    Matrix::from_vec(
        x.rows,
        x.cols,
        x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    )
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar>(out: &Matrix<T>, grad_out: &Matrix<T>) -> Matrix<T> {
    Matrix::from_vec(
        out.rows,
        out.cols,
        out.data
            .iter()
            .zip(&grad_out.data)
            .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
            .collect(),
    )
}

/// Per-sample spatial mean: `(batch·h·w) × c` to `batch × c`.
pub fn global_avg_pool<T: Scalar>(x: &Matrix<T>, g: Geometry) -> Matrix<T> {
    let hw = g.height * g.width;
    let scale = T::one() / T::from_usize(hw).expect("spatial size");
    let mut out = Matrix::zeros(g.batch, x.cols);
    for n in 0..g.batch {
        let dst = out.row_mut(n);
        for r in 0..hw {
            for (d, &v) in dst.iter_mut().zip(x.row(n * hw + r)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= scale);
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Matrix<T>, g: Geometry) -> Matrix<T> {
    let hw = g.height * g.width;
    let scale = T::one() / T::from_usize(hw).expect("spatial size");
    let mut out = Matrix::zeros(g.rows(), grad_out.cols);
    for n in 0..g.batch {
        let src = grad_out.row(n);
        for r in 0..hw {
            for (d, &v) in out.row_mut(n * hw + r).iter_mut().zip(src) {
                *d = v * scale;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn dot(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    /// Directional finite-difference check of `dL/dx` for `L = <y(x), probe>`.
    fn check_input_grad<F: FnMut(&Matrix<f64>) -> Matrix<f64>>(
        x: &Matrix<f64>,
        probe: &Matrix<f64>,
        analytic: &Matrix<f64>,
        mut f: F,
    ) {
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let num = (dot(&f(&xp), probe) - dot(&f(&xm), probe)) / (2.0 * h);
            assert!(
                (num - analytic.data[i]).abs() < 1e-6 * (1.0 + num.abs()),
                "coordinate {i}: numeric {num} analytic {}",
                analytic.data[i]
            );
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, &mut rng);
        let g = Geometry {
            batch: 2,
            height: 5,
            width: 4,
        };
        let x = rand_matrix(g.rows(), 2, 2);
        let (y, og, _) = conv.forward(&x, g);
        assert_eq!((og.height, og.width), (3, 2));
        for n in 0..2 {
            for oy in 0..og.height {
                for ox in 0..og.width {
                    for co in 0..3 {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as i64 - 1;
                                let ix = (ox * 2 + kx) as i64 - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                    continue;
                                }
                                for ci in 0..2 {
                                    let xv = x.row((n * 5 + iy as usize) * 4 + ix as usize)[ci];
                                    acc += xv * conv.weight.value[((ky * 3 + kx) * 2 + ci) * 3 + co];
                                }
                            }
                        }
                        let got = y.row((n * og.height + oy) * og.width + ox)[co];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (kernel, stride) in [(3, 1), (3, 2), (1, 1), (1, 2)] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut conv = Conv2d::<f64>::new(2, 3, kernel, stride, &mut rng);
            let g = Geometry {
                batch: 2,
                height: 4,
                width: 3,
            };
            let x = rand_matrix(g.rows(), 2, 4);
            let (y, _, cols) = conv.forward(&x, g);
            let probe = rand_matrix(y.rows, y.cols, 5);
            let gx = conv.backward(&x, cols.as_ref(), g, &probe);
            let frozen = conv.clone();
            check_input_grad(&x, &probe, &gx, |xx| frozen.forward(xx, g).0);

            let h = 1e-6;
            for i in 0..conv.weight.value.len() {
                let mut cp = frozen.clone();
                cp.weight.value[i] += h;
                let mut cm = frozen.clone();
                cm.weight.value[i] -= h;
                let num = (dot(&cp.forward(&x, g).0, &probe) - dot(&cm.forward(&x, g).0, &probe)) / (2.0 * h);
                assert!((num - conv.weight.grad[i]).abs() < 1e-6 * (1.0 + num.abs()));
            }
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut lin = Linear::<f64>::new(4, 3, true, &mut rng);
        let x = rand_matrix(5, 4, 8);
        let y = lin.forward(&x);
        let probe = rand_matrix(y.rows, y.cols, 9);
        let gx = lin.backward(&x, &probe);
        let frozen = lin.clone();
        check_input_grad(&x, &probe, &gx, |xx| frozen.forward(xx));
        let bias_grad: Vec<f64> = (0..3).map(|j| (0..5).map(|r| probe.row(r)[j]).sum()).collect();
        for (a, b) in bias_grad.iter().zip(&lin.bias.as_ref().unwrap().grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_gradient_matches_finite_differences() {
        for affine in [false, true] {
            let cfg = BnConfig {
                affine,
                ..BnConfig::default()
            };
            let mut bn = BatchNorm::<f64>::new(3, cfg);
            if let Some(g) = &mut bn.gamma {
                g.value = vec![1.5, 0.7, -0.3];
            }
            let x = rand_matrix(6, 3, 10);
            let (y, cache) = bn.forward(&x, Mode::Train);
            let probe = rand_matrix(y.rows, y.cols, 11);
            let gx = bn.backward(&cache, &probe);
            let frozen = bn.clone();
            check_input_grad(&x, &probe, &gx, |xx| frozen.clone().forward(xx, Mode::Train).0);
        }
    }

    #[test]
    fn batchnorm_eval_gradient_matches_finite_differences() {
        let mut bn = BatchNorm::<f64>::new(2, BnConfig::default());
        bn.running_mean = vec![0.3, -0.2];
        bn.running_var = vec![2.0, 0.5];
        let x = rand_matrix(4, 2, 12);
        let (y, cache) = bn.forward(&x, Mode::Eval);
        let probe = rand_matrix(y.rows, y.cols, 13);
        let gx = bn.backward(&cache, &probe);
        let frozen = bn.clone();
        check_input_grad(&x, &probe, &gx, |xx| frozen.infer(xx));
    }

    #[test]
    fn running_stats_follow_the_ema_rule() {
        let mut bn = BatchNorm::<f64>::new(1, BnConfig::default());
        let x = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 6.0]);
        let (y1, _) = bn.forward(&x, Mode::Train);
        // mean 3, unbiased var (4+1+0+9)/3
        assert!((bn.running_mean[0] - 0.3).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-15);
        let (y2, _) = bn.forward(&x, Mode::Train);
        assert_eq!(y1, y2);
        assert!((bn.running_mean[0] - (0.9 * 0.3 + 0.3)).abs() < 1e-15);
        let var1 = 0.9 + 0.1 * 14.0 / 3.0;
        assert!((bn.running_var[0] - (0.9 * var1 + 0.1 * 14.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_never_mutates_running_stats() {
        let mut bn = BatchNorm::<f64>::new(2, BnConfig::default());
        let before = (bn.running_mean.clone(), bn.running_var.clone());
        let x = rand_matrix(5, 2, 14);
        let (y, _) = bn.forward(&x, Mode::Eval);
        assert_eq!((bn.running_mean.clone(), bn.running_var.clone()), before);
        // fresh stats (0, 1): identity up to eps
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn affine_disabled_has_no_parameters() {
        let bn = BatchNorm::<f32>::new(4, BnConfig::default());
        assert!(bn.params().is_empty());
        let bn = BatchNorm::<f32>::new(4, BnConfig { affine: true, ..BnConfig::default() });
        assert_eq!(bn.params().len(), 2);
    }

    #[test]
    fn pooling_round_trip_shapes() {
        let g = Geometry {
            batch: 2,
            height: 2,
            width: 2,
        };
        let x = Matrix::from_vec(8, 1, vec![1.0, 2.0, 3.0, 6.0, 0.0, 0.0, 0.0, 4.0]);
        let p = global_avg_pool(&x, g);
        assert_eq!(p.data, vec![3.0, 1.0]);
        let back = global_avg_pool_backward(&Matrix::from_vec(2, 1, vec![4.0, 8.0]), g);
        assert_eq!(back.data, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
