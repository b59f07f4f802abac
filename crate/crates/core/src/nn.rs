//! Minimal neural-network kernels on ndarray: convolution via im2col + GEMM,
//! batch normalization, linear, squeeze-excitation, pooling, dropout, and
//! SGD with momentum. Every layer's `forward` returns the activations plus a
//! cache value holding whatever `backward` needs; caches are plain values,
//! so several forward passes through the same layers can coexist (the warped
//! auxiliary pass relies on this) and nothing is clobbered.
//!
//! Gradients accumulate into each parameter until `zero_grad`; reductions
//! over the batch run sequentially in index order.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::par;

/// Which part of the model a parameter belongs to; the trainer keys
/// learning rates and freezing off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

/// One tensor of model state. Running statistics are kept as non-trainable
/// params so checkpointing and visiting cover them uniformly.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub velocity: ArrayD<f32>,
    pub group: ParamGroup,
    /// Weight decay applies only where true (never biases or norm scales).
    pub decay: bool,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>, group: ParamGroup, decay: bool) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let velocity = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            velocity,
            group,
            decay,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: ArrayD<f32>, group: ParamGroup) -> Self {
        let mut p = Self::new(name, value, group, false);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform traversal over a module's parameters, in a fixed field order.
pub trait Visit {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param));
}

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// One SGD-with-momentum step: g ← grad (+ wd·w where decay applies),
/// v ← μ·v + g, w ← w − lr·v. No-op on non-trainable params.
pub fn sgd_step(param: &mut Param, lr: f32, cfg: &SgdConfig) {
    if !param.trainable {
        return;
    }
    let wd = if param.decay { cfg.weight_decay } else { 0.0 };
    for ((v, g), w) in param
        .velocity
        .iter_mut()
        .zip(param.grad.iter())
        .zip(param.value.iter_mut())
    {
        let grad = g + wd * *w;
        *v = cfg.momentum * *v + grad;
        *w -= lr * *v;
    }
}

fn kaiming_normal(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is finite");
    ArrayD::from_shape_fn(shape, |_| dist.sample(rng) as f32)
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// 2D convolution, NCHW, square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    in_c: usize,
    out_c: usize,
    kernel: usize,
}

pub struct Conv2dCache {
    input_dim: (usize, usize, usize, usize),
    /// One im2col matrix per sample, (in_c·k·k) × (oh·ow).
    cols: Vec<Array2<f32>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            kaiming_normal(rng, fan_in, &[out_c, in_c, kernel, kernel]),
            group,
            true,
        );
        let bias = bias.then(|| {
            Param::new(
                format!("{name}.bias"),
                ArrayD::zeros(vec![out_c]),
                group,
                false,
            )
        });
        Self {
            weight,
            bias,
            stride,
            padding,
            in_c,
            out_c,
            kernel,
        }
    }

    fn weight_mat(&self) -> Array2<f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_c, self.in_c * self.kernel * self.kernel))
            .expect("conv weight is contiguous")
            .to_owned()
    }

    fn im2col(&self, x: &Array4<f32>, sample: usize) -> Array2<f32> {
        let (_, c, h, w) = x.dim();
        let k = self.kernel;
        let oh = conv_out_size(h, k, self.stride, self.padding);
        let ow = conv_out_size(w, k, self.stride, self.padding);
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x[[sample, ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Conv2dCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "{}: channel mismatch", self.weight.name);
        let k = self.kernel;
        let oh = conv_out_size(h, k, self.stride, self.padding);
        let ow = conv_out_size(w, k, self.stride, self.padding);
        let wmat = self.weight_mat();
        let per_sample = par::map_indexed(n, |i| {
            let cols = self.im2col(x, i);
            let out = wmat.dot(&cols);
            (cols, out)
        });
        let mut y = Array4::zeros((n, self.out_c, oh, ow));
        let mut cols_cache = Vec::with_capacity(n);
        for (i, (cols, out)) in per_sample.into_iter().enumerate() {
            for oc in 0..self.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        y[[i, oc, oy, ox]] = out[[oc, oy * ow + ox]];
                    }
                }
            }
            cols_cache.push(cols);
        }
        if let Some(b) = &self.bias {
            for oc in 0..self.out_c {
                let bv = b.value[oc];
                y.index_axis_mut(Axis(1), oc).mapv_inplace(|v| v + bv);
            }
        }
        (
            y,
            Conv2dCache {
                input_dim: (n, c, h, w),
                cols: cols_cache,
            },
        )
    }

    /// Backward: accumulates weight/bias grads, returns grad w.r.t. input.
    pub fn backward(&mut self, cache: &Conv2dCache, dy: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = cache.input_dim;
        let (dn, doc, oh, ow) = dy.dim();
        assert_eq!((dn, doc), (n, self.out_c));
        let k = self.kernel;
        let wmat = self.weight_mat();
        let per_sample = par::map_indexed(n, |i| {
            let mut dy_mat = Array2::zeros((self.out_c, oh * ow));
            for oc in 0..self.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dy_mat[[oc, oy * ow + ox]] = dy[[i, oc, oy, ox]];
                    }
                }
            }
            let dw = dy_mat.dot(&cache.cols[i].t());
            let db: Array1<f32> = dy_mat.sum_axis(Axis(1));
            let dcols = wmat.t().dot(&dy_mat);
            (dw, db, dcols)
        });

        let mut dx = Array4::zeros((n, c, h, w));
        let mut dw_total: Array2<f32> = Array2::zeros((self.out_c, c * k * k));
        let mut db_total: Array1<f32> = Array1::zeros(self.out_c);
        for (i, (dw, db, dcols)) in per_sample.into_iter().enumerate() {
            dw_total += &dw;
            db_total += &db;
            // col2im scatter-add
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ch * k + ky) * k + kx;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[[i, ch, iy as usize, ix as usize]] +=
                                    dcols[[row, oy * ow + ox]];
                            }
                        }
                    }
                }
            }
        }
        {
            let mut g = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_c, c * k * k))
                .expect("conv grad is contiguous");
            g += &dw_total;
        }
        if let Some(b) = &mut self.bias {
            for oc in 0..self.out_c {
                b.grad[oc] += db_total[oc];
            }
        }
        dx
    }
}

impl Visit for Conv2d {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
    pub momentum: f32,
    channels: usize,
}

pub struct BatchNorm2dCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, group: ParamGroup) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.gamma"),
                ArrayD::from_elem(vec![channels], 1.0),
                group,
                false,
            ),
            beta: Param::new(
                format!("{name}.beta"),
                ArrayD::zeros(vec![channels]),
                group,
                false,
            ),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                ArrayD::zeros(vec![channels]),
                group,
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                ArrayD::from_elem(vec![channels], 1.0),
                group,
            ),
            eps: 1e-5,
            momentum: 0.1,
            channels,
        }
    }

    /// Training mode: normalize by batch statistics and fold them into the
    /// running estimates (unbiased variance for the running estimate).
    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BatchNorm2dCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "{}: channel mismatch", self.gamma.name);
        let m = (n * h * w) as f32;
        let mut y = Array4::zeros((n, c, h, w));
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let mut mean = 0.0f32;
            for i in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        mean += x[[i, ch, yy, xx]];
                    }
                }
            }
            mean /= m;
            let mut var = 0.0f32;
            for i in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let d = x[[i, ch, yy, xx]] - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.value[ch];
            let b = self.beta.value[ch];
            for i in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let xh = (x[[i, ch, yy, xx]] - mean) * istd;
                        xhat[[i, ch, yy, xx]] = xh;
                        y[[i, ch, yy, xx]] = g * xh + b;
                    }
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean.value[ch] =
                (1.0 - self.momentum) * self.running_mean.value[ch] + self.momentum * mean;
            self.running_var.value[ch] =
                (1.0 - self.momentum) * self.running_var.value[ch] + self.momentum * unbiased;
        }
        (y, BatchNorm2dCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "{}: channel mismatch", self.gamma.name);
        let mut y = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let istd = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
            let mean = self.running_mean.value[ch];
            let g = self.gamma.value[ch];
            let b = self.beta.value[ch];
            for i in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        y[[i, ch, yy, xx]] = g * (x[[i, ch, yy, xx]] - mean) * istd + b;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNorm2dCache, dy: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f32;
        let mut dx = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for i in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let d = dy[[i, ch, yy, xx]];
                        sum_dy += d;
                        sum_dy_xhat += d * cache.xhat[[i, ch, yy, xx]];
                    }
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let g = self.gamma.value[ch];
            let istd = cache.inv_std[ch];
            for i in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let d = dy[[i, ch, yy, xx]];
                        let xh = cache.xhat[[i, ch, yy, xx]];
                        dx[[i, ch, yy, xx]] =
                            g * istd * (d - sum_dy / m - xh * sum_dy_xhat / m);
                    }
                }
            }
        }
        dx
    }
}

impl Visit for BatchNorm2d {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Batch normalization over a (N, D) feature matrix.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
    pub momentum: f32,
}

pub struct BatchNorm1dCache {
    xhat: Array2<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm1d {
    pub fn new(name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.gamma"),
                ArrayD::from_elem(vec![dim], 1.0),
                group,
                false,
            ),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(vec![dim]), group, false),
            running_mean: Param::buffer(format!("{name}.running_mean"), ArrayD::zeros(vec![dim]), group),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                ArrayD::from_elem(vec![dim], 1.0),
                group,
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_train(&mut self, x: &Array2<f32>) -> (Array2<f32>, BatchNorm1dCache) {
        let (n, d) = x.dim();
        let m = n as f32;
        let mut y = Array2::zeros((n, d));
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(d);
        for j in 0..d {
            let col = x.column(j);
            let mean = col.sum() / m;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[j] = istd;
            for i in 0..n {
                let xh = (x[[i, j]] - mean) * istd;
                xhat[[i, j]] = xh;
                y[[i, j]] = self.gamma.value[j] * xh + self.beta.value[j];
            }
            let unbiased = if n > 1 { var * m / (m - 1.0) } else { var };
            self.running_mean.value[j] =
                (1.0 - self.momentum) * self.running_mean.value[j] + self.momentum * mean;
            self.running_var.value[j] =
                (1.0 - self.momentum) * self.running_var.value[j] + self.momentum * unbiased;
        }
        (y, BatchNorm1dCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array2<f32>) -> Array2<f32> {
        let (n, d) = x.dim();
        let mut y = Array2::zeros((n, d));
        for j in 0..d {
            let istd = 1.0 / (self.running_var.value[j] + self.eps).sqrt();
            for i in 0..n {
                y[[i, j]] = self.gamma.value[j] * (x[[i, j]] - self.running_mean.value[j]) * istd
                    + self.beta.value[j];
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNorm1dCache, dy: &Array2<f32>) -> Array2<f32> {
        let (n, d) = dy.dim();
        let m = n as f32;
        let mut dx = Array2::zeros((n, d));
        for j in 0..d {
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for i in 0..n {
                sum_dy += dy[[i, j]];
                sum_dy_xhat += dy[[i, j]] * cache.xhat[[i, j]];
            }
            self.beta.grad[j] += sum_dy;
            self.gamma.grad[j] += sum_dy_xhat;
            let g = self.gamma.value[j];
            let istd = cache.inv_std[j];
            for i in 0..n {
                dx[[i, j]] = g
                    * istd
                    * (dy[[i, j]] - sum_dy / m - cache.xhat[[i, j]] * sum_dy_xhat / m);
            }
        }
        dx
    }
}

impl Visit for BatchNorm1d {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Fully connected layer, y = x·Wᵀ + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    in_dim: usize,
    out_dim: usize,
}

pub struct LinearCache {
    input: Array2<f32>,
}

impl Linear {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            kaiming_normal(rng, in_dim, &[out_dim, in_dim]),
            group,
            true,
        );
        let bias = bias.then(|| {
            Param::new(format!("{name}.bias"), ArrayD::zeros(vec![out_dim]), group, false)
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight is 2d")
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LinearCache) {
        assert_eq!(x.ncols(), self.in_dim, "{}: input dim", self.weight.name);
        let mut y = x.dot(&self.weight2().t());
        if let Some(b) = &self.bias {
            for mut row in y.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += b.value[j];
                }
            }
        }
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f32>) -> Array2<f32> {
        let dw = dy.t().dot(&cache.input);
        {
            let mut g = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("linear grad is 2d");
            g += &dw;
        }
        if let Some(b) = &mut self.bias {
            let db = dy.sum_axis(Axis(0));
            for j in 0..self.out_dim {
                b.grad[j] += db[j];
            }
        }
        dy.dot(&self.weight2())
    }
}

impl Visit for Linear {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub fn relu4(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given its *output* (y > 0 ⟺ the input was > 0).
pub fn relu4_backward(y: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn relu2(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu2_backward(y: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Max pooling with square kernel. Padding cells never win the max.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct MaxPool2dCache {
    input_dim: (usize, usize, usize, usize),
    /// Flat (iy·w + ix) winner per output cell.
    argmax: Array4<u32>,
}

impl MaxPool2d {
    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, MaxPool2dCache) {
        let (n, c, h, w) = x.dim();
        let oh = conv_out_size(h, self.kernel, self.stride, self.padding);
        let ow = conv_out_size(w, self.kernel, self.stride, self.padding);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut argmax = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[i, ch, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = (iy as usize * w + ix as usize) as u32;
                                }
                            }
                        }
                        y[[i, ch, oy, ox]] = best;
                        argmax[[i, ch, oy, ox]] = best_idx;
                    }
                }
            }
        }
        (
            y,
            MaxPool2dCache {
                input_dim: (n, c, h, w),
                argmax,
            },
        )
    }

    pub fn backward(&self, cache: &MaxPool2dCache, dy: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = cache.input_dim;
        let (_, _, oh, ow) = dy.dim();
        let mut dx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = cache.argmax[[i, ch, oy, ox]] as usize;
                        dx[[i, ch, flat / w, flat % w]] += dy[[i, ch, oy, ox]];
                    }
                }
            }
        }
        dx
    }
}

/// Global average pool, (N, C, H, W) → (N, C).
pub fn gap(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut y = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    acc += x[[i, ch, yy, xx]];
                }
            }
            y[[i, ch]] = acc * scale;
        }
    }
    y
}

pub fn gap_backward(input_dim: (usize, usize, usize, usize), dy: &Array2<f32>) -> Array4<f32> {
    let (n, c, h, w) = input_dim;
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let g = dy[[i, ch]] * scale;
            for yy in 0..h {
                for xx in 0..w {
                    dx[[i, ch, yy, xx]] = g;
                }
            }
        }
    }
    dx
}

fn sigmoid_f32(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Squeeze-and-excitation: channel attention s = σ(W₂·relu(W₁·gap(x))),
/// output x scaled per channel by s.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct SeBlockCache {
    input: Array4<f32>,
    squeezed: Array2<f32>,
    hidden: Array2<f32>,
    scale: Array2<f32>,
    fc1_cache: LinearCache,
    fc2_cache: LinearCache,
}

impl SeBlock {
    pub fn new(name: &str, channels: usize, reduction: usize, group: ParamGroup, rng: &mut impl Rng) -> Self {
        let mid = (channels / reduction).max(1);
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), channels, mid, true, group, rng),
            fc2: Linear::new(&format!("{name}.fc2"), mid, channels, true, group, rng),
        }
    }

    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, SeBlockCache) {
        let (n, c, h, w) = x.dim();
        let squeezed = gap(x);
        let (pre, fc1_cache) = self.fc1.forward(&squeezed);
        let hidden = relu2(&pre);
        let (logits, fc2_cache) = self.fc2.forward(&hidden);
        let scale = logits.mapv(sigmoid_f32);
        let mut y = Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                let s = scale[[i, ch]];
                for yy in 0..h {
                    for xx in 0..w {
                        y[[i, ch, yy, xx]] = x[[i, ch, yy, xx]] * s;
                    }
                }
            }
        }
        (
            y,
            SeBlockCache {
                input: x.clone(),
                squeezed,
                hidden,
                scale,
                fc1_cache,
                fc2_cache,
            },
        )
    }

    pub fn backward(&mut self, cache: &SeBlockCache, dy: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = cache.input.dim();
        // direct path: dx = dy·s; attention path: ds = Σ_hw dy·x
        let mut dx = Array4::zeros((n, c, h, w));
        let mut dscale = Array2::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                let s = cache.scale[[i, ch]];
                let mut acc = 0.0;
                for yy in 0..h {
                    for xx in 0..w {
                        dx[[i, ch, yy, xx]] = dy[[i, ch, yy, xx]] * s;
                        acc += dy[[i, ch, yy, xx]] * cache.input[[i, ch, yy, xx]];
                    }
                }
                dscale[[i, ch]] = acc;
            }
        }
        // σ'(z) = s(1−s)
        let dlogits = &dscale * &cache.scale.mapv(|s| s * (1.0 - s));
        let dhidden = self.fc2.backward(&cache.fc2_cache, &dlogits);
        let dpre = relu2_backward(&cache.hidden, &dhidden);
        let dsqueezed = self.fc1.backward(&cache.fc1_cache, &dpre);
        let _ = &cache.squeezed;
        let dgap = gap_backward((n, c, h, w), &dsqueezed);
        dx += &dgap;
        dx
    }
}

impl Visit for SeBlock {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
}

/// Inverted dropout on feature vectors: kept units scale by 1/(1−p) so the
/// expectation matches eval mode, which is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

pub struct DropoutCache {
    mask: Array2<f32>,
}

impl Dropout {
    pub fn forward_train(&self, x: &Array2<f32>, rng: &mut impl Rng) -> (Array2<f32>, DropoutCache) {
        if self.p == 0.0 {
            return (
                x.clone(),
                DropoutCache {
                    mask: Array2::from_elem(x.raw_dim(), 1.0),
                },
            );
        }
        let keep = 1.0 - self.p;
        let scale = (1.0 / keep) as f32;
        let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
            if rng.random_bool(keep) {
                scale
            } else {
                0.0
            }
        });
        (x * &mask, DropoutCache { mask })
    }

    pub fn backward(&self, cache: &DropoutCache, dy: &Array2<f32>) -> Array2<f32> {
        dy * &cache.mask
    }
}

/// Horizontal flip of an NCHW batch (reverses the W axis).
pub fn flip_w(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    y[[i, ch, yy, xx]] = x[[i, ch, yy, w - 1 - xx]];
                }
            }
        }
    }
    y
}

/// Per-pixel L2 normalization of a (N, C, H, W) map along channels.
pub fn l2_normalize_pixels(x: &Array4<f32>, eps: f32) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let mut norm_sq = 0.0f32;
                for ch in 0..c {
                    let v = x[[i, ch, yy, xx]];
                    norm_sq += v * v;
                }
                let inv = 1.0 / (norm_sq + eps).sqrt();
                for ch in 0..c {
                    y[[i, ch, yy, xx]] = x[[i, ch, yy, xx]] * inv;
                }
            }
        }
    }
    y
}

/// Backward of `l2_normalize_pixels`: for each pixel with raw vector v,
/// dv = (dy − ŷ·(ŷ·dy)) / ‖v‖ where ŷ is the normalized vector and the
/// norm includes the eps term.
pub fn l2_normalize_pixels_backward(
    x: &Array4<f32>,
    dy: &Array4<f32>,
    eps: f32,
) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let mut norm_sq = 0.0f32;
                for ch in 0..c {
                    let v = x[[i, ch, yy, xx]];
                    norm_sq += v * v;
                }
                let norm = (norm_sq + eps).sqrt();
                let inv = 1.0 / norm;
                let mut dot = 0.0f32;
                for ch in 0..c {
                    dot += x[[i, ch, yy, xx]] * dy[[i, ch, yy, xx]];
                }
                // d(x/‖x‖)ᵀdy = dy/‖x‖ − x·(xᵀdy)/‖x‖³
                for ch in 0..c {
                    dx[[i, ch, yy, xx]] = dy[[i, ch, yy, xx]] * inv
                        - x[[i, ch, yy, xx]] * dot * inv * inv * inv;
                }
            }
        }
    }
    dx
}

/// Reinterpret an ArrayD parameter as 4D (convolution weights).
pub fn as4(value: &ArrayD<f32>) -> ndarray::ArrayView4<'_, f32> {
    value.view().into_dimensionality::<Ix4>().expect("4d param")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn rng(case: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(0xBEEF, Stream::Test, case, 0)
    }

    // Direct convolution oracle, no im2col.
    fn conv_direct(
        x: &Array4<f32>,
        weight: &ArrayD<f32>,
        bias: Option<&ArrayD<f32>>,
        stride: usize,
        padding: usize,
    ) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let wv = as4(weight);
        let (oc, _, k, _) = wv.dim();
        let oh = conv_out_size(h, k, stride, padding);
        let ow = conv_out_size(w, k, stride, padding);
        let mut y = Array4::zeros((n, oc, oh, ow));
        for i in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[o]);
                        for ch in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[[i, ch, iy as usize, ix as usize]]
                                        * wv[[o, ch, ky, kx]];
                                }
                            }
                        }
                        y[[i, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut r = rng(1);
        for &(stride, padding) in &[(1, 0), (1, 1), (2, 1), (2, 3)] {
            let conv = Conv2d::new("t", 3, 4, 3, stride, padding, true, ParamGroup::Backbone, &mut r);
            let x = Array4::from_shape_fn((2, 3, 9, 7), |_| r.random_range(-1.0..1.0f32));
            let (y, _) = conv.forward(&x);
            let want = conv_direct(
                &x,
                &conv.weight.value,
                conv.bias.as_ref().map(|b| &b.value),
                stride,
                padding,
            );
            assert_eq!(y.dim(), want.dim());
            for (a, b) in y.iter().zip(want.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut r = rng(2);
        let mut conv = Conv2d::new("t", 2, 2, 1, 1, 0, false, ParamGroup::Backbone, &mut r);
        conv.weight.value.fill(0.0);
        conv.weight.value[[0, 0, 0, 0]] = 1.0;
        conv.weight.value[[1, 1, 0, 0]] = 1.0;
        let x = Array4::from_shape_fn((1, 2, 5, 5), |_| r.random_range(-1.0..1.0f32));
        let (y, _) = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_gradcheck_small() {
        let mut r = rng(3);
        let mut conv = Conv2d::new("t", 2, 3, 3, 2, 1, true, ParamGroup::Backbone, &mut r);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |_| r.random_range(-1.0..1.0f32));
        let (y, cache) = conv.forward(&x);
        // loss = Σ y²/2 so dy = y
        let dx = conv.backward(&cache, &y.clone());
        let loss = |c: &Conv2d, x: &Array4<f32>| -> f64 {
            let (y, _) = c.forward(x);
            y.iter().map(|v| (*v as f64) * (*v as f64) / 2.0).sum()
        };
        let h = 1e-2f32;
        // input grad
        for &(i, ch, yy, xx) in &[(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4)] {
            let mut xp = x.clone();
            xp[[i, ch, yy, xx]] += h;
            let mut xm = x.clone();
            xm[[i, ch, yy, xx]] -= h;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h as f64);
            assert_relative_eq!(dx[[i, ch, yy, xx]] as f64, num, max_relative = 2e-2, epsilon = 1e-3);
        }
        // weight grad
        for &flat in &[0usize, 7, 20, 53] {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.weight.value.as_slice_mut().unwrap()[flat] += h;
            cm.weight.value.as_slice_mut().unwrap()[flat] -= h;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h as f64);
            let analytic = conv.weight.grad.as_slice().unwrap()[flat] as f64;
            assert_relative_eq!(analytic, num, max_relative = 2e-2, epsilon = 1e-3);
        }
    }

    #[test]
    fn batchnorm2d_train_normalizes_batch() {
        let mut r = rng(4);
        let mut bn = BatchNorm2d::new("t", 3, ParamGroup::Backbone);
        let x = Array4::from_shape_fn((4, 3, 6, 6), |_| r.random_range(-2.0..5.0f32));
        let (y, _) = bn.forward_train(&x);
        for ch in 0..3 {
            let vals: Vec<f32> = y.index_axis(Axis(1), ch).iter().cloned().collect();
            let m = vals.iter().sum::<f32>() / vals.len() as f32;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / vals.len() as f32;
            assert_relative_eq!(m, 0.0, epsilon = 1e-4);
            assert_relative_eq!(v, 1.0, epsilon = 1e-2);
        }
    }

    #[test]
    fn batchnorm2d_eval_uses_running_stats() {
        let mut r = rng(5);
        let mut bn = BatchNorm2d::new("t", 2, ParamGroup::Backbone);
        // drive running stats toward the batch statistics
        let x = Array4::from_shape_fn((8, 2, 4, 4), |_| r.random_range(0.0..4.0f32));
        for _ in 0..200 {
            bn.forward_train(&x);
        }
        let y = bn.forward_eval(&x);
        let m: f32 = y.iter().sum::<f32>() / y.len() as f32;
        assert_relative_eq!(m, 0.0, epsilon = 1e-2);
        // eval is pure: same input, same output
        let y2 = bn.forward_eval(&x);
        assert_eq!(y, y2);
    }

    #[test]
    fn batchnorm2d_gradcheck_small() {
        let mut r = rng(6);
        let x = Array4::from_shape_fn((3, 2, 2, 2), |_| r.random_range(-1.0..1.0f32));
        let loss = |x: &Array4<f32>| -> f64 {
            let mut bn = BatchNorm2d::new("t", 2, ParamGroup::Backbone);
            bn.gamma.value[0] = 1.5;
            bn.beta.value[1] = 0.3;
            let (y, _) = bn.forward_train(x);
            y.iter().map(|v| (*v as f64).powi(2) / 2.0).sum()
        };
        let mut bn = BatchNorm2d::new("t", 2, ParamGroup::Backbone);
        bn.gamma.value[0] = 1.5;
        bn.beta.value[1] = 0.3;
        let (y, cache) = bn.forward_train(&x);
        let dx = bn.backward(&cache, &y);
        let h = 1e-3f32;
        for &(i, ch, yy, xx) in &[(0, 0, 0, 0), (2, 1, 1, 1), (1, 0, 1, 0)] {
            let mut xp = x.clone();
            xp[[i, ch, yy, xx]] += h;
            let mut xm = x.clone();
            xm[[i, ch, yy, xx]] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            assert_relative_eq!(dx[[i, ch, yy, xx]] as f64, num, max_relative = 3e-2, epsilon = 1e-3);
        }
    }

    #[test]
    fn linear_known_matmul() {
        let mut r = rng(7);
        let mut lin = Linear::new("t", 2, 2, true, ParamGroup::Head, &mut r);
        lin.weight.value = array![[1.0f32, 2.0], [3.0, 4.0]].into_dyn();
        if let Some(b) = &mut lin.bias {
            b.value = array![0.5f32, -0.5].into_dyn();
        }
        let x = array![[1.0f32, 1.0], [2.0, 0.0]];
        let (y, _) = lin.forward(&x);
        assert_eq!(y, array![[3.5f32, 6.5], [2.5, 5.5]]);
    }

    #[test]
    fn linear_gradcheck() {
        let mut r = rng(8);
        let mut lin = Linear::new("t", 3, 2, true, ParamGroup::Head, &mut r);
        let x = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0f32));
        let (y, cache) = lin.forward(&x);
        let dx = lin.backward(&cache, &y);
        let loss = |l: &Linear, x: &Array2<f32>| -> f64 {
            let (y, _) = l.forward(x);
            y.iter().map(|v| (*v as f64).powi(2) / 2.0).sum()
        };
        let h = 1e-2f32;
        for &(i, j) in &[(0, 0), (3, 2), (1, 1)] {
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let num = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h as f64);
            assert_relative_eq!(dx[[i, j]] as f64, num, max_relative = 2e-2, epsilon = 1e-3);
        }
        for &flat in &[0usize, 3, 5] {
            let mut lp = lin.clone();
            let mut lm = lin.clone();
            lp.weight.value.as_slice_mut().unwrap()[flat] += h;
            lm.weight.value.as_slice_mut().unwrap()[flat] -= h;
            let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h as f64);
            assert_relative_eq!(
                lin.weight.grad.as_slice().unwrap()[flat] as f64,
                num,
                max_relative = 2e-2,
                epsilon = 1e-3
            );
        }
    }

    #[test]
    fn maxpool_known_fixture_and_backward_routing() {
        let pool = MaxPool2d {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let x = Array4::from_shape_vec(
            (1, 1, 4, 4),
            vec![
                1.0f32, 2.0, 5.0, 6.0, //
                3.0, 4.0, 7.0, 8.0, //
                9.0, 1.0, 2.0, 1.0, //
                1.0, 1.0, 1.0, 3.0,
            ],
        )
        .unwrap();
        let (y, cache) = pool.forward(&x);
        assert_eq!(
            y,
            Array4::from_shape_vec((1, 1, 2, 2), vec![4.0f32, 8.0, 9.0, 3.0]).unwrap()
        );
        let dy = Array4::from_elem((1, 1, 2, 2), 1.0f32);
        let dx = pool.backward(&cache, &dy);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0); // the 4
        assert_eq!(dx[[0, 0, 1, 3]], 1.0); // the 8
        assert_eq!(dx[[0, 0, 2, 0]], 1.0); // the 9
        assert_eq!(dx[[0, 0, 3, 3]], 1.0); // the 3
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn maxpool_padding_never_wins() {
        let pool = MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x = Array4::from_elem((1, 1, 4, 4), -5.0f32);
        let (y, _) = pool.forward(&x);
        // all-negative input: padded zeros must not leak into the max
        assert!(y.iter().all(|&v| v == -5.0));
    }

    #[test]
    fn gap_is_mean_and_backward_spreads() {
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(i, c, y, x)| (i + c + y + x) as f32);
        let y = gap(&x);
        assert_relative_eq!(y[[0, 0]], (0.0 + 1.0 + 1.0 + 2.0) / 4.0);
        let dy = Array2::from_elem((2, 3), 4.0f32);
        let dx = gap_backward((2, 3, 2, 2), &dy);
        assert!(dx.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn se_with_zero_weights_halves_activations() {
        let mut r = rng(9);
        let mut se = SeBlock::new("t", 4, 2, ParamGroup::Backbone, &mut r);
        se.fc1.weight.value.fill(0.0);
        se.fc2.weight.value.fill(0.0);
        if let Some(b) = &mut se.fc1.bias {
            b.value.fill(0.0);
        }
        if let Some(b) = &mut se.fc2.bias {
            b.value.fill(0.0);
        }
        let x = Array4::from_elem((2, 4, 3, 3), 2.0f32);
        let (y, _) = se.forward(&x);
        assert!(y.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn se_gradcheck_small() {
        let mut r = rng(10);
        let se = SeBlock::new("t", 4, 2, ParamGroup::Backbone, &mut r);
        let x = Array4::from_shape_fn((2, 4, 3, 3), |_| r.random_range(-1.0..1.0f32));
        let loss = |se: &SeBlock, x: &Array4<f32>| -> f64 {
            let (y, _) = se.forward(x);
            y.iter().map(|v| (*v as f64).powi(2) / 2.0).sum()
        };
        let mut se_mut = se.clone();
        let (y, cache) = se.forward(&x);
        let dx = se_mut.backward(&cache, &y);
        let h = 1e-2f32;
        for &(i, ch, yy, xx) in &[(0, 0, 0, 0), (1, 3, 2, 2), (0, 2, 1, 1)] {
            let mut xp = x.clone();
            xp[[i, ch, yy, xx]] += h;
            let mut xm = x.clone();
            xm[[i, ch, yy, xx]] -= h;
            let num = (loss(&se, &xp) - loss(&se, &xm)) / (2.0 * h as f64);
            assert_relative_eq!(dx[[i, ch, yy, xx]] as f64, num, max_relative = 3e-2, epsilon = 1e-3);
        }
    }

    #[test]
    fn dropout_eval_semantics_and_scaling() {
        let mut r = rng(11);
        let drop = Dropout { p: 0.5 };
        let x = Array2::from_elem((200, 50), 1.0f32);
        let (y, cache) = drop.forward_train(&x, &mut r);
        let kept = y.iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / y.len() as f64;
        assert!((frac - 0.5).abs() < 0.05, "keep fraction {frac}");
        // kept units are scaled to preserve the expectation
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        // backward masks the same units
        let dy = Array2::from_elem((200, 50), 1.0f32);
        let dx = drop.backward(&cache, &dy);
        assert_eq!(dx, y);
        // p=0 is the identity
        let none = Dropout { p: 0.0 };
        let (y0, _) = none.forward_train(&x, &mut r);
        assert_eq!(y0, x);
    }

    #[test]
    fn dropout_deterministic_under_seed() {
        let drop = Dropout { p: 0.3 };
        let x = Array2::from_elem((10, 10), 1.0f32);
        let (a, _) = drop.forward_train(&x, &mut rng(12));
        let (b, _) = drop.forward_train(&x, &mut rng(12));
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_momentum_matches_hand_sequence() {
        let mut p = Param::new("w", ArrayD::from_elem(vec![1], 1.0f32), ParamGroup::Head, true);
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        // constant gradient 1, lr 0.1:
        // v1 = 1, w1 = 1 − 0.1 = 0.9
        // v2 = 0.9 + 1 = 1.9, w2 = 0.9 − 0.19 = 0.71
        p.grad.fill(1.0);
        sgd_step(&mut p, 0.1, &cfg);
        assert_relative_eq!(p.value[0], 0.9, epsilon = 1e-6);
        sgd_step(&mut p, 0.1, &cfg);
        assert_relative_eq!(p.value[0], 0.71, epsilon = 1e-6);
    }

    #[test]
    fn sgd_weight_decay_only_where_enabled() {
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.1,
        };
        let mut decayed = Param::new("w", ArrayD::from_elem(vec![1], 2.0f32), ParamGroup::Head, true);
        let mut plain = Param::new("b", ArrayD::from_elem(vec![1], 2.0f32), ParamGroup::Head, false);
        // zero gradient: only decay moves the weight
        sgd_step(&mut decayed, 1.0, &cfg);
        sgd_step(&mut plain, 1.0, &cfg);
        assert_relative_eq!(decayed.value[0], 2.0 - 0.1 * 2.0, epsilon = 1e-6);
        assert_eq!(plain.value[0], 2.0);
    }

    #[test]
    fn sgd_skips_non_trainable() {
        let mut buf = Param::buffer("rm", ArrayD::from_elem(vec![2], 3.0f32), ParamGroup::Backbone);
        buf.grad.fill(10.0);
        sgd_step(&mut buf, 1.0, &SgdConfig::default());
        assert!(buf.value.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn flip_w_reverses_and_roundtrips() {
        let x = Array4::from_shape_fn((1, 1, 2, 3), |(_, _, y, x)| (y * 3 + x) as f32);
        let f = flip_w(&x);
        assert_eq!(f[[0, 0, 0, 0]], 2.0);
        assert_eq!(f[[0, 0, 0, 2]], 0.0);
        assert_eq!(flip_w(&f), x);
    }

    #[test]
    fn pixel_l2_norm_is_unit_and_gradcheck() {
        let mut r = rng(13);
        let x = Array4::from_shape_fn((1, 5, 2, 2), |_| r.random_range(-1.0..1.0f32));
        let eps = 1e-12;
        let y = l2_normalize_pixels(&x, eps);
        for yy in 0..2 {
            for xx in 0..2 {
                let norm: f32 = (0..5).map(|c| y[[0, c, yy, xx]].powi(2)).sum::<f32>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
            }
        }
        let loss = |x: &Array4<f32>| -> f64 {
            l2_normalize_pixels(x, eps)
                .iter()
                .enumerate()
                .map(|(i, v)| (*v as f64) * ((i % 3) as f64 + 0.5))
                .sum()
        };
        let mut dy = Array4::zeros((1, 5, 2, 2));
        for (i, v) in dy.iter_mut().enumerate() {
            *v = (i % 3) as f32 + 0.5;
        }
        let dx = l2_normalize_pixels_backward(&x, &dy, eps);
        let h = 1e-3f32;
        for &(ch, yy, xx) in &[(0, 0, 0), (4, 1, 1), (2, 0, 1)] {
            let mut xp = x.clone();
            xp[[0, ch, yy, xx]] += h;
            let mut xm = x.clone();
            xm[[0, ch, yy, xx]] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h as f64);
            assert_relative_eq!(dx[[0, ch, yy, xx]] as f64, num, max_relative = 2e-2, epsilon = 1e-3);
        }
    }

    #[test]
    fn conv_strided_shapes() {
        assert_eq!(conv_out_size(224, 7, 2, 3), 112);
        assert_eq!(conv_out_size(112, 3, 2, 1), 56);
        assert_eq!(conv_out_size(56, 3, 1, 1), 56);
        assert_eq!(conv_out_size(64, 3, 2, 1), 32);
    }
}
