use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::linalg::{matmul, matmul_into};
use super::params::{join, Params};
use crate::Scalar;

pub(crate) fn randn<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || T::of(normal.sample(rng)))
}

/// Affine map `y = x W + b` applied to every row.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    /// `in × out`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        Self::with_std(rng, input, output, 1.0 / (input as f64).sqrt())
    }

    pub fn with_std<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, std: f64) -> Self {
        Self {
            weight: randn(rng, (input, output), std),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = matmul(x, &self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, gy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        matmul_into(&mut grad.weight.view_mut(), &x.t(), gy, true);
        grad.bias += &gy.sum_axis(Axis(0));
        matmul(gy, &self.weight.t())
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T: Scalar> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::of(x.ncols() as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let s = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * s);
            *r = s;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, gy: &Array2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gamma += &(gy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &gy.sum_axis(Axis(0));
        let d = T::of(gy.ncols() as f64);
        let mut gx = gy * &self.gamma;
        for ((mut g, xh), &s) in gx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            g.zip_mut_with(&xh, |gv, &xv| *gv = s * (*gv - mean_g - xv * mean_gx));
        }
        gx
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f(&join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(&join(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(&join(prefix, "beta"), self.beta.view_mut().into_dyn());
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// The tanh term of the GELU approximation.
fn gelu_tanh<T: Scalar>(x: T) -> T {
    (T::of(GELU_C) * (x + T::of(0.044715) * x * x * x)).tanh_fast()
}

#[cfg(test)]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + gelu_tanh(x))
}

#[cfg(test)]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_grad_with(x, gelu_tanh(x))
}

/// Derivative given the precomputed tanh term `th`.
fn gelu_grad_with<T: Scalar>(x: T, th: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Pre-norm position-wise feed-forward sublayer, `d → 4d → d` with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward<T: Scalar> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache<T: Scalar> {
    ln: LayerNormCache<T>,
    x_ln: Array2<T>,
    pre: Array2<T>,
    th: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, mult: usize, out_std: f64) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, dim * mult),
            fc2: Linear::with_std(rng, dim * mult, dim, out_std / ((dim * mult) as f64).sqrt()),
        }
    }

    /// Sublayer output (without the residual).
    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, FeedForwardCache<T>) {
        let (x_ln, ln) = self.norm.forward(x);
        let pre = self.fc1.forward(&x_ln);
        let th = pre.mapv(gelu_tanh);
        let mut act = th.clone();
        act.zip_mut_with(&pre, |t, &p| *t = T::of(0.5) * p * (T::one() + *t));
        let y = self.fc2.forward(&act);
        (y, FeedForwardCache { ln, x_ln, pre, th, act })
    }

    pub fn backward(&self, cache: &FeedForwardCache<T>, gy: &Array2<T>, grad: &mut FeedForward<T>) -> Array2<T> {
        let mut g_act = self.fc2.backward(&cache.act, gy, &mut grad.fc2);
        ndarray::Zip::from(&mut g_act)
            .and(&cache.pre)
            .and(&cache.th)
            .for_each(|g, &p, &t| *g *= gelu_grad_with(p, t));
        let g_ln = self.fc1.backward(&cache.x_ln, &g_act, &mut grad.fc1);
        self.norm.backward(&cache.ln, &g_ln, &mut grad.norm)
    }
}

impl<T: Scalar> Params<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Width-3 depthwise convolution over time with zero padding, applied to each
/// sample of a row-stacked batch independently.
#[derive(Debug, Clone)]
pub struct DepthwiseConv<T: Scalar> {
    /// `3 × d`, tap 0 looks one frame back.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

pub const CONV_TAPS: usize = 3;

impl<T: Scalar> DepthwiseConv<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self {
            weight: randn(rng, (CONV_TAPS, dim), 1.0 / (CONV_TAPS as f64).sqrt()),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>, frames: usize) -> Array2<T> {
        let mut y = Array2::zeros(x.raw_dim());
        y += &self.bias;
        let (w0, w1, w2) = (self.weight.row(0), self.weight.row(1), self.weight.row(2));
        for start in (0..x.nrows()).step_by(frames) {
            let xs = x.slice(s![start..start + frames, ..]);
            let mut ys = y.slice_mut(s![start..start + frames, ..]);
            ys += &(&xs * &w1);
            if frames > 1 {
                let f = frames;
                let mut hi = ys.slice_mut(s![1.., ..]);
                hi += &(&xs.slice(s![..f - 1, ..]) * &w0);
                let mut lo = ys.slice_mut(s![..f - 1, ..]);
                lo += &(&xs.slice(s![1.., ..]) * &w2);
            }
        }
        y
    }

    pub fn backward(&self, x: &Array2<T>, frames: usize, gy: &Array2<T>, grad: &mut DepthwiseConv<T>) -> Array2<T> {
        grad.bias += &gy.sum_axis(Axis(0));
        let mut gx = Array2::zeros(x.raw_dim());
        let (w0, w1, w2) = (self.weight.row(0), self.weight.row(1), self.weight.row(2));
        let mut gw = Array2::<T>::zeros(self.weight.raw_dim());
        for start in (0..x.nrows()).step_by(frames) {
            let f = frames;
            let xs = x.slice(s![start..start + f, ..]);
            let gs = gy.slice(s![start..start + f, ..]);
            let mut gxs = gx.slice_mut(s![start..start + f, ..]);
            gxs += &(&gs * &w1);
            gw.row_mut(1)
                .zip_mut_with(&(&gs * &xs).sum_axis(Axis(0)), |a, &b| *a += b);
            if f > 1 {
                // tap 0: y[i] += w0 * x[i - 1]
                let (g_hi, x_lo) = (gs.slice(s![1.., ..]), xs.slice(s![..f - 1, ..]));
                gw.row_mut(0)
                    .zip_mut_with(&(&g_hi * &x_lo).sum_axis(Axis(0)), |a, &b| *a += b);
                let mut gx_lo = gxs.slice_mut(s![..f - 1, ..]);
                gx_lo += &(&g_hi * &w0);
                // tap 2: y[i] += w2 * x[i + 1]
                let (g_lo, x_hi) = (gs.slice(s![..f - 1, ..]), xs.slice(s![1.., ..]));
                gw.row_mut(2)
                    .zip_mut_with(&(&g_lo * &x_hi).sum_axis(Axis(0)), |a, &b| *a += b);
                let mut gx_hi = gxs.slice_mut(s![1.., ..]);
                gx_hi += &(&g_lo * &w2);
            }
        }
        grad.weight += &gw;
        gx
    }
}

impl<T: Scalar> Params<T> for DepthwiseConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

/// Convolution sublayer of the CLR block: the only place the diffusion
/// timestep enters. Output is `conv(LN(x)) + proj(t_emb)` broadcast over the
/// frames of each sample.
#[derive(Debug, Clone)]
pub struct TimestepInject<T: Scalar> {
    pub norm: LayerNorm<T>,
    pub conv: DepthwiseConv<T>,
    pub time_proj: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct TimestepInjectCache<T: Scalar> {
    ln: LayerNormCache<T>,
    x_ln: Array2<T>,
}

impl<T: Scalar> TimestepInject<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, time_dim: usize, out_std: f64) -> Self {
        let mut conv = DepthwiseConv::new(rng, dim);
        conv.weight.mapv_inplace(|w| w * T::of(out_std));
        Self {
            norm: LayerNorm::new(dim),
            conv,
            time_proj: Linear::with_std(rng, time_dim, dim, out_std / (time_dim as f64).sqrt()),
        }
    }

    /// `x` holds `t_emb.nrows()` samples of `frames` rows each.
    pub fn forward(&self, x: &Array2<T>, frames: usize, t_emb: &Array2<T>) -> (Array2<T>, TimestepInjectCache<T>) {
        let (x_ln, ln) = self.norm.forward(x);
        let mut y = self.conv.forward(&x_ln, frames);
        let proj = self.time_proj.forward(t_emb);
        for (b, p) in proj.rows().into_iter().enumerate() {
            let mut ys = y.slice_mut(s![b * frames..(b + 1) * frames, ..]);
            ys += &p;
        }
        (y, TimestepInjectCache { ln, x_ln })
    }

    /// Returns `(dL/dx, dL/dt_emb)`.
    pub fn backward(
        &self,
        cache: &TimestepInjectCache<T>,
        frames: usize,
        t_emb: &Array2<T>,
        gy: &Array2<T>,
        grad: &mut TimestepInject<T>,
    ) -> (Array2<T>, Array2<T>) {
        let batch = t_emb.nrows();
        let mut g_proj = Array2::zeros((batch, gy.ncols()));
        for b in 0..batch {
            g_proj
                .row_mut(b)
                .assign(&gy.slice(s![b * frames..(b + 1) * frames, ..]).sum_axis(Axis(0)));
        }
        let g_temb = self.time_proj.backward(t_emb, &g_proj, &mut grad.time_proj);
        let g_ln = self.conv.backward(&cache.x_ln, frames, gy, &mut grad.conv);
        let gx = self.norm.backward(&cache.ln, &g_ln, &mut grad.norm);
        (gx, g_temb)
    }
}

impl<T: Scalar> Params<T> for TimestepInject<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.time_proj.visit(&join(prefix, "time_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.time_proj.visit_mut(&join(prefix, "time_proj"), f);
    }
}
