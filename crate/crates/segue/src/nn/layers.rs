//! Layers with explicit forward/backward passes.
//!
//! Each layer owns its parameters and, after a caching forward, whatever its
//! backward needs. `backward` consumes the cache, so calling it twice
//! without a fresh forward is a bug and panics. All backward methods
//! accumulate parameter gradients (when `want_gw` is set) and return the
//! input gradient (when `want_gx` is set).

use ndarray::{Array1, Array2, Array4, ArrayViewMut2, Axis};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::param::{Init, Param};
use super::Mode;

/// 2-D convolution, square kernel, symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param, // [Cout, Cin, k, k]
    pub b: Param, // [Cout]
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        Conv2d {
            w: Param::new(&[c_out, c_in, k, k], Init::HeNormal { fan_in }, rng),
            b: Param::new(&[c_out], Init::Zeros, rng),
            stride,
            pad,
            cache_x: None,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.w.value.shape();
        (s[0], s[1], s[2]) // (c_out, c_in, k)
    }

    pub fn forward(&mut self, x: &Array4<f64>, cache: bool) -> Array4<f64> {
        let y = self.infer(x);
        self.cache_x = cache.then(|| x.clone());
        y
    }

    /// Forward without caching; usable through a shared reference.
    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let (c_out, c_in, k) = self.dims();
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .expect("conv weight is contiguous");
        let b = self.b.value.as_slice().expect("bias is contiguous");
        ops::conv2d_forward(x, &w2, b, k, k, self.stride, self.pad)
    }

    pub fn backward(
        &mut self,
        gy: &Array4<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array4<f64>> {
        let x = self.cache_x.take().expect("conv backward without cached forward");
        let (c_out, c_in, k) = self.dims();
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .expect("conv weight is contiguous");
        let (gw2, gb): (Option<ArrayViewMut2<f64>>, Option<&mut [f64]>) = if want_gw {
            let gw2 = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((c_out, c_in * k * k))
                .expect("conv grad is contiguous");
            let gb = self.b.grad.as_slice_mut().expect("bias grad is contiguous");
            (Some(gw2), Some(gb))
        } else {
            (None, None)
        };
        ops::conv2d_backward(&x, &w2, gy, k, k, self.stride, self.pad, gw2, gb, want_gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Depthwise 3x3-style convolution: one spatial filter per channel.
#[derive(Debug, Clone)]
pub struct DwConv2d {
    pub w: Param, // [C, k, k]
    pub b: Param, // [C]
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Array4<f64>>,
}

impl DwConv2d {
    pub fn new(c: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        DwConv2d {
            w: Param::new(&[c, k, k], Init::HeNormal { fan_in: k * k }, rng),
            b: Param::new(&[c], Init::Zeros, rng),
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, cache: bool) -> Array4<f64> {
        let y = self.infer(x);
        self.cache_x = cache.then(|| x.clone());
        y
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let k = self.w.value.shape()[1];
        let (stride, pad) = (self.stride, self.pad);
        let ho = ops::conv_out_dim(h, k, stride, pad);
        let wo = ops::conv_out_dim(w, k, stride, pad);
        let mut y = Array4::<f64>::zeros((n, c, ho, wo));
        for i in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = self.b.value[ch];
                        for ki in 0..k {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    acc += self.w.value[[ch, ki, kj]]
                                        * x[[i, ch, ih as usize, iw as usize]];
                                }
                            }
                        }
                        y[[i, ch, oh, ow]] = acc;
                    }
                }
            }
        }
        y
    }

    pub fn backward(
        &mut self,
        gy: &Array4<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array4<f64>> {
        let x = self.cache_x.take().expect("dwconv backward without cached forward");
        let (n, c, h, w) = x.dim();
        let k = self.w.value.shape()[1];
        let (stride, pad) = (self.stride, self.pad);
        let (_, _, ho, wo) = gy.dim();
        let mut gx = want_gx.then(|| Array4::<f64>::zeros((n, c, h, w)));
        for i in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = gy[[i, ch, oh, ow]];
                        if want_gw {
                            self.b.grad[ch] += g;
                        }
                        for ki in 0..k {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let (ihu, iwu) = (ih as usize, iw as usize);
                                if want_gw {
                                    self.w.grad[[ch, ki, kj]] += g * x[[i, ch, ihu, iwu]];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx[[i, ch, ihu, iwu]] += g * self.w.value[[ch, ki, kj]];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array4<f64>,
    invstd: Array1<f64>,
    mode: Mode,
}

/// Batch normalization over `[N, H, W]` per channel with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param, // [C]
    pub beta: Param,  // [C]
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        BatchNorm2d {
            gamma: Param::new(&[c], Init::Ones, rng),
            beta: Param::new(&[c], Init::Zeros, rng),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running estimates; evaluation mode uses the running estimates and
    /// leaves them untouched.
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, cache: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut xhat = x.clone();
        let mut invstd = Array1::<f64>::zeros(c);
        match mode {
            Mode::Train => {
                debug_assert!(m > 1.0, "batch norm needs more than one value per channel");
                for ch in 0..c {
                    let slice = x.slice(ndarray::s![.., ch, .., ..]);
                    let mean = slice.sum() / m;
                    let var = slice.mapv(|v| (v - mean) * (v - mean)).sum() / m;
                    let is = 1.0 / (var + self.eps).sqrt();
                    invstd[ch] = is;
                    xhat.slice_mut(ndarray::s![.., ch, .., ..])
                        .mapv_inplace(|v| (v - mean) * is);
                    // Running update uses the unbiased variance, matching
                    // the convention of mainstream frameworks.
                    let var_unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    self.running_mean[ch] =
                        (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                    self.running_var[ch] =
                        (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var_unbiased;
                }
            }
            Mode::Eval => {
                for ch in 0..c {
                    let mean = self.running_mean[ch];
                    let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                    invstd[ch] = is;
                    xhat.slice_mut(ndarray::s![.., ch, .., ..])
                        .mapv_inplace(|v| (v - mean) * is);
                }
            }
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            y.slice_mut(ndarray::s![.., ch, .., ..]).mapv_inplace(|v| g * v + b);
        }
        self.cache = cache.then(|| BnCache { xhat, invstd, mode });
        y
    }

    /// Forward without caching or running-stat updates.
    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        let (_, c, _, _) = x.dim();
        let mut y = x.clone();
        for ch in 0..c {
            let mean = self.running_mean[ch];
            let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            y.slice_mut(ndarray::s![.., ch, .., ..])
                .mapv_inplace(|v| g * (v - mean) * is + b);
        }
        y
    }

    pub fn backward(
        &mut self,
        gy: &Array4<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array4<f64>> {
        let BnCache { xhat, invstd, mode } =
            self.cache.take().expect("batch-norm backward without cached forward");
        let (n, c, h, w) = gy.dim();
        let m = (n * h * w) as f64;
        if want_gw {
            for ch in 0..c {
                let gy_c = gy.slice(ndarray::s![.., ch, .., ..]);
                let xh_c = xhat.slice(ndarray::s![.., ch, .., ..]);
                self.gamma.grad[ch] += (&gy_c * &xh_c).sum();
                self.beta.grad[ch] += gy_c.sum();
            }
        }
        if !want_gx {
            return None;
        }
        let mut gx = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            let g = self.gamma.value[ch];
            let is = invstd[ch];
            let gy_c = gy.slice(ndarray::s![.., ch, .., ..]);
            match mode {
                Mode::Train => {
                    // Batch statistics depend on x, so the gradient couples
                    // all positions in the channel:
                    // gx = gamma*invstd/M * (M*gy - sum(gy) - xhat*sum(gy*xhat))
                    let xh_c = xhat.slice(ndarray::s![.., ch, .., ..]);
                    let sum_gy = gy_c.sum();
                    let sum_gy_xhat = (&gy_c * &xh_c).sum();
                    let scale = g * is / m;
                    let mut gx_c = gx.slice_mut(ndarray::s![.., ch, .., ..]);
                    ndarray::Zip::from(&mut gx_c).and(&gy_c).and(&xh_c).for_each(
                        |o, &gyv, &xhv| {
                            *o = scale * (m * gyv - sum_gy - xhv * sum_gy_xhat);
                        },
                    );
                }
                Mode::Eval => {
                    // Running statistics are constants: plain rescaling.
                    let scale = g * is;
                    gx.slice_mut(ndarray::s![.., ch, .., ..])
                        .zip_mut_with(&gy_c, |o, &gyv| *o = scale * gyv);
                }
            }
        }
        Some(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    /// Running statistics, needed alongside the parameters to reproduce
    /// evaluation-mode forwards (checkpointing).
    pub fn running_stats(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.running_mean, &self.running_var)
    }

    pub fn running_stats_mut(&mut self) -> (&mut Array1<f64>, &mut Array1<f64>) {
        (&mut self.running_mean, &mut self.running_var)
    }
}

/// Rectified linear unit.
#[derive(Debug, Clone, Default)]
pub struct ReLU {
    cache_y: Option<Array4<f64>>,
}

impl ReLU {
    pub fn new() -> Self {
        ReLU { cache_y: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, cache: bool) -> Array4<f64> {
        let y = x.mapv(|v| v.max(0.0));
        self.cache_y = cache.then(|| y.clone());
        y
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let y = self.cache_y.take().expect("relu backward without cached forward");
        let mut gx = gy.clone();
        gx.zip_mut_with(&y, |g, &yv| {
            if yv <= 0.0 {
                *g = 0.0;
            }
        });
        gx
    }
}

/// Hyperbolic tangent.
#[derive(Debug, Clone, Default)]
pub struct Tanh {
    cache_y: Option<Array4<f64>>,
}

impl Tanh {
    pub fn new() -> Self {
        Tanh { cache_y: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, cache: bool) -> Array4<f64> {
        let y = x.mapv(f64::tanh);
        self.cache_y = cache.then(|| y.clone());
        y
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        x.mapv(f64::tanh)
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let y = self.cache_y.take().expect("tanh backward without cached forward");
        let mut gx = gy.clone();
        gx.zip_mut_with(&y, |g, &yv| *g *= 1.0 - yv * yv);
        gx
    }
}

/// Fully connected layer on `[N, F]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param, // [In, Out]
    pub b: Param, // [Out]
    cache_x: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::new(&[f_in, f_out], Init::HeNormal { fan_in: f_in }, rng),
            b: Param::new(&[f_out], Init::Zeros, rng),
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, cache: bool) -> Array2<f64> {
        let y = self.infer(x);
        self.cache_x = cache.then(|| x.clone());
        y
    }

    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let (f_in, f_out) = (self.w.value.shape()[0], self.w.value.shape()[1]);
        let w = self
            .w
            .value
            .view()
            .into_shape_with_order((f_in, f_out))
            .expect("linear weight is contiguous");
        let mut y = x.dot(&w);
        let b = self.b.value.as_slice().expect("bias is contiguous");
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    pub fn backward(
        &mut self,
        gy: &Array2<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array2<f64>> {
        let x = self.cache_x.take().expect("linear backward without cached forward");
        let (f_in, f_out) = (self.w.value.shape()[0], self.w.value.shape()[1]);
        if want_gw {
            let mut gw = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((f_in, f_out))
                .expect("linear grad is contiguous");
            ndarray::linalg::general_mat_mul(1.0, &x.t(), gy, 1.0, &mut gw);
            let gb = self.b.grad.as_slice_mut().expect("bias grad is contiguous");
            for row in gy.axis_iter(Axis(0)) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        want_gx.then(|| {
            let w = self
                .w
                .value
                .view()
                .into_shape_with_order((f_in, f_out))
                .expect("linear weight is contiguous");
            gy.dot(&w.t())
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Nearest-neighbor 2x upsampling (stateless).
#[derive(Debug, Clone, Default)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward(x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for i in 0..n {
            for ch in 0..c {
                for ih in 0..h {
                    for iw in 0..w {
                        let v = x[[i, ch, ih, iw]];
                        y[[i, ch, 2 * ih, 2 * iw]] = v;
                        y[[i, ch, 2 * ih, 2 * iw + 1]] = v;
                        y[[i, ch, 2 * ih + 1, 2 * iw]] = v;
                        y[[i, ch, 2 * ih + 1, 2 * iw + 1]] = v;
                    }
                }
            }
        }
        y
    }

    /// Each input pixel fans out to a 2x2 block, so its gradient is the
    /// block sum.
    pub fn backward(gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h2, w2) = gy.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut gx = Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                for ih in 0..h {
                    for iw in 0..w {
                        gx[[i, ch, ih, iw]] = gy[[i, ch, 2 * ih, 2 * iw]]
                            + gy[[i, ch, 2 * ih, 2 * iw + 1]]
                            + gy[[i, ch, 2 * ih + 1, 2 * iw]]
                            + gy[[i, ch, 2 * ih + 1, 2 * iw + 1]];
                    }
                }
            }
        }
        gx
    }
}

/// Global average pooling `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut y = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            y[[i, ch]] = x.slice(ndarray::s![i, ch, .., ..]).sum() / m;
        }
    }
    y
}

/// Backward of global average pooling: spread the gradient evenly.
pub fn global_avg_pool_backward(gy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = gy.dim();
    let m = (h * w) as f64;
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            gx.slice_mut(ndarray::s![i, ch, .., ..]).fill(gy[[i, ch]] / m);
        }
    }
    gx
}

/// Conv -> BatchNorm -> ReLU, the workhorse block of every model here.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: ReLU,
}

impl ConvBlock {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(c_in, c_out, k, stride, k / 2, rng),
            bn: BatchNorm2d::new(c_out, rng),
            relu: ReLU::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, cache: bool) -> Array4<f64> {
        let y = self.conv.forward(x, cache);
        let y = self.bn.forward(&y, mode, cache);
        self.relu.forward(&y, cache)
    }

    pub fn infer(&self, x: &Array4<f64>) -> Array4<f64> {
        self.relu.infer(&self.bn.infer(&self.conv.infer(x)))
    }

    pub fn backward(
        &mut self,
        gy: &Array4<f64>,
        want_gx: bool,
        want_gw: bool,
    ) -> Option<Array4<f64>> {
        let g = self.relu.backward(gy);
        let g = self
            .bn
            .backward(&g, true, want_gw)
            .expect("batch-norm backward always produces an input gradient here");
        self.conv.backward(&g, want_gx, want_gw)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.conv.params_mut();
        ps.extend(self.bn.params_mut());
        ps
    }
}
