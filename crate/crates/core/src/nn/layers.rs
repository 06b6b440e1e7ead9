//! Differentiable layer kernels with hand-derived backward passes.
//!
//! Every layer caches whatever its backward pass needs during forward;
//! parameter gradients accumulate across backward calls until
//! `Param::zero_grad`, which is what makes gradient accumulation a sum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward context: mode plus the generator used by stochastic layers.
pub struct Ctx<'a> {
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
}

pub trait Layer: Send {
    fn forward(&mut self, input: &Tensor, ctx: &mut Ctx) -> Result<Tensor>;
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;
    /// Learnable parameters, named relative to the layer.
    fn params(&mut self) -> Vec<(String, &mut Param)> {
        Vec::new()
    }
    /// Non-learnable persistent state (e.g. batch-norm running stats).
    fn buffers(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        Vec::new()
    }
    /// Composite layers expose their children for spec-driven recursion.
    fn as_residual_mut(&mut self) -> Option<&mut Residual> {
        None
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub weight: Param, // (out_c, in_c, kh, kw)
    pub bias: Param,   // (out_c)
    cached_input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Conv2d {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(Tensor::zeros(&[out_channels, in_channels, kernel.0, kernel.1])),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            cached_input: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h + 2 * self.padding.0).checked_sub(self.kernel.0).map(|v| v / self.stride.0 + 1);
        let ow = (w + 2 * self.padding.1).checked_sub(self.kernel.1).map(|v| v / self.stride.1 + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Shape(format!(
                "kernel {:?} does not fit a {h}x{w} map with padding {:?}",
                self.kernel, self.padding
            ))),
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, input: &Tensor, _ctx: &mut Ctx) -> Result<Tensor> {
        let dims = input.dims4()?;
        let (n, c, h, w) = dims;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let mut out = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let odims = (n, self.out_channels, oh, ow);
        let wdims = (self.out_channels, self.in_channels, kh, kw);
        for b in 0..n {
            for oc in 0..self.out_channels {
                let bias = self.bias.value.data()[oc];
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias;
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = (y * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (x * sw + kx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += self.weight.value.at4((oc, ic, ky, kx), wdims)
                                        * input.at4((b, ic, iy as usize, ix as usize), dims);
                                }
                            }
                        }
                        *out.at4_mut((b, oc, y, x), odims) = acc;
                    }
                }
            }
        }
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::Domain("conv backward before forward".into()))?;
        let dims = input.dims4()?;
        let (n, c, h, w) = dims;
        let gdims = grad_out.dims4()?;
        let (_, _, oh, ow) = gdims;
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let wdims = (self.out_channels, self.in_channels, kh, kw);
        let mut grad_in = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for oc in 0..self.out_channels {
                for y in 0..oh {
                    for x in 0..ow {
                        let g = grad_out.at4((b, oc, y, x), gdims);
                        if g == 0.0 {
                            continue;
                        }
                        self.bias.grad.data_mut()[oc] += g;
                        for ic in 0..c {
                            for ky in 0..kh {
                                let iy = (y * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (x * sw + kx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = input.at4((b, ic, iy as usize, ix as usize), dims);
                                    *self.weight.grad.at4_mut((oc, ic, ky, kx), wdims) += g * xi;
                                    *grad_in.at4_mut((b, ic, iy as usize, ix as usize), dims) +=
                                        g * self.weight.value.at4((oc, ic, ky, kx), wdims);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    fn params(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

pub struct AvgPool2d {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    input_shape: Vec<usize>,
}

impl AvgPool2d {
    pub fn new(kernel: (usize, usize), stride: (usize, usize)) -> AvgPool2d {
        AvgPool2d {
            kernel,
            stride,
            input_shape: Vec::new(),
        }
    }
}

impl Layer for AvgPool2d {
    fn forward(&mut self, input: &Tensor, _ctx: &mut Ctx) -> Result<Tensor> {
        let dims = input.dims4()?;
        let (n, c, h, w) = dims;
        let (kh, kw) = self.kernel;
        if kh > h || kw > w {
            return Err(Error::Shape(format!(
                "pool kernel {:?} larger than map {h}x{w}",
                self.kernel
            )));
        }
        let oh = (h - kh) / self.stride.0 + 1;
        let ow = (w - kw) / self.stride.1 + 1;
        let odims = (n, c, oh, ow);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let denom = (kh * kw) as f64;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += input.at4((b, ch, y * self.stride.0 + ky, x * self.stride.1 + kx), dims);
                            }
                        }
                        *out.at4_mut((b, ch, y, x), odims) = acc / denom;
                    }
                }
            }
        }
        self.input_shape = input.shape().to_vec();
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = match self.input_shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::Domain("pool backward before forward".into())),
        };
        let dims = (n, c, h, w);
        let gdims = grad_out.dims4()?;
        let (_, _, oh, ow) = gdims;
        let (kh, kw) = self.kernel;
        let denom = (kh * kw) as f64;
        let mut grad_in = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let g = grad_out.at4((b, ch, y, x), gdims) / denom;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                *grad_in.at4_mut(
                                    (b, ch, y * self.stride.0 + ky, x * self.stride.1 + kx),
                                    dims,
                                ) += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

/// Bin edges used by both adaptive pools (start floor, end ceil).
fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub struct AdaptiveAvgPool2d {
    pub output: (usize, usize),
    input_shape: Vec<usize>,
}

impl AdaptiveAvgPool2d {
    pub fn new(output: (usize, usize)) -> AdaptiveAvgPool2d {
        AdaptiveAvgPool2d {
            output,
            input_shape: Vec::new(),
        }
    }
}

impl Layer for AdaptiveAvgPool2d {
    fn forward(&mut self, input: &Tensor, _ctx: &mut Ctx) -> Result<Tensor> {
        let dims = input.dims4()?;
        let (n, c, h, w) = dims;
        let (oh, ow) = self.output;
        let odims = (n, c, oh, ow);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    let (ys, ye) = adaptive_bin(y, h, oh);
                    for x in 0..ow {
                        let (xs, xe) = adaptive_bin(x, w, ow);
                        let mut acc = 0.0;
                        for iy in ys..ye {
                            for ix in xs..xe {
                                acc += input.at4((b, ch, iy, ix), dims);
                            }
                        }
                        *out.at4_mut((b, ch, y, x), odims) =
                            acc / ((ye - ys) * (xe - xs)) as f64;
                    }
                }
            }
        }
        self.input_shape = input.shape().to_vec();
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = match self.input_shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::Domain("pool backward before forward".into())),
        };
        let dims = (n, c, h, w);
        let gdims = grad_out.dims4()?;
        let (oh, ow) = self.output;
        let mut grad_in = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    let (ys, ye) = adaptive_bin(y, h, oh);
                    for x in 0..ow {
                        let (xs, xe) = adaptive_bin(x, w, ow);
                        let g = grad_out.at4((b, ch, y, x), gdims)
                            / ((ye - ys) * (xe - xs)) as f64;
                        for iy in ys..ye {
                            for ix in xs..xe {
                                *grad_in.at4_mut((b, ch, iy, ix), dims) += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

pub struct AdaptiveMaxPool2d {
    pub output: (usize, usize),
    input_shape: Vec<usize>,
    argmax: Vec<usize>, // flat input index per output cell
}

impl AdaptiveMaxPool2d {
    pub fn new(output: (usize, usize)) -> AdaptiveMaxPool2d {
        AdaptiveMaxPool2d {
            output,
            input_shape: Vec::new(),
            argmax: Vec::new(),
        }
    }
}

impl Layer for AdaptiveMaxPool2d {
    fn forward(&mut self, input: &Tensor, _ctx: &mut Ctx) -> Result<Tensor> {
        let dims = input.dims4()?;
        let (n, c, h, w) = dims;
        let (oh, ow) = self.output;
        let odims = (n, c, oh, ow);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        self.argmax = vec![0; n * c * oh * ow];
        let mut cell = 0usize;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    let (ys, ye) = adaptive_bin(y, h, oh);
                    for x in 0..ow {
                        let (xs, xe) = adaptive_bin(x, w, ow);
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for iy in ys..ye {
                            for ix in xs..xe {
                                let v = input.at4((b, ch, iy, ix), dims);
                                if v > best {
                                    best = v;
                                    best_idx = ((b * c + ch) * h + iy) * w + ix;
                                }
                            }
                        }
                        *out.at4_mut((b, ch, y, x), odims) = best;
                        self.argmax[cell] = best_idx;
                        cell += 1;
                    }
                }
            }
        }
        self.input_shape = input.shape().to_vec();
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        if self.input_shape.is_empty() {
            return Err(Error::Domain("pool backward before forward".into()));
        }
        let mut grad_in = Tensor::zeros(&self.input_shape);
        for (cell, &idx) in self.argmax.iter().enumerate() {
            grad_in.data_mut()[idx] += grad_out.data()[cell];
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

pub struct BatchNorm2d {
    pub features: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<BnCache>,
}

struct BnCache {
    input: Tensor,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    train_mode: bool,
}

impl BatchNorm2d {
    pub fn new(features: usize) -> BatchNorm2d {
        let mut gamma = Param::new(Tensor::zeros(&[features]));
        gamma.value.data_mut().fill(1.0);
        BatchNorm2d {
            features,
            eps: 1e-5,
            momentum: 0.1,
            gamma,
            beta: Param::new(Tensor::zeros(&[features])),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, input: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let dims = input.dims4()?;
        let (n, c, h, w) = dims;
        if c != self.features {
            return Err(Error::Shape(format!(
                "batchnorm expects {} channels, got {c}",
                self.features
            )));
        }
        let m = (n * h * w) as f64;
        let train = ctx.mode == Mode::Train;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            mean[ch] += input.at4((b, ch, y, x), dims);
                        }
                    }
                }
            }
            for v in &mut mean {
                *v /= m;
            }
            for b in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let d = input.at4((b, ch, y, x), dims) - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
            }
            for v in &mut var {
                *v /= m;
            }
            // running stats keep the unbiased variance
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch]
                    + self.momentum * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(&self.running_mean);
            var.copy_from_slice(&self.running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = Tensor::zeros(input.shape());
        for b in 0..n {
            for ch in 0..c {
                let (g, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                for y in 0..h {
                    for x in 0..w {
                        let xhat = (input.at4((b, ch, y, x), dims) - mean[ch]) * inv_std[ch];
                        *out.at4_mut((b, ch, y, x), dims) = g * xhat + bt;
                    }
                }
            }
        }
        self.cache = Some(BnCache {
            input: input.clone(),
            mean,
            inv_std,
            train_mode: train,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Domain("batchnorm backward before forward".into()))?;
        let dims = cache.input.dims4()?;
        let (n, c, h, w) = dims;
        let m = (n * h * w) as f64;
        let mut grad_in = Tensor::zeros(cache.input.shape());

        for ch in 0..c {
            let mean = cache.mean[ch];
            let inv_std = cache.inv_std[ch];
            let gamma = self.gamma.value.data()[ch];
            let mut sum_g = 0.0;
            let mut sum_g_xhat = 0.0;
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let g = grad_out.at4((b, ch, y, x), dims);
                        let xhat = (cache.input.at4((b, ch, y, x), dims) - mean) * inv_std;
                        sum_g += g;
                        sum_g_xhat += g * xhat;
                    }
                }
            }
            self.beta.grad.data_mut()[ch] += sum_g;
            self.gamma.grad.data_mut()[ch] += sum_g_xhat;
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let g = grad_out.at4((b, ch, y, x), dims);
                        let xhat = (cache.input.at4((b, ch, y, x), dims) - mean) * inv_std;
                        let d = if cache.train_mode {
                            gamma * inv_std * (g - sum_g / m - xhat * sum_g_xhat / m)
                        } else {
                            gamma * inv_std * g
                        };
                        *grad_in.at4_mut((b, ch, y, x), dims) = d;
                    }
                }
            }
        }
        Ok(grad_in)
    }

    fn params(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }

    fn buffers(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

// ---------------------------------------------------------------------------
// Activations and regularization
// ---------------------------------------------------------------------------

pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Relu {
        Relu { mask: Vec::new() }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Relu::new()
    }
}

impl Layer for Relu {
    fn forward(&mut self, input: &Tensor, _ctx: &mut Ctx) -> Result<Tensor> {
        self.mask = input.data().iter().map(|&v| v > 0.0).collect();
        let mut out = input.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut grad_in = grad_out.clone();
        for (g, &keep) in grad_in.data_mut().iter_mut().zip(&self.mask) {
            if !keep {
                *g = 0.0;
            }
        }
        Ok(grad_in)
    }
}

pub struct Dropout {
    pub p: f64,
    mask: Vec<f64>,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Dropout> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout p must be in [0,1), got {p}")));
        }
        Ok(Dropout { p, mask: Vec::new() })
    }
}

impl Layer for Dropout {
    fn forward(&mut self, input: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        if ctx.mode == Mode::Eval || self.p == 0.0 {
            self.mask = vec![1.0; input.numel()];
            return Ok(input.clone());
        }
        let keep = 1.0 - self.p;
        self.mask = (0..input.numel())
            .map(|_| {
                if ctx.rng.random_range(0.0..1.0) < self.p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let mut out = input.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&self.mask) {
            *v *= m;
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut grad_in = grad_out.clone();
        for (g, &m) in grad_in.data_mut().iter_mut().zip(&self.mask) {
            *g *= m;
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// Linear and softmax
// ---------------------------------------------------------------------------

pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param, // (out, in)
    pub bias: Param,   // (out)
    cached_input: Option<Tensor>, // flattened (N, in)
    input_shape: Vec<usize>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Linear {
        Linear {
            in_features,
            out_features,
            weight: Param::new(Tensor::zeros(&[out_features, in_features])),
            bias: Param::new(Tensor::zeros(&[out_features])),
            cached_input: None,
            input_shape: Vec::new(),
        }
    }
}

impl Layer for Linear {
    fn forward(&mut self, input: &Tensor, _ctx: &mut Ctx) -> Result<Tensor> {
        let (n, f) = input.dims2_flat()?;
        if f != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects {} features, got {f}",
                self.in_features
            )));
        }
        self.input_shape = input.shape().to_vec();
        let flat = input.clone().reshape(&[n, f])?;
        let mut out = Tensor::zeros(&[n, self.out_features]);
        let wd = self.weight.value.data();
        for b in 0..n {
            for o in 0..self.out_features {
                let mut acc = self.bias.value.data()[o];
                let row = &wd[o * f..(o + 1) * f];
                let xin = &flat.data()[b * f..(b + 1) * f];
                for (wv, xv) in row.iter().zip(xin) {
                    acc += wv * xv;
                }
                out.data_mut()[b * self.out_features + o] = acc;
            }
        }
        self.cached_input = Some(flat);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::Domain("linear backward before forward".into()))?;
        let (n, f) = input.dims2_flat()?;
        let o = self.out_features;
        let mut grad_in = Tensor::zeros(&[n, f]);
        for b in 0..n {
            for j in 0..o {
                let g = grad_out.data()[b * o + j];
                if g == 0.0 {
                    continue;
                }
                self.bias.grad.data_mut()[j] += g;
                for i in 0..f {
                    self.weight.grad.data_mut()[j * f + i] += g * input.data()[b * f + i];
                    grad_in.data_mut()[b * f + i] += g * self.weight.value.data()[j * f + i];
                }
            }
        }
        grad_in.reshape(&self.input_shape)
    }

    fn params(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

pub struct Softmax {
    cached_output: Option<Tensor>,
}

impl Softmax {
    pub fn new() -> Softmax {
        Softmax { cached_output: None }
    }
}

impl Default for Softmax {
    fn default() -> Self {
        Softmax::new()
    }
}

impl Layer for Softmax {
    fn forward(&mut self, input: &Tensor, _ctx: &mut Ctx) -> Result<Tensor> {
        let (n, k) = input.dims2_flat()?;
        let mut out = input.clone().reshape(&[n, k])?;
        for b in 0..n {
            let row = &mut out.data_mut()[b * k..(b + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.cached_output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let p = self
            .cached_output
            .as_ref()
            .ok_or_else(|| Error::Domain("softmax backward before forward".into()))?;
        let (n, k) = p.dims2_flat()?;
        let mut grad_in = Tensor::zeros(&[n, k]);
        for b in 0..n {
            let prow = &p.data()[b * k..(b + 1) * k];
            let grow = &grad_out.data()[b * k..(b + 1) * k];
            let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
            for i in 0..k {
                grad_in.data_mut()[b * k + i] = prow[i] * (grow[i] - dot);
            }
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

pub struct Residual {
    pub body: Vec<Box<dyn Layer>>,
    /// Skip-path layers; empty means an identity skip.
    pub projection: Vec<Box<dyn Layer>>,
}

impl Residual {
    pub fn new(body: Vec<Box<dyn Layer>>, projection: Vec<Box<dyn Layer>>) -> Residual {
        Residual { body, projection }
    }
}

impl Layer for Residual {
    fn forward(&mut self, input: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let mut main = input.clone();
        for layer in &mut self.body {
            main = layer.forward(&main, ctx)?;
        }
        let mut skip = input.clone();
        for layer in &mut self.projection {
            skip = layer.forward(&skip, ctx)?;
        }
        if main.shape() != skip.shape() {
            return Err(Error::Shape(format!(
                "residual add: body {:?} vs skip {:?}",
                main.shape(),
                skip.shape()
            )));
        }
        for (m, s) in main.data_mut().iter_mut().zip(skip.data()) {
            *m += s;
        }
        Ok(main)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut main = grad_out.clone();
        for layer in self.body.iter_mut().rev() {
            main = layer.backward(&main)?;
        }
        let mut skip = grad_out.clone();
        for layer in self.projection.iter_mut().rev() {
            skip = layer.backward(&skip)?;
        }
        if main.shape() != skip.shape() {
            return Err(Error::Shape("residual backward shape mismatch".into()));
        }
        for (m, s) in main.data_mut().iter_mut().zip(skip.data()) {
            *m += s;
        }
        Ok(main)
    }

    fn params(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, layer) in self.body.iter_mut().enumerate() {
            for (name, p) in layer.params() {
                out.push((format!("body.{i}.{name}"), p));
            }
        }
        for (i, layer) in self.projection.iter_mut().enumerate() {
            for (name, p) in layer.params() {
                out.push((format!("proj.{i}.{name}"), p));
            }
        }
        out
    }

    fn buffers(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.body.iter_mut().enumerate() {
            for (name, b) in layer.buffers() {
                out.push((format!("body.{i}.{name}"), b));
            }
        }
        for (i, layer) in self.projection.iter_mut().enumerate() {
            for (name, b) in layer.buffers() {
                out.push((format!("proj.{i}.{name}"), b));
            }
        }
        out
    }

    fn as_residual_mut(&mut self) -> Option<&mut Residual> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn ctx_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_output_shape_formula() {
        let conv = Conv2d::new(1, 128, (7, 7), (1, 1), (0, 0));
        assert_eq!(conv.output_hw(300, 300).unwrap(), (294, 294));
        let strided = Conv2d::new(1, 8, (3, 3), (2, 2), (1, 1));
        assert_eq!(strided.output_hw(16, 16).unwrap(), (8, 8));
    }

    #[test]
    fn conv_identity_kernel_copies_channels() {
        let mut conv = Conv2d::new(2, 2, (1, 1), (1, 1), (0, 0));
        // weight[oc][ic] = 1 when oc == ic
        let wdims = (2, 2, 1, 1);
        *conv.weight.value.at4_mut((0, 0, 0, 0), wdims) = 1.0;
        *conv.weight.value.at4_mut((1, 1, 0, 0), wdims) = 1.0;
        let x = random_tensor(&[1, 2, 4, 4], 3);
        let mut rng = ctx_rng();
        let y = conv
            .forward(&x, &mut Ctx { mode: Mode::Eval, rng: &mut rng })
            .unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_brute_force_on_random_inputs() {
        // independent oracle: pad into an explicit array, then the plain
        // quadruple loop
        let mut conv = Conv2d::new(1, 2, (3, 3), (1, 1), (0, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in conv.weight.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in conv.bias.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = random_tensor(&[1, 1, 5, 5], 5);
        let mut crng = ctx_rng();
        let y = conv
            .forward(&x, &mut Ctx { mode: Mode::Eval, rng: &mut crng })
            .unwrap();
        let dims = (1usize, 1usize, 5usize, 5usize);
        let wdims = (2, 1, 3, 3);
        for oc in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut expect = conv.bias.value.data()[oc];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            expect += conv.weight.value.at4((oc, 0, ky, kx), wdims)
                                * x.at4((0, 0, oy + ky, ox + kx), dims);
                        }
                    }
                    let got = y.at4((0, oc, oy, ox), (1, 2, 3, 3));
                    assert!((got - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn avg_pool_window_mean() {
        let mut pool = AvgPool2d::new((2, 2), (2, 2));
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = ctx_rng();
        let y = pool
            .forward(&x, &mut Ctx { mode: Mode::Eval, rng: &mut rng })
            .unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn pools_match_brute_force_windows() {
        let mut pool = AvgPool2d::new((3, 2), (2, 3));
        let x = random_tensor(&[2, 3, 9, 8], 6);
        let mut rng = ctx_rng();
        let y = pool
            .forward(&x, &mut Ctx { mode: Mode::Eval, rng: &mut rng })
            .unwrap();
        let dims = x.dims4().unwrap();
        let (oh, ow) = (4, 3); // (9-3)/2+1, (8-2)/3+1
        assert_eq!(y.shape(), &[2, 3, oh, ow]);
        for b in 0..2 {
            for c in 0..3 {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..2 {
                                acc += x.at4((b, c, yy * 2 + ky, xx * 3 + kx), dims);
                            }
                        }
                        let got = y.at4((b, c, yy, xx), (2, 3, oh, ow));
                        assert!((got - acc / 6.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn adaptive_max_to_one_is_global_max() {
        let mut pool = AdaptiveMaxPool2d::new((1, 1));
        let x = random_tensor(&[1, 2, 7, 5], 7);
        let mut rng = ctx_rng();
        let y = pool
            .forward(&x, &mut Ctx { mode: Mode::Eval, rng: &mut rng })
            .unwrap();
        for c in 0..2 {
            let expect = x.data()[c * 35..(c + 1) * 35]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(y.data()[c], expect);
        }
    }

    #[test]
    fn pool_kernel_too_large_is_shape_error() {
        let mut pool = AvgPool2d::new((5, 5), (1, 1));
        let x = random_tensor(&[1, 1, 4, 4], 8);
        let mut rng = ctx_rng();
        assert!(matches!(
            pool.forward(&x, &mut Ctx { mode: Mode::Eval, rng: &mut rng }),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut bn = BatchNorm2d::new(2);
        let x = random_tensor(&[4, 2, 3, 3], 9);
        let mut rng = ctx_rng();
        let y = bn
            .forward(&x, &mut Ctx { mode: Mode::Train, rng: &mut rng })
            .unwrap();
        let dims = (4, 2, 3, 3);
        for c in 0..2 {
            let mut mean = 0.0;
            let mut var = 0.0;
            let m = 4.0 * 9.0;
            for b in 0..4 {
                for yy in 0..3 {
                    for xx in 0..3 {
                        mean += y.at4((b, c, yy, xx), dims);
                    }
                }
            }
            mean /= m;
            for b in 0..4 {
                for yy in 0..3 {
                    for xx in 0..3 {
                        let d = y.at4((b, c, yy, xx), dims) - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_affine_applies_after_normalization() {
        let mut bn = BatchNorm2d::new(1);
        bn.gamma.value.data_mut()[0] = 2.0;
        bn.beta.value.data_mut()[0] = 3.0;
        let x = random_tensor(&[8, 1, 2, 2], 10);
        let mut rng = ctx_rng();
        let y = bn
            .forward(&x, &mut Ctx { mode: Mode::Train, rng: &mut rng })
            .unwrap();
        let m = y.numel() as f64;
        let mean = y.data().iter().sum::<f64>() / m;
        assert!((mean - 3.0).abs() < 1e-6);
        let var = y.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
        assert!((var.sqrt() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean[0] = 0.25;
        bn.running_var[0] = 4.0;
        bn.gamma.value.data_mut()[0] = 1.5;
        bn.beta.value.data_mut()[0] = -0.5;
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.25, -0.75]).unwrap();
        let mut rng = ctx_rng();
        let y = bn
            .forward(&x, &mut Ctx { mode: Mode::Eval, rng: &mut rng })
            .unwrap();
        for (i, &xv) in [1.25, -0.75].iter().enumerate() {
            let expect = (xv - 0.25) / (4.0_f64 + 1e-5).sqrt() * 1.5 - 0.5;
            assert!((y.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut drop = Dropout::new(0.5).unwrap();
        let x = Tensor::from_vec(&[1, 100], vec![1.0; 100]).unwrap();
        let mut rng = ctx_rng();
        let eval = drop
            .forward(&x, &mut Ctx { mode: Mode::Eval, rng: &mut rng })
            .unwrap();
        assert_eq!(eval.data(), x.data());
        let train = drop
            .forward(&x, &mut Ctx { mode: Mode::Train, rng: &mut rng })
            .unwrap();
        for &v in train.data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn residual_identity_skip_adds_input() {
        let mut res = Residual::new(vec![Box::new(Relu::new())], vec![]);
        let x = Tensor::from_vec(&[1, 1, 1, 4], vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        let mut rng = ctx_rng();
        let y = res
            .forward(&x, &mut Ctx { mode: Mode::Eval, rng: &mut rng })
            .unwrap();
        assert_eq!(y.data(), &[-1.0, 4.0, -3.0, 8.0]);
    }
}
