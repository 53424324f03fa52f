//! Layer forward/backward kernels.
//!
//! The centerpiece is [`NormScale`]: per-pixel L2 normalization of the
//! channel vector followed by a learned per-channel scale. Its backward
//! pass applies the Jacobian (I/r - x x^T / r^3) to the upstream gradient
//! at every pixel and reduces the scale gradient over batch and space.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

pub const NORM_EPS: f32 = 1e-12;

/// A learnable tensor paired with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub data: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(data: Tensor) -> Param {
        let grad = Tensor::zeros(data.shape());
        Param { data, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Per-pixel L2 normalization with per-channel learned scale gamma.
#[derive(Clone, Debug)]
pub struct NormScale {
    pub gamma: Param,
    eps: f32,
    cache: Option<(Tensor, Tensor)>, // (norm (n,1,h,w), xhat (n,c,h,w))
}

impl NormScale {
    /// gamma starts at 10 for every channel; unit-norm features train poorly.
    pub fn new(channels: usize) -> NormScale {
        let shape = Shape::new(1, channels, 1, 1).unwrap();
        NormScale {
            gamma: Param::new(Tensor::new_filled(shape, 10.0)),
            eps: NORM_EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.data.shape().c
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.c != self.channels() {
            return Err(Error::Shape(format!(
                "norm-scale expects {} channels, got {}",
                self.channels(),
                s.c
            )));
        }
        let norm = x.l2_norm_over_channels(self.eps);
        let mut xhat = Tensor::zeros(s);
        let mut y = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let g = self.gamma.data.get(0, c, 0, 0);
                for yy in 0..s.h {
                    for xx in 0..s.w {
                        let r = norm.get(n, 0, yy, xx);
                        let xh = x.get(n, c, yy, xx) / r;
                        xhat.set(n, c, yy, xx, xh);
                        y.set(n, c, yy, xx, g * xh);
                    }
                }
            }
        }
        self.cache = Some((norm, xhat));
        Ok(y)
    }

    /// Returns d_input; gamma gradient accumulates into `self.gamma.grad`.
    pub fn backward(&mut self, d_y: &Tensor) -> Result<Tensor> {
        let (norm, xhat) = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("norm-scale backward without forward".into()))?;
        let s = xhat.shape();
        if d_y.shape() != s {
            return Err(Error::Shape(format!(
                "norm-scale backward shape mismatch: {:?} vs {:?}",
                d_y.shape(),
                s
            )));
        }
        let mut d_x = Tensor::zeros(s);
        for n in 0..s.n {
            for yy in 0..s.h {
                for xx in 0..s.w {
                    let r = norm.get(n, 0, yy, xx) as f64;
                    // dot(xhat, d_xhat) == dot(x, d_xhat)/r
                    let mut dot = 0.0f64;
                    for c in 0..s.c {
                        let d_xh =
                            d_y.get(n, c, yy, xx) as f64 * self.gamma.data.get(0, c, 0, 0) as f64;
                        dot += xhat.get(n, c, yy, xx) as f64 * d_xh;
                    }
                    for c in 0..s.c {
                        let d_xh =
                            d_y.get(n, c, yy, xx) as f64 * self.gamma.data.get(0, c, 0, 0) as f64;
                        let xh = xhat.get(n, c, yy, xx) as f64;
                        d_x.set(n, c, yy, xx, ((d_xh - xh * dot) / r) as f32);
                    }
                }
            }
        }
        // d_gamma_c = sum over batch and space of d_y * xhat
        for c in 0..s.c {
            let mut acc = 0.0f64;
            for n in 0..s.n {
                for yy in 0..s.h {
                    for xx in 0..s.w {
                        acc += d_y.get(n, c, yy, xx) as f64 * xhat.get(n, c, yy, xx) as f64;
                    }
                }
            }
            let g = self.gamma.grad.get(0, c, 0, 0);
            self.gamma.grad.set(0, c, 0, 0, g + acc as f32);
        }
        Ok(d_x)
    }
}

/// 2-D cross-correlation with bias (no kernel flip).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param, // (c_out, c_in, k, k)
    pub bias: Param,   // (1, c_out, 1, 1)
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Conv2d> {
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        let ws = weight.shape();
        if bias.shape().c != ws.n || bias.shape().len() != ws.n {
            return Err(Error::Shape("bias must have one entry per output channel".into()));
        }
        Ok(Conv2d {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            pad,
            cache: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.data.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.data.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.data.shape().h
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let k = self.kernel();
        let padded = input + 2 * self.pad;
        if padded < k {
            return Err(Error::Shape(format!(
                "kernel {k} larger than padded input {padded}"
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }

    /// Forward without caching, for read-only probing.
    pub fn forward_pure(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                s.c
            )));
        }
        let oh = self.output_extent(s.h)?;
        let ow = self.output_extent(s.w)?;
        let co = self.out_channels();
        let k = self.kernel();
        let out_shape = Shape::new(s.n, co, oh, ow)?;
        let mut out = Tensor::zeros(out_shape);

        for n in 0..s.n {
            for c_out in 0..co {
                let b = self.bias.data.data()[c_out];
                let obase = out_shape.index(n, c_out, 0, 0);
                out.data_mut()[obase..obase + oh * ow]
                    .iter_mut()
                    .for_each(|v| *v = b);
                for c_in in 0..s.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = self.weight.data.get(c_out, c_in, ky, kx);
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_lo, ox_hi) = valid_range(kx, self.pad, self.stride, s.w, ow);
                            for oy in 0..oh {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= s.h as isize {
                                    continue;
                                }
                                let in_base = s.index(n, c_in, iy as usize, 0);
                                let out_base = out_shape.index(n, c_out, oy, 0);
                                if self.stride == 1 {
                                    // ox_lo guarantees ox_lo + kx - pad >= 0
                                    let start = (in_base + ox_lo + kx) - self.pad;
                                    let in_row = &x.data()[start..start + (ox_hi - ox_lo)];
                                    let out_row =
                                        &mut out.data_mut()[out_base + ox_lo..out_base + ox_hi];
                                    for (o, &i) in out_row.iter_mut().zip(in_row) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * self.stride + kx - self.pad;
                                        out.data_mut()[out_base + ox] +=
                                            wv * x.data()[in_base + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_pure(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, d_y: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("conv backward without forward".into()))?;
        let s = x.shape();
        let k = self.kernel();
        let co = self.out_channels();
        let oh = self.output_extent(s.h)?;
        let ow = self.output_extent(s.w)?;
        let dys = d_y.shape();
        if dys.n != s.n || dys.c != co || dys.h != oh || dys.w != ow {
            return Err(Error::Shape(format!(
                "conv backward shape mismatch: got {:?}",
                dys
            )));
        }
        let mut d_x = Tensor::zeros(s);

        for n in 0..s.n {
            for c_out in 0..co {
                let dbase = dys.index(n, c_out, 0, 0);
                let dplane = &d_y.data()[dbase..dbase + oh * ow];
                // bias gradient
                let bsum: f64 = dplane.iter().map(|&v| v as f64).sum();
                let bg = self.bias.grad.data()[c_out];
                self.bias.grad.data_mut()[c_out] = bg + bsum as f32;

                for c_in in 0..s.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = self.weight.data.get(c_out, c_in, ky, kx);
                            let (ox_lo, ox_hi) = valid_range(kx, self.pad, self.stride, s.w, ow);
                            let mut dw_acc = 0.0f64;
                            for oy in 0..oh {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= s.h as isize {
                                    continue;
                                }
                                let in_base = s.index(n, c_in, iy as usize, 0);
                                let out_base = oy * ow;
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * self.stride + kx - self.pad;
                                    let dyv = dplane[out_base + ox];
                                    dw_acc += dyv as f64 * x.data()[in_base + ix] as f64;
                                    d_x.data_mut()[in_base + ix] += wv * dyv;
                                }
                            }
                            let wg = self.weight.grad.get(c_out, c_in, ky, kx);
                            self.weight.grad.set(c_out, c_in, ky, kx, wg + dw_acc as f32);
                        }
                    }
                }
            }
        }
        Ok(d_x)
    }
}

/// Valid output-x range so that ix = ox*stride + kx - pad stays inside [0, in_w).
#[inline]
fn valid_range(kx: usize, pad: usize, stride: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let lo = if pad > kx {
        (pad - kx + stride - 1) / stride
    } else {
        0
    };
    let hi = if in_w + pad > kx {
        ((in_w + pad - kx - 1) / stride + 1).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Rectifier; gradient is 0 at x <= 0.
#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Relu {
        Relu { cache: None }
    }

    pub fn forward_pure(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward_pure(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, d_y: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Contract("relu backward without forward".into()))?;
        if x.shape() != d_y.shape() {
            return Err(Error::Shape("relu backward shape mismatch".into()));
        }
        let mut d_x = d_y.clone();
        for (d, &xv) in d_x.data_mut().iter_mut().zip(x.data()) {
            if xv <= 0.0 {
                *d = 0.0;
            }
        }
        Ok(d_x)
    }
}

/// Global average pool then unpool-by-replication back to the input extent.
pub fn global_context_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    x.reduce_spatial_mean().broadcast_spatial(s.h, s.w).unwrap()
}

/// Backward of [`global_context_forward`]: every input position receives the
/// spatial mean of the upstream gradient.
pub fn global_context_backward(d_y: &Tensor) -> Tensor {
    let s = d_y.shape();
    d_y.reduce_spatial_mean()
        .broadcast_spatial(s.h, s.w)
        .unwrap()
}

/// Summed softmax cross-entropy over non-ignored pixels.
///
/// When `normalize` is set (the default everywhere in this crate) the loss
/// and gradient are divided by the count of scored pixels, so learning rates
/// transfer across image sizes.
pub fn softmax_xent_per_pixel(
    logits: &Tensor,
    labels: &LabelMap,
    ignore_label: u8,
    normalize: bool,
) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if labels.n != s.n || labels.h != s.h || labels.w != s.w {
        return Err(Error::Shape(format!(
            "labels ({},{},{}) do not match logits {:?}",
            labels.n, labels.h, labels.w, s
        )));
    }
    let classes = s.c;
    let mut loss = 0.0f64;
    let mut d = Tensor::zeros(s);
    let mut scored: usize = 0;
    let mut probs = vec![0.0f64; classes];

    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let label = labels.get(n, y, x);
                if label == ignore_label {
                    continue;
                }
                if label as usize >= classes {
                    return Err(Error::Data(format!(
                        "label {label} out of range for {classes} classes"
                    )));
                }
                scored += 1;
                let mut maxv = f64::NEG_INFINITY;
                for c in 0..classes {
                    maxv = maxv.max(logits.get(n, c, y, x) as f64);
                }
                let mut z = 0.0f64;
                for c in 0..classes {
                    let e = ((logits.get(n, c, y, x) as f64) - maxv).exp();
                    probs[c] = e;
                    z += e;
                }
                loss += z.ln() + maxv - logits.get(n, label as usize, y, x) as f64;
                for c in 0..classes {
                    let p = probs[c] / z;
                    let target = if c == label as usize { 1.0 } else { 0.0 };
                    d.set(n, c, y, x, (p - target) as f32);
                }
            }
        }
    }

    if normalize && scored > 0 {
        let inv = 1.0 / scored as f64;
        loss *= inv;
        d.scale(inv as f32);
    }
    Ok((loss, d))
}
