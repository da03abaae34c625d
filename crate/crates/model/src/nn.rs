//! Layer primitives built from plain tensor ops so every path has a
//! backward pass in any float dtype.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{ModelError, Result};
use crate::params::{ParamStore, INIT_STD};

pub const NORM_EPS: f64 = 1e-6;

/// Affine map over the last dimension.
#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = ps.trunc_normal(&format!("{name}.weight"), &[out_dim, in_dim], INIT_STD)?;
        let bias = Some(ps.zeros(&format!("{name}.bias"), &[out_dim])?);
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| ModelError::Shape("linear on a scalar".into()))?;
        let out_dim = self.weight.dim(0)?;
        let y = x.reshape(((), in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = out_dim;
        Ok(y.reshape(out)?)
    }
}

/// Normalization over the last dimension.
#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.ones(&format!("{name}.weight"), &[dim])?,
            beta: ps.zeros(&format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Normalization over the channel axis of a `(B, C, H, W)` map.
#[derive(Clone)]
pub struct ChannelNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl ChannelNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.ones(&format!("{name}.weight"), &[1, channels, 1, 1])?,
            beta: ps.zeros(&format!("{name}.bias"), &[1, channels, 1, 1])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let y = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Dense 2-D convolution lowered to a single matrix product over gathered taps.
#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-normal weights over the fan-in, zero bias.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let std = (2.0 / (kernel * kernel * in_ch) as f64).sqrt();
        Self::with_std(ps, name, in_ch, out_ch, kernel, stride, padding, std)
    }

    /// Truncated-normal weights with the given deviation, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(ModelError::Config(format!("{name}: kernel and stride must be positive")));
        }
        let weight = ps.trunc_normal(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], std)?;
        let bias = Some(ps.zeros(&format!("{name}.bias"), &[out_ch])?);
        Ok(Self { weight, bias, kernel, stride, padding })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let kernel = weight.dim(3)?;
        Ok(Self { weight, bias, kernel, stride, padding })
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (out_ch, in_ch, k, _) = self.weight.dims4()?;
        if c != in_ch {
            return Err(ModelError::Shape(format!("conv expects {in_ch} channels, got {c}")));
        }
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return Err(ModelError::Shape(format!("conv input {h}x{w} smaller than kernel {k}")));
        }
        let (s, p) = (self.stride, self.padding);
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let cols = if k == 1 && s == 1 && p == 0 {
            x.reshape((b, c, h * w))?
        } else {
            // pad far enough that every tap can take an s*ho window
            let extra_h = (k - 1 + s * ho).saturating_sub(h + 2 * p);
            let extra_w = (k - 1 + s * wo).saturating_sub(w + 2 * p);
            let xp = x.pad_with_zeros(2, p, p + extra_h)?.pad_with_zeros(3, p, p + extra_w)?;
            let mut taps = Vec::with_capacity(k * k);
            for ky in 0..k {
                for kx in 0..k {
                    let t = xp.narrow(2, ky, s * ho)?.narrow(3, kx, s * wo)?;
                    let t = if s > 1 {
                        t.reshape((b, c, ho, s, wo, s))?.narrow(3, 0, 1)?.narrow(5, 0, 1)?
                    } else {
                        t
                    };
                    taps.push(t.reshape((b, c, ho * wo))?);
                }
            }
            Tensor::cat(&taps, 1)?
        };
        // (out, in, k, k) -> (out, k*k*in) to match tap-major columns
        let wmat = self
            .weight
            .reshape((out_ch, in_ch, k * k))?
            .transpose(1, 2)?
            .reshape((out_ch, k * k * in_ch))?;
        let y = wmat.broadcast_matmul(&cols)?;
        let y = match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, out_ch, 1))?)?,
            None => y,
        };
        Ok(y.reshape((b, out_ch, ho, wo))?)
    }
}

/// Per-channel 3x3 convolution, stride 1, zero padding 1.
#[derive(Clone)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let weight = ps.trunc_normal(&format!("{name}.weight"), &[channels, 1, 3, 3], (2.0f64 / 9.0).sqrt())?;
        let bias = ps.zeros(&format!("{name}.bias"), &[channels])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let taps = self.weight.reshape((c, 9))?;
        let mut acc = self.bias.reshape((1, c, 1, 1))?.broadcast_as(x.shape())?.contiguous()?;
        for ky in 0..3 {
            for kx in 0..3 {
                let wt = taps.narrow(1, ky * 3 + kx, 1)?.reshape((1, c, 1, 1))?;
                acc = (acc + xp.narrow(2, ky, h)?.narrow(3, kx, w)?.broadcast_mul(&wt)?)?;
            }
        }
        Ok(acc)
    }
}

/// Row-stochastic `(n_out, n_in)` bilinear interpolation matrix with
/// half-pixel centers; edge samples are clamped.
pub fn bilinear_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[i * n_in + i0] += 1.0 - frac;
        m[i * n_in + i1] += frac;
    }
    m
}

fn matrix(n_in: usize, n_out: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_matrix(n_in, n_out), (n_out, n_in), device)?.to_dtype(dtype)?)
}

/// Separable bilinear resize of a `(B, C, H, W)` map.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ah = matrix(h, out_h, x.dtype(), x.device())?;
    let aw = matrix(w, out_w, x.dtype(), x.device())?;
    Ok(ah.broadcast_matmul(x)?.broadcast_matmul(&aw.t()?)?)
}

/// Mean over non-overlapping `factor x factor` windows.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(ModelError::Shape(format!("cannot pool {h}x{w} by {factor}")));
    }
    Ok(x.reshape((b, c, h / factor, factor, w / factor, factor))?.mean(5)?.mean(3)?)
}

/// Softmax with a detached max shift.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// `(B, C, H, W)` to `(B, H*W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H*W, C)` to `(B, C, H, W)`.
pub fn to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(ModelError::Shape(format!("sequence of {n} tokens does not tile a {h}x{w} grid")));
    }
    Ok(x.transpose(1, 2)?.reshape((b, c, h, w))?)
}
