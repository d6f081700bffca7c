//! Basic differentiable layers over candle tensors.

use candle_core::{Tensor, Var, D};

use super::params::{ParamKind, ParamStore};
use super::stats::{conv2d_stats, linear_stats, record_macs};
use crate::error::{MmflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn pointwise() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: true,
        }
    }

    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            dilation: 1,
            bias: true,
        }
    }

    pub fn dilated(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            bias: true,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: ConvSpec,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let weight = ps.kaiming(&format!("{name}.weight"), (cout, cin, k, k), cin * k * k)?;
        let bias = if spec.bias {
            Some(ps.constant(&format!("{name}.bias"), cout, 0.0, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            spec,
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.spec;
        let y = x.conv2d(self.weight.as_tensor(), s.padding, s.stride, s.dilation, 1)?;
        let (b, _, h, w) = y.dims4()?;
        record_macs(
            b as u64 * conv2d_stats(self.in_channels, self.out_channels, s.kernel, 1, false, h, w).macs,
        );
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.as_tensor().reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Per-channel 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    pub weight: Var,
    channels: usize,
}

impl DepthwiseConv3x3 {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let weight = ps.kaiming(&format!("{name}.weight"), (channels, 1, 3, 3), 9)?;
        Ok(Self { weight, channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(MmflError::Shape(format!(
                "depthwise conv expects {} channels, got {c}",
                self.channels
            )));
        }
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let wt = self.weight.as_tensor();
        let mut acc: Option<Tensor> = None;
        for i in 0..3 {
            for j in 0..3 {
                let tap = wt.narrow(2, i, 1)?.narrow(3, j, 1)?.reshape((1, c, 1, 1))?;
                let term = padded.narrow(2, i, h)?.narrow(3, j, w)?.broadcast_mul(&tap)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        record_macs((b * c * h * w * 9) as u64);
        Ok(acc.expect("nine taps"))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fin: usize, fout: usize, bias: bool) -> Result<Self> {
        let weight = ps.kaiming(&format!("{name}.weight"), (fout, fin), fin)?;
        Self::with_weight(ps, name, weight, fin, fout, bias)
    }

    /// Linear layer with `N(0, std^2)` weights.
    pub fn with_std(ps: &mut ParamStore, name: &str, fin: usize, fout: usize, std: f64, bias: bool) -> Result<Self> {
        let weight = ps.normal(&format!("{name}.weight"), (fout, fin), std, ParamKind::Weight)?;
        Self::with_weight(ps, name, weight, fin, fout, bias)
    }

    fn with_weight(ps: &mut ParamStore, name: &str, weight: Var, fin: usize, fout: usize, bias: bool) -> Result<Self> {
        let bias = if bias {
            Some(ps.constant(&format!("{name}.bias"), fout, 0.0, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features: fin,
            out_features: fout,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, fin) = x.dims2()?;
        if fin != self.in_features {
            return Err(MmflError::Shape(format!(
                "linear layer expects {} features, got {fin}",
                self.in_features
            )));
        }
        record_macs(b as u64 * linear_stats(self.in_features, self.out_features, false).macs);
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(bias.as_tensor())?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over `(B, C)` or `(B, C, H, W)` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.weight"), channels, 1.0, ParamKind::Norm)?,
            beta: ps.constant(&format!("{name}.bias"), channels, 0.0, ParamKind::Norm)?,
            running_mean: ps.constant(&format!("{name}.running_mean"), channels, 0.0, ParamKind::Buffer)?,
            running_var: ps.constant(&format!("{name}.running_var"), channels, 1.0, ParamKind::Buffer)?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shape: Vec<usize> = match x.rank() {
            2 => vec![1, self.channels],
            4 => vec![1, self.channels, 1, 1],
            r => return Err(MmflError::Shape(format!("batch norm on rank-{r} input"))),
        };
        if x.dim(1)? != self.channels {
            return Err(MmflError::Shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels,
                x.dim(1)?
            )));
        }
        let reduce: Vec<usize> = if x.rank() == 2 { vec![0] } else { vec![0, 2, 3] };
        let (mean, var) = if train {
            let mean = x.mean_keepdim(reduce.as_slice())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(reduce.as_slice())?;
            let n = x.elem_count() / self.channels;
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            self.running_mean.set(&rm)?;
            if n > 1 {
                let unbiased = (var.detach().flatten_all()? * (n as f64 / (n as f64 - 1.0)))?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_var.set(&rv)?;
            }
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape.as_slice())?,
                self.running_var.as_tensor().reshape(shape.as_slice())?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape(shape.as_slice())?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape.as_slice())?)?)
    }
}

/// Affine instance normalization over the spatial axes of `(B, C, H, W)` inputs.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Var,
    pub beta: Var,
    channels: usize,
    eps: f64,
}

impl InstanceNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.weight"), channels, 1.0, ParamKind::Norm)?,
            beta: ps.constant(&format!("{name}.bias"), channels, 0.0, ParamKind::Norm)?,
            channels,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim((2, 3))?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((2, 3))?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let shape = (1, self.channels, 1, 1);
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.weight"), features, 1.0, ParamKind::Norm)?,
            beta: ps.constant(&format!("{name}.bias"), features, 0.0, ParamKind::Norm)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Normalization used inside convolutional blocks.
#[derive(Debug, Clone)]
pub enum Norm2d {
    Batch(BatchNorm),
    /// Instance normalization on the first `split` channels, batch normalization on the rest.
    InstanceBatch {
        split: usize,
        instance: InstanceNorm,
        batch: BatchNorm,
    },
}

impl Norm2d {
    pub fn batch(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Norm2d::Batch(BatchNorm::new(ps, name, channels)?))
    }

    pub fn instance_batch(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let split = channels / 2;
        if split == 0 {
            return Norm2d::batch(ps, name, channels);
        }
        Ok(Norm2d::InstanceBatch {
            split,
            instance: InstanceNorm::new(ps, &format!("{name}.in"), split)?,
            batch: BatchNorm::new(ps, &format!("{name}.bn"), channels - split)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Norm2d::Batch(bn) => bn.forward(x, train),
            Norm2d::InstanceBatch {
                split,
                instance,
                batch,
            } => {
                let c = x.dim(1)?;
                let a = instance.forward(&x.narrow(1, 0, *split)?)?;
                let b = batch.forward(&x.narrow(1, *split, c - split)?, train)?;
                Ok(Tensor::cat(&[&a, &b], 1)?)
            }
        }
    }
}

/// Global average pooling, `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

/// Global max pooling, `(B, C, H, W) -> (B, C)`.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.max(D::Minus1)?)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

fn check_even(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(MmflError::Shape(format!("2× pooling needs even spatial size, got {h}×{w}")));
    }
    Ok((b, c, h, w))
}

/// 2×2 max pooling with stride 2.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = check_even(x)?;
    Ok(x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .max(5)?
        .max(3)?)
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = check_even(x)?;
    Ok(x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .mean(5)?
        .mean(3)?)
}

/// Bin boundaries of adaptive pooling: `[floor(i*n/out), ceil((i+1)*n/out))`.
pub fn adaptive_bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = i * n / out;
            let end = ((i + 1) * n).div_ceil(out);
            (start, end - start)
        })
        .collect()
}

pub fn swish(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Row-wise L2 normalization of a `(B, D)` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}
