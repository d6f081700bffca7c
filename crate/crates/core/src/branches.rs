//! The four feature branches: global, horizontal parts, vertical parts and local detail.

use candle_core::{Tensor, Var, D};

use crate::config::{BranchConfig, SffpConfig};
use crate::error::{MmflError, Result};
use crate::nn::layers::{adaptive_bins, global_avg_pool, global_max_pool, sigmoid};
use crate::nn::{BatchNorm, Conv2d, ConvSpec, Linear, ParamStore};

/// `GAP(x) + GMP(x)` over all positions, `(B, C, H, W) -> (B, C)`.
pub fn gap_gmp(x: &Tensor) -> Result<Tensor> {
    Ok((global_avg_pool(x)? + global_max_pool(x)?)?)
}

/// Linear (no bias), batch norm, ReLU on `(B, F)` vectors.
#[derive(Debug, Clone)]
pub struct Embed {
    pub fc: Linear,
    pub bn: BatchNorm,
}

impl Embed {
    pub fn new(ps: &mut ParamStore, name: &str, fin: usize, fout: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(ps, &format!("{name}.fc"), fin, fout, false)?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), fout)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.fc.forward(x)?, train)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct GlobalBranch {
    pub embed: Embed,
}

impl GlobalBranch {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            embed: Embed::new(ps, &format!("{name}.embed"), width, embed_dim)?,
        })
    }

    /// Returns `(z_g, f_g)`.
    pub fn forward(&self, x_g: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let z = gap_gmp(x_g)?;
        let f = self.embed.forward(&z, train)?;
        Ok((z, f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Two stripes stacked along the height axis.
    Horizontal,
    /// Two stripes side by side along the width axis.
    Vertical,
}

impl Orientation {
    fn axis(self) -> usize {
        match self {
            Orientation::Horizontal => 2,
            Orientation::Vertical => 3,
        }
    }
}

/// Output of one part branch.
#[derive(Debug, Clone)]
pub struct PartOutput {
    /// `(B, C, 2, 1)` or `(B, C, 1, 2)`.
    pub z: Tensor,
    /// `(B, 2C)`, slice-major.
    pub z_flat: Tensor,
    pub f_parts: [Tensor; 2],
    pub f_c: Tensor,
}

#[derive(Debug, Clone)]
pub struct PartBranch {
    pub orientation: Orientation,
    pub slices: [Embed; 2],
}

impl PartBranch {
    pub fn new(ps: &mut ParamStore, name: &str, orientation: Orientation, width: usize, embed_dim: usize) -> Result<Self> {
        let half = embed_dim / 2;
        Ok(Self {
            orientation,
            slices: [
                Embed::new(ps, &format!("{name}.part0"), width, half)?,
                Embed::new(ps, &format!("{name}.part1"), width, half)?,
            ],
        })
    }

    /// Adaptive average plus max pooling to two stripes; one `(B, C)` vector per stripe.
    pub fn pool(&self, x: &Tensor) -> Result<[Tensor; 2]> {
        let axis = self.orientation.axis();
        let n = x.dim(axis)?;
        if n < 2 {
            return Err(MmflError::Shape(format!(
                "part pooling needs at least 2 positions along axis {axis}, got {n}"
            )));
        }
        let bins = adaptive_bins(n, 2);
        let pooled = |(start, len): (usize, usize)| -> Result<Tensor> { gap_gmp(&x.narrow(axis, start, len)?) };
        Ok([pooled(bins[0])?, pooled(bins[1])?])
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<PartOutput> {
        let [a, b] = self.pool(x)?;
        let (bs, c) = a.dims2()?;
        let z = Tensor::stack(&[&a, &b], 2)?;
        let z = match self.orientation {
            Orientation::Horizontal => z.reshape((bs, c, 2, 1))?,
            Orientation::Vertical => z.reshape((bs, c, 1, 2))?,
        };
        let z_flat = Tensor::cat(&[&a, &b], 1)?;
        let f0 = self.slices[0].forward(&a, train)?;
        let f1 = self.slices[1].forward(&b, train)?;
        let f_c = Tensor::cat(&[&f0, &f1], 1)?;
        Ok(PartOutput {
            z,
            z_flat,
            f_parts: [f0, f1],
            f_c,
        })
    }
}

/// Adaptive 1-D kernel size for `channels`: the odd integer nearest `|log2(C)/2 + 1/2|`.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels as f64).log2() / 2.0 + 0.5).abs().floor() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Efficient channel attention: `x * sigmoid(conv1d_k(GAP(x)))`.
#[derive(Debug, Clone)]
pub struct Eca {
    pub weight: Var,
    kernel: usize,
}

impl Eca {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let kernel = eca_kernel_size(channels);
        let weight = ps.kaiming(&format!("{name}.weight"), kernel, kernel)?;
        Ok(Self { weight, kernel })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel
    }

    /// Channel weights `(B, C)` in (0, 1).
    pub fn mask(&self, x: &Tensor) -> Result<Tensor> {
        let g = global_avg_pool(x)?;
        let c = g.dim(1)?;
        let half = self.kernel / 2;
        let padded = g.pad_with_zeros(1, half, half)?;
        let w = self.weight.as_tensor();
        let mut acc: Option<Tensor> = None;
        for j in 0..self.kernel {
            let term = padded.narrow(1, j, c)?.broadcast_mul(&w.narrow(0, j, 1)?)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        sigmoid(&acc.expect("kernel is non-empty"))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        Ok(x.broadcast_mul(&self.mask(x)?.reshape((b, c, 1, 1))?)?)
    }
}

/// Indices of the `k` largest scores, highest first; equal scores favour the lower index.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(MmflError::Argument(format!(
            "top-k selection needs 1 <= k <= {}, got {k}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// `(1 + mask) * trunk`.
pub fn fuse_residual_attention(trunk: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(((mask + 1.0)? * trunk)?)
}

/// 3×3 conv, BN, ReLU, 3×3 conv, BN.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl ResidualUnit {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), channels, channels, ConvSpec::square(3, 1, 1).no_bias())?,
            bn1: BatchNorm::new(ps, &format!("{name}.bn1"), channels)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), channels, channels, ConvSpec::square(3, 1, 1).no_bias())?,
            bn2: BatchNorm::new(ps, &format!("{name}.bn2"), channels)?,
        })
    }

    /// `relu(x + R(x))`.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        Ok((x + y)?.relu()?)
    }
}

/// Output of the local residual attention selection.
#[derive(Debug, Clone)]
pub struct LrasOutput {
    pub trunk: Tensor,
    pub mask: Tensor,
    /// `(1 + M) * T`, `(B, C, H, W)`.
    pub fused: Tensor,
    /// Spatial sum of each fused channel, `(B, C)`.
    pub scores: Tensor,
    pub selected: Vec<Vec<usize>>,
    /// Pooled selected maps, `(B, K*C)`.
    pub descriptor: Tensor,
    pub f_la: Tensor,
}

#[derive(Debug, Clone)]
pub struct Lras {
    pub reduce: Conv2d,
    pub reduce_bn: BatchNorm,
    pub trunk: ResidualUnit,
    pub mask_unit: ResidualUnit,
    pub mask_out: Conv2d,
    pub embed: Embed,
    pub top_k: usize,
    width: usize,
}

impl Lras {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cfg: &BranchConfig) -> Result<Self> {
        let w = cfg.lras_width;
        if cfg.lras_top_k == 0 || cfg.lras_top_k > w {
            return Err(MmflError::Argument(format!(
                "lras top-k {} outside 1..={w}",
                cfg.lras_top_k
            )));
        }
        Ok(Self {
            reduce: Conv2d::new(ps, &format!("{name}.reduce"), cin, w, ConvSpec::pointwise().no_bias())?,
            reduce_bn: BatchNorm::new(ps, &format!("{name}.reduce_bn"), w)?,
            trunk: ResidualUnit::new(ps, &format!("{name}.trunk"), w)?,
            mask_unit: ResidualUnit::new(ps, &format!("{name}.mask"), w)?,
            mask_out: Conv2d::new(ps, &format!("{name}.mask_out"), w, w, ConvSpec::pointwise())?,
            embed: Embed::new(ps, &format!("{name}.embed"), cfg.lras_top_k * w, cfg.embed_dim)?,
            top_k: cfg.lras_top_k,
            width: w,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn descriptor_dim(&self) -> usize {
        self.top_k * self.width
    }

    /// Per-sample pooled products of the fused map with each selected channel.
    pub fn pool_selected(fused: &Tensor, selected: &[Vec<usize>]) -> Result<Tensor> {
        let (b, c, h, w) = fused.dims4()?;
        let mut rows = Vec::with_capacity(b);
        for (i, idx) in selected.iter().enumerate() {
            let f = fused.get(i)?;
            let ids = Tensor::from_vec(idx.iter().map(|&j| j as u32).collect::<Vec<_>>(), idx.len(), fused.device())?;
            let sel = f.index_select(&ids, 0)?.reshape((idx.len(), 1, h, w))?;
            let prod = f.unsqueeze(0)?.broadcast_mul(&sel)?;
            rows.push(prod.mean((2, 3))?.reshape(idx.len() * c)?);
        }
        Ok(Tensor::stack(&rows, 0)?)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<LrasOutput> {
        let u = self.reduce_bn.forward(&self.reduce.forward(x)?, train)?.relu()?;
        let trunk = self.trunk.forward(&u, train)?;
        let mask = sigmoid(&self.mask_out.forward(&self.mask_unit.forward(&u, train)?)?)?;
        let fused = fuse_residual_attention(&trunk, &mask)?;
        let scores = fused.sum((2, 3))?;
        let host = scores.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
        let selected = host
            .iter()
            .map(|row| select_top_k(row, self.top_k))
            .collect::<Result<Vec<_>>>()?;
        let descriptor = Self::pool_selected(&fused, &selected)?;
        let f_la = self.embed.forward(&descriptor, train)?;
        Ok(LrasOutput {
            trunk,
            mask,
            fused,
            scores,
            selected,
            descriptor,
            f_la,
        })
    }
}

/// Descriptors and embeddings from all four branches.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub z_g: Tensor,
    pub f_g: Tensor,
    pub horizontal: PartOutput,
    pub vertical: PartOutput,
    pub lras: LrasOutput,
    /// `[f_g | f_ph_c | f_pv_c | f_la]`, unnormalized.
    pub f_metric: Tensor,
}

impl EmbeddingBundle {
    /// Inputs to the per-branch recognition heads in the order GF, PHF, PVF, LDF.
    pub fn descriptors(&self) -> [&Tensor; 4] {
        [
            &self.z_g,
            &self.horizontal.z_flat,
            &self.vertical.z_flat,
            &self.lras.descriptor,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Branches {
    pub global: GlobalBranch,
    pub horizontal: PartBranch,
    pub vertical: PartBranch,
    pub eca: Eca,
    pub lras: Lras,
}

impl Branches {
    pub fn new(ps: &mut ParamStore, name: &str, sffp: &SffpConfig, cfg: &BranchConfig) -> Result<Self> {
        let c = sffp.lift_width;
        let e = cfg.embed_dim;
        Ok(Self {
            global: GlobalBranch::new(ps, &format!("{name}.gf"), c, e)?,
            horizontal: PartBranch::new(ps, &format!("{name}.phf"), Orientation::Horizontal, c, e)?,
            vertical: PartBranch::new(ps, &format!("{name}.pvf"), Orientation::Vertical, c, e)?,
            eca: Eca::new(ps, &format!("{name}.ldf.eca"), c)?,
            lras: Lras::new(ps, &format!("{name}.ldf.lras"), c, cfg)?,
        })
    }

    /// Widths of the four recognition-head inputs.
    pub fn descriptor_dims(&self, lift_width: usize) -> [usize; 4] {
        [lift_width, 2 * lift_width, 2 * lift_width, self.lras.descriptor_dim()]
    }

    pub fn assemble_bundle(&self, x_g: &Tensor, x_part: &Tensor, train: bool) -> Result<EmbeddingBundle> {
        let (z_g, f_g) = self.global.forward(x_g, train)?;
        let horizontal = self.horizontal.forward(x_part, train)?;
        let vertical = self.vertical.forward(x_part, train)?;
        let lras = self.lras.forward(&self.eca.forward(x_part)?, train)?;
        let f_metric = Tensor::cat(&[&f_g, &horizontal.f_c, &vertical.f_c, &lras.f_la], D::Minus1)?;
        Ok(EmbeddingBundle {
            z_g,
            f_g,
            horizontal,
            vertical,
            lras,
            f_metric,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use candle_core::{DType, Device};

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn eca_kernel_rule() {
        assert_eq!(eca_kernel_size(512), 5);
        assert_eq!(eca_kernel_size(64), 3);
        assert_eq!(eca_kernel_size(256), 5);
        assert_eq!(eca_kernel_size(32), 3);
    }

    #[test]
    fn zero_kernel_halves_input() {
        let mut ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let eca = Eca::new(&mut ps, "eca", 8).unwrap();
        eca.weight.set(&eca.weight.zeros_like().unwrap()).unwrap();
        let x = Tensor::randn(0f64, 1., (2, 8, 3, 3), &Device::Cpu).unwrap();
        let y = eca.forward(&x).unwrap();
        assert!(max_abs(&(y - (&x * 0.5).unwrap()).unwrap()) < 1e-15);
    }

    #[test]
    fn single_pixel_pooling() {
        let mut v = vec![0f64; 100];
        v[37] = 1.0;
        let x = Tensor::from_vec(v, (1, 1, 10, 10), &Device::Cpu).unwrap();
        let z = gap_gmp(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((z[0] - 1.01).abs() < 1e-12);
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(select_top_k(&[1.0, 3.0, 3.0, 2.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_top_k(&[0.0; 5], 3).unwrap(), vec![0, 1, 2]);
        assert!(select_top_k(&[1.0], 2).is_err());
        assert!(select_top_k(&[1.0], 0).is_err());
    }

    #[test]
    fn partition_axis_of_one_is_rejected() {
        let mut ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let br = PartBranch::new(&mut ps, "p", Orientation::Horizontal, 4, 4).unwrap();
        let x = Tensor::zeros((2, 4, 1, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(br.forward(&x, true), Err(MmflError::Shape(_))));
    }

    #[test]
    fn tiny_bundle_shapes() {
        let cfg = ModelConfig::tiny();
        let mut ps = ParamStore::new(DType::F32, Device::Cpu, 1);
        let br = Branches::new(&mut ps, "br", &cfg.sffp, &cfg.branches).unwrap();
        let x_g = Tensor::randn(0f32, 1., (3, 64, 2, 2), &Device::Cpu).unwrap();
        let x_part = Tensor::randn(0f32, 1., (3, 64, 4, 4), &Device::Cpu).unwrap();
        let b = br.assemble_bundle(&x_g, &x_part, true).unwrap();
        assert_eq!(b.f_metric.dims(), &[3, cfg.metric_dim()]);
        assert_eq!(b.horizontal.z.dims(), &[3, 64, 2, 1]);
        assert_eq!(b.vertical.z.dims(), &[3, 64, 1, 2]);
        assert_eq!(b.lras.descriptor.dims(), &[3, 2 * 32]);
        assert_eq!(b.lras.selected.len(), 3);
        let dims = br.descriptor_dims(64);
        for (d, t) in dims.iter().zip(b.descriptors()) {
            assert_eq!(t.dim(1).unwrap(), *d);
        }
    }
}
