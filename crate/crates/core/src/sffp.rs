//! Semantic-spatial feature fusion: lateral reduction, bidirectional weighted
//! pyramid fusion, resolution-aware fusion and context-aware attention.

use candle_core::{Tensor, Var, D};

use crate::backbone::StagePyramid;
use crate::config::{BackboneConfig, SffpConfig};
use crate::error::{MmflError, Result};
use crate::nn::layers::{avg_pool2, max_pool2, swish, upsample2};
use crate::nn::{BatchNorm, Conv2d, ConvSpec, DepthwiseConv3x3, LayerNorm, Linear, ParamKind, ParamStore};

/// Pyramid levels 3–5 at strides 8, 16 and 32, all of the pyramid width.
#[derive(Debug, Clone)]
pub struct PyramidLevels {
    pub p3: Tensor,
    pub p4: Tensor,
    pub p5: Tensor,
}

/// The two maps consumed by the feature branches.
#[derive(Debug, Clone)]
pub struct FusedFeatureMaps {
    /// Stride-32 map for the global branch.
    pub x_g: Tensor,
    /// Stride-16 map shared by the part and local-detail branches.
    pub x_part: Tensor,
}

/// Learnable non-negative edge weights of one fusion node.
#[derive(Debug, Clone)]
pub struct FusionNodeWeights {
    pub raw: Var,
    pub epsilon: f64,
}

impl FusionNodeWeights {
    pub fn new(ps: &mut ParamStore, name: &str, edges: usize, epsilon: f64) -> Result<Self> {
        Ok(Self {
            raw: ps.constant(name, edges, 1.0, ParamKind::Fusion)?,
            epsilon,
        })
    }

    pub fn edges(&self) -> usize {
        self.raw.elem_count()
    }

    /// `relu(raw) / (sum(relu(raw)) + epsilon)`.
    pub fn effective(&self) -> Result<Tensor> {
        let w = self.raw.as_tensor().relu()?;
        let denom = (w.sum_all()? + self.epsilon)?;
        Ok(w.broadcast_div(&denom)?)
    }

    /// Normalized weighted sum of same-shaped inputs.
    pub fn fuse(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != self.edges() {
            return Err(MmflError::Shape(format!(
                "fusion node has {} edges, got {} inputs",
                self.edges(),
                inputs.len()
            )));
        }
        let w = self.effective()?;
        let mut acc: Option<Tensor> = None;
        for (i, x) in inputs.iter().enumerate() {
            let term = x.broadcast_mul(&w.narrow(0, i, 1)?.reshape((1, 1, 1, 1))?)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one input"))
    }
}

/// Depthwise 3×3 followed by pointwise 1×1 and batch normalization.
#[derive(Debug, Clone)]
pub struct SeparableConv {
    pub depthwise: DepthwiseConv3x3,
    pub pointwise: Conv2d,
    pub bn: BatchNorm,
}

impl SeparableConv {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            depthwise: DepthwiseConv3x3::new(ps, &format!("{name}.dw"), channels)?,
            pointwise: Conv2d::new(ps, &format!("{name}.pw"), channels, channels, ConvSpec::pointwise().no_bias())?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn
            .forward(&self.pointwise.forward(&self.depthwise.forward(x)?)?, train)
    }
}

/// `Conv(swish(weighted sum))`.
#[derive(Debug, Clone)]
pub struct FusionNode {
    pub weights: FusionNodeWeights,
    pub conv: SeparableConv,
}

impl FusionNode {
    pub fn new(ps: &mut ParamStore, name: &str, edges: usize, channels: usize, epsilon: f64) -> Result<Self> {
        Ok(Self {
            weights: FusionNodeWeights::new(ps, &format!("{name}.w"), edges, epsilon)?,
            conv: SeparableConv::new(ps, &format!("{name}.conv"), channels)?,
        })
    }

    pub fn forward(&self, inputs: &[&Tensor], train: bool) -> Result<Tensor> {
        self.conv.forward(&swish(&self.weights.fuse(inputs)?)?, train)
    }
}

/// One top-down plus bottom-up pass over levels 3–5.
#[derive(Debug, Clone)]
pub struct BifpnLayer {
    pub p4_td: FusionNode,
    pub p3_out: FusionNode,
    pub p4_out: FusionNode,
    pub p5_out: FusionNode,
}

impl BifpnLayer {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, epsilon: f64) -> Result<Self> {
        Ok(Self {
            p4_td: FusionNode::new(ps, &format!("{name}.p4_td"), 2, width, epsilon)?,
            p3_out: FusionNode::new(ps, &format!("{name}.p3_out"), 2, width, epsilon)?,
            p4_out: FusionNode::new(ps, &format!("{name}.p4_out"), 3, width, epsilon)?,
            p5_out: FusionNode::new(ps, &format!("{name}.p5_out"), 2, width, epsilon)?,
        })
    }

    pub fn nodes(&self) -> [&FusionNode; 4] {
        [&self.p4_td, &self.p3_out, &self.p4_out, &self.p5_out]
    }

    pub fn forward(&self, levels: &PyramidLevels, train: bool) -> Result<PyramidLevels> {
        let PyramidLevels { p3, p4, p5 } = levels;
        let p4_td = self.p4_td.forward(&[p4, &upsample2(p5)?], train)?;
        let p3_out = self.p3_out.forward(&[p3, &upsample2(&p4_td)?], train)?;
        let p4_out = self
            .p4_out
            .forward(&[p4, &p4_td, &max_pool2(&p3_out)?], train)?;
        let p5_out = self.p5_out.forward(&[p5, &max_pool2(&p4_out)?], train)?;
        Ok(PyramidLevels {
            p3: p3_out,
            p4: p4_out,
            p5: p5_out,
        })
    }
}

/// Repeated bidirectional fusion with independent weights per repeat.
#[derive(Debug, Clone)]
pub struct Bifpn {
    pub layers: Vec<BifpnLayer>,
}

impl Bifpn {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, repeats: usize, epsilon: f64) -> Result<Self> {
        if repeats == 0 {
            return Err(MmflError::Argument("bifpn repeats must be at least 1".into()));
        }
        let layers = (0..repeats)
            .map(|r| BifpnLayer::new(ps, &format!("{name}.{r}"), width, epsilon))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, levels: &PyramidLevels, train: bool) -> Result<PyramidLevels> {
        let mut cur = levels.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, train)?;
        }
        Ok(cur)
    }

    pub fn fusion_weights(&self) -> impl Iterator<Item = &FusionNodeWeights> {
        self.layers
            .iter()
            .flat_map(|l| l.nodes().into_iter().map(|n| &n.weights))
    }
}

/// Resolution-aware fusion of three consecutive scales:
/// `x_l + x_l * avgpool(x_{l-1} + x_{l-1} * conv4x4(x_{l-2}))`.
#[derive(Debug, Clone)]
pub struct Rfb {
    pub conv: Conv2d,
}

impl Rfb {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{name}.conv4x4"), channels, channels, ConvSpec::square(4, 2, 1))?,
        })
    }

    pub fn forward(&self, x_l: &Tensor, x_lm1: &Tensor, x_lm2: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x_l.dims4()?;
        let (_, _, h1, w1) = x_lm1.dims4()?;
        let (_, _, h2, w2) = x_lm2.dims4()?;
        if h1 != 2 * h || w1 != 2 * w || h2 != 2 * h1 || w2 != 2 * w1 {
            return Err(MmflError::Shape(format!(
                "resolution fusion needs consecutive 2× scales, got {h}×{w}, {h1}×{w1}, {h2}×{w2}"
            )));
        }
        let down = self.conv.forward(x_lm2)?;
        let inner = (x_lm1 + x_lm1.mul(&down)?)?;
        let pooled = avg_pool2(&inner)?;
        Ok((x_l + x_l.mul(&pooled)?)?)
    }
}

pub const ASPP_RATES: [usize; 3] = [3, 5, 7];

/// Densely connected dilated 3×3 convolutions (rates 3, 5, 7) and a 1×1 fusion back to the input width.
#[derive(Debug, Clone)]
pub struct DenseAspp {
    pub dilated: Vec<Conv2d>,
    pub fuse: Conv2d,
    channels: usize,
    growth: usize,
}

impl DenseAspp {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, growth: usize) -> Result<Self> {
        let mut dilated = Vec::with_capacity(ASPP_RATES.len());
        for (i, &rate) in ASPP_RATES.iter().enumerate() {
            dilated.push(Conv2d::new(
                ps,
                &format!("{name}.d{rate}"),
                channels + i * growth,
                growth,
                ConvSpec::dilated(3, rate),
            )?);
        }
        let fuse = Conv2d::new(
            ps,
            &format!("{name}.fuse"),
            channels + ASPP_RATES.len() * growth,
            channels,
            ConvSpec::pointwise(),
        )?;
        Ok(Self {
            dilated,
            fuse,
            channels,
            growth,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn growth(&self) -> usize {
        self.growth
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut features = vec![x.clone()];
        for conv in &self.dilated {
            let input = Tensor::cat(&features, 1)?;
            features.push(conv.forward(&input)?.relu()?);
        }
        self.fuse.forward(&Tensor::cat(&features, 1)?)
    }
}

/// Global context block: softmax attention pooling, bottleneck transform with layer norm, residual add.
#[derive(Debug, Clone)]
pub struct GcBlock {
    pub w_k: Conv2d,
    pub w_v1: Linear,
    pub ln: LayerNorm,
    pub w_v2: Linear,
}

impl GcBlock {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(MmflError::Config(format!(
                "gcnet reduction {reduction} must divide {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w_k: Conv2d::new(ps, &format!("{name}.w_k"), channels, 1, ConvSpec::pointwise().no_bias())?,
            w_v1: Linear::new(ps, &format!("{name}.w_v1"), channels, hidden, true)?,
            ln: LayerNorm::new(ps, &format!("{name}.ln"), hidden)?,
            w_v2: Linear::new(ps, &format!("{name}.w_v2"), hidden, channels, true)?,
        })
    }

    /// Attention weights over all positions, `(B, H*W)`.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.w_k.forward(x)?.flatten_from(1)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    /// Attention-weighted sum of position vectors, `(B, C)`.
    pub fn context(&self, x: &Tensor) -> Result<Tensor> {
        let alpha = self.attention(x)?;
        let (b, c, _, _) = x.dims4()?;
        let flat = x.flatten_from(2)?;
        Ok(flat.matmul(&alpha.unsqueeze(2)?)?.reshape((b, c))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let ctx = self.context(x)?;
        let t = self.w_v2.forward(&self.ln.forward(&self.w_v1.forward(&ctx)?)?)?;
        Ok(x.broadcast_add(&t.reshape((b, c, 1, 1))?)?)
    }
}

/// Dense atrous pyramid followed by a global context block.
#[derive(Debug, Clone)]
pub struct Cfae {
    pub aspp: DenseAspp,
    pub gc: GcBlock,
}

impl Cfae {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &SffpConfig) -> Result<Self> {
        Ok(Self {
            aspp: DenseAspp::new(ps, &format!("{name}.aspp"), cfg.pyramid_width, cfg.aspp_growth)?,
            gc: GcBlock::new(ps, &format!("{name}.gc"), cfg.pyramid_width, cfg.gcnet_reduction)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.gc.forward(&self.aspp.forward(x)?)
    }
}

/// 1×1 convolution, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, ConvSpec::pointwise().no_bias())?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Sffp {
    pub lateral2: Conv2d,
    pub lateral3: Conv2d,
    pub lateral4: Conv2d,
    pub lateral5: Conv2d,
    pub bifpn: Bifpn,
    pub rfb5: Rfb,
    pub rfb4: Rfb,
    pub cfae5: Cfae,
    pub cfae4: Cfae,
    pub lift5: ConvBnRelu,
    pub lift4: ConvBnRelu,
}

impl Sffp {
    pub fn new(ps: &mut ParamStore, name: &str, backbone: &BackboneConfig, cfg: &SffpConfig) -> Result<Self> {
        let w = cfg.pyramid_width;
        let [c2, c3, c4, c5] = backbone.stage_channels;
        Ok(Self {
            lateral2: Conv2d::new(ps, &format!("{name}.lateral2"), c2, w, ConvSpec::pointwise())?,
            lateral3: Conv2d::new(ps, &format!("{name}.lateral3"), c3, w, ConvSpec::pointwise())?,
            lateral4: Conv2d::new(ps, &format!("{name}.lateral4"), c4, w, ConvSpec::pointwise())?,
            lateral5: Conv2d::new(ps, &format!("{name}.lateral5"), c5, w, ConvSpec::pointwise())?,
            bifpn: Bifpn::new(ps, &format!("{name}.bifpn"), w, cfg.bifpn_repeats, cfg.bifpn_epsilon)?,
            rfb5: Rfb::new(ps, &format!("{name}.rfb5"), w)?,
            rfb4: Rfb::new(ps, &format!("{name}.rfb4"), w)?,
            cfae5: Cfae::new(ps, &format!("{name}.cfae5"), cfg)?,
            cfae4: Cfae::new(ps, &format!("{name}.cfae4"), cfg)?,
            lift5: ConvBnRelu::new(ps, &format!("{name}.lift5"), w, cfg.lift_width)?,
            lift4: ConvBnRelu::new(ps, &format!("{name}.lift4"), w, cfg.lift_width)?,
        })
    }

    /// 1×1 reduction of C3–C5 to the pyramid width.
    pub fn lateral_reduce(&self, pyramid: &StagePyramid) -> Result<PyramidLevels> {
        Ok(PyramidLevels {
            p3: self.lateral3.forward(&pyramid.c3)?,
            p4: self.lateral4.forward(&pyramid.c4)?,
            p5: self.lateral5.forward(&pyramid.c5)?,
        })
    }

    pub fn forward(&self, pyramid: &StagePyramid, train: bool) -> Result<FusedFeatureMaps> {
        let levels = self.lateral_reduce(pyramid)?;
        let c2 = self.lateral2.forward(&pyramid.c2)?;
        let out = self.bifpn.forward(&levels, train)?;
        let r5 = self.rfb5.forward(&out.p5, &out.p4, &out.p3)?;
        let r4 = self.rfb4.forward(&out.p4, &out.p3, &c2)?;
        let x_g = self.lift5.forward(&self.cfae5.forward(&r5)?, train)?;
        let x_part = self.lift4.forward(&self.cfae4.forward(&r4)?, train)?;
        Ok(FusedFeatureMaps { x_g, x_part })
    }
}
