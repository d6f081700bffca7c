//! Residual bottleneck feature extractor producing the four stage maps.

use candle_core::Tensor;

use crate::config::{BackboneConfig, NormMode, STAGE_STRIDES};
use crate::error::{MmflError, Result};
use crate::nn::layers::max_pool2;
use crate::nn::{BatchNorm, Conv2d, ConvSpec, Norm2d, ParamStore};

/// Stage outputs at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct StagePyramid {
    pub c2: Tensor,
    pub c3: Tensor,
    pub c4: Tensor,
    pub c5: Tensor,
    pub input_size: (usize, usize),
}

impl StagePyramid {
    pub fn stages(&self) -> [&Tensor; 4] {
        [&self.c2, &self.c3, &self.c4, &self.c5]
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    norm1: Norm2d,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        expansion: usize,
        ibn: bool,
    ) -> Result<Self> {
        let mid = cout / expansion;
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), cin, mid, ConvSpec::pointwise().no_bias())?;
        let norm1 = if ibn {
            Norm2d::instance_batch(ps, &format!("{name}.norm1"), mid)?
        } else {
            Norm2d::batch(ps, &format!("{name}.norm1"), mid)?
        };
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), mid, mid, ConvSpec::square(3, stride, 1).no_bias())?;
        let bn2 = BatchNorm::new(ps, &format!("{name}.bn2"), mid)?;
        let conv3 = Conv2d::new(ps, &format!("{name}.conv3"), mid, cout, ConvSpec::pointwise().no_bias())?;
        let bn3 = BatchNorm::new(ps, &format!("{name}.bn3"), cout)?;
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(ps, &format!("{name}.down.conv"), cin, cout, ConvSpec::square(1, stride, 0).no_bias())?,
                BatchNorm::new(ps, &format!("{name}.down.bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            norm1,
            conv2,
            bn2,
            conv3,
            bn3,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, train)?;
        let identity = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<Bottleneck>>,
    config: BackboneConfig,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, name: &str, config: &BackboneConfig) -> Result<Self> {
        let stem = Conv2d::new(
            ps,
            &format!("{name}.stem.conv"),
            3,
            config.stem_channels,
            ConvSpec::square(7, 2, 3).no_bias(),
        )?;
        let stem_bn = BatchNorm::new(ps, &format!("{name}.stem.bn"), config.stem_channels)?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = config.stem_channels;
        for (s, (&cout, &blocks)) in config
            .stage_channels
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let ibn = config.norm_mode == NormMode::InstanceBatchMix && s < 3 && b == 0;
                stage.push(Bottleneck::new(
                    ps,
                    &format!("{name}.stage{}.{b}", s + 1),
                    cin,
                    cout,
                    stride,
                    config.expansion,
                    ibn,
                )?);
                cin = cout;
            }
            stages.push(stage);
        }
        Ok(Self {
            stem,
            stem_bn,
            stages,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the extractor on `(B, 3, H, W)` images; `H` and `W` must be multiples of 32.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<StagePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(MmflError::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(MmflError::Shape(format!(
                "input {h}×{w} is not divisible by 32"
            )));
        }
        let mut x = self.stem_bn.forward(&self.stem.forward(images)?, train)?.relu()?;
        x = max_pool2(&x)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, train)?;
            }
            outs.push(x.clone());
        }
        let mut it = outs.into_iter();
        let pyramid = StagePyramid {
            c2: it.next().unwrap(),
            c3: it.next().unwrap(),
            c4: it.next().unwrap(),
            c5: it.next().unwrap(),
            input_size: (h, w),
        };
        debug_assert!(pyramid
            .stages()
            .iter()
            .zip(STAGE_STRIDES)
            .all(|(t, s)| t.dim(2).ok() == Some(h / s)));
        Ok(pyramid)
    }
}

/// Spatial size of each stage for an `h`×`w` input.
pub fn stage_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
    STAGE_STRIDES.map(|s| (h.div_ceil(s), w.div_ceil(s)))
}
