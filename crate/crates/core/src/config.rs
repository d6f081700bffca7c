//! Model dimensions for the two named scales.

use serde::{Deserialize, Serialize};

use crate::error::{MmflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Batch,
    InstanceBatchMix,
}

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub norm_mode: NormMode,
    /// Ratio between a bottleneck's output and inner widths.
    pub expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SffpConfig {
    pub pyramid_width: usize,
    pub lift_width: usize,
    pub bifpn_repeats: usize,
    pub bifpn_epsilon: f64,
    pub gcnet_reduction: usize,
    pub aspp_growth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    /// Width of f_g, f_c (both orientations) and f_la.
    pub embed_dim: usize,
    pub lras_width: usize,
    pub lras_top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JarnConfig {
    pub pid_hidden: usize,
    pub attr_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub sffp: SffpConfig,
    pub branches: BranchConfig,
    pub jarn: JarnConfig,
}

impl ModelConfig {
    /// Dimensions of the published model at 320×320.
    pub fn full() -> Self {
        Self {
            input_size: 320,
            backbone: BackboneConfig {
                stem_channels: 64,
                stage_channels: [256, 512, 1024, 2048],
                blocks_per_stage: [3, 4, 6, 3],
                norm_mode: NormMode::InstanceBatchMix,
                expansion: 4,
            },
            sffp: SffpConfig {
                pyramid_width: 256,
                lift_width: 512,
                bifpn_repeats: 2,
                bifpn_epsilon: 1e-4,
                gcnet_reduction: 16,
                aspp_growth: 128,
            },
            branches: BranchConfig {
                embed_dim: 256,
                lras_width: 256,
                lras_top_k: 4,
            },
            jarn: JarnConfig {
                pid_hidden: 768,
                attr_hidden: 256,
            },
        }
    }

    /// Narrow desk-scale variant at 64×64.
    pub fn tiny() -> Self {
        Self {
            input_size: 64,
            backbone: BackboneConfig {
                stem_channels: 8,
                stage_channels: [16, 32, 64, 128],
                blocks_per_stage: [1, 1, 1, 1],
                norm_mode: NormMode::InstanceBatchMix,
                expansion: 4,
            },
            sffp: SffpConfig {
                pyramid_width: 32,
                lift_width: 64,
                bifpn_repeats: 1,
                bifpn_epsilon: 1e-4,
                gcnet_reduction: 4,
                aspp_growth: 16,
            },
            branches: BranchConfig {
                embed_dim: 32,
                lras_width: 32,
                lras_top_k: 2,
            },
            jarn: JarnConfig {
                pid_hidden: 32,
                attr_hidden: 32,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(MmflError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MmflError::Config("stage_channels must be strictly increasing".into()));
        }
        if b.blocks_per_stage.contains(&0) || b.expansion == 0 {
            return Err(MmflError::Config("every stage needs at least one block".into()));
        }
        if b.stage_channels.iter().any(|c| c % b.expansion != 0) {
            return Err(MmflError::Config("stage_channels must be divisible by expansion".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(MmflError::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        let s = &self.sffp;
        if s.gcnet_reduction == 0 || s.pyramid_width % s.gcnet_reduction != 0 {
            return Err(MmflError::Config(
                "gcnet_reduction must divide pyramid_width".into(),
            ));
        }
        if s.bifpn_repeats == 0 {
            return Err(MmflError::Config("bifpn_repeats must be at least 1".into()));
        }
        let br = &self.branches;
        if br.embed_dim % 2 != 0 {
            return Err(MmflError::Config("embed_dim must be even".into()));
        }
        if br.lras_top_k == 0 || br.lras_top_k > br.lras_width {
            return Err(MmflError::Config(
                "lras_top_k must be within 1..=lras_width".into(),
            ));
        }
        Ok(())
    }

    /// Length of the concatenated metric feature.
    pub fn metric_dim(&self) -> usize {
        4 * self.branches.embed_dim
    }

    /// Length of the retrieval embedding.
    pub fn inference_dim(&self) -> usize {
        4 * self.jarn.pid_hidden
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::full().metric_dim(), 1024);
        assert_eq!(ModelConfig::full().inference_dim(), 3072);
        assert_eq!(ModelConfig::tiny().inference_dim(), 128);
    }

    #[test]
    fn strides_double() {
        assert!(STAGE_STRIDES.windows(2).all(|w| w[1] == 2 * w[0]));
    }

    #[test]
    fn rejects_non_increasing_channels() {
        let mut c = ModelConfig::tiny();
        c.backbone.stage_channels = [16, 16, 64, 128];
        assert!(c.validate().is_err());
    }
}
