//! Per-branch recognition heads: attribute classifiers and the PID head whose
//! normalized hidden layer feeds the retrieval embedding.

use candle_core::{Tensor, D};

use crate::data::AttributeSchema;
use crate::config::JarnConfig;
use crate::error::{MmflError, Result};
use crate::nn::layers::l2_normalize;
use crate::nn::{BatchNorm, Linear, ParamStore};

pub const BRANCH_NAMES: [&str; 4] = ["gf", "phf", "pvf", "ldf"];

/// Two-layer classifier producing log-probabilities over one attribute type.
#[derive(Debug, Clone)]
pub struct AttributeHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl AttributeHead {
    pub fn num_values(&self) -> usize {
        self.out.out_features()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct JarnHead {
    pub attributes: Vec<AttributeHead>,
    pub pid_fc: Linear,
    pub pid_bn: BatchNorm,
    pub classifier: Linear,
    input_dim: usize,
}

/// Output of a PID head.
#[derive(Debug, Clone)]
pub struct PidOutput {
    pub bn_hidden: Tensor,
    pub logits: Tensor,
}

impl JarnHead {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input_dim: usize,
        schema: &AttributeSchema,
        num_classes: usize,
        cfg: &JarnConfig,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(MmflError::Config("PID head needs at least one class".into()));
        }
        let mut attributes = Vec::with_capacity(schema.num_types());
        for (t, ty) in schema.types.iter().enumerate() {
            attributes.push(AttributeHead {
                hidden: Linear::new(ps, &format!("{name}.attr{t}.hidden"), input_dim, cfg.attr_hidden, true)?,
                out: Linear::new(ps, &format!("{name}.attr{t}.out"), cfg.attr_hidden, ty.values.len(), true)?,
            });
        }
        Ok(Self {
            attributes,
            pid_fc: Linear::new(ps, &format!("{name}.pid.fc"), input_dim, cfg.pid_hidden, true)?,
            pid_bn: BatchNorm::new(ps, &format!("{name}.pid.bn"), cfg.pid_hidden)?,
            classifier: Linear::with_std(ps, &format!("{name}.pid.classifier"), cfg.pid_hidden, num_classes, 0.001, false)?,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_features()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let d = x.dim(D::Minus1)?;
        if x.rank() != 2 || d != self.input_dim {
            return Err(MmflError::Shape(format!(
                "head expects (B, {}) descriptors, got {:?}",
                self.input_dim,
                x.dims()
            )));
        }
        Ok(())
    }

    /// Log-probabilities per attribute type, each `(B, J_a)`.
    pub fn attribute_forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check(x)?;
        self.attributes
            .iter()
            .map(|h| Ok(candle_nn::ops::log_softmax(&h.logits(x)?, D::Minus1)?))
            .collect()
    }

    pub fn pid_forward(&self, x: &Tensor, train: bool) -> Result<PidOutput> {
        self.check(x)?;
        let bn_hidden = self.pid_bn.forward(&self.pid_fc.forward(x)?, train)?;
        let logits = self.classifier.forward(&bn_hidden)?;
        Ok(PidOutput { bn_hidden, logits })
    }
}

/// One head per branch, in the order GF, PHF, PVF, LDF.
#[derive(Debug, Clone)]
pub struct Jarn {
    pub heads: Vec<JarnHead>,
}

impl Jarn {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input_dims: [usize; 4],
        schema: &AttributeSchema,
        num_classes: usize,
        cfg: &JarnConfig,
    ) -> Result<Self> {
        let heads = BRANCH_NAMES
            .iter()
            .zip(input_dims)
            .map(|(b, d)| JarnHead::new(ps, &format!("{name}.{b}"), d, schema, num_classes, cfg))
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }
}

/// Concatenates the four branch hidden vectors and optionally L2-normalizes each row.
pub fn inference_embed(bn_hidden: &[Tensor], normalize: bool) -> Result<Tensor> {
    if bn_hidden.len() != BRANCH_NAMES.len() {
        return Err(MmflError::Shape(format!(
            "expected {} branch vectors, got {}",
            BRANCH_NAMES.len(),
            bn_hidden.len()
        )));
    }
    let cat = Tensor::cat(bn_hidden, D::Minus1)?;
    if normalize {
        l2_normalize(&cat)
    } else {
        Ok(cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use candle_core::{DType, Device};

    #[test]
    fn default_schema_head_widths() {
        let cfg = ModelConfig::tiny();
        let schema = AttributeSchema::default();
        let mut ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let head = JarnHead::new(&mut ps, "h", 10, &schema, 7, &cfg.jarn).unwrap();
        let x = Tensor::randn(0f64, 1., (3, 10), &Device::Cpu).unwrap();
        let lp = head.attribute_forward(&x).unwrap();
        let widths: Vec<usize> = lp.iter().map(|t| t.dim(1).unwrap()).collect();
        assert_eq!(widths, vec![4, 4, 6, 4]);
        for t in &lp {
            for row in t.exp().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap() {
                assert!((row - 1.0).abs() < 1e-9);
            }
        }
        let out = head.pid_forward(&x, true).unwrap();
        assert_eq!(out.bn_hidden.dims(), &[3, 32]);
        assert_eq!(out.logits.dims(), &[3, 7]);
        let bad = Tensor::zeros((3, 9), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(head.pid_forward(&bad, true), Err(MmflError::Shape(_))));
    }

    #[test]
    fn embedding_is_unit_norm() {
        let parts: Vec<Tensor> = (0..4)
            .map(|_| Tensor::randn(0f64, 1., (2, 5), &Device::Cpu).unwrap())
            .collect();
        let e = inference_embed(&parts, true).unwrap();
        assert_eq!(e.dims(), &[2, 20]);
        for n in e.sqr().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap() {
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(inference_embed(&parts[..3], true).is_err());
    }
}
