//! The full network: backbone, fusion pyramid, four branches and their heads.

use candle_core::{DType, Device, Tensor, D};

use crate::backbone::Backbone;
use crate::branches::{Branches, EmbeddingBundle};
use crate::config::ModelConfig;
use crate::data::AttributeSchema;
use crate::error::Result;
use crate::jarn::{inference_embed, Jarn, PidOutput};
use crate::nn::ParamStore;
use crate::sffp::{FusedFeatureMaps, Sffp};

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub fused: FusedFeatureMaps,
    pub bundle: EmbeddingBundle,
    /// `[branch][attribute type]` log-probabilities.
    pub attributes: Vec<Vec<Tensor>>,
    pub pid: Vec<PidOutput>,
}

impl ModelOutput {
    pub fn bn_hidden(&self) -> Vec<Tensor> {
        self.pid.iter().map(|p| p.bn_hidden.clone()).collect()
    }

    /// L2-normalized retrieval embedding.
    pub fn embedding(&self) -> Result<Tensor> {
        inference_embed(&self.bn_hidden(), true)
    }

    /// Branch-averaged attribute probabilities per type, `(B, J_a)`.
    pub fn attribute_probabilities(&self) -> Result<Vec<Tensor>> {
        let n = self.attributes.len() as f64;
        let types = self.attributes.first().map_or(0, |a| a.len());
        (0..types)
            .map(|t| {
                let mut acc = self.attributes[0][t].exp()?;
                for branch in &self.attributes[1..] {
                    acc = (acc + branch[t].exp()?)?;
                }
                Ok((acc / n)?)
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct MmflNet {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub sffp: Sffp,
    pub branches: Branches,
    pub jarn: Jarn,
    pub config: ModelConfig,
    pub schema: AttributeSchema,
}

impl MmflNet {
    pub fn new(
        config: &ModelConfig,
        schema: &AttributeSchema,
        num_classes: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let mut ps = ParamStore::new(dtype, device.clone(), seed);
        let backbone = Backbone::new(&mut ps, "backbone", &config.backbone)?;
        let sffp = Sffp::new(&mut ps, "sffp", &config.backbone, &config.sffp)?;
        let branches = Branches::new(&mut ps, "branches", &config.sffp, &config.branches)?;
        let dims = branches.descriptor_dims(config.sffp.lift_width);
        let jarn = Jarn::new(&mut ps, "jarn", dims, schema, num_classes, &config.jarn)?;
        Ok(Self {
            store: ps,
            backbone,
            sffp,
            branches,
            jarn,
            config: config.clone(),
            schema: schema.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.jarn.heads[0].num_classes()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<ModelOutput> {
        let pyramid = self.backbone.forward(images, train)?;
        let fused = self.sffp.forward(&pyramid, train)?;
        let bundle = self.branches.assemble_bundle(&fused.x_g, &fused.x_part, train)?;
        let mut attributes = Vec::with_capacity(4);
        let mut pid = Vec::with_capacity(4);
        for (head, desc) in self.jarn.heads.iter().zip(bundle.descriptors()) {
            attributes.push(head.attribute_forward(desc)?);
            pid.push(head.pid_forward(desc, train)?);
        }
        Ok(ModelOutput {
            fused,
            bundle,
            attributes,
            pid,
        })
    }

    /// Evaluation-mode retrieval embeddings, `(B, 4 * pid_hidden)`, unit norm.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.forward(images, false)?.embedding()
    }

    /// Evaluation-mode embeddings and arg-max attribute predictions per type.
    pub fn embed_with_attributes(&self, images: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let out = self.forward(images, false)?;
        let probs = out.attribute_probabilities()?;
        let b = images.dim(0)?;
        let mut preds = vec![Vec::with_capacity(probs.len()); b];
        for p in &probs {
            let arg = p.argmax(D::Minus1)?.to_vec1::<u32>()?;
            for (row, a) in preds.iter_mut().zip(arg) {
                row.push(a as usize);
            }
        }
        Ok((out.embedding()?, preds))
    }
}
