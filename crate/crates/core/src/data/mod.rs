//! Dataset manifests, preprocessing, sampling and the synthetic generator.

pub mod imageops;
pub mod manifest;
pub mod mixup;
pub mod sampler;
pub mod schema;
pub mod synthetic;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use imageops::{augment, pad_resize, AugmentConfig, Normalizer};
pub use manifest::{load_manifest, BBox, Domain, ImageRecord, Split};
pub use mixup::{mixup, MixedBatch, MixedTarget};
pub use sampler::{derive_seed, BatchPlan, PkSampler};
pub use schema::{AttributeSchema, AttributeType};
pub use synthetic::{generate_synthetic_dataset, render_synthetic_dataset, SyntheticOptions, SyntheticSample};

use crate::error::{MmflError, Result};

/// Decodes every record's image; reports all missing files at once.
pub fn load_images(records: &[ImageRecord], root: &Path) -> Result<Vec<RgbImage>> {
    let missing: Vec<_> = records
        .iter()
        .map(|r| r.resolve_path(root))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(MmflError::MissingFiles(missing));
    }
    records
        .iter()
        .map(|r| {
            let img = image::open(r.resolve_path(root))?.to_rgb8();
            Ok(match r.bbox {
                Some(b) => crop_bbox(&img, b),
                None => img,
            })
        })
        .collect()
}

fn crop_bbox(img: &RgbImage, b: BBox) -> RgbImage {
    let (w, h) = img.dimensions();
    let x = (b.0.max(0.0) as u32).min(w - 1);
    let y = (b.1.max(0.0) as u32).min(h - 1);
    let cw = (b.2.max(1.0) as u32).min(w - x);
    let ch = (b.3.max(1.0) as u32).min(h - y);
    image::imageops::crop_imm(img, x, y, cw, ch).to_image()
}

/// Deterministic image-to-tensor preprocessing shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub size: usize,
    /// Padding color; the per-channel mean of the training images.
    pub fill: [u8; 3],
    pub normalizer: Normalizer,
}

impl Preprocessor {
    pub fn new(size: usize, fill: [u8; 3]) -> Self {
        Self {
            size,
            fill,
            normalizer: Normalizer::default(),
        }
    }

    pub fn prepare(&self, image: &RgbImage) -> Result<Vec<f32>> {
        Ok(self.normalizer.to_chw(&pad_resize(image, self.size, self.fill)?))
    }

    /// Augments (when `augment` is given) and stacks images into a `(B, 3, S, S)` tensor.
    pub fn batch_tensor(
        &self,
        images: &[&RgbImage],
        augment_cfg: Option<(&AugmentConfig, &[u64])>,
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let s = self.size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for (i, img) in images.iter().enumerate() {
            let chw = match augment_cfg {
                Some((cfg, seeds)) => self.prepare(&augment(img, cfg, seeds[i], self.fill))?,
                None => self.prepare(img)?,
            };
            data.extend_from_slice(&chw);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, s, s), device)?.to_dtype(dtype)?)
    }
}
