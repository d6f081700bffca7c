use std::path::Path;

use candle_core::{DType, Tensor};
use image::RgbImage;

use crate::data::{load_images, ImageRecord, Preprocessor};
use crate::error::Result;
use crate::eval::store::EmbeddingStore;
use crate::model::MmflNet;

/// Embeddings of a record list plus branch-averaged attribute probabilities.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub store: EmbeddingStore,
    /// `[type][sample][value]`.
    pub attribute_scores: Vec<Vec<Vec<f64>>>,
}

/// Runs the network in evaluation mode over `images`, `batch_size` at a time, keeping record order.
pub fn extract(
    net: &MmflNet,
    pre: &Preprocessor,
    records: &[ImageRecord],
    images: &[RgbImage],
    batch_size: usize,
) -> Result<Extraction> {
    let mut store = EmbeddingStore::new(net.config.inference_dim(), true);
    let mut scores = vec![Vec::with_capacity(records.len()); net.schema.num_types()];
    for (recs, imgs) in records.chunks(batch_size.max(1)).zip(images.chunks(batch_size.max(1))) {
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let x = pre.batch_tensor(&refs, None, net.dtype(), net.device())?;
        let out = net.forward(&x, false)?;
        let emb = out.embedding()?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        for (r, row) in recs.iter().zip(&emb) {
            store.push(row, r.pid, r.domain, r.image_path.clone())?;
        }
        for (t, probs) in out.attribute_probabilities()?.iter().enumerate() {
            scores[t].extend(to_rows(probs)?);
        }
    }
    Ok(Extraction {
        store,
        attribute_scores: scores,
    })
}

fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Loads the records' images from `root` and extracts them.
pub fn extract_from_disk(
    net: &MmflNet,
    pre: &Preprocessor,
    records: &[ImageRecord],
    root: &Path,
    batch_size: usize,
) -> Result<Extraction> {
    let images = load_images(records, root)?;
    extract(net, pre, records, &images, batch_size)
}

/// Embeddings only.
pub fn extract_embeddings(
    net: &MmflNet,
    pre: &Preprocessor,
    records: &[ImageRecord],
    root: &Path,
    batch_size: usize,
) -> Result<EmbeddingStore> {
    Ok(extract_from_disk(net, pre, records, root, batch_size)?.store)
}
