//! Embedding extraction, retrieval metrics, re-ranking, clustered search,
//! attribute metrics and model statistics.

pub mod attributes;
pub mod extract;
pub mod index;
pub mod metrics;
pub mod rerank;
pub mod stats;
pub mod store;

pub use attributes::{attribute_metrics, TypeMetrics};
pub use extract::{extract, extract_embeddings, extract_from_disk, Extraction};
pub use index::{build_index, kmeans, query_index, Hit, KMeans, RetrievalIndex};
pub use metrics::{compute_cmc_map, cosine_distance, distance_matrix, rank_ascending, DistanceMatrix, EvalResult};
pub use rerank::{k_reciprocal_rerank, rerank_from_joint, RerankParams};
pub use stats::{report_model_stats, ModelStats};
pub use store::EmbeddingStore;

use serde::{Deserialize, Serialize};

use crate::data::{Domain, ImageRecord, Split};
use crate::error::Result;
use crate::settings::EvalSettings;

/// Which records act as queries and gallery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Consumer query split against the shop gallery split.
    QueryGallery,
    /// No query split: training consumer images against training shop images.
    TrainConsumerToShop,
}

/// Record indices of the query and gallery sides.
pub fn retrieval_protocol(records: &[ImageRecord]) -> (Protocol, Vec<usize>, Vec<usize>) {
    let pick = |split: Split, domain: Domain| -> Vec<usize> {
        records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split && r.domain == domain)
            .map(|(i, _)| i)
            .collect()
    };
    let query = pick(Split::Query, Domain::Consumer);
    if !query.is_empty() {
        (Protocol::QueryGallery, query, pick(Split::Gallery, Domain::Shop))
    } else {
        (
            Protocol::TrainConsumerToShop,
            pick(Split::Train, Domain::Consumer),
            pick(Split::Train, Domain::Shop),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub num_query: usize,
    pub num_gallery: usize,
    pub result: EvalResult,
    pub reranked: Option<EvalResult>,
}

impl EvalReport {
    /// The re-ranked result when present, else the plain one.
    pub fn primary(&self) -> &EvalResult {
        self.reranked.as_ref().unwrap_or(&self.result)
    }
}

/// Distances, optional re-ranking and CMC/mAP for two stores.
pub fn evaluate_stores(
    protocol: Protocol,
    query: &EmbeddingStore,
    gallery: &EmbeddingStore,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let qp = query.pids();
    let gp = gallery.pids();
    let dist = distance_matrix(query, gallery)?;
    let result = compute_cmc_map(&dist, &qp, &gp, settings.k_max)?;
    let reranked = if settings.rerank {
        let params = RerankParams {
            k1: settings.k1,
            k2: settings.k2,
            lambda: settings.lambda,
        };
        let d = k_reciprocal_rerank(query, gallery, params)?;
        Some(compute_cmc_map(&d, &qp, &gp, settings.k_max)?)
    } else {
        None
    };
    Ok(EvalReport {
        protocol,
        num_query: query.len(),
        num_gallery: gallery.len(),
        result,
        reranked,
    })
}

/// Splits an extracted store into query and gallery stores by record index.
pub fn subset(store: &EmbeddingStore, rows: &[usize]) -> Result<EmbeddingStore> {
    let mut out = EmbeddingStore::new(store.dim, store.normalized);
    for &r in rows {
        let m = &store.meta[r];
        out.push(store.row(r), m.pid, m.domain, m.path.clone())?;
    }
    Ok(out)
}
