//! Cosine distances and CMC / mAP evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{MmflError, Result};
use crate::eval::store::EmbeddingStore;

/// Dense `rows × cols` distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column indices of row `i`, ascending by distance with ties broken by index.
    pub fn ranking(&self, i: usize) -> Vec<usize> {
        rank_ascending(self.row(i))
    }
}

pub fn rank_ascending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// `1 - a·b`, accumulated in f64 and clamped to [0, 2].
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (1.0 - dot).clamp(0.0, 2.0)
}

pub fn distance_matrix(query: &EmbeddingStore, gallery: &EmbeddingStore) -> Result<DistanceMatrix> {
    if !query.is_empty() && !gallery.is_empty() && query.dim != gallery.dim {
        return Err(MmflError::Shape(format!(
            "query dimension {} differs from gallery dimension {}",
            query.dim, gallery.dim
        )));
    }
    Ok(DistanceMatrix::from_fn(query.len(), gallery.len(), |i, j| {
        cosine_distance(query.row(i), gallery.row(j))
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k-1]` is Acc@k.
    pub cmc: Vec<f64>,
    /// Average precision of each evaluated query, in query order.
    pub aps: Vec<f64>,
    pub num_queries: usize,
    /// Queries without any gallery match; they are left out of every average.
    pub excluded_queries: Vec<usize>,
}

impl EvalResult {
    pub fn acc_at(&self, k: usize) -> f64 {
        if self.cmc.is_empty() || k == 0 {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

/// Acc@1..=k_max and mAP; queries with no relevant gallery item are excluded and listed.
pub fn compute_cmc_map(
    dist: &DistanceMatrix,
    query_pids: &[u64],
    gallery_pids: &[u64],
    k_max: usize,
) -> Result<EvalResult> {
    if query_pids.len() != dist.rows || gallery_pids.len() != dist.cols {
        return Err(MmflError::Shape(format!(
            "distance matrix is {}×{} but got {} query and {} gallery pids",
            dist.rows,
            dist.cols,
            query_pids.len(),
            gallery_pids.len()
        )));
    }
    let mut hits = vec![0usize; k_max];
    let mut aps = Vec::new();
    let mut excluded = Vec::new();
    for (q, &qp) in query_pids.iter().enumerate() {
        let order = dist.ranking(q);
        let relevant: Vec<bool> = order.iter().map(|&g| gallery_pids[g] == qp).collect();
        let total = relevant.iter().filter(|&&r| r).count();
        if total == 0 {
            excluded.push(q);
            continue;
        }
        let first = relevant.iter().position(|&r| r).expect("has a match");
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
        let mut found = 0usize;
        let mut sum = 0.0;
        for (rank, &r) in relevant.iter().enumerate() {
            if r {
                found += 1;
                sum += found as f64 / (rank + 1) as f64;
            }
        }
        aps.push(sum / total as f64);
    }
    let n = aps.len();
    let denom = n.max(1) as f64;
    Ok(EvalResult {
        map: aps.iter().sum::<f64>() / denom,
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        aps,
        num_queries: n,
        excluded_queries: excluded,
    })
}
