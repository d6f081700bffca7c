//! k-means partitioning of a gallery store and cluster-probed exact search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MmflError, Result};
use crate::eval::metrics::cosine_distance;
use crate::eval::store::EmbeddingStore;

pub const MAX_ITERATIONS: usize = 100;

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &c)| (x as f64 - c).powi(2)).sum()
}

fn nearest(row: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(row, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment pass.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm from a seeded farthest-point start; empty clusters keep their centroid.
pub fn kmeans(store: &EmbeddingStore, n_clusters: usize, seed: u64) -> Result<KMeans> {
    let n = store.len();
    if n_clusters == 0 || n_clusters > n {
        return Err(MmflError::Argument(format!(
            "n_clusters must lie in 1..={n}, got {n_clusters}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let to_f64 = |r: &[f32]| r.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut centroids = vec![to_f64(store.row(first))];
    let mut min_d: Vec<f64> = store.rows().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < n_clusters {
        let mut far = 0;
        for i in 1..n {
            if min_d[i] > min_d[far] {
                far = i;
            }
        }
        let c = to_f64(store.row(far));
        for (i, r) in store.rows().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(r, &c));
        }
        centroids.push(c);
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut inertia = 0.0;
        let a = store
            .rows()
            .map(|r| {
                let (c, d) = nearest(r, centroids);
                inertia += d;
                c
            })
            .collect();
        (a, inertia)
    };
    let (mut assignments, inertia) = assign(&centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0f64; store.dim]; n_clusters];
        let mut counts = vec![0usize; n_clusters];
        for (r, &c) in store.rows().zip(&assignments) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(r) {
                *s += v as f64;
            }
        }
        for c in 0..n_clusters {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (next, inertia) = assign(&centroids);
        history.push(inertia);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeans {
        centroids,
        assignments,
        inertia_history: history,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub store: EmbeddingStore,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub probe: usize,
}

/// Serializable part of an index; the store lives in its own file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub store: std::path::PathBuf,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub probe: usize,
}

pub fn build_index(store: EmbeddingStore, n_clusters: usize, seed: u64) -> Result<RetrievalIndex> {
    let km = kmeans(&store, n_clusters, seed)?;
    Ok(RetrievalIndex {
        store,
        centroids: km.centroids,
        assignments: km.assignments,
        probe: 3.min(n_clusters),
    })
}

/// Hit returned by a query: store row and cosine distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub row: usize,
    pub distance: f64,
}

/// Exact cosine ranking over the members of the `probe` clusters nearest to `embedding`.
pub fn query_index(index: &RetrievalIndex, embedding: &[f32], top_k: usize, probe: usize) -> Result<Vec<Hit>> {
    let nc = index.centroids.len();
    if probe == 0 || probe > nc {
        return Err(MmflError::Argument(format!("probe must lie in 1..={nc}, got {probe}")));
    }
    if embedding.len() != index.store.dim {
        return Err(MmflError::Shape(format!(
            "query has dimension {}, index has {}",
            embedding.len(),
            index.store.dim
        )));
    }
    let mut order: Vec<(usize, f64)> = index
        .centroids
        .iter()
        .enumerate()
        .map(|(c, cent)| (c, sq_dist(embedding, cent)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut probed = vec![false; nc];
    for &(c, _) in &order[..probe] {
        probed[c] = true;
    }
    let mut hits: Vec<Hit> = index
        .assignments
        .iter()
        .enumerate()
        .filter(|(_, &c)| probed[c])
        .map(|(row, _)| Hit {
            row,
            distance: cosine_distance(embedding, index.store.row(row)),
        })
        .collect();
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.row.cmp(&b.row)));
    hits.truncate(top_k);
    Ok(hits)
}
