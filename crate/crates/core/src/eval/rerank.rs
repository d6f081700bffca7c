//! k-reciprocal re-ranking: blends each query's distances with a Jaccard distance
//! between soft k-reciprocal neighbour sets over the joint query and gallery set.

use crate::error::{MmflError, Result};
use crate::eval::metrics::{cosine_distance, rank_ascending, DistanceMatrix};
use crate::eval::store::EmbeddingStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

fn reciprocal_neighbours(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..=k]
        .iter()
        .copied()
        .filter(|&c| rank[c][..=k].contains(&i))
        .collect()
}

/// Re-ranks with an explicit joint distance matrix over `num_query` queries followed by the gallery.
pub fn rerank_from_joint(joint: &DistanceMatrix, num_query: usize, params: RerankParams) -> Result<DistanceMatrix> {
    let n = joint.rows;
    let g = n - num_query;
    let RerankParams { k1, k2, lambda } = params;
    if k1 <= k2 {
        return Err(MmflError::Argument(format!("re-ranking needs k1 > k2, got k1={k1} k2={k2}")));
    }
    if k1 >= g {
        return Err(MmflError::Argument(format!(
            "re-ranking needs k1 < gallery size, got k1={k1} with {g} gallery items"
        )));
    }
    if k2 == 0 {
        return Err(MmflError::Argument("re-ranking needs k2 >= 1".into()));
    }

    let mut dist = vec![vec![0f64; n]; n];
    for (i, row) in dist.iter_mut().enumerate() {
        let max = joint.row(i).iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { max } else { 1.0 };
        for (j, v) in row.iter_mut().enumerate() {
            *v = joint.get(i, j) / scale;
        }
    }
    let rank: Vec<Vec<usize>> = dist.iter().map(|r| rank_ascending(r)).collect();
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;

    let mut v = vec![vec![0f64; n]; n];
    for i in 0..n {
        let recip = reciprocal_neighbours(&rank, i, k1);
        let mut expansion = recip.clone();
        for &c in &recip {
            let cand = reciprocal_neighbours(&rank, c, half);
            let overlap = cand.iter().filter(|x| recip.contains(x)).count();
            if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expansion.extend(cand);
            }
        }
        expansion.sort_unstable();
        expansion.dedup();
        let weights: Vec<f64> = expansion.iter().map(|&j| (-dist[i][j]).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in expansion.iter().zip(weights) {
            v[i][j] = w / total;
        }
    }

    if k2 != 1 {
        let mut qe = vec![vec![0f64; n]; n];
        for i in 0..n {
            for &nb in &rank[i][..k2] {
                for j in 0..n {
                    qe[i][j] += v[nb][j];
                }
            }
            for x in qe[i].iter_mut() {
                *x /= k2 as f64;
            }
        }
        v = qe;
    }

    let inv: Vec<Vec<usize>> = (0..n).map(|j| (0..n).filter(|&i| v[i][j] != 0.0).collect()).collect();
    let mut out = Vec::with_capacity(num_query * g);
    for i in 0..num_query {
        let mut temp_min = vec![0f64; n];
        for j in (0..n).filter(|&j| v[i][j] != 0.0) {
            for &other in &inv[j] {
                temp_min[other] += v[i][j].min(v[other][j]);
            }
        }
        for gj in num_query..n {
            let jaccard = 1.0 - temp_min[gj] / (2.0 - temp_min[gj]);
            out.push(jaccard * (1.0 - lambda) + dist[i][gj] * lambda);
        }
    }
    Ok(DistanceMatrix {
        rows: num_query,
        cols: g,
        data: out,
    })
}

/// Re-ranked query × gallery distances from cosine distances over both stores.
pub fn k_reciprocal_rerank(query: &EmbeddingStore, gallery: &EmbeddingStore, params: RerankParams) -> Result<DistanceMatrix> {
    if query.dim != gallery.dim && !query.is_empty() && !gallery.is_empty() {
        return Err(MmflError::Shape(format!(
            "query dimension {} differs from gallery dimension {}",
            query.dim, gallery.dim
        )));
    }
    let q = query.len();
    let row = |i: usize| if i < q { query.row(i) } else { gallery.row(i - q) };
    let n = q + gallery.len();
    let joint = DistanceMatrix::from_fn(n, n, |i, j| cosine_distance(row(i), row(j)));
    rerank_from_joint(&joint, q, params)
}
