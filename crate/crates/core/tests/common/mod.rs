//! Shared helpers for the integration tests: seeded random data, brute-force
//! oracles written straight from the loss and metric definitions, and a
//! central-difference gradient checker.

#![allow(dead_code)]

use std::collections::BTreeSet;

use candle_core::{DType, Device, Shape, Tensor, Var};
use mmfl::eval::DistanceMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard-normal f64 tensor.
pub fn randn<S: Into<Shape>>(rng: &mut ChaCha8Rng, shape: S) -> Tensor {
    let shape = shape.into();
    let data = normal_vec(rng, shape.elem_count());
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// `k` identities with `per` samples each, in blocks.
pub fn block_pids(k: usize, per: usize) -> Vec<u64> {
    (0..k).flat_map(|p| std::iter::repeat_n(p as u64, per)).collect()
}

// ---------------------------------------------------------------- loss oracles

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Hardest-positive minus hardest-negative hinge per anchor, summed, on L2-normalized rows.
pub fn oracle_trihard(features: &[Vec<f64>], pids: &[u64], margin: f64) -> f64 {
    let f: Vec<Vec<f64>> = features.iter().map(|r| normalize(r)).collect();
    let mut total = 0.0;
    for a in 0..f.len() {
        let mut hardest_pos = f64::NEG_INFINITY;
        let mut hardest_neg = f64::INFINITY;
        for b in 0..f.len() {
            let d = euclid(&f[a], &f[b]);
            if pids[a] == pids[b] {
                hardest_pos = hardest_pos.max(d);
            } else {
                hardest_neg = hardest_neg.min(d);
            }
        }
        total += (hardest_pos - hardest_neg + margin).max(0.0);
    }
    total
}

pub fn oracle_center(features: &[Vec<f64>], labels: &[usize], centers: &[Vec<f64>]) -> f64 {
    features
        .iter()
        .zip(labels)
        .map(|(f, &l)| f.iter().zip(&centers[l]).map(|(x, c)| (x - c).powi(2)).sum::<f64>())
        .sum::<f64>()
        * 0.5
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Cross-entropy against the smoothed distribution `q'`, averaged over rows.
pub fn oracle_lsr_smoothed(logits: &[Vec<f64>], targets: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (z, &t) in logits.iter().zip(targets) {
        let k = z.len() as f64;
        let logp = log_softmax(z);
        for (i, lp) in logp.iter().enumerate() {
            let q = if i == t { 1.0 - eps + eps / k } else { eps / k };
            total -= q * lp;
        }
    }
    total / logits.len() as f64
}

/// `(1 - eps) H(q, p) + eps H(u, p)`, averaged over rows.
pub fn oracle_lsr_decomposed(logits: &[Vec<f64>], targets: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    for (z, &t) in logits.iter().zip(targets) {
        let logp = log_softmax(z);
        let h_q = -logp[t];
        let h_u = -logp.iter().sum::<f64>() / z.len() as f64;
        total += (1.0 - eps) * h_q + eps * h_u;
    }
    total / logits.len() as f64
}

/// `-z_t + log sum_j exp(z_j)`, averaged over rows.
pub fn oracle_ce(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(z, &t)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            -z[t] + m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .sum::<f64>()
        / logits.len() as f64
}

// -------------------------------------------------------------- metric oracles

/// mAP, CMC and the number of queries without any match, by counting.
pub struct BruteEval {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub excluded: usize,
}

/// Rank of gallery item `g` for query row `d`: items strictly closer, or equally close with a lower index, come first.
fn rank_of(d: &[f64], g: usize) -> usize {
    (0..d.len()).filter(|&o| d[o] < d[g] || (d[o] == d[g] && o < g)).count() + 1
}

pub fn brute_eval(dist: &[Vec<f64>], qp: &[u64], gp: &[u64], k_max: usize) -> BruteEval {
    let mut aps = Vec::new();
    let mut hits = vec![0usize; k_max];
    let mut excluded = 0;
    for (q, d) in dist.iter().enumerate() {
        let rel: Vec<usize> = (0..gp.len()).filter(|&g| gp[g] == qp[q]).collect();
        if rel.is_empty() {
            excluded += 1;
            continue;
        }
        let mut ranks: Vec<usize> = rel.iter().map(|&g| rank_of(d, g)).collect();
        ranks.sort_unstable();
        let mut ap = 0.0;
        for &r in &ranks {
            let better = ranks.iter().filter(|&&o| o <= r).count();
            ap += better as f64 / r as f64;
        }
        aps.push(ap / rel.len() as f64);
        let best = *ranks.iter().min().unwrap();
        for (k, h) in hits.iter_mut().enumerate() {
            if best <= k + 1 {
                *h += 1;
            }
        }
    }
    let n = aps.len().max(1) as f64;
    BruteEval {
        map: aps.iter().sum::<f64>() / n,
        cmc: hits.iter().map(|&h| h as f64 / n).collect(),
        excluded,
    }
}

// -------------------------------------------------------------- rerank oracle

fn sorted_neighbours(d: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap().then(a.cmp(&b)));
    idx
}

fn k_reciprocal(ranks: &[Vec<usize>], i: usize, k: usize) -> BTreeSet<usize> {
    let forward: BTreeSet<usize> = ranks[i][..=k].iter().copied().collect();
    forward
        .into_iter()
        .filter(|&j| ranks[j][..=k].contains(&i))
        .collect()
}

/// k-reciprocal re-ranking written from its definition: reciprocal sets, 2/3 expansion,
/// Gaussian-kernel encodings, local query expansion and the min/max Jaccard distance.
pub fn oracle_rerank(joint: &[Vec<f64>], num_query: usize, k1: usize, k2: usize, lambda: f64) -> Vec<Vec<f64>> {
    let n = joint.len();
    let d: Vec<Vec<f64>> = joint
        .iter()
        .map(|r| {
            let m = r.iter().cloned().fold(0.0, f64::max);
            r.iter().map(|v| v / m).collect()
        })
        .collect();
    let ranks: Vec<Vec<usize>> = d.iter().map(|r| sorted_neighbours(r)).collect();
    let half = ((k1 as f64) / 2.0).round_ties_even() as usize;
    let mut enc = vec![vec![0.0; n]; n];
    for i in 0..n {
        let r = k_reciprocal(&ranks, i, k1);
        let mut expanded = r.clone();
        for &c in &r {
            let rc = k_reciprocal(&ranks, c, half);
            let common = rc.intersection(&r).count();
            if 3 * common > 2 * rc.len() {
                expanded.extend(rc);
            }
        }
        let z: f64 = expanded.iter().map(|&j| (-d[i][j]).exp()).sum();
        for &j in &expanded {
            enc[i][j] = (-d[i][j]).exp() / z;
        }
    }
    let enc: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| ranks[i][..k2].iter().map(|&nb| enc[nb][j]).sum::<f64>() / k2 as f64)
                .collect()
        })
        .collect();
    (0..num_query)
        .map(|q| {
            (num_query..n)
                .map(|g| {
                    let mins: f64 = (0..n).map(|j| enc[q][j].min(enc[g][j])).sum();
                    let maxs: f64 = (0..n).map(|j| enc[q][j].max(enc[g][j])).sum();
                    (1.0 - lambda) * (1.0 - mins / maxs) + lambda * d[q][g]
                })
                .collect()
        })
        .collect()
}

pub fn matrix_rows(m: &DistanceMatrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|i| m.row(i).to_vec()).collect()
}

// ------------------------------------------------------------- gradient check

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely (rounding noise dominates).
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn values(v: &Var) -> Vec<f64> {
    v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn assign(v: &Var, data: &[f64]) {
    let t = Tensor::from_vec(data.to_vec(), v.shape(), v.device()).unwrap();
    v.set(&t.to_dtype(v.dtype()).unwrap()).unwrap();
}

/// Compares backprop against central differences for up to `samples` entries of every
/// variable in `vars`. Non-scalar outputs are reduced with a fixed random projection.
pub fn grad_check(vars: &[(String, Var)], f: &dyn Fn() -> mmfl::Result<Tensor>, samples: usize, seed: u64) -> GradReport {
    let mut r = rng(seed);
    let out = f().unwrap();
    let proj = if out.rank() == 0 { None } else { Some(randn(&mut r, out.shape().clone())) };
    let loss = || -> Tensor {
        let o = f().unwrap();
        match &proj {
            None => o,
            Some(p) => (o * p).unwrap().sum_all().unwrap(),
        }
    };
    let grads = loss().backward().unwrap();
    let mut report = GradReport {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for (name, var) in vars {
        let base = values(var);
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; base.len()],
        };
        let picks: Vec<usize> = if base.len() <= samples {
            (0..base.len()).collect()
        } else {
            (0..samples).map(|_| r.random_range(0..base.len())).collect()
        };
        for i in picks {
            let mut v = base.clone();
            v[i] = base[i] + GRAD_STEP;
            assign(var, &v);
            let up = scalar(&loss());
            v[i] = base[i] - GRAD_STEP;
            assign(var, &v);
            let down = scalar(&loss());
            assign(var, &base);
            let numeric = (up - down) / (2.0 * GRAD_STEP);
            let e = rel_error(analytic[i], numeric);
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.worst_at = format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", analytic[i]);
            }
        }
    }
    report
}

/// Every trainable parameter of a store plus the given inputs.
pub fn check_vars(store: &mmfl::nn::ParamStore, inputs: &[(&str, &Var)]) -> Vec<(String, Var)> {
    let mut v: Vec<(String, Var)> = inputs.iter().map(|(n, v)| (n.to_string(), (*v).clone())).collect();
    v.extend(store.trainable().map(|p| (p.name.clone(), p.var.clone())));
    v
}
