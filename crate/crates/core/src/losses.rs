//! Batch-hard triplet, center, label-smoothed and plain cross-entropy losses
//! and their weighted multi-task total.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MmflError, Result};
use crate::model::ModelOutput;
use crate::nn::layers::l2_normalize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma_triplet: f64,
    pub beta_center: f64,
    pub margin: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_triplet: 1.5,
            beta_center: 0.0005,
            margin: 0.3,
            epsilon: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(MmflError::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(MmflError::Config(format!(
                "label smoothing epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        if self.gamma_triplet < 0.0 || self.beta_center < 0.0 {
            return Err(MmflError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn pid_mask(pids: &[u64], dtype: DType, device: &Device) -> Result<Tensor> {
    let n = pids.len();
    let data: Vec<f64> = (0..n * n)
        .map(|k| if pids[k / n] == pids[k % n] { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(data, (n, n), device)?.to_dtype(dtype)?)
}

/// Euclidean distances between all rows, `sqrt(max(d^2, 1e-12))` off the diagonal and exactly 0 on it.
pub fn pairwise_euclidean(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    let sq = x.sqr()?.sum_keepdim(1)?;
    let gram = x.matmul(&x.t()?)?;
    let d2 = sq.broadcast_add(&sq.t()?)?.sub(&(gram * 2.0)?)?;
    let off_diag = (Tensor::ones((n, n), x.dtype(), x.device())? - Tensor::eye(n, x.dtype(), x.device())?)?;
    Ok(d2.maximum(1e-12)?.sqrt()?.mul(&off_diag)?)
}

/// Batch-hard triplet loss on L2-normalized features, summed over anchors.
pub fn trihard_loss(features: &Tensor, pids: &[u64], margin: f64) -> Result<Tensor> {
    let (n, _) = features.dims2()?;
    if n != pids.len() {
        return Err(MmflError::Shape(format!("{n} features but {} pids", pids.len())));
    }
    for (i, p) in pids.iter().enumerate() {
        if pids.iter().all(|q| q == p) {
            return Err(MmflError::Argument(format!(
                "anchor {i} has no negative in the batch"
            )));
        }
    }
    let f = l2_normalize(features)?;
    let dist = pairwise_euclidean(&f)?;
    let pos = pid_mask(pids, f.dtype(), f.device())?;
    let hardest_pos = dist.mul(&pos)?.max(D::Minus1)?;
    // positives are pushed beyond every negative distance (at most 2 on the unit sphere)
    let hardest_neg = (dist + (pos * 10.0)?)?.min(D::Minus1)?;
    let hinge = ((hardest_pos - hardest_neg)? + margin)?.relu()?;
    Ok(hinge.sum_all()?)
}

/// `0.5 * sum_j ||F_j - c_{y_j}||^2`.
pub fn center_loss(features: &Tensor, labels: &[usize], centers: &Tensor) -> Result<Tensor> {
    let (n, d) = features.dims2()?;
    let (c, dc) = centers.dims2()?;
    if n != labels.len() || d != dc {
        return Err(MmflError::Shape(format!(
            "center loss got {n}×{d} features, {} labels, {c}×{dc} centers",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(MmflError::Argument(format!("label {bad} has no center (only {c})")));
    }
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), n, features.device())?;
    let picked = centers.index_select(&idx, 0)?;
    Ok((features.sub(&picked)?.sqr()?.sum_all()? * 0.5)?)
}

fn check_targets(k: usize, targets: impl Iterator<Item = usize>) -> Result<()> {
    for t in targets {
        if t >= k {
            return Err(MmflError::Argument(format!("target {t} out of range for {k} classes")));
        }
    }
    Ok(())
}

fn one_hot(targets: &[usize], k: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; targets.len() * k];
    for (i, &t) in targets.iter().enumerate() {
        data[i * k + t] = 1.0;
    }
    Ok(Tensor::from_vec(data, (targets.len(), k), device)?.to_dtype(dtype)?)
}

/// Smoothed target distribution: `(1 - eps)` on the target plus `eps / K` everywhere.
pub fn smoothed_targets(targets: &[usize], k: usize, epsilon: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    check_targets(k, targets.iter().copied())?;
    Ok(((one_hot(targets, k, dtype, device)? * (1.0 - epsilon))? + epsilon / k as f64)?)
}

/// Per-row `-sum_k q'_k log softmax(z)_k`, `(B,)`.
pub fn lsr_per_sample(logits: &Tensor, targets: &[usize], epsilon: f64) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != targets.len() {
        return Err(MmflError::Shape(format!("{b} logit rows but {} targets", targets.len())));
    }
    if k < 2 {
        return Err(MmflError::Argument("label smoothing needs at least 2 classes".into()));
    }
    let q = smoothed_targets(targets, k, epsilon, logits.dtype(), logits.device())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(q.mul(&logp)?.sum(D::Minus1)?.neg()?)
}

/// Label-smoothed cross-entropy averaged over rows whose target is present.
/// Returns `None` when no row carries a target.
pub fn lsr_loss(logits: &Tensor, targets: &[Option<usize>], epsilon: f64) -> Result<Option<Tensor>> {
    let k = logits.dim(D::Minus1)?;
    check_targets(k, targets.iter().flatten().copied())?;
    let rows: Vec<u32> = (0..targets.len())
        .filter(|&i| targets[i].is_some())
        .map(|i| i as u32)
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let present: Vec<usize> = targets.iter().flatten().copied().collect();
    let idx = Tensor::from_vec(rows.clone(), rows.len(), logits.device())?;
    let sel = logits.index_select(&idx, 0)?;
    Ok(Some(lsr_per_sample(&sel, &present, epsilon)?.mean_all()?))
}

/// Per-row `-z_t + log sum_j exp(z_j)`, `(B,)`.
pub fn ce_per_sample(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != targets.len() {
        return Err(MmflError::Shape(format!("{b} logit rows but {} targets", targets.len())));
    }
    check_targets(k, targets.iter().copied())?;
    let onehot = one_hot(targets, k, logits.dtype(), logits.device())?;
    let z_t = logits.mul(&onehot)?.sum(D::Minus1)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = logits
        .broadcast_sub(&max)?
        .exp()?
        .sum_keepdim(D::Minus1)?
        .log()?
        .add(&max)?
        .squeeze(D::Minus1)?;
    Ok((lse - z_t)?)
}

/// Cross-entropy averaged over the batch.
pub fn ce_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    Ok(ce_per_sample(logits, targets)?.mean_all()?)
}

/// Scalar loss values for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub lsr: f64,
    pub ce: f64,
    pub triplet: f64,
    pub center: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.lsr, self.ce, self.triplet, self.center, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// The four loss terms as graph tensors.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub lsr: Tensor,
    pub ce: Tensor,
    pub triplet: Tensor,
    pub center: Tensor,
}

/// `L_lsr + L_ce + gamma * L_triplet + beta * L_center`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    let total = ((&c.lsr + &c.ce)? + (&c.triplet * w.gamma_triplet)?)?.add(&(&c.center * w.beta_center)?)?;
    let report = LossReport {
        lsr: scalar(&c.lsr)?,
        ce: scalar(&c.ce)?,
        triplet: scalar(&c.triplet)?,
        center: scalar(&c.center)?,
        total: scalar(&total)?,
    };
    Ok((total, report))
}

/// Per-sample training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub pids: Vec<u64>,
    /// Class index of each pid in the classifier.
    pub labels: Vec<usize>,
    /// `[sample][attribute type]`.
    pub attributes: Vec<Vec<Option<usize>>>,
}

impl BatchTargets {
    fn attribute_column(&self, t: usize) -> Vec<Option<usize>> {
        self.attributes.iter().map(|a| a.get(t).copied().flatten()).collect()
    }
}

fn zero_like_scalar(reference: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), reference.dtype(), reference.device())?)
}

/// Mean label-smoothed loss over every (branch, attribute) head that has at least one target.
pub fn attribute_loss(output: &ModelOutput, targets: &BatchTargets, epsilon: f64) -> Result<Tensor> {
    let mut terms = Vec::new();
    for branch in &output.attributes {
        for (t, logp) in branch.iter().enumerate() {
            if let Some(l) = lsr_loss(logp, &targets.attribute_column(t), epsilon)? {
                terms.push(l);
            }
        }
    }
    if terms.is_empty() {
        return zero_like_scalar(&output.pid[0].logits);
    }
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// Mean cross-entropy over the four PID heads.
pub fn pid_loss(output: &ModelOutput, labels: &[usize]) -> Result<Tensor> {
    let terms = output
        .pid
        .iter()
        .map(|p| ce_loss(&p.logits, labels))
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// Per-class feature centers with their own momentum buffer.
#[derive(Debug, Clone)]
pub struct CenterState {
    pub centers: Var,
    pub velocity: Tensor,
}

impl CenterState {
    /// Centers drawn from `N(0, 1/dim)` so their norms start near the unit sphere.
    pub fn new(num_classes: usize, dim: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dim.max(1) as f64).sqrt();
        let data: Vec<f64> = (0..num_classes * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        let t = Tensor::from_vec(data, (num_classes, dim), device)?.to_dtype(dtype)?;
        Ok(Self {
            velocity: t.zeros_like()?,
            centers: Var::from_tensor(&t)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.dim(0).unwrap_or(0)
    }
}

/// Every loss term for one forward pass, using the normalized metric feature for both metric losses.
pub fn compute_losses(
    output: &ModelOutput,
    targets: &BatchTargets,
    centers: &CenterState,
    weights: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let f = l2_normalize(&output.bundle.f_metric)?;
    let components = LossComponents {
        lsr: attribute_loss(output, targets, weights.epsilon)?,
        ce: pid_loss(output, &targets.labels)?,
        triplet: trihard_loss(&f, &targets.pids, weights.margin)?,
        center: center_loss(&f, &targets.labels, centers.centers.as_tensor())?,
    };
    total_loss(&components, weights)
}
