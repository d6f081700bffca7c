use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{MmflError, Result};

/// A mixed batch: sample `i` is `lambda * x[i] + (1 - lambda) * x[partner[i]]`.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub images: Tensor,
    pub lambda: f64,
    pub partner: Vec<usize>,
}

/// Weighted label pair for one mixed sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedTarget {
    pub a: usize,
    pub b: usize,
    pub weight_a: f64,
}

impl MixedBatch {
    pub fn mix_targets(&self, targets: &[usize]) -> Vec<MixedTarget> {
        targets
            .iter()
            .zip(&self.partner)
            .map(|(&a, &j)| MixedTarget {
                a,
                b: targets[j],
                weight_a: self.lambda,
            })
            .collect()
    }

    /// Partner-permuted targets, for use with any per-sample label array.
    pub fn partner_targets<T: Clone>(&self, targets: &[T]) -> Vec<T> {
        self.partner.iter().map(|&j| targets[j].clone()).collect()
    }
}

/// Draws `lambda ~ Beta(alpha, alpha)` and a random partner permutation.
pub fn mixup(images: &Tensor, alpha: f64, seed: u64) -> Result<MixedBatch> {
    if !(alpha > 0.0) {
        return Err(MmflError::Argument(format!("mixup alpha must be positive, got {alpha}")));
    }
    let b = images.dim(0)?;
    if b < 2 {
        return Err(MmflError::Argument("mixup needs a batch of at least two".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Beta::new(alpha, alpha).map_err(|e| MmflError::Argument(e.to_string()))?;
    let lambda = beta.sample(&mut rng);
    let mut partner: Vec<usize> = (0..b).collect();
    partner.shuffle(&mut rng);
    mixup_with(images, lambda, partner)
}

pub fn mixup_with(images: &Tensor, lambda: f64, partner: Vec<usize>) -> Result<MixedBatch> {
    let idx = Tensor::from_vec(
        partner.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        partner.len(),
        images.device(),
    )?;
    let shuffled = images.index_select(&idx, 0)?;
    let mixed = ((images * lambda)? + (shuffled * (1.0 - lambda))?)?;
    Ok(MixedBatch {
        images: mixed,
        lambda,
        partner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn lambda_one_is_identity() {
        let x = Tensor::arange(0f32, 24., &Device::Cpu)
            .unwrap()
            .reshape((4, 6))
            .unwrap();
        let m = mixup_with(&x, 1.0, vec![3, 2, 1, 0]).unwrap();
        assert_eq!(
            m.images.to_vec2::<f32>().unwrap(),
            x.to_vec2::<f32>().unwrap()
        );
    }

    #[test]
    fn half_mix_of_constants() {
        let zeros = Tensor::zeros((1, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::cat(&[&zeros, &ones], 0).unwrap();
        let m = mixup_with(&x, 0.5, vec![1, 0]).unwrap();
        let v: Vec<f32> = m.images.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn mixed_targets() {
        let x = Tensor::zeros((2, 1), DType::F32, &Device::Cpu).unwrap();
        let m = mixup_with(&x, 0.7, vec![1, 0]).unwrap();
        let t = m.mix_targets(&[4, 9]);
        assert_eq!(t[0], MixedTarget { a: 4, b: 9, weight_a: 0.7 });
    }

    #[test]
    fn invalid_alpha() {
        let x = Tensor::zeros((2, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(mixup(&x, 0.0, 1).is_err());
        assert!(mixup(&x, 0.4, 1).is_ok());
    }
}
