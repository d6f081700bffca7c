//! Adam with bias correction for network parameters and row-masked momentum SGD for class centers.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{MmflError, Result};
use crate::losses::CenterState;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient of decaying parameters.
    pub weight_decay: f64,
}

/// First and second moment estimates, one pair per trainable parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        let mut names = Vec::new();
        let mut m = Vec::new();
        for p in store.trainable() {
            names.push(p.name.clone());
            m.push(p.var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            config,
            names,
            v: m.clone(),
            m,
            step: 0,
        })
    }

    /// One update at learning rate `lr`; parameters without a gradient keep their moments and values.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in store.trainable().enumerate() {
            if self.names.get(i) != Some(&p.name) {
                return Err(MmflError::Checkpoint(format!(
                    "optimizer state does not match parameter {}",
                    p.name
                )));
            }
            let Some(g) = grads.get(p.var.as_tensor()).map(Tensor::detach) else {
                continue;
            };
            let theta = p.var.as_tensor().detach();
            let g = if p.kind.decays() && c.weight_decay != 0.0 {
                (g + (&theta * c.weight_decay)?)?
            } else {
                g
            };
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            if lr != 0.0 {
                p.var.set(&(&theta - (update * lr)?)?)?;
            }
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(())
    }
}

/// Momentum SGD on the rows of `state` whose classes occur in `labels`.
/// The gradient is divided by `grad_scale` first; the trainer passes the center-loss weight times the batch size.
pub fn center_step(
    state: &mut CenterState,
    grads: &GradStore,
    labels: &[usize],
    lr: f64,
    momentum: f64,
    grad_scale: f64,
) -> Result<()> {
    let centers: &Var = &state.centers;
    let Some(g) = grads.get(centers.as_tensor()).map(Tensor::detach) else {
        return Ok(());
    };
    if grad_scale == 0.0 {
        return Ok(());
    }
    let (rows, _) = centers.dims2()?;
    let mut mask = vec![0f64; rows];
    for &l in labels {
        if l < rows {
            mask[l] = 1.0;
        }
    }
    let mask = Tensor::from_vec(mask, (rows, 1), centers.device())?.to_dtype(centers.dtype())?;
    let keep = (mask.ones_like()? - &mask)?;
    let fresh = ((&state.velocity * momentum)? + (g / grad_scale)?)?;
    let velocity = (fresh.broadcast_mul(&mask)? + state.velocity.broadcast_mul(&keep)?)?;
    let moved = (velocity.broadcast_mul(&mask)? * lr)?;
    centers.set(&(centers.as_tensor().detach() - moved)?)?;
    state.velocity = velocity.detach();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use candle_core::{DType, Device};

    fn cfg() -> AdamConfig {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let w = ps.constant("w", 3, 1.0, ParamKind::Weight).unwrap();
        let loss = (w.as_tensor() * 2.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(&ps, cfg()).unwrap();
        adam.step(&ps, &grads, 0.1).unwrap();
        for x in w.as_tensor().to_vec1::<f64>().unwrap() {
            assert!((x - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lr_keeps_bits() {
        let mut ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let w = ps.normal("w", (4, 4), 1.0, ParamKind::Weight).unwrap();
        let before = w.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(&ps, AdamConfig { weight_decay: 5e-4, ..cfg() }).unwrap();
        adam.step(&ps, &grads, 0.0).unwrap();
        assert_eq!(before, w.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn centers_outside_batch_stay_put() {
        let mut st = CenterState::new(3, 2, 0, DType::F64, &Device::Cpu).unwrap();
        let before = st.centers.as_tensor().to_vec2::<f64>().unwrap();
        let loss = st.centers.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        center_step(&mut st, &grads, &[1], 0.5, 0.9, 1.0).unwrap();
        let after = st.centers.as_tensor().to_vec2::<f64>().unwrap();
        assert_eq!(before[0], after[0]);
        assert_eq!(before[2], after[2]);
        assert_ne!(before[1], after[1]);
        // a second step without class 1 keeps its row fixed despite momentum
        let loss = st.centers.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        center_step(&mut st, &grads, &[0], 0.5, 0.9, 1.0).unwrap();
        let again = st.centers.as_tensor().to_vec2::<f64>().unwrap();
        assert_eq!(after[1], again[1]);
    }
}
