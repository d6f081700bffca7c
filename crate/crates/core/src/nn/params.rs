use std::collections::HashMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MmflError, Result};

/// Role of a stored tensor; decides training and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Convolution / linear kernels.
    Weight,
    Bias,
    /// Normalization scale and shift.
    Norm,
    /// Learnable fusion scalars of the bidirectional pyramid.
    Fusion,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

/// Named, ordered tensors of a model with seeded initialization.
#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            dtype,
            device,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, kind: ParamKind) -> Result<Var> {
        if self.index.contains_key(name) {
            return Err(MmflError::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?)?;
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            var: var.clone(),
            kind,
        });
        Ok(var)
    }

    pub fn normal<S: Into<Shape>>(&mut self, name: &str, shape: S, std: f64, kind: ParamKind) -> Result<Var> {
        let shape: Shape = shape.into();
        let data: Vec<f64> = (0..shape.elem_count())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.add(name, t, kind)
    }

    /// Fan-in scaled normal initialization, `std = sqrt(2 / fan_in)`.
    pub fn kaiming<S: Into<Shape>>(&mut self, name: &str, shape: S, fan_in: usize) -> Result<Var> {
        self.normal(name, shape, (2.0 / fan_in.max(1) as f64).sqrt(), ParamKind::Weight)
    }

    pub fn constant<S: Into<Shape>>(&mut self, name: &str, shape: S, value: f64, kind: ParamKind) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.add(name, t, kind)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.kind.trainable())
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().map(|p| p.var.elem_count()).sum()
    }

    /// Detached copies of every stored tensor, in registration order.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.params
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites every stored tensor from `tensors`, which must contain all names with matching shapes.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for p in &self.params {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| MmflError::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.dims() != p.var.dims() {
                return Err(MmflError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Re-samples every trainable tensor from `N(0, std^2)`; used to probe blocks away from their initial point.
    pub fn randomize(&self, seed: u64, std: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.trainable() {
            let n = p.var.elem_count();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            let t = Tensor::from_vec(data, p.var.shape(), &self.device)?.to_dtype(self.dtype)?;
            p.var.set(&t)?;
        }
        Ok(())
    }
}
