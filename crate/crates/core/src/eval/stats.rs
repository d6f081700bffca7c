use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::AttributeSchema;
use crate::error::Result;
use crate::model::MmflNet;
use crate::nn::count_macs;

/// Published totals of the full model, for side-by-side reporting.
pub const REFERENCE_PARAMS_M: f64 = 37.33;
pub const REFERENCE_GFLOPS: f64 = 64.23;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub input_size: usize,
    pub num_classes: usize,
    pub params: u64,
    /// Multiply-accumulates of one single-image forward, from layer formulas.
    pub macs: u64,
    pub latency_ms_median: f64,
    pub runs: usize,
    pub reference_params_m: f64,
    pub reference_gflops: f64,
}

/// Parameter count, MACs and median single-image latency over `runs` timed forwards after one warm-up.
pub fn report_model_stats(config: &ModelConfig, num_classes: usize, runs: usize, seed: u64) -> Result<ModelStats> {
    let device = Device::Cpu;
    let net = MmflNet::new(config, &AttributeSchema::default(), num_classes, seed, DType::F32, &device)?;
    let params = net.store.num_trainable_elements() as u64;
    let s = config.input_size;
    let x = Tensor::zeros((1, 3, s, s), DType::F32, &device)?;
    let (out, macs) = count_macs(|| net.forward(&x, false));
    out?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        net.forward(&x, false)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median = match times.len() {
        0 => 0.0,
        n if n % 2 == 1 => times[n / 2],
        n => (times[n / 2 - 1] + times[n / 2]) / 2.0,
    };
    Ok(ModelStats {
        input_size: s,
        num_classes,
        params,
        macs,
        latency_ms_median: median,
        runs,
        reference_params_m: REFERENCE_PARAMS_M,
        reference_gflops: REFERENCE_GFLOPS,
    })
}
