//! Builds the full-size network and prints the shape of every intermediate
//! the branches and heads consume for a 2×3×320×320 batch.
//!
//! cargo run --release -p mmfl --example full_shapes

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use mmfl::config::ModelConfig;
use mmfl::data::AttributeSchema;
use mmfl::MmflNet;

fn main() -> mmfl::Result<()> {
    let start = Instant::now();
    let net = MmflNet::new(&ModelConfig::full(), &AttributeSchema::default(), 1000, 0, DType::F32, &Device::Cpu)?;
    let x = Tensor::randn(0f32, 1.0, (2, 3, 320, 320), &Device::Cpu)?;
    let stages = net.backbone.forward(&x, false)?;
    for (name, t) in ["C2", "C3", "C4", "C5"].iter().zip(stages.stages()) {
        println!("{name:<10} {:?}", t.dims());
    }
    let out = net.forward(&x, false)?;
    let b = &out.bundle;
    let rows = [
        ("x_g", out.fused.x_g.dims().to_vec()),
        ("x_part", out.fused.x_part.dims().to_vec()),
        ("z_g", b.z_g.dims().to_vec()),
        ("z_ph_flat", b.horizontal.z_flat.dims().to_vec()),
        ("z_pv_flat", b.vertical.z_flat.dims().to_vec()),
        ("lras", b.lras.descriptor.dims().to_vec()),
        ("F_metric", b.f_metric.dims().to_vec()),
        ("embedding", out.embedding()?.dims().to_vec()),
    ];
    for (name, dims) in rows {
        println!("{name:<10} {dims:?}");
    }
    println!("{} trainable parameters, {:.1}s", net.store.num_trainable_elements(), start.elapsed().as_secs_f64());
    Ok(())
}
