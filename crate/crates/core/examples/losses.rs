//! Evaluates each training loss on a hand-made batch of two identities.
//!
//! cargo run -p mmfl --example losses

use candle_core::{Device, Tensor};
use mmfl::losses::{ce_loss, center_loss, lsr_loss, trihard_loss};

fn main() -> mmfl::Result<()> {
    let dev = Device::Cpu;
    let features = Tensor::new(
        &[[1.0f64, 0.0], [0.9, 0.2], [0.0, 1.0], [0.3, 0.9]],
        &dev,
    )?;
    let pids = [7u64, 7, 9, 9];
    let labels = [0usize, 0, 1, 1];
    let centers = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &dev)?;
    let logits = Tensor::new(&[[2.0f64, -1.0], [1.5, 0.0], [-0.5, 1.0], [0.2, 0.1]], &dev)?;
    let attr = [Some(0usize), Some(0), None, Some(1)];

    let show = |name: &str, t: Tensor| -> mmfl::Result<()> {
        println!("{name:<8} {:.6}", t.to_scalar::<f64>()?);
        Ok(())
    };
    show("trihard", trihard_loss(&features, &pids, 0.3)?)?;
    show("center", center_loss(&features, &labels, &centers)?)?;
    show("ce", ce_loss(&logits, &labels)?)?;
    if let Some(l) = lsr_loss(&logits, &attr, 0.1)? {
        show("lsr", l)?;
    }
    Ok(())
}
