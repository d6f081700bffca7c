//! Attribute accuracy and macro scores of an untrained tiny model on synthetic images.
//!
//! cargo run --release -p mmfl --example attribute_metrics

use candle_core::{DType, Device};
use mmfl::config::ModelConfig;
use mmfl::data::{render_synthetic_dataset, AttributeSchema, Preprocessor, SyntheticOptions};
use mmfl::eval::{attribute_metrics, extract};
use mmfl::MmflNet;

fn main() -> mmfl::Result<()> {
    let schema = AttributeSchema::default();
    let samples = render_synthetic_dataset(&SyntheticOptions::default(), &schema)?;
    let (records, images): (Vec<_>, Vec<_>) = samples.into_iter().map(|s| (s.record, s.image)).unzip();
    let cfg = ModelConfig::tiny();
    let net = MmflNet::new(&cfg, &schema, 20, 0, DType::F32, &Device::Cpu)?;
    let pre = Preprocessor::new(cfg.input_size, [128, 128, 128]);
    let ex = extract(&net, &pre, &records, &images, 32)?;
    let mut targets = vec![Vec::new(); schema.num_types()];
    for r in &records {
        for (t, v) in schema.dense_targets(r.attributes.as_ref()).into_iter().enumerate() {
            targets[t].push(v);
        }
    }
    for m in attribute_metrics(&ex.attribute_scores, &targets, &schema, 2)? {
        println!("{}", serde_json::to_string(&m)?);
    }
    Ok(())
}
