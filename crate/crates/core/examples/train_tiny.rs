//! Trains the tiny preset on an in-memory synthetic dataset and evaluates
//! consumer-to-shop retrieval on the training identities.
//!
//! cargo run --release -p mmfl --example train_tiny [key=value ...]

use std::time::Instant;

use mmfl::data::{render_synthetic_dataset, AttributeSchema, SyntheticOptions};
use mmfl::settings::resolve;
use mmfl::train::{Dataset, Trainer};

fn main() -> mmfl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut overrides = vec!["preset=tiny".to_string()];
    overrides.extend(std::env::args().skip(1));
    let config = resolve(None, None, &overrides)?.config;
    let schema = AttributeSchema::default();
    let samples = render_synthetic_dataset(&SyntheticOptions::default(), &schema)?;
    let (records, images) = samples.into_iter().map(|s| (s.record, s.image)).unzip();
    let data = Dataset::new(records, images, schema)?;

    let start = Instant::now();
    let mut trainer = Trainer::new(config, data)?;
    let summary = trainer.fit(None)?;
    let report = trainer.evaluate()?;
    let r = report.primary();
    println!(
        "{} epochs, {} steps in {:.1}s: mAP {:.4}, Acc@1 {:.4}, Acc@10 {:.4}",
        summary.epochs,
        summary.steps,
        start.elapsed().as_secs_f64(),
        r.map,
        r.acc_at(1),
        r.acc_at(10)
    );
    Ok(())
}
