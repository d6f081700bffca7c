//! Renders the synthetic consumer/shop dataset to disk and prints its split counts.
//!
//! cargo run -p mmfl --example synthetic_data -- [out_dir] [holdout_pids]

use std::collections::BTreeMap;
use std::path::PathBuf;

use mmfl::data::{generate_synthetic_dataset, AttributeSchema, SyntheticOptions};

fn main() -> mmfl::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/synthetic".into()));
    let holdout = args.next().and_then(|v| v.parse().ok()).unwrap_or(5);
    let opts = SyntheticOptions {
        holdout_pids: holdout,
        ..Default::default()
    };
    let records = generate_synthetic_dataset(&opts, &AttributeSchema::default(), &out)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *counts.entry(format!("{:?}/{:?}", r.split, r.domain)).or_default() += 1;
    }
    println!("{} images under {}", records.len(), out.display());
    for (k, v) in counts {
        println!("  {k:<20} {v}");
    }
    Ok(())
}
