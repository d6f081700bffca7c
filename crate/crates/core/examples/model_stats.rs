//! Parameter count, multiply-adds and latency for a preset.
//!
//! cargo run --release -p mmfl --example model_stats -- [tiny|full] [runs]

use mmfl::config::ModelConfig;
use mmfl::eval::report_model_stats;

fn main() -> mmfl::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "tiny".into());
    let runs = args.next().and_then(|r| r.parse().ok()).unwrap_or(5);
    let s = report_model_stats(&ModelConfig::preset(&preset)?, 1000, runs, 0)?;
    println!("{preset} at {0}×{0}", s.input_size);
    println!("  params   {:.2}M (published full model: {}M)", s.params as f64 / 1e6, s.reference_params_m);
    println!("  MACs     {:.1}M (published full model: {} GFLOPs)", s.macs as f64 / 1e6, s.reference_gflops);
    println!("  latency  {:.1} ms median over {} runs", s.latency_ms_median, s.runs);
    Ok(())
}
