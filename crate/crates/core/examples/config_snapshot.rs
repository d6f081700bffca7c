//! Resolves a configuration the way `mmfl train` does and prints the snapshot
//! with the origin of every key.
//!
//! cargo run -p mmfl --example config_snapshot -- [config.json] [key=value ...]

use std::path::Path;

use mmfl::settings::load;

fn main() -> mmfl::Result<()> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let file = match args.first() {
        Some(a) if !a.contains('=') => Some(args.remove(0)),
        _ => None,
    };
    let resolved = load(file.as_deref().map(Path::new), &args)?;
    println!("{}", resolved.snapshot()?);
    for (key, source) in &resolved.provenance {
        eprintln!("{key}: {source:?}");
    }
    Ok(())
}
