//! Sweeps the dimension at n=500, ρ=30 over d ∈ {250, 1000, 10000} and
//! prints the phase label of each run.
//!
//! `cargo run --release --example dim_sweep -- [OUT_DIR]`

use std::path::PathBuf;

use benign_attn::experiment::{cmd_sweep, ExperimentConfig, Kind};

fn main() -> benign_attn::Result<()> {
    let mut cfg = ExperimentConfig::defaults(Kind::SweepDim);
    cfg.output_dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("benign-attn-examples"));
    let manifest = cmd_sweep(&cfg)?;
    print!("{}", std::fs::read_to_string(cfg.kind_dir().join("phases.csv"))?);
    for f in &manifest.failures {
        println!("failed: {f:?}");
    }
    Ok(())
}
