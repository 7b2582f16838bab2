//! Sweeps the signal strength at n=400, d=40000 and prints the phase table.
//! Weak signals are memorized harmfully, strong ones benignly.
//!
//! `cargo run --release --example snr_sweep -- [OUT_DIR]`

use std::path::PathBuf;

use benign_attn::experiment::{cmd_sweep, ExperimentConfig, Kind};

fn main() -> benign_attn::Result<()> {
    let mut cfg = ExperimentConfig::defaults(Kind::SweepSnr);
    cfg.rho_list = vec![2.0, 10.0, 30.0];
    cfg.output_dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("benign-attn-examples"));
    cfg.plot = true;
    let manifest = cmd_sweep(&cfg)?;
    print!("{}", std::fs::read_to_string(cfg.kind_dir().join("phases.csv"))?);
    println!("{} files in {} ({:.1} s)", manifest.outputs.len(), cfg.kind_dir().display(), manifest.wall_clock_seconds);
    Ok(())
}
