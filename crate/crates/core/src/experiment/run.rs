use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::{plot, prepare_dir, value_tag, ExperimentConfig, Kind, RunManifest};
use crate::analysis::{classify_phase, PhaseLabel, PhaseTolerances};
use crate::dataset::{make_signal_pair, sample_dataset, sample_test_batch};
use crate::error::{Error, Result};
use crate::training::{fmt_float, gd_run, write_trajectory_csv, GdConfig, Trajectory};

pub const PHASE_SCHEMA: &str = "benign-attn-phases/1";

pub const PHASE_COLUMNS: [&str; 8] =
    ["value", "seed", "phase", "train_acc_final", "test_acc_final", "clean_test_acc_final", "fit_step", "last_step"];

/// One GD run on freshly sampled data.
fn train_once(cfg: &ExperimentConfig, d: usize, rho: f64, seed: u64) -> Result<Trajectory> {
    let signal = make_signal_pair(d, rho, cfg.signal_mode, seed)?;
    let train = sample_dataset(&signal, cfg.n, cfg.eta, seed)?;
    let test = sample_test_batch(&signal, cfg.test_size, cfg.eta, seed)?;
    let gd = GdConfig {
        step_size: cfg.beta,
        steps: cfg.steps,
        record_every: cfg.record_stride(),
        early_stop_after_fit: cfg.early_stop_after_fit,
        decompose: cfg.kind == Kind::Run,
        backend: cfg.backend,
    };
    gd_run(&train, Some(&test), &gd)
}

fn write_csv(traj: &Trajectory, hash: &str, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectory_csv(traj, hash, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parameter errors are configuration problems and abort the command;
/// anything else only marks the run failed.
fn split_error(err: Error) -> Result<Error> {
    match err {
        Error::Parameter(_) | Error::Config(_) => Err(err),
        other => Ok(other),
    }
}

/// Runs GD once per seed and writes one trajectory CSV each.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let dir = prepare_dir(cfg)?;
    let hash = cfg.hash();
    let rho = cfg.rho_for(cfg.d);
    let mut manifest = RunManifest::new(cfg);
    let results: Vec<(u64, Result<Trajectory>)> =
        cfg.seeds.par_iter().map(|&seed| (seed, train_once(cfg, cfg.d, rho, seed))).collect();
    for (seed, res) in results {
        match res {
            Ok(traj) => {
                let path = dir.join(format!("trajectory_seed{seed}.csv"));
                write_csv(&traj, &hash, &path)?;
                manifest.add_output(Some(seed), None, path.clone());
                if cfg.plot {
                    for p in plot::plot_trajectory(&path, &dir, &format!("seed{seed}"))? {
                        manifest.add_output(Some(seed), None, p);
                    }
                }
            }
            Err(e) => {
                let e = split_error(e)?;
                manifest.fail(Some(seed), None, &e);
            }
        }
    }
    manifest.finish(&dir, started)
}

struct Cell {
    value: f64,
    seed: u64,
    d: usize,
    rho: f64,
}

fn phase_row(value: f64, seed: u64, label: &PhaseLabel, last_step: usize) -> String {
    let opt = |x: Option<f64>| x.map(fmt_float).unwrap_or_default();
    [
        format!("{value}"),
        seed.to_string(),
        label.phase.to_string(),
        fmt_float(label.train_acc_final),
        opt(label.test_acc_final),
        opt(label.clean_test_acc_final),
        label.fit_step.map(|s| s.to_string()).unwrap_or_default(),
        last_step.to_string(),
    ]
    .join(",")
}

/// One run per (value, seed) of an SNR or dimension sweep, each labeled
/// benign, harmful or no_fit, aggregated into `phases.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let (label, cells): (&str, Vec<Cell>) = match cfg.kind {
        Kind::SweepSnr => (
            "rho",
            cfg.rho_list
                .iter()
                .flat_map(|&rho| cfg.seeds.iter().map(move |&seed| Cell { value: rho, seed, d: cfg.d, rho }))
                .collect(),
        ),
        Kind::SweepDim => (
            "d",
            cfg.d_list
                .iter()
                .flat_map(|&d| cfg.seeds.iter().map(move |&seed| Cell { value: d as f64, seed, d, rho: cfg.rho_for(d) }))
                .collect(),
        ),
        other => return Err(Error::Config(format!("`{}` is not a sweep", other.name()))),
    };
    let started = Instant::now();
    let dir = prepare_dir(cfg)?;
    let hash = cfg.hash();
    let mut manifest = RunManifest::new(cfg);
    let results: Vec<Result<Trajectory>> = cells.par_iter().map(|c| train_once(cfg, c.d, c.rho, c.seed)).collect();

    let mut rows = Vec::new();
    let mut plotted: Vec<(f64, PathBuf)> = Vec::new();
    for (cell, res) in cells.iter().zip(results) {
        match res {
            Ok(traj) => {
                let path = dir.join(format!("trajectory_{label}{}_seed{}.csv", value_tag(cell.value), cell.seed));
                write_csv(&traj, &hash, &path)?;
                manifest.add_output(Some(cell.seed), Some(cell.value), path.clone());
                let phase = classify_phase(&traj, cfg.eta, PhaseTolerances::default());
                rows.push(phase_row(cell.value, cell.seed, &phase, traj.last_step));
                if cell.seed == cfg.seeds[0] {
                    plotted.push((cell.value, path));
                }
            }
            Err(e) => {
                let e = split_error(e)?;
                rows.push(format!("{},{},failed,,,,,", cell.value, cell.seed));
                manifest.fail(Some(cell.seed), Some(cell.value), &e);
            }
        }
    }
    let phases = dir.join("phases.csv");
    let mut w = BufWriter::new(File::create(&phases)?);
    writeln!(w, "#schema={PHASE_SCHEMA},config_hash={hash}")?;
    writeln!(w, "{}", PHASE_COLUMNS.join(","))?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    drop(w);
    manifest.add_output(None, None, phases);
    if cfg.plot && !plotted.is_empty() {
        let out = dir.join("accuracy.svg");
        plot::plot_sweep(&plotted, label, &out)?;
        manifest.add_output(Some(cfg.seeds[0]), None, out);
    }
    manifest.finish(&dir, started)
}
