//! The same data with a step size 250 times smaller: after one step the
//! clean samples are fit, and memorizing the flipped ones takes on the
//! order of a hundred more.

use benign_attn::dataset::{make_signal_pair, sample_dataset, sample_test_batch, SignalMode};
use benign_attn::{gd_run, GdConfig};

fn main() -> benign_attn::Result<()> {
    let (n, d, rho, eta) = (200, 40_000, 30.0, 0.05);
    for seed in 0..3u64 {
        let signal = make_signal_pair(d, rho, SignalMode::Canonical, seed)?;
        let train = sample_dataset(&signal, n, eta, seed)?;
        let test = sample_test_batch(&signal, 2000, eta, seed)?;
        let mut cfg = GdConfig::new(1e-4, 2000);
        cfg.record_every = 25;
        cfg.early_stop_after_fit = Some(50);
        let traj = gd_run(&train, Some(&test), &cfg)?;
        let t1 = traj.record(1)?;
        let last = traj.final_record();
        println!(
            "seed {seed}: t=1 train={:.3}, first fit at {:?}, at t={} train={:.3} test={:.3} ({:?} backend)",
            t1.train_accuracy,
            traj.fit_step,
            last.step,
            last.train_accuracy,
            last.test_accuracy.unwrap_or(f64::NAN),
            traj.backend,
        );
    }
    Ok(())
}
