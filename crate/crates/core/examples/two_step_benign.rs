//! Two GD steps from zero at n=200, d=40000: the first step fits the clean
//! samples only, the second also memorizes the flipped ones through the
//! attention vector while test accuracy stays near 1 − η.

use benign_attn::analysis::{check_t1_coefficients, check_theorem_gd2, AttentionClause};
use benign_attn::dataset::{make_signal_pair, sample_dataset, sample_test_batch, SignalMode};
use benign_attn::{gd_run, GdConfig};

fn main() -> benign_attn::Result<()> {
    let (n, d, rho, eta, beta) = (200, 40_000, 30.0, 0.05, 0.025);
    for seed in 0..3u64 {
        let signal = make_signal_pair(d, rho, SignalMode::Canonical, seed)?;
        let train = sample_dataset(&signal, n, eta, seed)?;
        let test = sample_test_batch(&signal, 2000, eta, seed)?;
        let mut cfg = GdConfig::new(beta, 2);
        cfg.decompose = true;
        let traj = gd_run(&train, Some(&test), &cfg)?;

        println!("seed {seed}: {} flipped labels", train.sets().noisy.len());
        for r in &traj.records {
            println!(
                "  t={} loss={:.4} train={:.3} test={:.3} signal attention clean={:.3} noisy={:.3} |p|={:.3e}",
                r.step,
                r.loss,
                r.train_accuracy,
                r.test_accuracy.unwrap_or(f64::NAN),
                r.mean_signal_attention_clean.unwrap_or(f64::NAN),
                r.mean_signal_attention_noisy.unwrap_or(f64::NAN),
                r.p_norm,
            );
        }
        println!("  {}", check_t1_coefficients(&traj, beta, n, eta)?.line());
        println!("  {}", check_theorem_gd2(&traj, &train, &test, AttentionClause::Figure)?.line());
    }
    Ok(())
}
