//! Concentration clauses of sampled training sets; the norm deviation
//! shrinks like 1/√d.

use benign_attn::dataset::{check_good_training_set, make_signal_pair, sample_dataset, SignalMode};

fn main() -> benign_attn::Result<()> {
    let n = 50;
    for d in [500usize, 5_000, 50_000] {
        let rho = 8.0 * (d as f64 / n as f64).sqrt();
        for seed in 0..3u64 {
            let signal = make_signal_pair(d, rho, SignalMode::Canonical, seed)?;
            let ds = sample_dataset(&signal, n, 0.1, seed)?;
            let g = check_good_training_set(&ds, 0.05)?;
            println!(
                "d={d:>6} seed={seed} good={} norm deviation {:.3} (kappa {:.3}) cross {:.3e} (<= {:.3e}) sets_ok={}",
                g.is_good, g.max_norm_deviation, g.kappa, g.max_cross_inner, g.cross_threshold, g.sets_ok
            );
        }
    }
    Ok(())
}
