//! Label margin of every pure token selection on a six-sample instance.
//! At high SNR the starred selection (clean samples on their signal token,
//! flipped ones on their noise) wins; at low SNR all-noise does.

use benign_attn::experiment::majority_clean_instance;
use benign_attn::maxmargin::{enumerate_selections, mask_of_selection, optimal_selection, SnrRegime, DEFAULT_TOL};

fn main() -> benign_attn::Result<()> {
    let (n, d) = (6usize, 200usize);
    for (regime, rho) in [(SnrRegime::High, 8.0 * (d as f64 / n as f64).sqrt()), (SnrRegime::Low, (d as f64 / (4.0 * n as f64)).sqrt())] {
        let (_, ds) = majority_clean_instance(0, 0, n, d, rho, 0.3)?;
        let star = mask_of_selection(&ds, &optimal_selection(&ds, regime));
        let mut rows = enumerate_selections(&ds, DEFAULT_TOL)?;
        rows.sort_by(|a, b| b.margin.total_cmp(&a.margin));
        println!("{regime:?} SNR, rho={rho:.2}, flipped {:?}; bit i set = sample i on its noise token", ds.sets().noisy);
        for r in rows.iter().take(5) {
            let bits: String = (0..n).map(|i| if r.mask >> i & 1 == 1 { '1' } else { '0' }).collect();
            println!("  {bits} margin {:.6}{}", r.margin, if r.mask == star { " *" } else { "" });
        }
    }
    Ok(())
}
