//! Max-margin solutions at the optimal tokens for n=50, d=50000 and the
//! joint problem over growing attention bounds.

use benign_attn::analysis::check_norm_bounds_gated;
use benign_attn::dataset::{make_signal_pair, sample_dataset, SignalMode};
use benign_attn::maxmargin::{
    dual_coefficient_report, joint_max_margin, solve_p_svm, solve_v_svm_optimal, JointConfig, SnrRegime, DEFAULT_TOL,
};

fn main() -> benign_attn::Result<()> {
    let (n, d, eta) = (50usize, 50_000usize, 0.1);
    let rho = 8.0 * (d as f64 / n as f64).sqrt();
    let signal = make_signal_pair(d, rho, SignalMode::Canonical, 0)?;
    let train = sample_dataset(&signal, n, eta, 0)?;

    let v = solve_v_svm_optimal(&train, SnrRegime::High, DEFAULT_TOL)?;
    let p = solve_p_svm(&train, SnrRegime::High, DEFAULT_TOL)?;
    println!("|v_mm|^2 = {:.6e}  (2/rho^2 = {:.3e})  kkt {:.1e}", v.norm_sq(), 2.0 / (rho * rho), v.kkt_residual);
    println!("|p_mm|^2 = {:.6e}  (1/rho^2 = {:.3e})  kkt {:.1e}", p.norm_sq(), 1.0 / (rho * rho), p.kkt_residual);
    println!("{}", check_norm_bounds_gated(&v, &p, &train).line());

    let dual = dual_coefficient_report(&v, &train, 0.05)?;
    println!("noisy coefficients in [{:.4e}, {:.4e}]: {} violations", dual.lower, dual.upper, dual.violations.len());

    let cfg = JointConfig { regime: SnrRegime::High, ..JointConfig::default() };
    let pnorm = p.norm_sq().sqrt();
    for mult in [0.5, 2.0, 8.0] {
        let j = joint_max_margin(&train, 1.0, mult * pnorm, &cfg)?;
        let g = &j.diagnostics;
        println!(
            "R = {mult:>3} |p_mm|: margin {:.4} gap {:.2e} cos_p {:.5} off-token mass {:.2e}",
            j.achieved_min_margin, g.relative_margin_gap, g.cos_p, g.worst_non_optimal_attention
        );
    }
    Ok(())
}
