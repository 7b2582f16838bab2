use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::time::Instant;

use super::{prepare_dir, ExperimentConfig, RunManifest};
use crate::analysis::{check_norm_bounds_gated, check_optimal_token_dominance, low_snr_test_error_check, Bound, TheoremCheck};
use crate::dataset::{make_signal_pair, sample_dataset, sample_test_batch, Dataset};
use crate::error::Result;
use crate::maxmargin::{
    dual_coefficient_report, enumerate_selections, joint_max_margin, mask_of_selection, optimal_selection,
    solve_p_svm, solve_v_svm_optimal, write_margin_table, JointConfig, JointSolution, SnrRegime, DEFAULT_TOL,
};
use crate::training::fmt_float;

pub const JOINT_SCHEMA: &str = "benign-attn-joint/1";

const JOINT_COLUMNS: [&str; 12] = [
    "attention_multiplier",
    "attention_bound",
    "head_bound",
    "min_margin",
    "relative_margin_gap",
    "baseline_min_margin",
    "cos_p",
    "cos_v",
    "worst_non_optimal_attention",
    "start",
    "converged",
    "iterations",
];

/// Largest tolerated KKT residual of a reported SVM solution.
const KKT_LIMIT: f64 = 1e-8;

/// Relative-margin gaps may grow by at most this much as `R` increases.
const MONOTONE_SLACK: f64 = 1e-6;

fn joint_row(mult: f64, j: &JointSolution) -> String {
    let g = &j.diagnostics;
    [
        format!("{mult}"),
        fmt_float(j.attention_bound),
        fmt_float(j.head_bound),
        fmt_float(j.achieved_min_margin),
        fmt_float(g.relative_margin_gap),
        fmt_float(g.baseline_min_margin),
        fmt_float(g.cos_p),
        fmt_float(g.cos_v),
        fmt_float(g.worst_non_optimal_attention),
        g.start.to_string(),
        (j.converged as u8).to_string(),
        g.iterations.to_string(),
    ]
    .join(",")
}

/// Gaps of the joint solutions must not grow with the attention bound.
pub(crate) fn joint_monotonicity(sols: &[(f64, JointSolution)]) -> TheoremCheck {
    let mut check = TheoremCheck::new("joint_convergence");
    let increase = sols
        .windows(2)
        .map(|w| w[1].1.diagnostics.relative_margin_gap - w[0].1.diagnostics.relative_margin_gap)
        .fold(0.0, f64::max);
    check.observe("max_gap_increase", increase, Bound::AtMost(MONOTONE_SLACK));
    if let Some((mult, last)) = sols.last() {
        check.note(format!(
            "largest_multiplier={mult},final_gap={:.6e},cos_p={:.9},cos_v={:.9}",
            last.diagnostics.relative_margin_gap, last.diagnostics.cos_p, last.diagnostics.cos_v
        ));
    }
    check
}

pub(crate) fn kkt_check(residuals: &[(&str, f64)]) -> TheoremCheck {
    let mut check = TheoremCheck::new("svm_kkt");
    for (name, r) in residuals {
        check.observe(*name, *r, Bound::AtMost(KKT_LIMIT));
    }
    check
}

fn record(manifest: &mut RunManifest, report: &mut Vec<String>, c: TheoremCheck) {
    report.push(c.line());
    manifest.add_check(&c);
}

/// Runs the study of one seed and returns its report lines.
fn study_seed(cfg: &ExperimentConfig, seed: u64, manifest: &mut RunManifest, dir: &std::path::Path) -> Result<Vec<String>> {
    let rho = cfg.rho_for(cfg.d);
    let regime = cfg.regime_for(rho);
    let signal = make_signal_pair(cfg.d, rho, cfg.signal_mode, seed)?;
    let train = sample_dataset(&signal, cfg.n, cfg.eta, seed)?;
    let hash = cfg.hash();
    let mut report = vec![format!(
        "seed={seed} n={} d={} rho={rho} eta={} regime={regime:?} n_noisy={}",
        cfg.n,
        cfg.d,
        cfg.eta,
        train.sets().noisy.len()
    )];

    let svms = solve_p_svm(&train, regime, DEFAULT_TOL).and_then(|p| Ok((p, solve_v_svm_optimal(&train, regime, DEFAULT_TOL)?)));
    let pnorm = match svms {
        Ok((pmm, vmm)) => {
            report.push(format!("p_mm_norm_sq={} v_mm_norm_sq={} label_margin={}", fmt_float(pmm.norm_sq()), fmt_float(vmm.norm_sq()), fmt_float(vmm.margin)));
            record(manifest, &mut report, kkt_check(&[("p_mm_kkt", pmm.kkt_residual), ("v_mm_kkt", vmm.kkt_residual)]));
            if regime == SnrRegime::High {
                record(manifest, &mut report, check_norm_bounds_gated(&vmm, &pmm, &train));
                match dual_coefficient_report(&vmm, &train, cfg.delta) {
                    Ok(dual) => {
                        let mut c = TheoremCheck::new("dual_coefficients");
                        c.observe("violations", dual.violations.len() as f64, Bound::AtMost(0.0));
                        c.note(format!("bracket=[{:.6e},{:.6e}],n_noisy={}", dual.lower, dual.upper, dual.n_noisy));
                        record(manifest, &mut report, c);
                    }
                    Err(e) => manifest.fail(Some(seed), None, &e),
                }
            }
            Some(pmm.norm_sq().sqrt())
        }
        Err(e) => {
            report.push(format!("svm_error: {e}"));
            manifest.fail(Some(seed), None, &e);
            None
        }
    };

    if let Some(pnorm) = pnorm {
        let jcfg = JointConfig { regime, ..JointConfig::default() };
        let mut sols = Vec::new();
        for &mult in &cfg.attention_multipliers {
            match joint_max_margin(&train, cfg.head_bound, mult * pnorm, &jcfg) {
                Ok(j) => sols.push((mult, j)),
                Err(e) => {
                    report.push(format!("joint_error multiplier={mult}: {e}"));
                    manifest.fail(Some(seed), Some(mult), &e);
                }
            }
        }
        let path = dir.join(format!("joint_seed{seed}.csv"));
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "#schema={JOINT_SCHEMA},config_hash={hash}")?;
        writeln!(w, "{}", JOINT_COLUMNS.join(","))?;
        for (mult, j) in &sols {
            writeln!(w, "{}", joint_row(*mult, j))?;
        }
        w.flush()?;
        manifest.add_output(Some(seed), None, path);
        if sols.len() > 1 {
            record(manifest, &mut report, joint_monotonicity(&sols));
        }
        if regime == SnrRegime::Low {
            if let Some((_, j)) = sols.last() {
                let clean_test = sample_test_batch(&signal, cfg.test_size, 0.0, seed)?;
                record(manifest, &mut report, low_snr_test_error_check(j, &train, &clean_test)?);
            }
        }
    }

    if cfg.n <= cfg.enumerate_up_to {
        enumerate_seed(cfg, seed, &train, regime, &hash, manifest, dir, &mut report)?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    regime: SnrRegime,
    hash: &str,
    manifest: &mut RunManifest,
    dir: &std::path::Path,
    report: &mut Vec<String>,
) -> Result<()> {
    match enumerate_selections(train, DEFAULT_TOL) {
        Ok(rows) => {
            let star = mask_of_selection(train, &optimal_selection(train, regime));
            let path = dir.join(format!("margins_seed{seed}.csv"));
            let mut w = BufWriter::new(File::create(&path)?);
            write_margin_table(&rows, cfg.n, Some(star), hash, &mut w)?;
            w.flush()?;
            manifest.add_output(Some(seed), None, path);
            record(manifest, report, check_optimal_token_dominance(train, regime, DEFAULT_TOL)?);
        }
        Err(e) => {
            report.push(format!("enumeration_error: {e}"));
            manifest.fail(Some(seed), None, &e);
        }
    }
    Ok(())
}

/// p-SVM, optimal-token v-SVM, norm and dual checks, the joint solver over
/// growing attention bounds, and for small `n` the full selection table.
pub fn cmd_maxmargin(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let dir = prepare_dir(cfg)?;
    let mut manifest = RunManifest::new(cfg);
    for &seed in &cfg.seeds {
        let report = study_seed(cfg, seed, &mut manifest, &dir)?;
        let path = dir.join(format!("report_seed{seed}.txt"));
        fs::write(&path, report.join("\n") + "\n")?;
        manifest.add_output(Some(seed), None, path);
    }
    manifest.finish(&dir, started)
}
