//! Metrics and pass/fail checks over trained models and solver output.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::max_abs;
use crate::maxmargin::{enumerate_selections, mask_of_selection, optimal_selection, JointSolution, SnrRegime, SvmSolution};
use crate::model::{evaluate, ModelParams};
use crate::training::{batch_accuracies, Trajectory};

/// Relation an observed value must satisfy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    Above(f64),
    AtLeast(f64),
    Below(f64),
    AtMost(f64),
    Within(f64, f64),
    /// `|value − target| ≤ tol · |target|`.
    Relative { target: f64, tol: f64 },
}

impl Bound {
    pub fn holds(self, x: f64) -> bool {
        match self {
            Bound::Above(t) => x > t,
            Bound::AtLeast(t) => x >= t,
            Bound::Below(t) => x < t,
            Bound::AtMost(t) => x <= t,
            Bound::Within(lo, hi) => x >= lo && x <= hi,
            Bound::Relative { target, tol } => (x - target).abs() <= tol * target.abs(),
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Above(t) => write!(f, ">{t:.9e}"),
            Bound::AtLeast(t) => write!(f, ">={t:.9e}"),
            Bound::Below(t) => write!(f, "<{t:.9e}"),
            Bound::AtMost(t) => write!(f, "<={t:.9e}"),
            Bound::Within(lo, hi) => write!(f, "in[{lo:.9e},{hi:.9e}]"),
            Bound::Relative { target, tol } => write!(f, "~{target:.9e}(rel{tol:.1e})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub quantity: String,
    pub value: f64,
    pub bound: Bound,
}

impl Observation {
    pub fn holds(&self) -> bool {
        self.bound.holds(self.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremCheck {
    pub name: String,
    pub passed: bool,
    pub observed: Vec<Observation>,
    pub notes: String,
}

impl TheoremCheck {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), passed: true, observed: Vec::new(), notes: String::new() }
    }

    pub fn observe(&mut self, quantity: impl Into<String>, value: f64, bound: Bound) -> &mut Self {
        let obs = Observation { quantity: quantity.into(), value, bound };
        self.passed &= obs.holds();
        self.observed.push(obs);
        self
    }

    pub fn note(&mut self, text: impl AsRef<str>) -> &mut Self {
        if !self.notes.is_empty() {
            self.notes.push_str("; ");
        }
        self.notes.push_str(text.as_ref());
        self
    }

    /// Quantities whose bound does not hold.
    pub fn failures(&self) -> Vec<&Observation> {
        self.observed.iter().filter(|o| !o.holds()).collect()
    }

    /// One line: `name PASS|FAIL quantity=value(bound) ... [# notes]`.
    pub fn line(&self) -> String {
        let mut s = format!("{} {}", self.name, if self.passed { "PASS" } else { "FAIL" });
        for o in &self.observed {
            s.push_str(&format!(" {}={:.9e}({})", o.quantity, o.value, o.bound));
        }
        if !self.notes.is_empty() {
            s.push_str(" # ");
            s.push_str(&self.notes);
        }
        s
    }
}

impl fmt::Display for TheoremCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

/// Three-sigma Monte Carlo tolerance for a rate `p` estimated from `m` draws.
pub fn mc_tolerance(p: f64, m: usize) -> f64 {
    3.0 * (p * (1.0 - p) / m as f64).sqrt()
}

/// Fraction of samples with positive margin; zero scores count as errors.
pub fn accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(batch_accuracies(params, ds)?.0)
}

/// Accuracy against the clean labels.
pub fn clean_accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(batch_accuracies(params, ds)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStats {
    /// Mean signal-slot softmax over the clean set.
    pub clean: Option<f64>,
    /// Mean signal-slot softmax over the noisy set; absent when it is empty.
    pub noisy: Option<f64>,
}

pub fn attention_stats(params: &ModelParams, ds: &Dataset) -> Result<AttentionStats> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let evals = evaluate(params, ds)?;
    let mean = |idx: &[usize]| {
        (!idx.is_empty()).then(|| idx.iter().map(|&i| evals[i].s_signal).sum::<f64>() / idx.len() as f64)
    };
    Ok(AttentionStats { clean: mean(&ds.sets().clean), noisy: mean(&ds.sets().noisy) })
}

/// Strength of the noisy-sample attention clause at step 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionClause {
    /// Every noisy sample puts at least `1 − 1/c_rho²` on its noise token;
    /// only meaningful when `ρ = c_rho √(d/n)` with `c_rho ≥ 6`.
    Theorem { c_rho: f64 },
    /// Mean signal attention above 1/2 on the clean set and mean noise
    /// attention above 1/2 on the noisy set, as in the figure.
    Figure,
}

/// Step-2 claims: attention on optimal tokens, interpolation and
/// near-optimal test error.
pub fn check_theorem_gd2(traj: &Trajectory, train: &Dataset, test: &Dataset, clause: AttentionClause) -> Result<TheoremCheck> {
    let params = traj.params_at(2)?;
    let evals = evaluate(params, train)?;
    let sets = train.sets();
    let mut check = TheoremCheck::new("gd_two_step");
    match clause {
        AttentionClause::Theorem { c_rho } => {
            let min_clean = sets.clean.iter().map(|&i| evals[i].s_signal).fold(f64::INFINITY, f64::min);
            check.observe("min_signal_attention_clean", min_clean, Bound::Above(0.5));
            if !sets.noisy.is_empty() {
                let min_noise = sets.noisy.iter().map(|&i| evals[i].s_noise).fold(f64::INFINITY, f64::min);
                check.observe("min_noise_attention_noisy", min_noise, Bound::AtLeast(1.0 - 1.0 / (c_rho * c_rho)));
            }
            check.note(format!("c_rho={c_rho}"));
        }
        AttentionClause::Figure => {
            let stats = attention_stats(params, train)?;
            if let Some(c) = stats.clean {
                check.observe("mean_signal_attention_clean", c, Bound::Above(0.5));
            }
            if let Some(s) = stats.noisy {
                check.observe("mean_noise_attention_noisy", 1.0 - s, Bound::Above(0.5));
            }
            check.note("figure-level attention clause");
        }
    }
    let train_acc = evaluate(params, train)?.iter().filter(|e| e.margin > 0.0).count() as f64 / train.n() as f64;
    check.observe("train_accuracy", train_acc, Bound::AtLeast(1.0));
    let test_acc = accuracy(params, test)?;
    let eta = train.eta();
    let tol = mc_tolerance(eta, test.n());
    check.observe("test_error", 1.0 - test_acc, Bound::AtMost(eta + tol));
    check.note(format!("mc_tol={tol:.6e},m={}", test.n()));
    Ok(check)
}

/// Closed forms after one step from zero: equal noise coefficients
/// `β/(4n)`, opposite-signed signal coefficients of size about `(β/8)(1−2η)`.
pub fn check_t1_coefficients(traj: &Trajectory, beta: f64, n: usize, eta: f64) -> Result<TheoremCheck> {
    if !(0.0..0.5).contains(&eta) {
        return Err(Error::Parameter(format!("label-flip rate {eta} outside [0, 1/2)")));
    }
    let rec = traj.record(1)?;
    let dec = rec.decomposition.as_ref().ok_or(Error::MissingRecord(1))?;
    let theta = beta / (4.0 * n as f64);
    let mut check = TheoremCheck::new("t1_coefficients");
    let worst = dec.theta.iter().map(|t| ((t - theta) / theta).abs()).fold(0.0, f64::max);
    check.observe("theta_max_rel_dev", worst, Bound::AtMost(1e-12));
    check.observe("lambda1", dec.lambda1, Bound::Above(0.0));
    check.observe("lambda2", dec.lambda2, Bound::Below(0.0));
    let lo = beta / 8.0 * (1.0 - 2.0 * eta - 0.2);
    let hi = beta / 8.0 * (1.0 - 2.0 * eta + 0.2);
    check.observe("abs_lambda1", dec.lambda1.abs(), Bound::Within(lo, hi));
    check.observe("abs_lambda2", dec.lambda2.abs(), Bound::Within(lo, hi));
    check.observe("residual_rel", dec.residual_norm / rec.v_norm.max(f64::MIN_POSITIVE), Bound::AtMost(1e-8));
    check.note(format!("theta_expected={theta:.9e}"));
    Ok(check)
}

/// Brackets on `‖v_mm‖²` and `‖p_mm‖²` in the high-SNR regime.
pub fn check_norm_bounds(vmm: &SvmSolution, pmm: &SvmSolution, ds: &Dataset) -> TheoremCheck {
    let rho2 = ds.signal().rho().powi(2);
    let en_d = ds.eta() * ds.n() as f64 / ds.d() as f64;
    let mut check = TheoremCheck::new("norm_bounds");
    check.observe("v_mm_norm_sq", vmm.norm_sq(), Bound::Within(2.0 / rho2 + en_d / 2.0, 2.0 / rho2 + 5.0 * en_d));
    check.observe("p_mm_norm_sq", pmm.norm_sq(), Bound::Within(1.0 / rho2 + en_d, 8.0 / rho2 + 17.0 * en_d));
    check.note(format!("n_noisy={}", ds.sets().noisy.len()));
    check
}

/// [`check_norm_bounds`] with the lower brackets evaluated only when
/// [`noisy_count_premise`] holds. Upper brackets are always evaluated.
pub fn check_norm_bounds_gated(vmm: &SvmSolution, pmm: &SvmSolution, ds: &Dataset) -> TheoremCheck {
    if noisy_count_premise(ds) {
        return check_norm_bounds(vmm, pmm, ds);
    }
    let rho2 = ds.signal().rho().powi(2);
    let en_d = ds.eta() * ds.n() as f64 / ds.d() as f64;
    let mut check = TheoremCheck::new("norm_bounds");
    check.observe("v_mm_norm_sq", vmm.norm_sq(), Bound::AtMost(2.0 / rho2 + 5.0 * en_d));
    check.observe("p_mm_norm_sq", pmm.norm_sq(), Bound::AtMost(8.0 / rho2 + 17.0 * en_d));
    let literal = check_norm_bounds(vmm, pmm, ds);
    check.note(format!(
        "n_noisy={} below eta*n/2={}: lower brackets not evaluated (literal: {})",
        ds.sets().noisy.len(),
        ds.eta() * ds.n() as f64 / 2.0,
        if literal.passed { "PASS" } else { "FAIL" }
    ));
    check
}

/// Whether the realized noisy count reaches `ηn / 2`, the concentration step
/// the lower bounds of [`check_norm_bounds`] are derived from.
pub fn noisy_count_premise(ds: &Dataset) -> bool {
    ds.sets().noisy.len() as f64 >= ds.eta() * ds.n() as f64 / 2.0
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    diff / max_abs(a).max(max_abs(b)).max(floor)
}

/// Relative-error floor for gradient comparisons, so that vanishing
/// gradients are compared absolutely.
pub const GRADIENT_ERROR_FLOOR: f64 = 1e-8;

/// The optimal selection attains the best label margin among all `2^n`
/// pure selections: strictly in the high-SNR regime, weakly in the low one.
pub fn check_optimal_token_dominance(ds: &Dataset, regime: SnrRegime, tol: f64) -> Result<TheoremCheck> {
    let rows = enumerate_selections(ds, tol)?;
    let star = mask_of_selection(ds, &optimal_selection(ds, regime));
    let starred = rows.iter().find(|r| r.mask == star).map(|r| r.margin).unwrap_or(0.0);
    let best_other = rows.iter().filter(|r| r.mask != star).map(|r| r.margin).fold(0.0, f64::max);
    let mut check = TheoremCheck::new("optimal_token_dominance");
    check.observe("optimal_margin", starred, Bound::Above(0.0));
    let gap = starred - best_other;
    match regime {
        SnrRegime::High => check.observe("margin_gap_to_best_other", gap, Bound::Above(0.0)),
        SnrRegime::Low => check.observe("margin_gap_to_best_other", gap, Bound::AtLeast(0.0)),
    };
    check.note(format!("n={},selections={},regime={regime:?}", ds.n(), rows.len()));
    Ok(check)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Benign,
    Harmful,
    NoFit,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Benign => "benign",
            Phase::Harmful => "harmful",
            Phase::NoFit => "no_fit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTolerances {
    /// Benign requires final test accuracy at least `1 − η − benign`.
    pub benign: f64,
}

impl Default for PhaseTolerances {
    fn default() -> Self {
        Self { benign: 0.03 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLabel {
    pub phase: Phase,
    pub train_acc_final: f64,
    pub test_acc_final: Option<f64>,
    pub clean_test_acc_final: Option<f64>,
    pub fit_step: Option<usize>,
}

/// Labels a finished run from its last record.
pub fn classify_phase(traj: &Trajectory, eta: f64, tols: PhaseTolerances) -> PhaseLabel {
    let last = traj.final_record();
    let phase = if last.train_accuracy < 1.0 {
        Phase::NoFit
    } else if last.test_accuracy.is_some_and(|a| a >= 1.0 - eta - tols.benign) {
        Phase::Benign
    } else {
        Phase::Harmful
    };
    PhaseLabel {
        phase,
        train_acc_final: last.train_accuracy,
        test_acc_final: last.test_accuracy,
        clean_test_acc_final: last.clean_test_accuracy,
        fit_step: traj.fit_step,
    }
}

/// Low-SNR failure to generalize: clean error at least 1/16 while the
/// training set is interpolated.
pub fn low_snr_test_error_check(joint: &JointSolution, train: &Dataset, clean_test: &Dataset) -> Result<TheoremCheck> {
    let params = ModelParams { p: joint.p.clone(), v: joint.v.clone() };
    let mut check = TheoremCheck::new("low_snr_test_error");
    let snr = crate::dataset::snr(train.signal());
    let guard = (train.d() as f64 / train.n() as f64).sqrt() / train.signal().rho();
    if guard < 1.0 {
        check.passed = false;
        check.note(format!("not applicable: rho exceeds sqrt(d/n) (snr={snr:.4e})"));
        return Ok(check);
    }
    check.observe("train_accuracy", accuracy(&params, train)?, Bound::AtLeast(1.0));
    let err = 1.0 - clean_accuracy(&params, clean_test)?;
    let tol = mc_tolerance(1.0 / 16.0, clean_test.n());
    check.observe("clean_test_error", err, Bound::AtLeast(1.0 / 16.0 - tol));
    check.note(format!("mc_tol={tol:.6e},m={}", clean_test.n()));
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_signal_pair, sample_dataset, SignalMode};

    #[test]
    fn check_line_format() {
        let mut c = TheoremCheck::new("demo");
        c.observe("x", 1.0, Bound::AtMost(2.0));
        assert!(c.passed);
        assert_eq!(c.line(), "demo PASS x=1.000000000e0(<=2.000000000e0)");
        c.observe("y", 3.0, Bound::Within(0.0, 1.0));
        assert!(!c.passed);
        assert_eq!(c.failures().len(), 1);
    }

    #[test]
    fn zero_params_accuracy_and_attention() {
        let sig = make_signal_pair(30, 2.0, SignalMode::Canonical, 0).unwrap();
        let ds = sample_dataset(&sig, 40, 0.2, 1).unwrap();
        let zero = ModelParams::zeros(30);
        assert_eq!(accuracy(&zero, &ds).unwrap(), 0.0);
        let st = attention_stats(&zero, &ds).unwrap();
        assert_eq!(st.clean, Some(0.5));
        assert_eq!(st.noisy, Some(0.5));
        let clean_only = sample_dataset(&sig, 40, 0.0, 1).unwrap();
        assert_eq!(attention_stats(&zero, &clean_only).unwrap().noisy, None);
    }

    #[test]
    fn saturated_attention_on_signal() {
        let sig = make_signal_pair(30, 2.0, SignalMode::Canonical, 0).unwrap();
        let ds = sample_dataset(&sig, 40, 0.0, 1).unwrap();
        let c1 = ds.subset(&ds.sets().clean1.clone()).unwrap();
        let mut p = vec![0.0; 30];
        p[0] = 200.0;
        let params = ModelParams { p, v: vec![0.0; 30] };
        assert!(attention_stats(&params, &c1).unwrap().clean.unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn mc_tol_value() {
        assert!((mc_tolerance(0.25, 300) - 3.0 * (0.1875f64 / 300.0).sqrt()).abs() < 1e-15);
    }
}
