//! Max-margin rules: v-SVM, p-SVM, token-selection margins and approximate
//! solvers for the joint norm-constrained problems.

mod joint;
mod solver;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{kappa, CrossBound, Dataset, Slot};
use crate::error::{Error, Result};
use crate::model::{cluster_index, decompose_v, evaluate, ModelParams, SpanGram};

pub use joint::{joint_max_margin, min_norm_with_margin, JointConfig, JointDiagnostics, JointSolution};
pub use solver::{kkt_residual, solve_hard_margin, SvmSolution, DUAL_NORM_CAP, MAX_SWEEPS};

/// Default KKT tolerance used by the experiment layer.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Which token is optimal for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrRegime {
    /// Signal for clean samples, noise for noisy samples.
    High,
    /// Noise for every sample.
    Low,
}

/// Sparse combination `Σ coef · u_index` of span vectors (`u_0 = μ1`,
/// `u_1 = μ2`, `u_{2+i} = ξ_i`).
pub(crate) type Combo = Vec<(usize, f64)>;

/// A dataset together with the Gram matrix of its span vectors; every
/// constraint of the max-margin problems lives in that span.
#[derive(Debug, Clone)]
pub struct SpanProblem<'a> {
    ds: &'a Dataset,
    gram: SpanGram,
}

/// A solved problem with its weights also in span coordinates.
#[derive(Debug, Clone)]
pub struct SpanSolution {
    pub solution: SvmSolution,
    pub coords: Vec<f64>,
}

impl<'a> SpanProblem<'a> {
    pub fn new(ds: &'a Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { ds, gram: SpanGram::new(ds) })
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }

    pub fn gram(&self) -> &SpanGram {
        &self.gram
    }

    fn combo_inner(&self, a: &Combo, b: &Combo) -> f64 {
        let mut s = 0.0;
        for &(i, x) in a {
            for &(j, y) in b {
                s += x * y * self.gram.entry(i, j);
            }
        }
        s
    }

    fn coords_of(&self, combo: &Combo) -> Vec<f64> {
        let mut c = vec![0.0; self.gram.len()];
        for &(i, x) in combo {
            c[i] += x;
        }
        c
    }

    pub(crate) fn solve(&self, combos: &[Combo], tol: f64) -> Result<SpanSolution> {
        let m = combos.len();
        let mut k = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let v = self.combo_inner(&combos[i], &combos[j]);
                k[i * m + j] = v;
                k[j * m + i] = v;
            }
        }
        let gs = solver::solve_gram(&k, m, tol)?;
        let mut coords = vec![0.0; self.gram.len()];
        for (a, combo) in gs.dual.iter().zip(combos) {
            for &(i, x) in combo {
                coords[i] += a * x;
            }
        }
        let vectors: Vec<Vec<f64>> = combos.iter().map(|c| self.gram.synthesize(self.ds, &self.coords_of(c))).collect();
        let solution = solver::finish(&vectors, gs, self.ds.d());
        Ok(SpanSolution { solution, coords })
    }

    /// Constraint `y_i r_i` for the attention given by span coordinates `cp`.
    fn attention_combos(&self, cp: &[f64]) -> Result<Vec<Combo>> {
        let zeros = vec![0.0; self.gram.len()];
        let evals = self.gram.evaluate(self.ds, &zeros, cp)?;
        Ok(self
            .ds
            .samples()
            .iter()
            .zip(&evals)
            .enumerate()
            .map(|(i, (s, e))| vec![(cluster_index(s), s.y() * e.s_signal), (2 + i, s.y() * e.s_noise)])
            .collect())
    }

    /// v-SVM for an attention vector in span coordinates.
    pub fn v_svm_coords(&self, cp: &[f64], tol: f64) -> Result<SpanSolution> {
        let combos = self.attention_combos(cp)?;
        self.solve(&combos, tol)
    }

    fn selection_combos(&self, selection: &[Slot]) -> Vec<Combo> {
        self.ds
            .samples()
            .iter()
            .zip(selection)
            .enumerate()
            .map(|(i, (s, &slot))| {
                if slot == s.signal_slot {
                    vec![(cluster_index(s), s.y())]
                } else {
                    vec![(2 + i, s.y())]
                }
            })
            .collect()
    }

    pub fn selection_svm(&self, selection: &[Slot], tol: f64) -> Result<SpanSolution> {
        if selection.len() != self.ds.n() {
            return Err(Error::Dimension(format!("selection has {} entries for {} samples", selection.len(), self.ds.n())));
        }
        self.solve(&self.selection_combos(selection), tol)
    }

    /// Label margin of a pure token selection; infeasible selections give 0.
    pub fn selection_margin(&self, selection: &[Slot], tol: f64) -> f64 {
        match self.selection_svm(selection, tol) {
            Ok(s) => s.solution.margin,
            Err(_) => 0.0,
        }
    }

    pub fn v_svm_optimal(&self, regime: SnrRegime, tol: f64) -> Result<SpanSolution> {
        self.selection_svm(&optimal_selection(self.ds, regime), tol)
    }

    pub fn p_svm(&self, regime: SnrRegime, tol: f64) -> Result<SpanSolution> {
        let combos: Vec<Combo> = self
            .ds
            .samples()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let k = cluster_index(s);
                let signal_wins = regime == SnrRegime::High && !s.is_noisy();
                if signal_wins {
                    vec![(k, 1.0), (2 + i, -1.0)]
                } else {
                    vec![(2 + i, 1.0), (k, -1.0)]
                }
            })
            .collect();
        self.solve(&combos, tol)
    }
}

/// Optimal token of every sample under the given regime.
pub fn optimal_selection(ds: &Dataset, regime: SnrRegime) -> Vec<Slot> {
    ds.samples()
        .iter()
        .map(|s| match regime {
            SnrRegime::High if !s.is_noisy() => s.signal_slot,
            _ => s.noise_slot(),
        })
        .collect()
}

/// v-SVM over `y_i r_i` with `r_i = X_i^T softmax(X_i p)`.
pub fn solve_v_svm(p: &[f64], ds: &Dataset, tol: f64) -> Result<SvmSolution> {
    if p.len() != ds.d() {
        return Err(Error::Dimension("attention vector length differs from d".into()));
    }
    let params = ModelParams { p: p.to_vec(), v: vec![0.0; ds.d()] };
    let evals = evaluate(&params, ds)?;
    let constraints: Vec<Vec<f64>> = ds
        .samples()
        .iter()
        .zip(&evals)
        .map(|(s, e)| {
            let mut r = vec![0.0; ds.d()];
            crate::linalg::axpy(s.y() * e.s_signal, ds.signal().mu(s.cluster()), &mut r);
            crate::linalg::axpy(s.y() * e.s_noise, &s.noise, &mut r);
            r
        })
        .collect();
    solve_hard_margin(&constraints, tol)
}

/// v-SVM with every sample attending fully to its optimal token.
pub fn solve_v_svm_optimal(ds: &Dataset, regime: SnrRegime, tol: f64) -> Result<SvmSolution> {
    Ok(SpanProblem::new(ds)?.v_svm_optimal(regime, tol)?.solution)
}

/// p-SVM: unit logit gap in favour of each sample's optimal token.
pub fn solve_p_svm(ds: &Dataset, regime: SnrRegime, tol: f64) -> Result<SvmSolution> {
    Ok(SpanProblem::new(ds)?.p_svm(regime, tol)?.solution)
}

pub fn label_margin_of_selection(selection: &[Slot], ds: &Dataset, tol: f64) -> Result<f64> {
    Ok(SpanProblem::new(ds)?.selection_margin(selection, tol))
}

/// Largest `n` accepted by [`enumerate_selections`].
pub const MAX_ENUMERATION_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionMargin {
    /// Bit `i` set means sample `i` selects its noise token.
    pub mask: u64,
    pub feasible: bool,
    pub margin: f64,
}

pub fn selection_from_mask(ds: &Dataset, mask: u64) -> Vec<Slot> {
    ds.samples()
        .iter()
        .enumerate()
        .map(|(i, s)| if mask >> i & 1 == 1 { s.noise_slot() } else { s.signal_slot })
        .collect()
}

pub fn mask_of_selection(ds: &Dataset, selection: &[Slot]) -> u64 {
    ds.samples()
        .iter()
        .zip(selection)
        .enumerate()
        .fold(0u64, |m, (i, (s, &t))| if t == s.noise_slot() { m | 1 << i } else { m })
}

/// Label margin of all `2^n` pure selections, in mask order.
pub fn enumerate_selections(ds: &Dataset, tol: f64) -> Result<Vec<SelectionMargin>> {
    if ds.n() > MAX_ENUMERATION_N {
        return Err(Error::Parameter(format!("enumeration is limited to n ≤ {MAX_ENUMERATION_N}, got {}", ds.n())));
    }
    let problem = SpanProblem::new(ds)?;
    let total = 1u64 << ds.n();
    Ok((0..total)
        .into_par_iter()
        .map(|mask| {
            let sel = selection_from_mask(ds, mask);
            match problem.selection_svm(&sel, tol) {
                Ok(s) => SelectionMargin { mask, feasible: true, margin: s.solution.margin },
                Err(_) => SelectionMargin { mask, feasible: false, margin: 0.0 },
            }
        })
        .collect())
}

pub const MARGIN_TABLE_SCHEMA: &str = "benign-attn-margins/1";

/// Margin table; the row of `starred` (if any) carries a trailing `*`.
pub fn write_margin_table<W: Write>(rows: &[SelectionMargin], n: usize, starred: Option<u64>, config_hash: &str, mut w: W) -> Result<()> {
    writeln!(w, "#schema={MARGIN_TABLE_SCHEMA},config_hash={config_hash}")?;
    writeln!(w, "selection,feasible,margin,optimal")?;
    for r in rows {
        let bits: String = (0..n).map(|i| if r.mask >> i & 1 == 1 { '1' } else { '0' }).collect();
        let star = if Some(r.mask) == starred { "*" } else { "" };
        writeln!(w, "{bits},{},{},{star}", r.feasible as u8, crate::training::fmt_float(r.margin))?;
    }
    Ok(())
}

/// Checks the noise coefficients of a v-SVM at the optimal-token limit
/// against the balanced-noise-factor bracket.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCoefficientReport {
    pub delta: f64,
    pub kappa: f64,
    pub cross_bound: f64,
    pub n_noisy: usize,
    pub lower: f64,
    pub upper: f64,
    /// Largest accepted `|θ_i|` for a clean sample.
    pub zero_tol: f64,
    pub theta: Vec<f64>,
    pub violations: Vec<DualViolation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualViolation {
    pub index: usize,
    pub theta: f64,
    pub noisy: bool,
}

impl DualCoefficientReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Relative size of a clean-sample noise coefficient treated as zero.
pub const ZERO_THETA_REL: f64 = 1e-9;

pub fn dual_coefficient_report(sol: &SvmSolution, ds: &Dataset, delta: f64) -> Result<DualCoefficientReport> {
    let n = ds.n();
    let d = ds.d() as f64;
    let k = kappa(n, ds.d(), delta);
    let cross = CrossBound::Lemma.threshold(n, ds.d(), delta);
    let n2 = ds.sets().noisy.len();
    let n2f = n2 as f64;
    let base = (1.0 - k) * d;
    let denom = base - 2.0 * n2f * cross;
    // Too few dimensions for the concentration bounds: the bracket is vacuous.
    let (lower, upper) = if denom > 0.0 && base > 0.0 {
        ((base - 4.0 * n2f * cross) / ((1.0 + k) * d * denom), 1.0 / denom)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };
    let zero_tol = ZERO_THETA_REL * if upper.is_finite() { upper } else { 1.0 / d };
    let theta = decompose_v(&sol.weights, ds)?.theta;
    let violations = theta
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| {
            let noisy = ds.sample(i).is_noisy();
            let ok = if noisy { t >= lower && t <= upper } else { t.abs() <= zero_tol };
            (!ok).then_some(DualViolation { index: i, theta: t, noisy })
        })
        .collect();
    Ok(DualCoefficientReport { delta, kappa: k, cross_bound: cross, n_noisy: n2, lower, upper, zero_tol, theta, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_signal_pair, sample_dataset, SignalMode};

    #[test]
    fn single_sample_selection_margin_is_rho() {
        let sig = make_signal_pair(10, 2.5, SignalMode::Canonical, 0).unwrap();
        let ds = sample_dataset(&sig, 1, 0.0, 1).unwrap();
        let sel = vec![ds.sample(0).signal_slot];
        assert!((label_margin_of_selection(&sel, &ds, 1e-12).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn masks_roundtrip() {
        let sig = make_signal_pair(10, 2.5, SignalMode::Canonical, 0).unwrap();
        let ds = sample_dataset(&sig, 5, 0.3, 1).unwrap();
        for mask in 0..32u64 {
            assert_eq!(mask_of_selection(&ds, &selection_from_mask(&ds, mask)), mask);
        }
    }

    #[test]
    fn span_solution_matches_explicit() {
        let sig = make_signal_pair(40, 3.0, SignalMode::RandomOrthogonal, 3).unwrap();
        let ds = sample_dataset(&sig, 6, 0.3, 4).unwrap();
        let mut p = vec![0.0; 40];
        for (j, x) in p.iter_mut().enumerate() {
            *x = 0.02 * ((j % 5) as f64 - 2.0);
        }
        let explicit = solve_v_svm(&p, &ds, 1e-12).unwrap();
        // Project p onto the span first; the attention only sees span components.
        let basis = crate::model::SpanBasis::new(&ds).unwrap();
        let dec = basis.decompose(&p, &ds).unwrap();
        let mut cp = vec![dec.lambda1, dec.lambda2];
        cp.extend(ds.samples().iter().zip(&dec.theta).map(|(s, t)| s.y() * t));
        let span = SpanProblem::new(&ds).unwrap().v_svm_coords(&cp, 1e-12).unwrap();
        assert!((explicit.margin - span.solution.margin).abs() < 1e-9 * explicit.margin);
    }

    #[test]
    fn eta_zero_dual_report_is_clean() {
        let sig = make_signal_pair(2000, 40.0, SignalMode::Canonical, 0).unwrap();
        let ds = sample_dataset(&sig, 10, 0.0, 2).unwrap();
        let sol = solve_v_svm_optimal(&ds, SnrRegime::High, 1e-12).unwrap();
        let rep = dual_coefficient_report(&sol, &ds, 0.05).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.n_noisy, 0);
    }
}
