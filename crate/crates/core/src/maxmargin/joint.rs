//! Approximate solvers for the joint problems over `(v, p)`.
//!
//! Both work in span coordinates: starting points and ascent directions are
//! combinations of `μ1, μ2, ξ_i`, so iterates never leave that span.

use serde::{Deserialize, Serialize};

use super::{SnrRegime, SpanProblem};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::model::SampleEval;
use crate::training::margin_grad;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub regime: SnrRegime,
    /// Stage `k` smooths the min with temperature `tau0 / 2^k`.
    pub tau0: f64,
    pub stages: usize,
    pub max_iters_per_stage: usize,
    /// A stage ends when the smoothed objective improves by less than
    /// `tol` (relative) over this many accepted steps.
    pub window: usize,
    pub tol: f64,
    pub svm_tol: f64,
    /// Outer rounds of the augmented-Lagrangian solver.
    pub outer_rounds: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            regime: SnrRegime::High,
            tau0: 1.0,
            stages: 10,
            max_iters_per_stage: 400,
            window: 20,
            tol: 1e-9,
            svm_tol: super::DEFAULT_TOL,
            outer_rounds: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDiagnostics {
    /// Cosine of `p` with the p-SVM direction.
    pub cos_p: f64,
    /// Cosine of `v` with the v-SVM direction at the optimal tokens.
    pub cos_v: f64,
    /// Largest softmax mass any sample puts off its optimal token.
    pub worst_non_optimal_attention: f64,
    /// `1 − margin / (r Γ)` with `Γ` the optimal-token label margin.
    pub relative_margin_gap: f64,
    /// Min-margin of the scaled (v-SVM, p-SVM) baseline at the same norms.
    pub baseline_min_margin: f64,
    /// Which start produced the returned iterate.
    pub start: &'static str,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSolution {
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub achieved_min_margin: f64,
    /// Bound on `‖v‖`.
    pub head_bound: f64,
    /// Bound on `‖p‖`.
    pub attention_bound: f64,
    pub converged: bool,
    pub diagnostics: JointDiagnostics,
}

fn min_margin(evals: &[SampleEval]) -> f64 {
    evals.iter().map(|e| e.margin).fold(f64::INFINITY, f64::min)
}

/// `−τ log Σ exp(−z_i / τ)` and its weights.
fn soft_min(z: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = z.iter().map(|x| (-(x - lo) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    (lo - tau * s.ln(), e.iter().map(|x| x / s).collect())
}

/// Ambient gradient of `Σ_i w_i m_i`, in span coordinates.
fn weighted_margin_grad(prob: &SpanProblem, evals: &[SampleEval], weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = prob.gram().len();
    let mut gv = vec![0.0; m];
    let mut gp = vec![0.0; m];
    for (i, ((e, s), w)) in evals.iter().zip(prob.dataset().samples()).zip(weights).enumerate() {
        if *w == 0.0 {
            continue;
        }
        let g = margin_grad(e, s.y(), s.signal_slot.index() == 0, *w);
        let k = crate::model::cluster_index(s);
        gv[k] += g.v_signal;
        gv[2 + i] += g.v_noise;
        gp[k] += g.p_signal;
        gp[2 + i] += g.p_noise;
    }
    (gv, gp)
}

fn project(prob: &SpanProblem, c: &mut [f64], radius: f64) {
    let nrm = prob.gram().norm(c);
    if nrm > radius && nrm > 0.0 {
        let s = radius / nrm;
        c.iter_mut().for_each(|x| *x *= s);
    }
}

fn scaled_to(prob: &SpanProblem, c: &[f64], radius: f64) -> Vec<f64> {
    let nrm = prob.gram().norm(c);
    if nrm == 0.0 {
        return c.to_vec();
    }
    c.iter().map(|x| x * radius / nrm).collect()
}

struct Ascent {
    cv: Vec<f64>,
    cp: Vec<f64>,
    converged: bool,
    iterations: usize,
}

/// Projected normalized-gradient ascent on the smoothed min-margin; returns
/// the visited iterate with the largest hard min-margin.
fn ascend(prob: &SpanProblem, mut cv: Vec<f64>, mut cp: Vec<f64>, r: f64, big_r: f64, cfg: &JointConfig) -> Result<Ascent> {
    let ds = prob.dataset();
    let start = prob.gram().evaluate(ds, &cv, &cp)?;
    // Margins are measured in units of the starting min-margin so that the
    // temperature schedule is scale free.
    let m0 = min_margin(&start);
    let scale = if m0 > 0.0 { m0 } else { start.iter().map(|e| e.margin.abs()).fold(0.0, f64::max).max(1e-300) };
    let mut converged = false;
    let mut iterations = 0;
    let mut best = (cv.clone(), cp.clone(), m0);
    for stage in 0..cfg.stages {
        let tau = cfg.tau0 / 2f64.powi(stage as i32);
        let mut step = 0.1;
        let mut evals = prob.gram().evaluate(ds, &cv, &cp)?;
        let z: Vec<f64> = evals.iter().map(|e| e.margin / scale).collect();
        let (mut obj, mut w) = soft_min(&z, tau);
        let mut history = vec![obj];
        converged = false;
        for _ in 0..cfg.max_iters_per_stage {
            iterations += 1;
            let (gv, gp) = weighted_margin_grad(prob, &evals, &w);
            let nv = prob.gram().norm(&gv);
            let np = prob.gram().norm(&gp);
            if nv == 0.0 && np == 0.0 {
                converged = true;
                break;
            }
            let mut accepted = false;
            while step > 1e-12 {
                let mut tv = cv.clone();
                let mut tp = cp.clone();
                if nv > 0.0 {
                    tv.iter_mut().zip(&gv).for_each(|(x, g)| *x += step * r * g / nv);
                }
                if np > 0.0 {
                    tp.iter_mut().zip(&gp).for_each(|(x, g)| *x += step * big_r * g / np);
                }
                project(prob, &mut tv, r);
                project(prob, &mut tp, big_r);
                let te = prob.gram().evaluate(ds, &tv, &tp)?;
                let tz: Vec<f64> = te.iter().map(|e| e.margin / scale).collect();
                let (tobj, tw) = soft_min(&tz, tau);
                if !tobj.is_finite() {
                    return Err(Error::NotConverged(format!("smoothed objective became {tobj} at stage {stage}")));
                }
                if tobj > obj {
                    let hard = min_margin(&te);
                    if hard > best.2 {
                        best = (tv.clone(), tp.clone(), hard);
                    }
                    cv = tv;
                    cp = tp;
                    evals = te;
                    obj = tobj;
                    w = tw;
                    step = (step * 1.5).min(1.0);
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                converged = true;
                break;
            }
            history.push(obj);
            if history.len() > cfg.window {
                let old = history[history.len() - 1 - cfg.window];
                if obj - old <= cfg.tol * obj.abs().max(1e-12) {
                    converged = true;
                    break;
                }
            }
        }
    }
    Ok(Ascent { cv: best.0, cp: best.1, converged, iterations })
}

/// Approximate `argmax_{‖v‖≤r, ‖p‖≤R} min_i y_i f(X_i; v, p)`.
///
/// Two starts are run: a neutral one (`p = 0`, `v` the scaled v-SVM at
/// uniform attention) and the baseline (scaled p-SVM direction with the
/// scaled v-SVM at that attention). The iterate with the larger hard
/// min-margin is returned.
pub fn joint_max_margin(ds: &Dataset, r: f64, big_r: f64, cfg: &JointConfig) -> Result<JointSolution> {
    if !(r >= 0.0) || !(big_r >= 0.0) {
        return Err(Error::Parameter(format!("norm bounds must be non-negative, got r = {r}, R = {big_r}")));
    }
    let prob = SpanProblem::new(ds)?;
    let m = prob.gram().len();
    let pmm = prob.p_svm(cfg.regime, cfg.svm_tol)?;
    let vmm = prob.v_svm_optimal(cfg.regime, cfg.svm_tol)?;
    let pmm_dir = pmm.coords.clone();
    let vmm_margin = vmm.solution.margin;

    let base_p = scaled_to(&prob, &pmm_dir, big_r);
    let base_v = if r > 0.0 { scaled_to(&prob, &prob.v_svm_coords(&base_p, cfg.svm_tol)?.coords, r) } else { vec![0.0; m] };
    let baseline_min_margin = min_margin(&prob.gram().evaluate(ds, &base_v, &base_p)?);

    let finish = |cv: Vec<f64>, cp: Vec<f64>, converged: bool, start: &'static str, iterations: usize| -> Result<JointSolution> {
        let evals = prob.gram().evaluate(ds, &cv, &cp)?;
        let achieved = min_margin(&evals);
        let opt = super::optimal_selection(ds, cfg.regime);
        let worst = ds
            .samples()
            .iter()
            .zip(&evals)
            .zip(&opt)
            .map(|((s, e), &slot)| 1.0 - if slot == s.signal_slot { e.s_signal } else { e.s_noise })
            .fold(0.0, f64::max);
        let v = prob.gram().synthesize(ds, &cv);
        let p = prob.gram().synthesize(ds, &cp);
        let gap = if r > 0.0 { 1.0 - achieved / (r * vmm_margin) } else { 1.0 };
        Ok(JointSolution {
            diagnostics: JointDiagnostics {
                cos_p: cosine(&p, &pmm.solution.weights),
                cos_v: cosine(&v, &vmm.solution.weights),
                worst_non_optimal_attention: worst,
                relative_margin_gap: gap,
                baseline_min_margin,
                start,
                iterations,
            },
            v,
            p,
            achieved_min_margin: achieved,
            head_bound: r,
            attention_bound: big_r,
            converged,
        })
    };

    if r == 0.0 {
        return finish(vec![0.0; m], base_p, true, "zero_head", 0);
    }
    let neutral_p = vec![0.0; m];
    let neutral_v = scaled_to(&prob, &prob.v_svm_coords(&neutral_p, cfg.svm_tol)?.coords, r);
    let a = ascend(&prob, neutral_v, neutral_p, r, big_r, cfg)?;
    let b = ascend(&prob, base_v, base_p, r, big_r, cfg)?;
    let ma = min_margin(&prob.gram().evaluate(ds, &a.cv, &a.cp)?);
    let mb = min_margin(&prob.gram().evaluate(ds, &b.cv, &b.cp)?);
    if mb >= ma {
        finish(b.cv, b.cp, b.converged, "baseline", a.iterations + b.iterations)
    } else {
        finish(a.cv, a.cp, a.converged, "neutral", a.iterations + b.iterations)
    }
}

/// Approximate `argmin ‖p‖² + ‖v‖²` subject to `min_i y_i f(X_i) ≥ γ` by an
/// augmented-Lagrangian penalty method. Each candidate is repaired by
/// rescaling `v` (margins are linear in `v`), so the result is feasible.
pub fn min_norm_with_margin(ds: &Dataset, gamma: f64, cfg: &JointConfig) -> Result<JointSolution> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("target margin must be positive, got {gamma}")));
    }
    let prob = SpanProblem::new(ds)?;
    let m = prob.gram().len();
    let n = ds.n();
    let g = prob.gram();
    let pmm = prob.p_svm(cfg.regime, cfg.svm_tol)?;
    let vmm = prob.v_svm_optimal(cfg.regime, cfg.svm_tol)?;

    let objective = |cv: &[f64], cp: &[f64]| {
        let a = g.norm(cv);
        let b = g.norm(cp);
        a * a + b * b
    };
    let repair = |cv: &[f64], cp: &[f64]| -> Result<Option<Vec<f64>>> {
        let mm = min_margin(&g.evaluate(ds, cv, cp)?);
        Ok((mm > 0.0).then(|| cv.iter().map(|x| x * gamma / mm).collect()))
    };

    let mut cp = vec![0.0; m];
    let mut cv: Vec<f64> = prob.v_svm_coords(&cp, cfg.svm_tol)?.coords.iter().map(|x| x * gamma).collect();
    let f0 = objective(&cv, &cp);
    let mut best = (cv.clone(), cp.clone(), f0);
    let mut lambda = vec![0.0; n];
    let mut mu = 10.0;
    let mut last_violation = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    // Normalized constraint h_i = (γ − m_i)/γ ≤ 0 and objective f / f0.
    let lagrangian = |cv: &[f64], cp: &[f64], lambda: &[f64], mu: f64| -> Result<(f64, Vec<SampleEval>)> {
        let evals = g.evaluate(ds, cv, cp)?;
        let mut val = objective(cv, cp) / f0;
        for (e, l) in evals.iter().zip(lambda) {
            let h = (gamma - e.margin) / gamma;
            let t = (l + mu * h).max(0.0);
            val += (t * t - l * l) / (2.0 * mu);
        }
        Ok((val, evals))
    };

    for _ in 0..cfg.outer_rounds {
        let mut step = 1e-2;
        let (mut val, mut evals) = lagrangian(&cv, &cp, &lambda, mu)?;
        for _ in 0..cfg.max_iters_per_stage {
            iterations += 1;
            let weights: Vec<f64> = evals
                .iter()
                .zip(&lambda)
                .map(|(e, l)| -(l + mu * (gamma - e.margin) / gamma).max(0.0) / gamma)
                .collect();
            let (mut gv, mut gp) = weighted_margin_grad(&prob, &evals, &weights);
            gv.iter_mut().zip(&cv).for_each(|(x, c)| *x += 2.0 * c / f0);
            gp.iter_mut().zip(&cp).for_each(|(x, c)| *x += 2.0 * c / f0);
            let gn = (g.norm(&gv).powi(2) + g.norm(&gp).powi(2)).sqrt();
            if gn == 0.0 {
                break;
            }
            let mut accepted = false;
            while step > 1e-16 {
                let tv: Vec<f64> = cv.iter().zip(&gv).map(|(c, d)| c - step * d).collect();
                let tp: Vec<f64> = cp.iter().zip(&gp).map(|(c, d)| c - step * d).collect();
                let (tval, te) = lagrangian(&tv, &tp, &lambda, mu)?;
                if tval < val {
                    cv = tv;
                    cp = tp;
                    val = tval;
                    evals = te;
                    step *= 1.5;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let violation = evals.iter().map(|e| ((gamma - e.margin) / gamma).max(0.0)).fold(0.0, f64::max);
        for (l, e) in lambda.iter_mut().zip(&evals) {
            *l = (*l + mu * (gamma - e.margin) / gamma).max(0.0);
        }
        if let Some(rv) = repair(&cv, &cp)? {
            let f = objective(&rv, &cp);
            if f < best.2 {
                let improvement = (best.2 - f) / best.2;
                best = (rv, cp.clone(), f);
                if violation <= 1e-6 && improvement <= 1e-9 {
                    converged = true;
                    break;
                }
            } else if violation <= 1e-6 {
                converged = true;
                break;
            }
        }
        if violation > 0.25 * last_violation {
            mu *= 5.0;
        }
        last_violation = violation;
    }

    let (cv, cp, _) = best;
    let evals = g.evaluate(ds, &cv, &cp)?;
    let achieved = min_margin(&evals);
    if !(achieved >= gamma * (1.0 - 1e-3)) {
        return Err(Error::Infeasible(format!("min-norm iterate reaches margin {achieved} < {gamma}")));
    }
    let opt = super::optimal_selection(ds, cfg.regime);
    let worst = ds
        .samples()
        .iter()
        .zip(&evals)
        .zip(&opt)
        .map(|((s, e), &slot)| 1.0 - if slot == s.signal_slot { e.s_signal } else { e.s_noise })
        .fold(0.0, f64::max);
    let v = g.synthesize(ds, &cv);
    let p = g.synthesize(ds, &cp);
    let r = crate::linalg::norm(&v);
    let big_r = crate::linalg::norm(&p);
    Ok(JointSolution {
        diagnostics: JointDiagnostics {
            cos_p: cosine(&p, &pmm.solution.weights),
            cos_v: cosine(&v, &vmm.solution.weights),
            worst_non_optimal_attention: worst,
            relative_margin_gap: if r > 0.0 { 1.0 - achieved / (r * vmm.solution.margin) } else { 1.0 },
            baseline_min_margin: f64::NAN,
            start: "uniform_attention",
            iterations,
        },
        v,
        p,
        achieved_min_margin: achieved,
        head_bound: r,
        attention_bound: big_r,
        converged,
    })
}
