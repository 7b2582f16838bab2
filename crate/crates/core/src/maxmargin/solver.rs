//! Hard-margin SVM `min ‖w‖ s.t. <w, c_i> ≥ 1` by dual coordinate ascent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

/// Normalized dual norm `‖α‖₁ · max_i ‖c_i‖²` above which the problem is
/// declared infeasible. It equals `(max ‖c_i‖ / margin)²` at an optimum.
pub const DUAL_NORM_CAP: f64 = 1e8;
/// Sweep budget of the coordinate ascent.
pub const MAX_SWEEPS: usize = 1_000_000;
/// Sweeps between active-set polishing attempts.
const POLISH_EVERY: usize = 25;
/// Constraints this close to antiparallel certify infeasibility.
const ANTIPARALLEL_COS: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmSolution {
    pub weights: Vec<f64>,
    /// One non-negative coefficient per constraint.
    pub dual: Vec<f64>,
    /// `1 / ‖weights‖`.
    pub margin: f64,
    pub kkt_residual: f64,
    /// Constraints with positive dual coefficient.
    pub active_set: Vec<usize>,
    pub sweeps: usize,
}

impl SvmSolution {
    pub fn norm_sq(&self) -> f64 {
        let n = norm(&self.weights);
        n * n
    }
}

/// Dual solution computed from a Gram matrix alone.
#[derive(Debug, Clone)]
pub(crate) struct GramSolution {
    pub dual: Vec<f64>,
    pub sweeps: usize,
}

fn gram_kkt(k: &[f64], m: usize, alpha: &[f64], g: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m {
        let slack = g[i] - 1.0;
        worst = worst.max((-slack).max(0.0));
        worst = worst.max(alpha[i] * slack.abs() * k[i * m + i].max(1.0));
    }
    worst
}

/// `uᵀKu / max_i K_ii` for `u = α / ‖α‖₁`: the squared distance of a point
/// of the constraints' convex hull to the origin, relative to the largest
/// constraint. A diverging dual drives it to zero, which certifies that the
/// origin lies in the hull and no separating `w` exists.
fn hull_gap(k: &[f64], m: usize, alpha: &[f64], max_diag: f64) -> f64 {
    let l1: f64 = alpha.iter().sum();
    if l1 <= 0.0 {
        return f64::INFINITY;
    }
    let quad: f64 = (0..m).map(|i| alpha[i] * dot(&k[i * m..(i + 1) * m], alpha)).sum();
    quad / (l1 * l1 * max_diag)
}

/// Hull gap below which the problem is declared infeasible early.
const HULL_GAP_INFEASIBLE: f64 = 1e-14;
/// Hull gap below which an exhausted sweep budget counts as infeasibility.
const HULL_GAP_EXHAUSTED: f64 = 1e-6;

const REFINE_ROUNDS: usize = 3;

/// Least-squares solution of `K_PP z = 1` on the index set `set`.
fn solve_on(k: &[f64], m: usize, set: &[usize]) -> Option<Vec<f64>> {
    let a = set.len();
    let kpp = DMatrix::from_fn(a, a, |r, c| k[set[r] * m + set[c]]);
    let ones = DVector::from_element(a, 1.0);
    let svd = kpp.clone().svd(true, true);
    let mut sol = svd.solve(&ones, 1e-13).ok()?;
    // Iterative refinement; near-collinear constraints leave K_PP badly
    // conditioned and a single solve short of the KKT tolerance.
    for _ in 0..REFINE_ROUNDS {
        let r = &ones - &kpp * &sol;
        sol += svd.solve(&r, 1e-13).ok()?;
    }
    if !sol.iter().all(|x| x.is_finite()) {
        return None;
    }
    // A least-squares solution with a large residual means 1 is outside the
    // range of K_PP, i.e. the dual is unbounded on this set.
    let resid = (&kpp * &sol - &ones).amax();
    (resid <= 1e-9 * (1.0 + kpp.amax() * sol.amax())).then(|| sol.iter().copied().collect())
}

/// Active-set refinement of `max Σα − ½ αᵀKα`, `α ≥ 0`, warm-started on the
/// support of `alpha`: free coordinates solve `K_PP α_P = 1` exactly, a
/// blocking coordinate leaves the set, and the most violated bound enters.
fn active_set(k: &[f64], m: usize, alpha: &[f64], tol: f64) -> Option<Vec<f64>> {
    let mut free: Vec<usize> = (0..m).filter(|&i| alpha[i] > 0.0).collect();
    let mut x = alpha.to_vec();
    for _ in 0..(4 * m + 20) {
        if free.is_empty() {
            let j = (0..m).max_by(|&a, &b| (1.0 / k[a * m + a]).total_cmp(&(1.0 / k[b * m + b])))?;
            free.push(j);
        }
        // Inner loop: move toward the unconstrained solution on the free set.
        loop {
            let z = solve_on(k, m, &free)?;
            if z.iter().all(|&v| v > 0.0) {
                for (&i, &v) in free.iter().zip(&z) {
                    x[i] = v;
                }
                break;
            }
            let mut step = 1.0f64;
            for (&i, &v) in free.iter().zip(&z) {
                if v <= 0.0 {
                    step = step.min(x[i] / (x[i] - v));
                }
            }
            for (&i, &v) in free.iter().zip(&z) {
                x[i] += step * (v - x[i]);
            }
            free.retain(|&i| x[i] > 1e-300);
            for i in 0..m {
                if !free.contains(&i) {
                    x[i] = 0.0;
                }
            }
            if free.is_empty() {
                break;
            }
        }
        let g: Vec<f64> = (0..m).map(|i| 1.0 - dot(&k[i * m..(i + 1) * m], &x)).collect();
        let entering = (0..m)
            .filter(|i| !free.contains(i))
            .map(|i| (i, g[i] * k[i * m + i].max(1.0).sqrt()))
            .filter(|&(_, v)| v > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match entering {
            Some((j, _)) => free.push(j),
            None => return Some(x),
        }
    }
    None
}

/// Replaces `alpha` by its active-set refinement if that lowers the KKT
/// residual.
fn polish(k: &[f64], m: usize, alpha: &mut [f64], g: &mut [f64], current: f64, tol: f64) -> f64 {
    let Some(trial) = active_set(k, m, alpha, tol) else {
        return current;
    };
    let trial_g: Vec<f64> = (0..m).map(|i| dot(&k[i * m..(i + 1) * m], &trial)).collect();
    let res = gram_kkt(k, m, &trial, &trial_g);
    if res <= current {
        alpha.copy_from_slice(&trial);
        g.copy_from_slice(&trial_g);
        res
    } else {
        current
    }
}

/// Coordinate ascent on `max Σα − ½ αᵀKα`, `α ≥ 0`, in fixed cyclic order.
pub(crate) fn solve_gram(k: &[f64], m: usize, tol: f64) -> Result<GramSolution> {
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("KKT tolerance must be positive, got {tol}")));
    }
    if m == 0 {
        return Err(Error::Parameter("hard-margin problem needs at least one constraint".into()));
    }
    if k.len() != m * m || k.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("constraint Gram matrix is malformed".into()));
    }
    let mut max_diag = 0.0f64;
    for i in 0..m {
        let kii = k[i * m + i];
        if !(kii > 0.0) {
            return Err(Error::Infeasible(format!("constraint {i} is the zero vector")));
        }
        max_diag = max_diag.max(kii);
    }
    for i in 0..m {
        for j in (i + 1)..m {
            if k[i * m + j] <= -ANTIPARALLEL_COS * (k[i * m + i] * k[j * m + j]).sqrt() {
                return Err(Error::Infeasible(format!("constraints {i} and {j} are antiparallel")));
            }
        }
    }
    // Near-duplicate constraints make the free-set systems singular below
    // rounding level; solve on one representative per group.
    let reps = representatives(k, m, max_diag);
    if reps.len() == m {
        return ascend_dual(k, m, tol, max_diag);
    }
    let r = reps.len();
    let sub: Vec<f64> = (0..r * r).map(|x| k[reps[x / r] * m + reps[x % r]]).collect();
    let reduced = ascend_dual(&sub, r, tol, max_diag)?;
    let mut dual = vec![0.0; m];
    for (&i, a) in reps.iter().zip(reduced.dual) {
        dual[i] = a;
    }
    Ok(GramSolution { dual, sweeps: reduced.sweeps })
}

/// Squared distance, relative to the largest squared norm, below which two
/// constraints are treated as the same.
const DUPLICATE_REL: f64 = 1e-13;

/// First index of each group of near-duplicate constraints.
fn representatives(k: &[f64], m: usize, max_diag: f64) -> Vec<usize> {
    let mut reps: Vec<usize> = Vec::with_capacity(m);
    for i in 0..m {
        let dup = reps.iter().any(|&j| k[i * m + i] + k[j * m + j] - 2.0 * k[i * m + j] <= DUPLICATE_REL * max_diag);
        if !dup {
            reps.push(i);
        }
    }
    reps
}

fn ascend_dual(k: &[f64], m: usize, tol: f64, max_diag: f64) -> Result<GramSolution> {
    let mut alpha = vec![0.0; m];
    let mut g = vec![0.0; m];
    for sweep in 1..=MAX_SWEEPS {
        for i in 0..m {
            let row = &k[i * m..(i + 1) * m];
            let next = (alpha[i] + (1.0 - g[i]) / row[i]).max(0.0);
            let delta = next - alpha[i];
            if delta != 0.0 {
                alpha[i] = next;
                axpy(delta, row, &mut g);
            }
        }
        let l1: f64 = alpha.iter().sum();
        if l1 * max_diag > DUAL_NORM_CAP {
            return Err(Error::Infeasible(format!("dual norm exceeded {DUAL_NORM_CAP:e} after {sweep} sweeps")));
        }
        let mut res = gram_kkt(k, m, &alpha, &g);
        if res > tol && sweep % POLISH_EVERY == 0 {
            if hull_gap(k, m, &alpha, max_diag) < HULL_GAP_INFEASIBLE {
                return Err(Error::Infeasible(format!("origin lies in the constraint hull (after {sweep} sweeps)")));
            }
            res = polish(k, m, &mut alpha, &mut g, res, tol);
        }
        if res <= tol {
            polish(k, m, &mut alpha, &mut g, res, tol);
            return Ok(GramSolution { dual: alpha, sweeps: sweep });
        }
    }
    if hull_gap(k, m, &alpha, max_diag) < HULL_GAP_EXHAUSTED {
        return Err(Error::Infeasible(format!("dual diverging after {MAX_SWEEPS} sweeps")));
    }
    Err(Error::NotConverged(format!("no convergence within {MAX_SWEEPS} sweeps")))
}

/// KKT residual of explicit weights: primal infeasibility and complementary
/// slackness from fresh inner products, and the stationarity gap
/// `‖w − Σ α_i c_i‖ / ‖w‖`.
pub fn kkt_residual<C: AsRef<[f64]>>(weights: &[f64], dual: &[f64], constraints: &[C]) -> f64 {
    let mut worst = 0.0f64;
    let mut rebuilt = vec![0.0; weights.len()];
    for (a, c) in dual.iter().zip(constraints) {
        let c = c.as_ref();
        let slack = dot(weights, c) - 1.0;
        worst = worst.max((-slack).max(0.0));
        worst = worst.max(a * slack.abs());
        axpy(*a, c, &mut rebuilt);
    }
    let wn = norm(weights);
    if wn > 0.0 {
        let gap: f64 = weights.iter().zip(&rebuilt).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(gap / wn);
    }
    worst
}

/// Assembles a solution from its dual and explicit constraint vectors.
pub(crate) fn finish<C: AsRef<[f64]>>(constraints: &[C], gs: GramSolution, d: usize) -> SvmSolution {
    let mut weights = vec![0.0; d];
    for (a, c) in gs.dual.iter().zip(constraints) {
        if *a != 0.0 {
            axpy(*a, c.as_ref(), &mut weights);
        }
    }
    let kkt = kkt_residual(&weights, &gs.dual, constraints);
    let active_set = (0..gs.dual.len()).filter(|&i| gs.dual[i] > 0.0).collect();
    SvmSolution { margin: 1.0 / norm(&weights), weights, dual: gs.dual, kkt_residual: kkt, active_set, sweeps: gs.sweeps }
}

/// Minimum-norm `w` with `<w, c_i> ≥ 1` for every constraint vector.
pub fn solve_hard_margin<C: AsRef<[f64]>>(constraints: &[C], tol: f64) -> Result<SvmSolution> {
    let m = constraints.len();
    let d = constraints.first().map(|c| c.as_ref().len()).unwrap_or(0);
    if constraints.iter().any(|c| c.as_ref().len() != d) {
        return Err(Error::Dimension("constraint vectors differ in length".into()));
    }
    let mut k = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = dot(constraints[i].as_ref(), constraints[j].as_ref());
            k[i * m + j] = v;
            k[j * m + i] = v;
        }
    }
    let gs = solve_gram(&k, m, tol)?;
    Ok(finish(constraints, gs, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_constraint() {
        let sol = solve_hard_margin(&[vec![2.0, 0.0]], 1e-12).unwrap();
        assert!((sol.weights[0] - 0.5).abs() < 1e-15 && sol.weights[1] == 0.0);
        assert!((sol.margin - 2.0).abs() < 1e-14);
        assert_eq!(sol.active_set, vec![0]);
    }

    #[test]
    fn contradictory_constraints() {
        let err = solve_hard_margin(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 1e-10).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        let err = solve_hard_margin(&[vec![0.0, 0.0]], 1e-10).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn triangle_through_origin_is_infeasible() {
        let s = 3f64.sqrt() / 2.0;
        let cs = [vec![1.0, 0.0], vec![-0.5, s], vec![-0.5, -s]];
        let r = solve_hard_margin(&cs, 1e-10);
        assert!(matches!(r, Err(Error::Infeasible(_))), "{r:?}");
    }

    #[test]
    fn orthogonal_pair() {
        let sol = solve_hard_margin(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 1e-12).unwrap();
        assert!((sol.weights[0] - 1.0).abs() < 1e-14 && (sol.weights[1] - 1.0).abs() < 1e-14);
        assert!((sol.margin - 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn redundant_constraint_is_inactive() {
        let sol = solve_hard_margin(&[vec![1.0, 0.0], vec![3.0, 1.0]], 1e-12).unwrap();
        assert!((sol.weights[0] - 1.0).abs() < 1e-12 && sol.weights[1].abs() < 1e-12);
        assert_eq!(sol.active_set, vec![0]);
        assert!(sol.kkt_residual <= 1e-12);
    }

    #[test]
    fn repeated_constraints_share_one_multiplier() {
        let c = vec![vec![15.0, 1e-9, 0.0], vec![15.0, 0.0, 1e-9], vec![0.0, 3.0, 0.0], vec![15.0, 1e-9, 0.0]];
        let sol = solve_hard_margin(&c, 1e-10).unwrap();
        assert_eq!(sol.active_set, vec![0, 2]);
        assert!((sol.weights[0] - 1.0 / 15.0).abs() < 1e-9);
        assert!(sol.kkt_residual <= 1e-9);
    }
}
