//! Reference computations that share no code path with the library beyond
//! the data containers.

#![allow(dead_code)]

use benign_attn::dataset::{make_signal_pair, sample_dataset, SignalMode};
use benign_attn::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `max |a − b| / max(max |a|, max |b|, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let amax = |x: &[f64]| x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / amax(a).max(amax(b)).max(floor)
}

/// Mean logistic loss of `y ⟨v, X^T softmax(X p)⟩`, written out directly.
pub fn explicit_risk(p: &[f64], v: &[f64], ds: &Dataset) -> f64 {
    let mut total = 0.0;
    for i in 0..ds.n() {
        let [x1, x2] = ds.tokens(i);
        let (l1, l2) = (dot(p, x1), dot(p, x2));
        let top = l1.max(l2);
        let (e1, e2) = ((l1 - top).exp(), (l2 - top).exp());
        let (s1, s2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        let z = ds.sample(i).y() * (s1 * dot(v, x1) + s2 * dot(v, x2));
        total += if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() };
    }
    total / ds.n() as f64
}

/// Central differences of [`explicit_risk`] in every coordinate.
pub fn central_differences(p: &[f64], v: &[f64], ds: &Dataset, h: f64) -> (Vec<f64>, Vec<f64>) {
    let d = p.len();
    let mut gv = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let (mut pp, mut vv) = (p.to_vec(), v.to_vec());
    for j in 0..d {
        vv[j] = v[j] + h;
        let up = explicit_risk(p, &vv, ds);
        vv[j] = v[j] - h;
        let down = explicit_risk(p, &vv, ds);
        vv[j] = v[j];
        gv[j] = (up - down) / (2.0 * h);
        pp[j] = p[j] + h;
        let up = explicit_risk(&pp, v, ds);
        pp[j] = p[j] - h;
        let down = explicit_risk(&pp, v, ds);
        pp[j] = p[j];
        gp[j] = (up - down) / (2.0 * h);
    }
    (gv, gp)
}

/// `z^T J γ` with `J = diag(α) − α α^T` built entry by entry.
pub fn jacobian_form(z: [f64; 2], gamma: [f64; 2], logits: [f64; 2]) -> f64 {
    let top = logits[0].max(logits[1]);
    let e = [(logits[0] - top).exp(), (logits[1] - top).exp()];
    let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
    let mut out = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let j = if r == c { a[r] - a[r] * a[c] } else { -a[r] * a[c] };
            out += z[r] * j * gamma[c];
        }
    }
    out
}

/// Hard-margin SVM by trying every active set: for each subset `S` solve
/// `K_SS α = 1`, keep the candidates with `α > 0` satisfying every
/// constraint, return the shortest `w`. Exponential in the constraint count.
pub fn brute_force_svm(cs: &[Vec<f64>]) -> Option<Vec<f64>> {
    let m = cs.len();
    let mut best: Option<Vec<f64>> = None;
    for mask in 1u32..(1 << m) {
        let set: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let k = DMatrix::from_fn(set.len(), set.len(), |r, c| dot(&cs[set[r]], &cs[set[c]]));
        let Some(alpha) = k.lu().solve(&DVector::from_element(set.len(), 1.0)) else { continue };
        if alpha.iter().any(|&a| !(a > 0.0)) {
            continue;
        }
        let mut w = vec![0.0; cs[0].len()];
        for (&i, a) in set.iter().zip(alpha.iter()) {
            for (wj, cj) in w.iter_mut().zip(&cs[i]) {
                *wj += a * cj;
            }
        }
        if cs.iter().any(|c| dot(&w, c) < 1.0 - 1e-9) {
            continue;
        }
        if best.as_ref().is_none_or(|b| norm(&w) < norm(b)) {
            best = Some(w);
        }
    }
    best
}

/// Constraint vectors `y_i x_i^(slot)` of a pure token selection.
pub fn selection_constraints(ds: &Dataset, noise_mask: u64) -> Vec<Vec<f64>> {
    (0..ds.n())
        .map(|i| {
            let s = ds.sample(i);
            let token: &[f64] = if noise_mask >> i & 1 == 1 { &s.noise } else { ds.signal_of(i) };
            token.iter().map(|x| s.y() * x).collect()
        })
        .collect()
}

/// Random small instance with a random parameter point.
pub fn random_instance(r: &mut ChaCha8Rng, n_max: usize, d_max: usize) -> (Dataset, Vec<f64>, Vec<f64>) {
    let n = r.random_range(2..=n_max);
    let d = r.random_range(4..=d_max);
    let rho = r.random_range(0.5..4.0);
    let seed = r.random::<u64>();
    let signal = make_signal_pair(d, rho, SignalMode::RandomOrthogonal, seed).expect("valid signal");
    let ds = sample_dataset(&signal, n, r.random_range(0.0..0.45), seed).expect("valid dataset");
    let scale = r.random_range(0.05..1.0);
    let p = (0..d).map(|_| r.random_range(-scale..scale)).collect();
    let v = (0..d).map(|_| r.random_range(-scale..scale)).collect();
    (ds, p, v)
}
