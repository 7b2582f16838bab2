//! The reduced single-head attention model `f(X) = v^T X^T softmax(X p)`.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{Cluster, Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

/// Attention vector `p` and linear head `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub p: Vec<f64>,
    pub v: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(d: usize) -> Self {
        Self { p: vec![0.0; d], v: vec![0.0; d] }
    }

    pub fn new(p: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if p.len() != v.len() {
            return Err(Error::Dimension(format!("p has length {}, v has length {}", p.len(), v.len())));
        }
        Ok(Self { p, v })
    }

    pub fn d(&self) -> usize {
        self.v.len()
    }
}

/// Softmax output `s`, attention output `r = s_1 x1 + s_2 x2` and score.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub s: [f64; 2],
    pub r: Vec<f64>,
    pub score: f64,
}

/// Two-way softmax, shifted by the larger logit.
pub fn softmax2(logits: [f64; 2]) -> Result<[f64; 2]> {
    if !logits[0].is_finite() || !logits[1].is_finite() {
        return Err(Error::Numeric(format!("softmax logits {logits:?}")));
    }
    Ok(softmax2_unchecked(logits))
}

#[inline]
pub(crate) fn softmax2_unchecked(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

fn check_shapes(params: &ModelParams, x: [&[f64]; 2]) -> Result<()> {
    let d = params.d();
    if params.p.len() != d || x[0].len() != d || x[1].len() != d {
        return Err(Error::Dimension(format!(
            "params of length {d} against tokens of length {} and {}",
            x[0].len(),
            x[1].len()
        )));
    }
    Ok(())
}

/// Full forward pass on a 2×d token matrix given by its rows.
pub fn forward(params: &ModelParams, x: [&[f64]; 2]) -> Result<AttentionState> {
    check_shapes(params, x)?;
    let s = softmax2([dot(x[0], &params.p), dot(x[1], &params.p)])?;
    let mut r = vec![0.0; params.d()];
    axpy(s[0], x[0], &mut r);
    axpy(s[1], x[1], &mut r);
    let score = dot(&params.v, &r);
    Ok(AttentionState { s, r, score })
}

/// `y_i f(X_i)` for sample `i` of a dataset.
pub fn margin(params: &ModelParams, ds: &Dataset, i: usize) -> Result<f64> {
    Ok(ds.sample(i).y() * forward(params, ds.tokens(i))?.score)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub label: Label,
    /// Set when the score is exactly zero; the label is then `+1` by
    /// convention and accuracy counts the point as an error.
    pub zero_score: bool,
}

pub fn predict_score(score: f64) -> Prediction {
    Prediction {
        label: if score < 0.0 { Label::Neg } else { Label::Pos },
        zero_score: score == 0.0,
    }
}

pub fn predict(params: &ModelParams, x: [&[f64]; 2]) -> Result<Prediction> {
    Ok(predict_score(forward(params, x)?.score))
}

/// Per-sample quantities of the forward pass, expressed in signal/noise terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEval {
    /// Softmax in storage (slot) order.
    pub s: [f64; 2],
    pub s_signal: f64,
    pub s_noise: f64,
    /// `v . x` in slot order.
    pub head_scores: [f64; 2],
    pub score: f64,
    pub margin: f64,
}

/// Forward pass over a whole dataset, using one fused pass over each noise
/// token for both `v . xi` and `p . xi`.
pub fn evaluate(params: &ModelParams, ds: &Dataset) -> Result<Vec<SampleEval>> {
    if params.d() != ds.d() || params.p.len() != ds.d() {
        return Err(Error::Dimension(format!("params have length {}, data has d = {}", params.d(), ds.d())));
    }
    let sig = ds.signal();
    let v_mu = [dot(&params.v, sig.mu1()), dot(&params.v, sig.mu2())];
    let p_mu = [dot(&params.p, sig.mu1()), dot(&params.p, sig.mu2())];
    let out = ds
        .samples()
        .iter()
        .map(|smp| {
            let (v_xi, p_xi) = dot2(&params.v, &params.p, &smp.noise);
            let k = cluster_index(smp);
            sample_eval(smp, [v_mu[k], v_xi], [p_mu[k], p_xi])
        })
        .collect::<Vec<_>>();
    if let Some(bad) = out.iter().position(|e| !e.score.is_finite()) {
        return Err(Error::Numeric(format!("score of sample {bad} is not finite")));
    }
    Ok(out)
}

pub(crate) fn cluster_index(smp: &Sample) -> usize {
    match smp.cluster() {
        Cluster::One => 0,
        Cluster::Two => 1,
    }
}

/// Builds the per-sample state from `(signal, noise)` projections of `v`
/// and `p`.
#[inline]
pub(crate) fn sample_eval(smp: &Sample, head: [f64; 2], logit: [f64; 2]) -> SampleEval {
    let sig_slot = smp.signal_slot.index();
    let mut logits = [0.0; 2];
    let mut head_scores = [0.0; 2];
    logits[sig_slot] = logit[0];
    logits[1 - sig_slot] = logit[1];
    head_scores[sig_slot] = head[0];
    head_scores[1 - sig_slot] = head[1];
    let s = softmax2_unchecked(logits);
    let score = s[0] * head_scores[0] + s[1] * head_scores[1];
    SampleEval {
        s,
        s_signal: s[sig_slot],
        s_noise: s[1 - sig_slot],
        head_scores,
        score,
        margin: smp.y() * score,
    }
}

/// `(a . x, b . x)` in one pass.
#[inline]
pub(crate) fn dot2(a: &[f64], b: &[f64], x: &[f64]) -> (f64, f64) {
    let mut s = [0.0f64; 4];
    let chunks = x.len() / 2;
    for c in 0..chunks {
        let i = 2 * c;
        s[0] += a[i] * x[i];
        s[1] += b[i] * x[i];
        s[2] += a[i + 1] * x[i + 1];
        s[3] += b[i + 1] * x[i + 1];
    }
    if x.len() % 2 == 1 {
        let i = x.len() - 1;
        s[0] += a[i] * x[i];
        s[1] += b[i] * x[i];
    }
    (s[0] + s[2], s[1] + s[3])
}

/// Coordinates of `v ≈ λ1 μ1 + λ2 μ2 + Σ y_i θ_i ξ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub lambda1: f64,
    pub lambda2: f64,
    /// One entry per sample, with the label factored out.
    pub theta: Vec<f64>,
    pub residual_norm: f64,
}

impl Decomposition {
    pub fn theta_min(&self) -> f64 {
        self.theta.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn theta_max(&self) -> f64 {
        self.theta.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rebuilds `λ1 μ1 + λ2 μ2 + Σ y_i θ_i ξ_i`.
    pub fn synthesize(&self, ds: &Dataset) -> Vec<f64> {
        let mut out = vec![0.0; ds.d()];
        axpy(self.lambda1, ds.signal().mu1(), &mut out);
        axpy(self.lambda2, ds.signal().mu2(), &mut out);
        for (s, th) in ds.samples().iter().zip(&self.theta) {
            axpy(s.y() * th, &s.noise, &mut out);
        }
        out
    }
}

/// Largest Gram condition number accepted by the decomposition.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

/// Factorized Gram system of the span vectors `μ1, μ2, ξ_1..ξ_n`, reusable
/// across many head vectors of the same dataset.
#[derive(Debug, Clone)]
pub struct SpanBasis {
    scale: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    condition: f64,
}

impl SpanBasis {
    /// Builds the unit-diagonal (Jacobi scaled) Gram matrix and factorizes it.
    pub fn new(ds: &Dataset) -> Result<Self> {
        let vecs = span_vectors(ds);
        let m = vecs.len();
        let scale: Vec<f64> = vecs.iter().map(|u| 1.0 / norm(u)).collect();
        if scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::IllConditioned { cond: f64::INFINITY });
        }
        let mut g = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            g[(i, i)] = 1.0;
            for j in (i + 1)..m {
                let v = dot(vecs[i], vecs[j]) * scale[i] * scale[j];
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        let eig = nalgebra::SymmetricEigen::new(g.clone());
        let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= MAX_GRAM_CONDITION) {
            return Err(Error::IllConditioned { cond: condition });
        }
        let chol = nalgebra::Cholesky::new(g).ok_or(Error::IllConditioned { cond: condition })?;
        Ok(Self { scale, chol, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn decompose(&self, v: &[f64], ds: &Dataset) -> Result<Decomposition> {
        if v.len() != ds.d() {
            return Err(Error::Dimension("head vector length differs from d".into()));
        }
        let vecs = span_vectors(ds);
        if vecs.len() != self.scale.len() {
            return Err(Error::Dimension("basis was built for another dataset".into()));
        }
        let rhs = DVector::from_iterator(vecs.len(), vecs.iter().zip(&self.scale).map(|(u, s)| dot(u, v) * s));
        let sol = self.chol.solve(&rhs);
        let coef: Vec<f64> = sol.iter().zip(&self.scale).map(|(c, s)| c * s).collect();
        let mut resid = v.to_vec();
        for (u, c) in vecs.iter().zip(&coef) {
            axpy(-c, u, &mut resid);
        }
        let theta = ds
            .samples()
            .iter()
            .zip(&coef[2..])
            .map(|(s, c)| c * s.y())
            .collect();
        Ok(Decomposition { lambda1: coef[0], lambda2: coef[1], theta, residual_norm: norm(&resid) })
    }
}

fn span_vectors(ds: &Dataset) -> Vec<&[f64]> {
    let mut vecs: Vec<&[f64]> = Vec::with_capacity(ds.n() + 2);
    vecs.push(ds.signal().mu1());
    vecs.push(ds.signal().mu2());
    vecs.extend(ds.samples().iter().map(|s| s.noise.as_slice()));
    vecs
}

/// Gram matrix of the span vectors `u_0 = μ1, u_1 = μ2, u_{2+i} = ξ_i`.
///
/// Vectors in this span are carried as coefficient arrays of length `n + 2`;
/// inner products then cost `O(n²)` instead of `O(d)`.
#[derive(Debug, Clone)]
pub struct SpanGram {
    m: usize,
    gram: Vec<f64>,
}

impl SpanGram {
    pub fn new(ds: &Dataset) -> Self {
        let u = span_vectors(ds);
        let m = u.len();
        let mut gram = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let g = dot(u[i], u[j]);
                gram[i * m + j] = g;
                gram[j * m + i] = g;
            }
        }
        Self { m, gram }
    }

    /// Number of span vectors, `n + 2`.
    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.gram[i * self.m..(i + 1) * self.m]
    }

    /// `u_i . (Σ_j c_j u_j)` for every `i`.
    pub fn apply(&self, c: &[f64]) -> Vec<f64> {
        (0..self.m).map(|i| dot(self.row(i), c)).collect()
    }

    /// `<Σ a_j u_j, Σ b_j u_j>`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        dot(&self.apply(a), b)
    }

    pub fn norm(&self, c: &[f64]) -> f64 {
        self.inner(c, c).max(0.0).sqrt()
    }

    /// Explicit `Σ c_j u_j`.
    pub fn synthesize(&self, ds: &Dataset, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; ds.d()];
        for (u, a) in span_vectors(ds).into_iter().zip(c) {
            if *a != 0.0 {
                axpy(*a, u, &mut out);
            }
        }
        out
    }

    /// Model evaluation for span-coordinate parameters.
    pub fn evaluate(&self, ds: &Dataset, cv: &[f64], cp: &[f64]) -> Result<Vec<SampleEval>> {
        let hv = self.apply(cv);
        let hp = self.apply(cp);
        let out: Vec<SampleEval> = ds
            .samples()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let k = cluster_index(s);
                sample_eval(s, [hv[k], hv[2 + i]], [hp[k], hp[2 + i]])
            })
            .collect();
        if let Some(bad) = out.iter().position(|e| !e.score.is_finite()) {
            return Err(Error::Numeric(format!("score of sample {bad} is not finite")));
        }
        Ok(out)
    }
}

/// Least-squares signal/noise coordinates of `v`.
pub fn decompose_v(v: &[f64], ds: &Dataset) -> Result<Decomposition> {
    SpanBasis::new(ds)?.decompose(v, ds)
}
