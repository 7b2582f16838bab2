//! Logistic-loss risk, analytic gradients and full-batch gradient descent.

use std::io::Write;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, norm};
use crate::model::{
    cluster_index, evaluate, forward, softmax2, Decomposition, ModelParams, SampleEval, SpanBasis, SpanGram,
};

/// `log(1 + exp(-z))` in softplus form.
pub fn logistic_loss(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `ℓ'(z) = -1 / (1 + exp(z))`.
pub fn loss_derivative(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

/// Mean logistic loss, evaluated through the generic token-level forward pass.
pub fn empirical_risk(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for i in 0..ds.n() {
        let m = ds.sample(i).y() * forward(params, ds.tokens(i))?.score;
        total += logistic_loss(m);
    }
    Ok(total / ds.n() as f64)
}

/// `(γ1 − γ2) α1 (1 − α1)` with `α` the attention probabilities.
#[inline]
pub fn gap_coefficient(gamma: [f64; 2], alpha: [f64; 2]) -> f64 {
    (gamma[0] - gamma[1]) * alpha[0] * alpha[1]
}

/// The 2-token quadratic form `z^T (diag(α) − α α^T) γ`, written through the
/// score gap.
pub fn softmax_gap_form(z: [f64; 2], gamma: [f64; 2], p_logits: [f64; 2]) -> Result<f64> {
    let alpha = softmax2(p_logits)?;
    Ok((gamma[0] - gamma[1]) * alpha[0] * (1.0 - alpha[0]) * (z[0] - z[1]))
}

/// Coefficients of a per-sample gradient on the sample's own signal and
/// noise token.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SampleGrad {
    pub v_signal: f64,
    pub v_noise: f64,
    pub p_signal: f64,
    pub p_noise: f64,
}

/// `weight * ∇ margin_i` with respect to `v` and `p`.
pub(crate) fn margin_grad(e: &SampleEval, y: f64, signal_first: bool, weight: f64) -> SampleGrad {
    let g = gap_coefficient([y * e.head_scores[0], y * e.head_scores[1]], e.s);
    // x1 − x2 is (μ − ξ) when the signal sits in slot 1.
    let sigma = if signal_first { 1.0 } else { -1.0 };
    SampleGrad {
        v_signal: weight * y * e.s_signal,
        v_noise: weight * y * e.s_noise,
        p_signal: weight * g * sigma,
        p_noise: -weight * g * sigma,
    }
}

fn sample_grads(evals: &[SampleEval], ds: &Dataset) -> Vec<SampleGrad> {
    let inv_n = 1.0 / ds.n() as f64;
    evals
        .iter()
        .zip(ds.samples())
        .map(|(e, s)| margin_grad(e, s.y(), s.signal_slot.index() == 0, loss_derivative(e.margin) * inv_n))
        .collect()
}

/// Both gradients of the empirical risk.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub v: Vec<f64>,
    pub p: Vec<f64>,
}

/// Assembles `Σ a_i ξ_i + Σ_k b_k μ_k` for both parameter blocks in one
/// pass over the noise tokens.
fn assemble(ds: &Dataset, grads: &[SampleGrad]) -> Gradients {
    let d = ds.d();
    let mut mu_v = [0.0; 2];
    let mut mu_p = [0.0; 2];
    for (g, s) in grads.iter().zip(ds.samples()) {
        let k = cluster_index(s);
        mu_v[k] += g.v_signal;
        mu_p[k] += g.p_signal;
    }
    let mut gv = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let sig = ds.signal();
    axpy(mu_v[0], sig.mu1(), &mut gv);
    axpy(mu_v[1], sig.mu2(), &mut gv);
    axpy(mu_p[0], sig.mu1(), &mut gp);
    axpy(mu_p[1], sig.mu2(), &mut gp);
    for (g, s) in grads.iter().zip(ds.samples()) {
        for ((a, b), x) in gv.iter_mut().zip(gp.iter_mut()).zip(&s.noise) {
            *a += g.v_noise * x;
            *b += g.p_noise * x;
        }
    }
    Gradients { v: gv, p: gp }
}

/// Analytic gradients, sharing one forward evaluation.
pub fn gradients(params: &ModelParams, ds: &Dataset) -> Result<Gradients> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let evals = evaluate(params, ds)?;
    Ok(assemble(ds, &sample_grads(&evals, ds)))
}

pub fn grad_v(params: &ModelParams, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(gradients(params, ds)?.v)
}

pub fn grad_p(params: &ModelParams, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(gradients(params, ds)?.p)
}

/// Central differences of [`empirical_risk`] in every coordinate.
pub fn finite_diff_grads(params: &ModelParams, ds: &Dataset, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let d = params.d();
    let mut work = params.clone();
    let mut gv = vec![0.0; d];
    let mut gp = vec![0.0; d];
    for j in 0..d {
        let orig = work.v[j];
        work.v[j] = orig + h;
        let up = empirical_risk(&work, ds)?;
        work.v[j] = orig - h;
        let dn = empirical_risk(&work, ds)?;
        work.v[j] = orig;
        gv[j] = (up - dn) / (2.0 * h);

        let orig = work.p[j];
        work.p[j] = orig + h;
        let up = empirical_risk(&work, ds)?;
        work.p[j] = orig - h;
        let dn = empirical_risk(&work, ds)?;
        work.p[j] = orig;
        gp[j] = (up - dn) / (2.0 * h);
    }
    Ok((gv, gp))
}

/// How the iterates are stored during descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Span coordinates when that is cheaper, else direct.
    #[default]
    Auto,
    /// Full d-dimensional vectors.
    Direct,
    /// Coordinates on `μ1, μ2, ξ_1..ξ_n` with a precomputed Gram matrix.
    /// Iterates from zero never leave this span.
    Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdConfig {
    pub step_size: f64,
    pub steps: usize,
    pub record_every: usize,
    /// Stop this many steps after the first interpolating step.
    pub early_stop_after_fit: Option<usize>,
    pub decompose: bool,
    pub backend: Backend,
}

impl GdConfig {
    pub fn new(step_size: f64, steps: usize) -> Self {
        Self { step_size, steps, record_every: 1, early_stop_after_fit: None, decompose: false, backend: Backend::Auto }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Parameter(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.record_every == 0 {
            return Err(Error::Parameter("record stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Test accuracy against the clean labels of the same batch.
    pub clean_test_accuracy: Option<f64>,
    pub mean_signal_attention_clean: Option<f64>,
    pub mean_signal_attention_noisy: Option<f64>,
    pub decomposition: Option<Decomposition>,
    pub p_norm: f64,
    pub v_norm: f64,
}

impl TrajectoryRecord {
    pub fn mean_noise_attention_noisy(&self) -> Option<f64> {
        self.mean_signal_attention_noisy.map(|s| 1.0 - s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    /// First step whose iterate classifies every training point correctly.
    pub fit_step: Option<usize>,
    /// Parameters at steps 0, 1, 2 (when reached) and at the last step.
    pub snapshots: Vec<Snapshot>,
    /// Index of the last iterate.
    pub last_step: usize,
    pub backend: Backend,
}

impl Trajectory {
    pub fn record(&self, step: usize) -> Result<&TrajectoryRecord> {
        self.records.iter().find(|r| r.step == step).ok_or(Error::MissingRecord(step))
    }

    pub fn params_at(&self, step: usize) -> Result<&ModelParams> {
        self.snapshots.iter().find(|s| s.step == step).map(|s| &s.params).ok_or(Error::MissingRecord(step))
    }

    pub fn final_record(&self) -> &TrajectoryRecord {
        self.records.last().expect("a trajectory always holds the step-0 record")
    }

    pub fn final_params(&self) -> &ModelParams {
        &self.snapshots.last().expect("a trajectory always holds a snapshot").params
    }
}

/// Per-step summary that does not need explicit parameters.
struct StepStats {
    loss: f64,
    train_accuracy: f64,
    sig_clean: Option<f64>,
    sig_noisy: Option<f64>,
}

fn step_stats(evals: &[SampleEval], ds: &Dataset) -> StepStats {
    let n = ds.n() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for e in evals {
        loss += logistic_loss(e.margin);
        if e.margin > 0.0 {
            correct += 1;
        }
    }
    let sets = ds.sets();
    let mean = |idx: &[usize]| {
        if idx.is_empty() {
            None
        } else {
            Some(idx.iter().map(|&i| evals[i].s_signal).sum::<f64>() / idx.len() as f64)
        }
    };
    StepStats {
        loss: loss / n,
        train_accuracy: correct as f64 / n,
        sig_clean: mean(&sets.clean),
        sig_noisy: mean(&sets.noisy),
    }
}

/// Accuracy of the model on a batch against the observed and clean labels.
pub(crate) fn batch_accuracies(params: &ModelParams, ds: &Dataset) -> Result<(f64, f64)> {
    let evals = evaluate(params, ds)?;
    let mut obs = 0usize;
    let mut clean = 0usize;
    for (e, s) in evals.iter().zip(ds.samples()) {
        if e.margin > 0.0 {
            obs += 1;
        }
        if s.clean_label.sign() * e.score > 0.0 {
            clean += 1;
        }
    }
    let m = ds.n() as f64;
    Ok((obs as f64 / m, clean as f64 / m))
}

/// Iterate storage; both variants run the same update arithmetic per sample.
enum State {
    Direct(ModelParams),
    Span { gram: SpanGram, cv: Vec<f64>, cp: Vec<f64> },
}

impl State {
    fn new(ds: &Dataset, backend: Backend) -> Self {
        match backend {
            Backend::Direct | Backend::Auto => State::Direct(ModelParams::zeros(ds.d())),
            Backend::Span => {
                let gram = SpanGram::new(ds);
                let m = gram.len();
                State::Span { gram, cv: vec![0.0; m], cp: vec![0.0; m] }
            }
        }
    }

    fn evaluate(&self, ds: &Dataset) -> Result<Vec<SampleEval>> {
        match self {
            State::Direct(params) => evaluate(params, ds),
            State::Span { gram, cv, cp } => gram.evaluate(ds, cv, cp),
        }
    }

    fn update(&mut self, ds: &Dataset, evals: &[SampleEval], step_size: f64) {
        let grads = sample_grads(evals, ds);
        match self {
            State::Direct(params) => {
                let g = assemble(ds, &grads);
                axpy(-step_size, &g.v, &mut params.v);
                axpy(-step_size, &g.p, &mut params.p);
            }
            State::Span { cv, cp, .. } => {
                for (i, (g, s)) in grads.iter().zip(ds.samples()).enumerate() {
                    let k = cluster_index(s);
                    cv[k] -= step_size * g.v_signal;
                    cp[k] -= step_size * g.p_signal;
                    cv[2 + i] -= step_size * g.v_noise;
                    cp[2 + i] -= step_size * g.p_noise;
                }
            }
        }
    }

    fn params(&self, ds: &Dataset) -> ModelParams {
        match self {
            State::Direct(params) => params.clone(),
            State::Span { gram, cv, cp } => ModelParams { p: gram.synthesize(ds, cp), v: gram.synthesize(ds, cv) },
        }
    }
}

fn resolve_backend(ds: &Dataset, cfg: &GdConfig) -> Backend {
    match cfg.backend {
        Backend::Auto => {
            let m = ds.n() + 2;
            // Span setup costs about m²d/2; each direct step about 4nd, each
            // span step about 4m².
            if ds.d() > m && cfg.steps.saturating_mul(8) > m {
                Backend::Span
            } else {
                Backend::Direct
            }
        }
        b => b,
    }
}

/// Full-batch gradient descent from `v = p = 0` with simultaneous updates.
pub fn gd_run(train: &Dataset, test: Option<&Dataset>, cfg: &GdConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(t) = test {
        if t.d() != train.d() {
            return Err(Error::Dimension("test batch dimension differs from training set".into()));
        }
    }
    let backend = resolve_backend(train, cfg);
    let mut state = State::new(train, backend);
    let basis = if cfg.decompose { Some(SpanBasis::new(train)?) } else { None };
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut fit_step = None;
    let mut t = 0usize;
    loop {
        let evals = state.evaluate(train).map_err(|_| Error::Divergence { step: t, loss: f64::NAN })?;
        let stats = step_stats(&evals, train);
        if !stats.loss.is_finite() || stats.loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step: t, loss: stats.loss });
        }
        if fit_step.is_none() && stats.train_accuracy == 1.0 {
            fit_step = Some(t);
        }
        let stop = t >= cfg.steps
            || matches!((fit_step, cfg.early_stop_after_fit), (Some(f), Some(w)) if t >= f + w);
        if t <= 2 || t % cfg.record_every == 0 || stop {
            let params = state.params(train);
            let (test_accuracy, clean_test_accuracy) = match test {
                Some(batch) => {
                    let (a, c) = batch_accuracies(&params, batch)?;
                    (Some(a), Some(c))
                }
                None => (None, None),
            };
            let decomposition = match &basis {
                Some(b) => Some(b.decompose(&params.v, train)?),
                None => None,
            };
            records.push(TrajectoryRecord {
                step: t,
                loss: stats.loss,
                train_accuracy: stats.train_accuracy,
                test_accuracy,
                clean_test_accuracy,
                mean_signal_attention_clean: stats.sig_clean,
                mean_signal_attention_noisy: stats.sig_noisy,
                decomposition,
                p_norm: norm(&params.p),
                v_norm: norm(&params.v),
            });
            if t <= 2 || stop {
                snapshots.push(Snapshot { step: t, params });
            }
        }
        if stop {
            break;
        }
        state.update(train, &evals, cfg.step_size);
        t += 1;
    }
    Ok(Trajectory { records, fit_step, snapshots, last_step: t, backend })
}

/// Version tag written at the top of every trajectory CSV.
pub const TRAJECTORY_SCHEMA: &str = "benign-attn-trajectory/1";

pub const TRAJECTORY_COLUMNS: [&str; 13] = [
    "step",
    "loss",
    "train_acc",
    "test_acc",
    "mean_sig_attn_clean",
    "mean_sig_attn_noisy",
    "lambda1",
    "lambda2",
    "theta_min",
    "theta_max",
    "v_norm",
    "p_norm",
    "clean_test_acc",
];

/// 17 significant digits; absent values are empty fields.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, config_hash: &str, mut w: W) -> Result<()> {
    writeln!(w, "#schema={TRAJECTORY_SCHEMA},config_hash={config_hash}")?;
    writeln!(w, "{}", TRAJECTORY_COLUMNS.join(","))?;
    for r in &traj.records {
        let dec = r.decomposition.as_ref();
        let fields = [
            r.step.to_string(),
            fmt_float(r.loss),
            fmt_float(r.train_accuracy),
            fmt_opt(r.test_accuracy),
            fmt_opt(r.mean_signal_attention_clean),
            fmt_opt(r.mean_signal_attention_noisy),
            fmt_opt(dec.map(|d| d.lambda1)),
            fmt_opt(dec.map(|d| d.lambda2)),
            fmt_opt(dec.map(|d| d.theta_min())),
            fmt_opt(dec.map(|d| d.theta_max())),
            fmt_float(r.v_norm),
            fmt_float(r.p_norm),
            fmt_opt(r.clean_test_accuracy),
        ];
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
