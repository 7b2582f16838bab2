//! Two-token signal/noise data: signal pairs, labelled samples, datasets and
//! the concentration ("goodness") predicates used by the analysis.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::rng::{stream, Domain};

/// A binary label in `{+1, -1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Pos,
    Neg,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Pos => Label::Neg,
            Label::Neg => Label::Pos,
        }
    }

    pub fn from_sign(s: i64) -> Result<Label> {
        match s {
            1 => Ok(Label::Pos),
            -1 => Ok(Label::Neg),
            other => Err(Error::Format(format!("label must be +1 or -1, got {other}"))),
        }
    }
}

/// Token position inside a 2-token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    First,
    Second,
}

impl Slot {
    pub fn index(self) -> usize {
        match self {
            Slot::First => 0,
            Slot::Second => 1,
        }
    }

    pub fn other(self) -> Slot {
        match self {
            Slot::First => Slot::Second,
            Slot::Second => Slot::First,
        }
    }

    /// 1-based slot number as written in files.
    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_number(k: i64) -> Result<Slot> {
        match k {
            1 => Ok(Slot::First),
            2 => Ok(Slot::Second),
            other => Err(Error::Format(format!("slot must be 1 or 2, got {other}"))),
        }
    }
}

/// Which of the two signal vectors a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cluster {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    #[default]
    Canonical,
    RandomOrthogonal,
}

/// Two orthogonal signal vectors of common norm `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPair {
    mu1: Vec<f64>,
    mu2: Vec<f64>,
    rho: f64,
}

impl SignalPair {
    /// Validates the pair: equal norms, orthogonality, and `d >= 3`.
    pub fn new(mu1: Vec<f64>, mu2: Vec<f64>) -> Result<Self> {
        let d = mu1.len();
        if mu2.len() != d {
            return Err(Error::Dimension(format!(
                "signal vectors have lengths {} and {}",
                d,
                mu2.len()
            )));
        }
        if d < 3 {
            return Err(Error::Dimension(format!("need d >= 3, got d = {d}")));
        }
        let r1 = norm(&mu1);
        let r2 = norm(&mu2);
        if !(r1 > 0.0) || !r1.is_finite() {
            return Err(Error::Parameter("signal norm must be positive".into()));
        }
        if ((r1 - r2) / r1).abs() > 1e-12 {
            return Err(Error::Parameter(format!("signal norms differ: {r1} vs {r2}")));
        }
        if dot(&mu1, &mu2).abs() > 1e-10 * r1 * r1 {
            return Err(Error::Parameter("signal vectors are not orthogonal".into()));
        }
        Ok(Self { mu1, mu2, rho: r1 })
    }

    pub fn mu1(&self) -> &[f64] {
        &self.mu1
    }

    pub fn mu2(&self) -> &[f64] {
        &self.mu2
    }

    pub fn mu(&self, cluster: Cluster) -> &[f64] {
        match cluster {
            Cluster::One => &self.mu1,
            Cluster::Two => &self.mu2,
        }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn d(&self) -> usize {
        self.mu1.len()
    }

    /// Removes the components of `z` along both signal directions.
    pub fn project_out(&self, z: &mut [f64]) {
        let r2 = self.rho * self.rho;
        let c1 = dot(z, &self.mu1) / r2;
        let c2 = dot(z, &self.mu2) / r2;
        axpy(-c1, &self.mu1, z);
        axpy(-c2, &self.mu2, z);
    }
}

/// Builds a signal pair either on the first two canonical axes or as a
/// uniformly random orthonormal pair, scaled by `rho`.
pub fn make_signal_pair(d: usize, rho: f64, mode: SignalMode, seed: u64) -> Result<SignalPair> {
    if d < 3 {
        return Err(Error::Dimension(format!("need d >= 3, got d = {d}")));
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Parameter(format!("rho must be positive, got {rho}")));
    }
    let (mu1, mu2) = match mode {
        SignalMode::Canonical => {
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            a[0] = rho;
            b[1] = rho;
            (a, b)
        }
        SignalMode::RandomOrthogonal => {
            let mut rng = stream(seed, Domain::SignalPair, 0);
            let mut a: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let mut b: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let na = norm(&a);
            a.iter_mut().for_each(|x| *x /= na);
            // Two Gram-Schmidt passes keep the pair orthogonal to roundoff.
            for _ in 0..2 {
                let c = dot(&b, &a);
                axpy(-c, &a, &mut b);
            }
            let nb = norm(&b);
            b.iter_mut().for_each(|x| *x /= nb);
            a.iter_mut().for_each(|x| *x *= rho);
            b.iter_mut().for_each(|x| *x *= rho);
            (a, b)
        }
    };
    SignalPair::new(mu1, mu2)
}

/// Signal-to-noise ratio `rho / sqrt(d)`.
pub fn snr(signal: &SignalPair) -> f64 {
    signal.rho() / (signal.d() as f64).sqrt()
}

/// A labelled 2-token sequence. The signal token is stored implicitly through
/// the clean label (`+1` carries `mu1`, `-1` carries `mu2`); only the noise
/// token is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clean_label: Label,
    pub observed_label: Label,
    pub signal_slot: Slot,
    pub noise: Vec<f64>,
}

impl Sample {
    pub fn cluster(&self) -> Cluster {
        match self.clean_label {
            Label::Pos => Cluster::One,
            Label::Neg => Cluster::Two,
        }
    }

    pub fn is_noisy(&self) -> bool {
        self.clean_label != self.observed_label
    }

    pub fn y(&self) -> f64 {
        self.observed_label.sign()
    }

    pub fn noise_slot(&self) -> Slot {
        self.signal_slot.other()
    }

    /// The token rows `(x^(1), x^(2))` in storage order.
    pub fn tokens<'a>(&'a self, signal: &'a SignalPair) -> [&'a [f64]; 2] {
        let mu = signal.mu(self.cluster());
        match self.signal_slot {
            Slot::First => [mu, &self.noise],
            Slot::Second => [&self.noise, mu],
        }
    }
}

/// Clean/noisy and per-cluster index sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexSets {
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub clean1: Vec<usize>,
    pub clean2: Vec<usize>,
    pub noisy1: Vec<usize>,
    pub noisy2: Vec<usize>,
}

impl IndexSets {
    fn build(samples: &[Sample]) -> Self {
        let mut s = IndexSets::default();
        for (i, x) in samples.iter().enumerate() {
            match (x.is_noisy(), x.cluster()) {
                (false, Cluster::One) => {
                    s.clean.push(i);
                    s.clean1.push(i);
                }
                (false, Cluster::Two) => {
                    s.clean.push(i);
                    s.clean2.push(i);
                }
                (true, Cluster::One) => {
                    s.noisy.push(i);
                    s.noisy1.push(i);
                }
                (true, Cluster::Two) => {
                    s.noisy.push(i);
                    s.noisy2.push(i);
                }
            }
        }
        s
    }
}

/// An immutable collection of samples sharing one signal pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    signal: SignalPair,
    eta: f64,
    seed: u64,
    sets: IndexSets,
}

impl Dataset {
    /// Assembles a dataset, validating shapes and the noise orthogonality
    /// invariant.
    pub fn new(samples: Vec<Sample>, signal: SignalPair, eta: f64, seed: u64) -> Result<Self> {
        let d = signal.d();
        for (i, s) in samples.iter().enumerate() {
            if s.noise.len() != d {
                return Err(Error::Dimension(format!(
                    "sample {i} has noise of length {}, expected {d}",
                    s.noise.len()
                )));
            }
            let tol = 1e-8 * signal.rho() * norm(&s.noise);
            if dot(&s.noise, signal.mu1()).abs() > tol || dot(&s.noise, signal.mu2()).abs() > tol {
                return Err(Error::Parameter(format!(
                    "noise of sample {i} is not orthogonal to the signals"
                )));
            }
        }
        let sets = IndexSets::build(&samples);
        Ok(Self { samples, signal, eta, seed, sets })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn signal(&self) -> &SignalPair {
        &self.signal
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sets(&self) -> &IndexSets {
        &self.sets
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn d(&self) -> usize {
        self.signal.d()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Token rows of sample `i`.
    pub fn tokens(&self, i: usize) -> [&[f64]; 2] {
        self.samples[i].tokens(&self.signal)
    }

    /// Signal vector carried by sample `i`.
    pub fn signal_of(&self, i: usize) -> &[f64] {
        self.signal.mu(self.samples[i].cluster())
    }

    /// Copy with the noise token of sample `i` replaced (no orthogonality check,
    /// so callers can build degenerate inputs for negative tests).
    pub fn with_noise(&self, i: usize, noise: Vec<f64>) -> Result<Self> {
        if noise.len() != self.d() {
            return Err(Error::Dimension("replacement noise has wrong length".into()));
        }
        let mut out = self.clone();
        out.samples[i].noise = noise;
        Ok(out)
    }

    /// Copy restricted to the given sample indices, in order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let samples = idx.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(samples, self.signal.clone(), self.eta, self.seed)
    }

    /// Copy where every sample carries its clean label.
    pub fn with_clean_labels(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.observed_label = s.clean_label;
        }
        out.sets = IndexSets::build(&out.samples);
        out
    }
}

fn draw_sample(signal: &SignalPair, eta: f64, seed: u64, domain: Domain, index: u64) -> Sample {
    let mut rng = stream(seed, domain, index);
    let clean_label = if rng.random::<bool>() { Label::Pos } else { Label::Neg };
    let signal_slot = if rng.random::<bool>() { Slot::First } else { Slot::Second };
    let flip = rng.random::<f64>() < eta;
    let mut noise: Vec<f64> = (0..signal.d()).map(|_| rng.sample(StandardNormal)).collect();
    signal.project_out(&mut noise);
    Sample {
        clean_label,
        observed_label: if flip { clean_label.flipped() } else { clean_label },
        signal_slot,
        noise,
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..0.5).contains(&eta) {
        return Err(Error::Parameter(format!("eta must lie in [0, 1/2), got {eta}")));
    }
    Ok(())
}

fn draw(signal: &SignalPair, n: usize, eta: f64, seed: u64, domain: Domain) -> Result<Dataset> {
    let samples = (0..n)
        .map(|i| draw_sample(signal, eta, seed, domain, i as u64))
        .collect();
    Dataset::new(samples, signal.clone(), eta, seed)
}

/// Draws `n` training samples: uniform clean label, signal token chosen by
/// label, Gaussian noise with the signal directions projected out, random
/// signal slot, then an independent label flip with probability `eta`.
pub fn sample_dataset(signal: &SignalPair, n: usize, eta: f64, seed: u64) -> Result<Dataset> {
    check_eta(eta)?;
    if n == 0 {
        return Err(Error::Parameter("training set needs n >= 1".into()));
    }
    draw(signal, n, eta, seed, Domain::Train)
}

/// Fresh draws for Monte Carlo test error; uses a stream disjoint from the
/// training stream of the same seed.
pub fn sample_test_batch(signal: &SignalPair, m: usize, eta: f64, seed: u64) -> Result<Dataset> {
    check_eta(eta)?;
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    draw(signal, m, eta, seed, Domain::Test)
}

/// Which cross inner-product threshold the goodness check applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossBound {
    /// `2 sqrt(d log(6 n^2 / delta))`, the bound proven for Gaussian noise.
    #[default]
    Lemma,
    /// `sqrt(d log(12 n^2 / delta))`, the tighter constant stated in the
    /// definition of a good training set.
    Definition,
}

impl CrossBound {
    pub fn threshold(self, n: usize, d: usize, delta: f64) -> f64 {
        let (n, d) = (n as f64, d as f64);
        match self {
            CrossBound::Lemma => 2.0 * (d * (6.0 * n * n / delta).ln()).sqrt(),
            CrossBound::Definition => (d * (12.0 * n * n / delta).ln()).sqrt(),
        }
    }
}

/// Relative noise-norm tolerance `2 sqrt(log(6n/delta)/d)`.
pub fn kappa(n: usize, d: usize, delta: f64) -> f64 {
    2.0 * ((6.0 * n as f64 / delta).ln() / d as f64).sqrt()
}

/// Set-size tolerance `sqrt(2 log(16/delta)) / sqrt(n)`.
pub fn set_size_tolerance(n: usize, delta: f64) -> f64 {
    (2.0 * (16.0 / delta).ln()).sqrt() / (n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetSizeDeviation {
    pub name: &'static str,
    pub count: usize,
    /// Expected fraction of `n/2`, i.e. `eta` or `1 - eta`.
    pub center: f64,
    /// `|count/(n/2) - center|`.
    pub deviation: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodnessReport {
    pub delta: f64,
    pub kappa: f64,
    pub max_norm_deviation: f64,
    pub cross_bound: CrossBound,
    pub cross_threshold: f64,
    pub max_cross_inner: f64,
    pub set_size_tolerance: f64,
    pub set_size_deviations: Vec<SetSizeDeviation>,
    pub norms_ok: bool,
    pub cross_ok: bool,
    pub sets_ok: bool,
    pub is_good: bool,
}

/// Evaluates the three concentration clauses of a good training set with the
/// default (lemma) cross bound.
pub fn check_good_training_set(ds: &Dataset, delta: f64) -> Result<GoodnessReport> {
    check_good_training_set_with(ds, delta, CrossBound::default())
}

pub fn check_good_training_set_with(ds: &Dataset, delta: f64, bound: CrossBound) -> Result<GoodnessReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (n, d) = (ds.n(), ds.d());
    let df = d as f64;
    let kap = kappa(n, d, delta);
    let max_norm_deviation = ds
        .samples()
        .iter()
        .map(|s| (dot(&s.noise, &s.noise) / df - 1.0).abs())
        .fold(0.0, f64::max);
    // Strict interior: (1 ± kappa) d is an open interval.
    let norms_ok = max_norm_deviation < kap;

    let cross_threshold = bound.threshold(n, d, delta);
    let mut max_cross_inner = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let c = dot(&ds.samples[i].noise, &ds.samples[j].noise).abs();
            max_cross_inner = max_cross_inner.max(c);
        }
    }
    let cross_ok = max_cross_inner <= cross_threshold;

    let tol = set_size_tolerance(n, delta);
    let half = n as f64 / 2.0;
    let eta = ds.eta();
    let sets = ds.sets();
    let entries: [(&'static str, usize, f64); 4] = [
        ("C1", sets.clean1.len(), 1.0 - eta),
        ("C2", sets.clean2.len(), 1.0 - eta),
        ("N1", sets.noisy1.len(), eta),
        ("N2", sets.noisy2.len(), eta),
    ];
    let set_size_deviations: Vec<_> = entries
        .iter()
        .map(|&(name, count, center)| {
            let deviation = (count as f64 / half - center).abs();
            SetSizeDeviation { name, count, center, deviation, within: deviation <= tol }
        })
        .collect();
    let sets_ok = set_size_deviations.iter().all(|s| s.within);

    Ok(GoodnessReport {
        delta,
        kappa: kap,
        max_norm_deviation,
        cross_bound: bound,
        cross_threshold,
        max_cross_inner,
        set_size_tolerance: tol,
        set_size_deviations,
        norms_ok,
        cross_ok,
        sets_ok,
        is_good: norms_ok && cross_ok && sets_ok,
    })
}

/// True iff the test sample's noise has `|<xi_i, xi>| <= d / (c1 n)` against
/// every training noise token.
pub fn check_good_test_sample(ds: &Dataset, sample: &Sample, c1: f64) -> bool {
    let bound = ds.d() as f64 / (c1 * ds.n() as f64);
    ds.samples()
        .iter()
        .all(|s| dot(&s.noise, &sample.noise).abs() <= bound)
}

const DATASET_MAGIC: &str = "#benign-attn-dataset v1";

/// Writes the dataset as comma-separated text. After a metadata line and the
/// two signal rows (`#mu1,...`, `#mu2,...`) comes a header and one row per
/// sample: `y, y_clean, k, x1[0..d], x2[0..d]` with 17 significant digits.
pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let d = ds.d();
    writeln!(
        w,
        "{DATASET_MAGIC},n={},d={},eta={:.16e},seed={},rho={:.16e}",
        ds.n(),
        d,
        ds.eta(),
        ds.seed(),
        ds.signal().rho()
    )?;
    for (tag, mu) in [("#mu1", ds.signal().mu1()), ("#mu2", ds.signal().mu2())] {
        write!(w, "{tag}")?;
        for x in mu {
            write!(w, ",{x:.16e}")?;
        }
        writeln!(w)?;
    }
    write!(w, "y,y_clean,k")?;
    for t in 1..=2 {
        for j in 0..d {
            write!(w, ",x{t}_{j}")?;
        }
    }
    writeln!(w)?;
    for (i, s) in ds.samples().iter().enumerate() {
        write!(
            w,
            "{},{},{}",
            s.observed_label.sign() as i64,
            s.clean_label.sign() as i64,
            s.signal_slot.number()
        )?;
        for tok in ds.tokens(i) {
            for x in tok {
                write!(w, ",{x:.16e}")?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

fn parse_floats(fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad float {f:?}: {e}"))))
        .collect()
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Format("unexpected end of dataset file".into()))?
            .map_err(Error::from)
    };
    let meta = next()?;
    let mut parts = meta.split(',');
    if parts.next() != Some(DATASET_MAGIC) {
        return Err(Error::Format("missing dataset header".into()));
    }
    let mut eta = None;
    let mut seed = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("eta", v)) => eta = v.parse::<f64>().ok(),
            Some(("seed", v)) => seed = v.parse::<u64>().ok(),
            _ => {}
        }
    }
    let eta = eta.ok_or_else(|| Error::Format("missing eta".into()))?;
    let seed = seed.ok_or_else(|| Error::Format("missing seed".into()))?;
    let mut signal_row = |tag: &str| -> Result<Vec<f64>> {
        let line = next()?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.first() != Some(&tag) {
            return Err(Error::Format(format!("expected {tag} row")));
        }
        parse_floats(&fields[1..])
    };
    let mu1 = signal_row("#mu1")?;
    let mu2 = signal_row("#mu2")?;
    let signal = SignalPair::new(mu1, mu2)?;
    let d = signal.d();
    let _header = next()?;
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + 2 * d {
            return Err(Error::Format(format!(
                "row has {} fields, expected {}",
                fields.len(),
                3 + 2 * d
            )));
        }
        let int = |f: &str| -> Result<i64> {
            f.trim().parse::<i64>().map_err(|e| Error::Format(format!("bad integer {f:?}: {e}")))
        };
        let observed_label = Label::from_sign(int(fields[0])?)?;
        let clean_label = Label::from_sign(int(fields[1])?)?;
        let signal_slot = Slot::from_number(int(fields[2])?)?;
        let values = parse_floats(&fields[3..])?;
        let noise_start = signal_slot.other().index() * d;
        let noise = values[noise_start..noise_start + d].to_vec();
        samples.push(Sample { clean_label, observed_label, signal_slot, noise });
    }
    Dataset::new(samples, signal, eta, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canon(d: usize, rho: f64) -> SignalPair {
        make_signal_pair(d, rho, SignalMode::Canonical, 0).unwrap()
    }

    #[test]
    fn canonical_pair_is_on_the_axes() {
        let s = canon(4, 2.0);
        assert_eq!(s.mu1(), &[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.mu2(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn random_pair_is_orthogonal_with_norm_rho() {
        let s = make_signal_pair(4, 2.0, SignalMode::RandomOrthogonal, 7).unwrap();
        assert!((norm(s.mu1()) - 2.0).abs() < 1e-12);
        assert!((norm(s.mu2()) - 2.0).abs() < 1e-12);
        assert!(dot(s.mu1(), s.mu2()).abs() < 1e-12);
        assert_ne!(s.mu1(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn signal_pair_rejects_bad_inputs() {
        assert!(matches!(make_signal_pair(2, 1.0, SignalMode::Canonical, 0), Err(Error::Dimension(_))));
        assert!(matches!(make_signal_pair(5, 0.0, SignalMode::Canonical, 0), Err(Error::Parameter(_))));
        assert!(matches!(make_signal_pair(5, -1.0, SignalMode::Canonical, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn snr_matches_ratio() {
        assert!((snr(&canon(40000, 30.0)) - 0.15).abs() < 1e-15);
        assert!((snr(&canon(100, 10.0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_eta_has_no_noisy_samples() {
        let ds = sample_dataset(&canon(20, 3.0), 1000, 0.0, 3).unwrap();
        assert!(ds.sets().noisy.is_empty());
        assert_eq!(ds.sets().clean.len(), 1000);
    }

    #[test]
    fn flip_rate_concentrates() {
        let ds = sample_dataset(&canon(4, 1.0), 4000, 0.1, 1).unwrap();
        // Independent count over the raw flips.
        let flips = ds.samples().iter().filter(|s| s.observed_label != s.clean_label).count();
        assert_eq!(flips, ds.sets().noisy.len());
        let rate = flips as f64 / 4000.0;
        assert!((rate - 0.1).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn index_sets_partition() {
        let ds = sample_dataset(&canon(8, 2.0), 300, 0.2, 11).unwrap();
        let s = ds.sets();
        assert_eq!(s.clean.len() + s.noisy.len(), 300);
        assert_eq!(s.clean1.len() + s.clean2.len(), s.clean.len());
        assert_eq!(s.noisy1.len() + s.noisy2.len(), s.noisy.len());
        for &i in &s.clean1 {
            assert_eq!(ds.sample(i).clean_label, Label::Pos);
            assert_eq!(ds.sample(i).observed_label, Label::Pos);
        }
        for &i in &s.noisy2 {
            assert_eq!(ds.sample(i).clean_label, Label::Neg);
            assert_eq!(ds.sample(i).observed_label, Label::Pos);
        }
    }

    #[test]
    fn noise_is_orthogonal_and_tokens_are_placed() {
        let sig = make_signal_pair(50, 5.0, SignalMode::RandomOrthogonal, 2).unwrap();
        let ds = sample_dataset(&sig, 40, 0.1, 9).unwrap();
        let mut first = 0;
        for i in 0..ds.n() {
            let s = ds.sample(i);
            let nz = norm(&s.noise);
            assert!(dot(&s.noise, sig.mu1()).abs() <= 1e-8 * 5.0 * nz);
            assert!(dot(&s.noise, sig.mu2()).abs() <= 1e-8 * 5.0 * nz);
            let toks = ds.tokens(i);
            assert_eq!(toks[s.signal_slot.index()], ds.signal_of(i));
            assert_eq!(toks[s.noise_slot().index()], &s.noise[..]);
            if s.signal_slot == Slot::First {
                first += 1;
            }
        }
        assert!(first > 5 && first < 35, "slot choice should be randomized");
    }

    #[test]
    fn test_batch_determinism_and_empty_error() {
        let sig = canon(10, 1.0);
        let a = sample_test_batch(&sig, 50, 0.05, 2).unwrap();
        let b = sample_test_batch(&sig, 50, 0.05, 2).unwrap();
        assert_eq!(a, b);
        let train = sample_dataset(&sig, 50, 0.05, 2).unwrap();
        assert_ne!(a.sample(0).noise, train.sample(0).noise);
        assert!(matches!(sample_test_batch(&sig, 0, 0.05, 2), Err(Error::EmptyBatch)));
        assert_eq!(sample_test_batch(&sig, 2000, 0.05, 2).unwrap().n(), 2000);
    }

    #[test]
    fn eta_out_of_range_is_rejected() {
        let sig = canon(10, 1.0);
        assert!(matches!(sample_dataset(&sig, 5, 0.5, 0), Err(Error::Parameter(_))));
        assert!(matches!(sample_dataset(&sig, 5, -0.1, 0), Err(Error::Parameter(_))));
        assert!(matches!(sample_test_batch(&sig, 5, 0.7, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn prefix_samples_do_not_depend_on_n() {
        let sig = canon(10, 1.0);
        let a = sample_dataset(&sig, 5, 0.1, 4).unwrap();
        let b = sample_dataset(&sig, 9, 0.1, 4).unwrap();
        assert_eq!(&a.samples()[..], &b.samples()[..5]);
    }

    #[test]
    fn zeroed_noise_breaks_goodness() {
        let sig = canon(2000, 5.0);
        let ds = sample_dataset(&sig, 10, 0.0, 5).unwrap();
        let bad = ds.with_noise(3, vec![0.0; 2000]).unwrap();
        let rep = check_good_training_set(&bad, 0.05).unwrap();
        assert!(!rep.norms_ok);
        assert!(!rep.is_good);
    }

    #[test]
    fn eta_zero_set_clause_holds() {
        let sig = canon(500, 5.0);
        let ds = sample_dataset(&sig, 40, 0.0, 6).unwrap();
        let rep = check_good_training_set(&ds, 0.05).unwrap();
        for s in rep.set_size_deviations.iter().filter(|s| s.name.starts_with('N')) {
            assert_eq!(s.count, 0);
            assert!(s.within);
        }
    }

    #[test]
    fn good_test_sample_predicate() {
        let sig = canon(4000, 5.0);
        let ds = sample_dataset(&sig, 5, 0.0, 1).unwrap();
        let mut probe = ds.sample(0).clone();
        probe.noise = vec![0.0; 4000];
        assert!(check_good_test_sample(&ds, &probe, 10.0));
        probe.noise = ds.sample(0).noise.clone();
        assert!(!check_good_test_sample(&ds, &probe, 10.0));
    }

    #[test]
    fn dataset_text_roundtrip() {
        let sig = make_signal_pair(6, 1.5, SignalMode::RandomOrthogonal, 1).unwrap();
        let ds = sample_dataset(&sig, 7, 0.3, 8).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, ds);
    }
}
