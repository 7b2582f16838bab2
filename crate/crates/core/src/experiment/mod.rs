//! Configuration-driven experiment runner: single runs, SNR and dimension
//! sweeps, max-margin studies, the verification suite and gradient checks.
//!
//! Every command writes its artifacts under `output_dir/<kind>/` and finishes
//! with a `manifest.json` listing them.

mod maxmargin;
mod plot;
mod run;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::TheoremCheck;
use crate::dataset::SignalMode;
use crate::error::{Error, Result};
use crate::maxmargin::SnrRegime;
use crate::training::Backend;

pub use maxmargin::cmd_maxmargin;
pub use plot::{plot_sweep, plot_trajectory};
pub use run::{cmd_run, cmd_sweep, PHASE_COLUMNS, PHASE_SCHEMA};
pub use verify::{cmd_gradcheck, cmd_verify, majority_clean_instance, verify_report, Fault, GradientRow, VerifyOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Run,
    SweepSnr,
    SweepDim,
    Maxmargin,
    Verify,
    Gradcheck,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Run => "run",
            Kind::SweepSnr => "sweep_snr",
            Kind::SweepDim => "sweep_dim",
            Kind::Maxmargin => "maxmargin",
            Kind::Verify => "verify",
            Kind::Gradcheck => "gradcheck",
        }
    }
}

/// Every experiment hyperparameter. Key names in a config file are exactly
/// the field names; unspecified keys take the defaults of the kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub n: usize,
    pub d: usize,
    /// Signal norm. Absent for max-margin studies means `8 √(d/n)`.
    pub rho: Option<f64>,
    pub rho_list: Vec<f64>,
    pub d_list: Vec<usize>,
    pub eta: f64,
    pub beta: f64,
    pub steps: usize,
    pub test_size: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub plot: bool,
    /// Record stride; 0 picks about 200 records per run.
    pub record_every: usize,
    pub early_stop_after_fit: Option<usize>,
    pub backend: Backend,
    pub signal_mode: SignalMode,
    /// Confidence parameter of the goodness predicates.
    pub delta: f64,
    /// Bound `r` on `‖v‖` for the joint solver.
    pub head_bound: f64,
    /// Attention bounds of the joint solver, as multiples of `‖p_mm‖`.
    pub attention_multipliers: Vec<f64>,
    /// Optimal-token regime; absent means high when `ρ > √(d/n)`.
    pub regime: Option<SnrRegime>,
    /// Largest `n` for which the selection table is enumerated.
    pub enumerate_up_to: usize,
    /// Random instances per seed for gradient checks.
    pub instances: usize,
}

impl ExperimentConfig {
    /// Defaults of each kind, taken from the reference figure settings.
    pub fn defaults(kind: Kind) -> Self {
        let base = ExperimentConfig {
            kind,
            n: 200,
            d: 40000,
            rho: Some(30.0),
            rho_list: Vec::new(),
            d_list: Vec::new(),
            eta: 0.05,
            beta: 0.025,
            steps: 100,
            test_size: 2000,
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
            plot: false,
            record_every: 0,
            early_stop_after_fit: None,
            backend: Backend::Auto,
            signal_mode: SignalMode::Canonical,
            delta: 0.05,
            head_bound: 1.0,
            attention_multipliers: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            regime: None,
            enumerate_up_to: 12,
            instances: 50,
        };
        match kind {
            Kind::Run | Kind::Verify => base,
            Kind::SweepSnr => ExperimentConfig {
                n: 400,
                eta: 0.1,
                beta: 0.00015,
                rho: None,
                rho_list: vec![2.0, 5.0, 10.0, 20.0, 30.0],
                steps: 100_000,
                early_stop_after_fit: Some(200),
                ..base
            },
            Kind::SweepDim => ExperimentConfig {
                n: 500,
                d: 1000,
                eta: 0.1,
                beta: 0.02,
                d_list: vec![250, 1000, 10000],
                steps: 100_000,
                test_size: 10000,
                early_stop_after_fit: Some(200),
                ..base
            },
            Kind::Maxmargin => ExperimentConfig { n: 50, d: 50000, rho: None, eta: 0.1, test_size: 2000, ..base },
            Kind::Gradcheck => ExperimentConfig { n: 16, d: 32, rho: Some(2.0), eta: 0.2, ..base },
        }
    }

    /// Defaults of `kind`, overlaid with the keys of a TOML document.
    pub fn from_toml(kind: Kind, text: &str) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        if let Some(k) = file.get("kind") {
            let named = k.as_str().unwrap_or_default();
            if named != kind.name() {
                return Err(Error::Config(format!("config kind `{named}` does not match subcommand `{}`", kind.name())));
            }
        }
        let defaults = toml::Table::try_from(Self::defaults(kind)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = defaults;
        for (key, value) in file {
            merged.insert(key, value);
        }
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn load(kind: Kind, path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(kind, &text)
            }
            None => Ok(Self::defaults(kind)),
        }
    }

    /// Signal norm actually used for a run of dimension `d`.
    pub fn rho_for(&self, d: usize) -> f64 {
        self.rho.unwrap_or_else(|| 8.0 * (d as f64 / self.n as f64).sqrt())
    }

    pub fn regime_for(&self, rho: f64) -> SnrRegime {
        self.regime.unwrap_or({
            if rho > (self.d as f64 / self.n as f64).sqrt() {
                SnrRegime::High
            } else {
                SnrRegime::Low
            }
        })
    }

    pub fn record_stride(&self) -> usize {
        if self.record_every > 0 {
            self.record_every
        } else {
            (self.steps / 200).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.d < 3 {
            return bad(format!("d must be at least 3, got {}", self.d));
        }
        if let Some(r) = self.rho {
            if !(r > 0.0) || !r.is_finite() {
                return bad(format!("rho must be positive, got {r}"));
            }
        }
        if !(0.0..0.5).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1/2), got {}", self.eta));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.test_size == 0 {
            return bad("test_size must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        match self.kind {
            Kind::SweepSnr => {
                if self.rho_list.is_empty() {
                    return bad("sweep_snr needs a nonempty rho_list".into());
                }
                if self.rho_list.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
                    return bad("rho_list entries must be positive".into());
                }
            }
            Kind::SweepDim => {
                if self.d_list.is_empty() {
                    return bad("sweep_dim needs a nonempty d_list".into());
                }
                if self.d_list.iter().any(|&d| d < 3) {
                    return bad("d_list entries must be at least 3".into());
                }
            }
            Kind::Maxmargin => {
                if !(self.head_bound > 0.0) || self.attention_multipliers.iter().any(|c| !(*c > 0.0)) {
                    return bad("head_bound and attention_multipliers must be positive".into());
                }
            }
            Kind::Gradcheck => {
                if self.instances == 0 {
                    return bad("instances must be at least 1".into());
                }
            }
            Kind::Run | Kind::Verify => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where and whether plots
    /// are written.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        canon.plot = false;
        let json = serde_json::to_string(&canon).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Directory of this kind's artifacts.
    pub fn kind_dir(&self) -> PathBuf {
        self.output_dir.join(self.kind.name())
    }
}

/// Command-line overrides; set fields replace config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub plot: bool,
    pub steps: Option<usize>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub rho: Option<f64>,
    pub eta: Option<f64>,
    pub beta: Option<f64>,
    pub test_size: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        cfg.plot |= self.plot;
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = Some(v);
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.test_size {
            cfg.test_size = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub seed: Option<u64>,
    /// Swept value (ρ or d) the file belongs to.
    pub value: Option<f64>,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub line: String,
}

impl From<&TheoremCheck> for CheckOutcome {
    fn from(c: &TheoremCheck) -> Self {
        CheckOutcome { name: c.name.clone(), passed: c.passed, line: c.line() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: Option<u64>,
    pub value: Option<f64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<OutputEntry>,
    pub checks: Vec<CheckOutcome>,
    pub failures: Vec<RunFailure>,
    pub wall_clock_seconds: f64,
}

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const CHECK: i32 = 2;
    pub const RUNTIME: i32 = 3;
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            outputs: Vec::new(),
            checks: Vec::new(),
            failures: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if !self.failures.is_empty() {
            exit::RUNTIME
        } else if !self.all_checks_passed() {
            exit::CHECK
        } else {
            exit::SUCCESS
        }
    }

    fn add_output(&mut self, seed: Option<u64>, value: Option<f64>, path: PathBuf) {
        self.outputs.push(OutputEntry { seed, value, path });
    }

    fn add_check(&mut self, c: &TheoremCheck) {
        self.checks.push(c.into());
    }

    fn fail(&mut self, seed: Option<u64>, value: Option<f64>, err: &Error) {
        self.failures.push(RunFailure { seed, value, error: err.to_string() });
    }

    /// Writes `manifest.json` into `dir`; called last.
    fn finish(mut self, dir: &Path, started: Instant) -> Result<Self> {
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, json + "\n")?;
        Ok(self)
    }
}

/// Exit code for an error that aborted a command.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parameter(_) => exit::CONFIG,
        _ => exit::RUNTIME,
    }
}

/// Runs the command selected by `cfg.kind`.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunManifest> {
    match cfg.kind {
        Kind::Run => cmd_run(cfg),
        Kind::SweepSnr | Kind::SweepDim => cmd_sweep(cfg),
        Kind::Maxmargin => cmd_maxmargin(cfg),
        Kind::Verify => cmd_verify(cfg, &VerifyOptions::default()),
        Kind::Gradcheck => cmd_gradcheck(cfg),
    }
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.kind_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Filename-safe rendering of a swept value.
fn value_tag(x: f64) -> String {
    format!("{x}").replace('.', "p").replace('-', "m")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overlays_defaults() {
        let cfg = ExperimentConfig::from_toml(Kind::Run, "n = 20\nseeds = [3, 4]\nbeta = 0.5\n").unwrap();
        assert_eq!(cfg.n, 20);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.d, 40000);
        assert!(matches!(ExperimentConfig::from_toml(Kind::Run, "bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml(Kind::Run, "kind = \"verify\""), Err(Error::Config(_))));
    }

    #[test]
    fn flags_win_and_hash_ignores_plot() {
        let mut cfg = ExperimentConfig::defaults(Kind::Run);
        let h = cfg.hash();
        Overrides { plot: true, output_dir: Some("elsewhere".into()), ..Default::default() }.apply(&mut cfg);
        assert_eq!(cfg.hash(), h);
        Overrides { steps: Some(7), ..Default::default() }.apply(&mut cfg);
        assert_eq!(cfg.steps, 7);
        assert_ne!(cfg.hash(), h);
    }

    #[test]
    fn empty_sweep_list_is_config_error() {
        let mut cfg = ExperimentConfig::defaults(Kind::SweepSnr);
        cfg.rho_list.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::defaults(Kind::SweepDim);
        cfg.d_list.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
