use std::path::PathBuf;
use std::process::ExitCode;

use benign_attn::experiment::{
    cmd_verify, execute, exit, exit_code_for, ExperimentConfig, Fault, Kind, Overrides, RunManifest, VerifyOptions,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "benign-attn", version, about = "Benign overfitting experiments for a one-head softmax attention model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// GD trajectories of the two-token model, one CSV per seed.
    Run(Common),
    /// Phase labels over a list of signal strengths.
    SweepSnr(Common),
    /// Phase labels over a list of dimensions.
    SweepDim(Common),
    /// Max-margin solutions, norm and dual checks, joint solver diagnostics.
    Maxmargin(Common),
    /// The full property suite; nonzero exit on any failed check.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Analytic against finite-difference gradients.
    Gradcheck(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    WrongGradient,
}

#[derive(Args)]
struct Common {
    /// TOML file whose keys are config field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    test_size: Option<usize>,
}

impl Common {
    fn config(&self, kind: Kind) -> benign_attn::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(kind, self.config.as_deref())?;
        Overrides {
            seeds: self.seeds.clone(),
            output_dir: self.out.clone(),
            plot: self.plot,
            steps: self.steps,
            n: self.n,
            d: self.d,
            rho: self.rho,
            eta: self.eta,
            beta: self.beta,
            test_size: self.test_size,
        }
        .apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(manifest: &RunManifest) -> i32 {
    for c in &manifest.checks {
        println!("{}", c.line);
    }
    for f in &manifest.failures {
        eprintln!("failed seed={:?} value={:?}: {}", f.seed, f.value, f.error);
    }
    println!("manifest: {}", manifest.config.kind_dir().join("manifest.json").display());
    manifest.exit_code()
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which would read as a check failure.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    let (kind, common, opts) = match cli.command {
        Command::Run(c) => (Kind::Run, c, None),
        Command::SweepSnr(c) => (Kind::SweepSnr, c, None),
        Command::SweepDim(c) => (Kind::SweepDim, c, None),
        Command::Maxmargin(c) => (Kind::Maxmargin, c, None),
        Command::Gradcheck(c) => (Kind::Gradcheck, c, None),
        Command::Verify { common, inject_fault } => {
            let fault = inject_fault.map(|FaultArg::WrongGradient| Fault::WrongGradient);
            (Kind::Verify, common, Some(VerifyOptions { fault }))
        }
    };
    let result = common.config(kind).and_then(|cfg| match &opts {
        Some(o) => cmd_verify(&cfg, o),
        None => execute(&cfg),
    });
    let code = match result {
        Ok(m) => report(&m),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    ExitCode::from(code as u8)
}
