//! `qflow` — experiment harness for the stochastic Q-curvature flow lab.
//!
//! Exit codes: 0 success, 1 criterion failure, 2 configuration error.

mod experiments;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "qflow",
    version,
    about = "Stochastic Q-curvature flows on flat tori"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run-configuration file (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (default: config output.dir, then $QFLOW_OUT,
    /// then ./qflow-out).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a configuration and print the derived constants.
    Validate(ConfigArgs),
    /// Deterministic and stochastic flow runs.
    Flow {
        #[command(subcommand)]
        cmd: FlowCmd,
    },
    /// Gaussian multiplicative chaos operations.
    Gmc {
        #[command(subcommand)]
        cmd: GmcCmd,
    },
    /// Symmetrising-measure sampling.
    Measure {
        #[command(subcommand)]
        cmd: MeasureCmd,
    },
    /// Identity checks (integration by parts, generators, stationarity).
    Check {
        #[command(subcommand)]
        cmd: CheckCmd,
    },
    /// Exact volume-process reference laws.
    Vol {
        #[command(subcommand)]
        cmd: VolCmd,
    },
    /// Run a named suite of experiments.
    Suite {
        #[command(subcommand)]
        cmd: SuiteCmd,
    },
}

#[derive(Subcommand)]
enum FlowCmd {
    /// Integrate the deterministic flow.
    Det(ConfigArgs),
    /// Simulate the stochastic measure-valued flow ensemble.
    Sto(ConfigArgs),
}

#[derive(Subcommand)]
enum GmcCmd {
    /// Build one chaos measure and report its summary.
    Build(ConfigArgs),
    /// Moment scan across truncations.
    Moments {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Moments to estimate.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        p: Vec<f64>,
        /// Truncation radii to scan.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        trunc: Vec<u32>,
    },
    /// Recover the field from a chaos measure.
    Invert {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Mollification radii (decreasing).
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.7")]
        eps: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum MeasureCmd {
    /// Draw samples from the symmetrising measure on the configured window.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of retained samples.
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// Sample the unwindowed measure (LQF invariant regime only).
        #[arg(long)]
        full: bool,
    },
}

#[derive(Subcommand)]
enum CheckCmd {
    /// Integration-by-parts identities.
    Ibp {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// grounded | nqf | lqf (flavor targets use the config's flavor
        /// parameters).
        #[arg(long, default_value = "grounded")]
        target: String,
        /// Number of random (G, h) pairs.
        #[arg(long, default_value_t = 5)]
        pairs: usize,
    },
    /// Generator/form identity and Dirichlet symmetry.
    Generator {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        pairs: usize,
    },
    /// LQF stationarity in the invariant regime (soft check).
    Stationary(ConfigArgs),
}

#[derive(Subcommand)]
enum VolCmd {
    /// Exact squared-Bessel(0) transition samples.
    Besq {
        #[arg(long)]
        v0: f64,
        #[arg(long)]
        t: f64,
        /// Diffusion coefficient c in dV = c sqrt(V) dB.
        #[arg(long)]
        coeff: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Exact CIR transition samples for the LQF volume parameters.
    #[command(allow_negative_numbers = true)]
    Cir {
        #[arg(long)]
        v0: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long)]
        q_ref: f64,
        #[arg(long)]
        v_ref: f64,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Two-sample Kolmogorov–Smirnov comparison of two sample files
    /// (one value per line; a header line is skipped automatically).
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Subcommand)]
enum SuiteCmd {
    /// suites: unit (exact checks), acceptance (all criteria), full
    /// (criteria + configured experiments).
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "acceptance")]
        suite: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, qflow_core::QflowError> {
    match cli.command {
        Command::Validate(args) => experiments::validate(&args.config),
        Command::Flow { cmd } => match cmd {
            FlowCmd::Det(args) => experiments::flow_det(&args.config, args.out.as_deref()),
            FlowCmd::Sto(args) => experiments::flow_sto(&args.config, args.out.as_deref()),
        },
        Command::Gmc { cmd } => match cmd {
            GmcCmd::Build(args) => experiments::gmc_build(&args.config, args.out.as_deref()),
            GmcCmd::Moments { cfg, p, trunc } => {
                experiments::gmc_moments(&cfg.config, cfg.out.as_deref(), &p, &trunc)
            }
            GmcCmd::Invert { cfg, eps } => {
                experiments::gmc_invert(&cfg.config, cfg.out.as_deref(), &eps)
            }
        },
        Command::Measure { cmd } => match cmd {
            MeasureCmd::Sample { cfg, count, full } => {
                experiments::measure_sample(&cfg.config, cfg.out.as_deref(), count, full)
            }
        },
        Command::Check { cmd } => match cmd {
            CheckCmd::Ibp { cfg, target, pairs } => {
                experiments::check_ibp(&cfg.config, cfg.out.as_deref(), &target, pairs)
            }
            CheckCmd::Generator { cfg, pairs } => {
                experiments::check_generator(&cfg.config, cfg.out.as_deref(), pairs)
            }
            CheckCmd::Stationary(args) => {
                experiments::check_stationary(&args.config, args.out.as_deref())
            }
        },
        Command::Vol { cmd } => match cmd {
            VolCmd::Besq {
                v0,
                t,
                coeff,
                samples,
                seed,
                out,
            } => experiments::vol_besq(v0, t, coeff, samples, seed, out.as_deref()),
            VolCmd::Cir {
                v0,
                t,
                n,
                q_ref,
                v_ref,
                rho,
                sigma,
                samples,
                seed,
                out,
            } => experiments::vol_cir(
                v0,
                t,
                n,
                q_ref,
                v_ref,
                rho,
                sigma,
                samples,
                seed,
                out.as_deref(),
            ),
            VolCmd::Compare { a, b } => experiments::vol_compare(&a, &b),
        },
        Command::Suite { cmd } => match cmd {
            SuiteCmd::Run { cfg, suite } => {
                experiments::suite_run(&cfg.config, cfg.out.as_deref(), &suite)
            }
        },
    }
}
