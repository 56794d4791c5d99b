//! Command-line front end. Exit codes: 0 ok, 2 configuration error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use certrepair::harness::{
    parse_grid, parse_thresholds, run_eval, run_predpm_trace, run_repair, run_threshold_sweep, run_train, RunConfig,
};
use certrepair::monitors::MonitorKind;
use certrepair::repair::Problem;
use certrepair::Error;

#[derive(Parser)]
#[command(
    name = "certrepair",
    version,
    about = "Train, monitor and repair neural policies with barrier and Lyapunov certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the configuration's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MonitorArg {
    Certpm,
    Predpm,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemArg {
    Joint,
    CertOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with its certificates.
    Train {
        #[command(flatten)]
        common: Common,
        /// Master seed, overriding the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run monitor-driven repair rounds on stored networks.
    Repair {
        #[command(flatten)]
        common: Common,
        /// Directory holding policy.json and the certificate files.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, value_enum)]
        monitor: Option<MonitorArg>,
        /// Predictive thresholds `u,s,n` (predpm only).
        #[arg(long, allow_hyphen_values = true)]
        thresholds: Option<String>,
        #[arg(long, value_enum)]
        problem: Option<ProblemArg>,
        /// Maximum number of repair rounds.
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate stored networks on fresh rollouts.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        rollouts: Option<usize>,
        /// Seed of the evaluation rollouts.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predictive estimates (v_U, v_S, v_N) along one execution.
    PredpmTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value_t = 0)]
        rollout_seed: u64,
        #[arg(long, allow_hyphen_values = true)]
        thresholds: Option<String>,
    },
    /// Warning percentages over a grid of thresholds, one axis at a time.
    ThresholdSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
        /// `start:stop:step` or a comma-separated list.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[arg(long, default_value_t = 0)]
        rollout_seed: u64,
    },
}

fn load(common: &Common) -> certrepair::Result<(RunConfig, PathBuf)> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> certrepair::Result<()> {
    match cli.command {
        Command::Train { common, seed } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            report(&run_train(&cfg, &out)?.files);
        }
        Command::Repair {
            common,
            models,
            monitor,
            thresholds,
            problem,
            rounds,
            seed,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            if thresholds.is_some() && !matches!(monitor, Some(MonitorArg::Predpm)) {
                return Err(Error::Config("--thresholds needs --monitor predpm".into()));
            }
            if let Some(m) = monitor {
                cfg.repair.monitor = match m {
                    MonitorArg::Certpm => MonitorKind::Certpm,
                    MonitorArg::Baseline => MonitorKind::Baseline,
                    MonitorArg::Predpm => MonitorKind::Predpm {
                        thresholds: match &thresholds {
                            Some(t) => parse_thresholds(t)?,
                            None => cfg.predpm.thresholds,
                        },
                        surrogate: cfg.predpm.surrogate.clone(),
                    },
                };
            }
            if let Some(p) = problem {
                cfg.repair.problem = match p {
                    ProblemArg::Joint => Problem::Joint,
                    ProblemArg::CertOnly => Problem::CertOnly,
                };
            }
            if let Some(r) = rounds {
                cfg.repair.max_rounds = r;
            }
            cfg.validate()?;
            let (step, rows) = run_repair(&cfg, &models, &out)?;
            for r in &rows {
                println!("round {}: {} flags, SR {:.4}", r.round, r.flags_total, r.sr);
            }
            report(&step.files);
        }
        Command::Eval {
            common,
            models,
            rollouts,
            seed,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(k) = rollouts {
                cfg.eval.rollouts = k;
            }
            cfg.validate()?;
            let seed = seed.unwrap_or_else(|| cfg.eval_seed());
            let (step, r) = run_eval(&cfg, &models, &out, seed)?;
            let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "SR {:.4}  BR {}  NDR {}  DR {}",
                r.sr,
                show(r.br),
                show(r.ndr),
                show(r.dr)
            );
            report(&step.files);
        }
        Command::PredpmTrace {
            common,
            models,
            rollout_seed,
            thresholds,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(t) = &thresholds {
                cfg.predpm.thresholds = parse_thresholds(t)?;
            }
            report(&run_predpm_trace(&cfg, &models, &out, rollout_seed)?.0.files);
        }
        Command::ThresholdSweep {
            common,
            models,
            grid,
            rollout_seed,
        } => {
            let (cfg, out) = load(&common)?;
            let grid = parse_grid(&grid)?;
            report(&run_threshold_sweep(&cfg, &models, &out, &grid, rollout_seed)?.0.files);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
