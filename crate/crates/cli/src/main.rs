use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drcombine::cli_io::{self, Mode, RunConfig};
use drcombine::Error;

/// Doubly robust ATE estimation from a probability sample combined with a
/// non-probability sample.
#[derive(Parser)]
#[command(name = "drcombine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit estimators on an input CSV and write a JSON report.
    Estimate(Common),
    /// Run a simulation case and write metrics.
    Simulate(Common),
    /// Write the cross-validation loss curves for an input CSV.
    CvTrace(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulation case id, e.g. 1, 5b or S1.
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Population of 20,000 instead of 50,000.
    #[arg(long)]
    desk_scale: bool,
    /// Unpenalized fits on all covariates.
    #[arg(long)]
    no_penalty: bool,
    /// Comma-separated estimator names.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    estimators: Option<Vec<String>>,
    /// Center and scale non-binary covariates over all rows.
    #[arg(long)]
    standardize: bool,
    /// Also write every simulated replicate as an input CSV.
    #[arg(long)]
    write_data: bool,
}

fn build_config(mode: Mode, c: Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.mode = mode;
    if let Some(v) = c.input {
        cfg.input = Some(v);
    }
    if let Some(v) = c.out {
        cfg.out = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = Some(v);
    }
    if let Some(v) = c.case {
        cfg.case = Some(v);
    }
    if let Some(v) = c.reps {
        cfg.reps = Some(v);
    }
    if let Some(v) = c.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = c.estimators {
        cfg.estimators = Some(v);
    }
    cfg.desk_scale |= c.desk_scale;
    cfg.standardize |= c.standardize;
    cfg.write_data |= c.write_data;
    if c.no_penalty {
        cfg.penalized = false;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Estimate(c) => {
            let cfg = build_config(Mode::Estimate, c)?;
            let out = cli_io::run_estimate(&cfg)?;
            print!("{}", cli_io::format_reports(&out.reports));
            println!("wrote {}", cfg.out.join("report.json").display());
        }
        Command::Simulate(c) => {
            let cfg = build_config(Mode::Simulate, c)?;
            let out = cli_io::run_simulate(&cfg)?;
            let m = &out.metrics;
            println!("case {}  truth {}  replicates {}  failures {}", m.case_id, m.true_theta, m.replicates, m.failures);
            for e in &m.estimators {
                println!("{:<18} bias {:>9.4}  sd {:>8.4}  coverage {:.3}", e.estimator.name(), e.bias, e.sd, e.coverage);
            }
            println!("wrote {}", cfg.out.join("metrics.csv").display());
        }
        Command::CvTrace(c) => {
            let cfg = build_config(Mode::CvTrace, c)?;
            let cv = cli_io::run_cv_trace(&cfg)?;
            println!("chosen lambda_eta {}  lambda_mu {}", cv.chosen.0, cv.chosen.1);
            println!("wrote {}", cfg.out.join("cv_trace.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DRCOMBINE_LOG", "warn")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
