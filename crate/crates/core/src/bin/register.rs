use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bias_registration::assembly::BiasKind;
use bias_registration::config::ScenarioConfig;
use bias_registration::error::{ConfigError, OutputError};
use bias_registration::harness::{
    display_unit, run_monte_carlo, sweep, MonteCarloResult, MonteCarloSettings, SweepParam,
    Weighting,
};
use bias_registration::model::{generate_scenario, run_rng};
use bias_registration::output::{write_dataset, write_rmse, write_runs, write_sweep};

/// Simulate biased multi-sensor tracking data and estimate the sensor biases.
#[derive(Parser)]
#[command(name = "register", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one dataset and write truth.csv and measurements.csv.
    Simulate {
        /// Scenario file (TOML); the built-in reference scenario if omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Monte-Carlo estimation; writes runs.csv and rmse.csv.
    Estimate(EstimateArgs),
    /// Monte-Carlo estimation over a list of parameter values; writes sweep.csv.
    Sweep {
        #[arg(long, value_parser = clap::value_parser!(SweepParam))]
        param: SweepParam,
        /// Comma-separated values. For `noise` each value is
        /// SIGMA_RANGE_M:SIGMA_ANGLE_DEG.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: EstimateArgs,
    },
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "pml", value_parser = clap::value_parser!(Weighting))]
    weight: Weighting,
    /// Stop when no bias estimate changes by more than this between sweeps
    /// (meters for range, radians for angles).
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long = "admm-tol", default_value_t = 1e-9)]
    admm_tol: f64,
    #[arg(long = "max-sweeps", default_value_t = 1000)]
    max_sweeps: usize,
    #[arg(long = "max-admm-iterations", default_value_t = 50_000)]
    max_admm_iterations: usize,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl EstimateArgs {
    fn settings(&self) -> MonteCarloSettings {
        MonteCarloSettings {
            runs: self.runs,
            base_seed: self.seed,
            weighting: self.weight,
            tolerance: self.tol,
            admm_tolerance: self.admm_tol,
            max_sweeps: self.max_sweeps,
            max_admm_iterations: self.max_admm_iterations,
            workers: self.workers,
        }
    }
}

enum Failure {
    Config(ConfigError),
    Output(OutputError),
    AllRunsFailed,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<OutputError> for Failure {
    fn from(e: OutputError) -> Self {
        Failure::Output(e)
    }
}

fn load(path: Option<&Path>) -> Result<ScenarioConfig, ConfigError> {
    match path {
        Some(p) => ScenarioConfig::load(p),
        None => Ok(ScenarioConfig::table1()),
    }
}

fn print_summary(result: &MonteCarloResult) {
    let t = &result.rmse;
    println!(
        "{} runs succeeded, {} failed",
        t.runs, t.failures
    );
    let kinds: Vec<String> = BiasKind::ALL
        .iter()
        .map(|k| format!("{} [{}]", k.name(), display_unit(*k)))
        .collect();
    println!("sensor  {}", kinds.join("  "));
    for m in 0..t.num_sensors() {
        let cells: Vec<String> = BiasKind::ALL
            .iter()
            .map(|k| format!("{:.4e}", t.get(m, *k)))
            .collect();
        println!("{:>6}  {}", m + 1, cells.join("  "));
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            out,
        } => {
            let cfg = load(scenario.as_deref())?;
            let sc = cfg.to_scenario()?;
            let data = generate_scenario(&sc, &mut run_rng(seed, 0))
                .map_err(|e| ConfigError::invalid("scenario", e.to_string()))?;
            let paths = write_dataset(&out, &data)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Estimate(args) => {
            let cfg = load(args.scenario.as_deref())?;
            let result = run_monte_carlo(&cfg, &args.settings())?;
            write_runs(&args.out.join("runs.csv"), &result.records)?;
            write_rmse(&args.out.join("rmse.csv"), &result.rmse)?;
            let total: f64 = result.records.iter().map(|r| r.wall_time_s).sum();
            log::info!("total solver time {total:.3} s");
            print_summary(&result);
            if result.all_failed() {
                return Err(Failure::AllRunsFailed);
            }
            Ok(())
        }
        Command::Sweep {
            param,
            values,
            common,
        } => {
            let cfg = load(common.scenario.as_deref())?;
            let parsed = values
                .iter()
                .map(|v| param.parse_value(v))
                .collect::<Result<Vec<_>, _>>()?;
            let points = sweep(&cfg, param, &parsed, &common.settings())?;
            write_sweep(&common.out.join("sweep.csv"), param.label(), &points)?;
            for p in &points {
                println!("{} = {}", param.label(), p.value);
                print_summary(&p.result);
            }
            if points.iter().all(|p| p.result.all_failed()) {
                return Err(Failure::AllRunsFailed);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Output(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::AllRunsFailed) => {
            eprintln!("error: every run failed");
            ExitCode::from(2)
        }
    }
}
