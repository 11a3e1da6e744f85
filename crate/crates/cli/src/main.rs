//! `dsm`: estimation, balance checks and simulation studies from the shell.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dsm_core::analysis::run_analysis;
use dsm_core::balance::run_balance;
use dsm_core::config::SchemaConfig;
use dsm_core::data::{load_dataset, Dataset};
use dsm_core::sim::{run_monte_carlo, ScenarioConfig};
use dsm_core::{DsmError, ErrorKind};

#[derive(Parser)]
#[command(name = "dsm", version, about = "Double score matching estimators")]
struct Cli {
    /// Worker threads for matching, bootstrap and simulation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimate and bootstrap inference for a CSV dataset.
    Estimate(DataArgs),
    /// Covariate balance before and after matching.
    Balance(DataArgs),
    /// Monte Carlo study under the built-in data generating process.
    Simulate(SimArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the bootstrap seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for `report.json`, `table.txt` and `violin.csv`. Without it
    /// the table goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the study seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn read_config(path: &Path) -> Result<String, DsmError> {
    fs::read_to_string(path)
        .map_err(|e| DsmError::Config(format!("cannot read {}: {e}", path.display())))
}

fn load(args: &DataArgs) -> Result<(SchemaConfig, Dataset), DsmError> {
    let mut cfg = SchemaConfig::from_toml_str(&read_config(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.bootstrap.seed = seed;
    }
    let file = fs::File::open(&args.data).map_err(|e| {
        DsmError::Domain(format!("cannot open {}: {e}", args.data.display()))
    })?;
    let data = load_dataset(file, &cfg)?;
    Ok((cfg, data))
}

fn emit(out: Option<&Path>, body: &str) -> Result<(), DsmError> {
    match out {
        Some(p) => fs::write(p, body)?,
        None => println!("{body}"),
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn estimate(args: &DataArgs) -> Result<(), DsmError> {
    let (cfg, data) = load(args)?;
    let report = run_analysis(&data, &cfg)?;
    emit(args.out.as_deref(), &to_json(&report))
}

fn balance(args: &DataArgs) -> Result<(), DsmError> {
    let (cfg, data) = load(args)?;
    let rows = run_balance(&data, &cfg)?;
    let report = json!({
        "method": cfg.method.name(),
        "n": data.n(),
        "n_treated": data.arm_size(1),
        "rows": rows,
    });
    emit(args.out.as_deref(), &to_json(&report))
}

fn simulate(args: &SimArgs) -> Result<(), DsmError> {
    let mut cfg = ScenarioConfig::from_toml_str(&read_config(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let report = run_monte_carlo(&cfg)?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.json"), to_json(&report))?;
            fs::write(dir.join("table.txt"), report.table())?;
            fs::write(dir.join("violin.csv"), report.violin_csv())?;
        }
        None => print!("{}", report.table()),
    }
    Ok(())
}

fn exit_code(e: &DsmError) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Balance(a) => balance(a),
        Command::Simulate(a) => simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
