use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nlsteer::pipeline::{resolve_cache_dir, run_pipeline, ErrorRecord, Stage};
use nlsteer::scenario::{load_scenario, ObjectiveSelection, Scenario};
use nlsteer::steering::NormMode;

#[derive(Parser)]
#[command(name = "nlsteer", version, about = "Covariance steering for halo-orbit stationkeeping")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario TOML file (defaults to the built-in Earth-Moon L2 halo case).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,

    #[arg(long, global = true, value_parser = parse_objective)]
    objective: Option<ObjectiveSelection>,

    /// Monte Carlo master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Monte Carlo sample count.
    #[arg(long, global = true)]
    samples: Option<usize>,

    /// Cache directory (otherwise NLSTEER_CACHE_DIR, then .nlsteer-cache).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,

    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[arg(long, global = true, value_parser = parse_norm_mode)]
    norm_mode: Option<NormMode>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Correct the reference halo orbit.
    CorrectOrbit,
    /// Linearize the segments and compute the g coefficients.
    Precompute,
    /// Solve the steering program(s).
    Solve,
    /// Run the closed-loop Monte Carlo.
    Montecarlo,
    /// Write the comparison tables.
    Report,
    /// Every stage in order.
    All,
}

fn parse_objective(s: &str) -> Result<ObjectiveSelection, String> {
    s.parse().map_err(|e: nlsteer::Error| e.to_string())
}

fn parse_norm_mode(s: &str) -> Result<NormMode, String> {
    s.parse().map_err(|e: nlsteer::Error| e.to_string())
}

fn stages(c: Command) -> Vec<Stage> {
    match c {
        Command::CorrectOrbit => vec![Stage::CorrectOrbit],
        Command::Precompute => vec![Stage::Precompute],
        Command::Solve => vec![Stage::Solve],
        Command::Montecarlo => vec![Stage::MonteCarlo],
        Command::Report => vec![Stage::Report],
        Command::All => Stage::ALL.to_vec(),
    }
}

fn fail(record: &ErrorRecord) -> ExitCode {
    eprintln!("{}", serde_json::to_string(record).unwrap_or_else(|_| record.message.clone()));
    ExitCode::from(record.exit_code as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut scenario = match &cli.scenario {
        Some(p) => match load_scenario(p) {
            Ok(s) => s,
            Err(e) => return fail(&ErrorRecord::new("setup", &e)),
        },
        None => Scenario::l2_halo(),
    };
    if let Some(o) = cli.objective {
        scenario.run.objective = o;
    }
    if let Some(s) = cli.seed {
        scenario.run.seed = s;
    }
    if let Some(n) = cli.samples {
        scenario.run.n_samples = n;
    }
    if let Some(m) = cli.norm_mode {
        scenario.run.norm_mode = m;
    }
    let cache = resolve_cache_dir(cli.cache.as_deref());
    match run_pipeline(scenario, &stages(cli.command), &cache, &cli.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(r) => fail(&r),
    }
}
