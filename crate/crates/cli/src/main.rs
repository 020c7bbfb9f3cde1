mod output;
mod sweep;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use livepp::engine::{load_scenario, Scenario, ScenarioError, Simulation};

pub const OUT_DIR_ENV: &str = "LIVEPP_OUT_DIR";

const EXIT_VALIDATION: u8 = 2;
const EXIT_INTERNAL: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

#[derive(Parser)]
#[command(name = "livepp", version, about = "Live pipeline-parallel reconfiguration simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Falls back to $LIVEPP_OUT_DIR, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override as key=value: kv_resize, kv_patch, async_weights, handshake, stacking, sharing.
    #[arg(long = "flag", value_name = "KEY=VALUE")]
    flags: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Axis {
    ConfigGrid,
    RateGrid,
    StackingGrid,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one scenario and writes trace.jsonl, metrics.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// Exit with status 4 when any reconfiguration is infeasible.
        #[arg(long)]
        fail_on_infeasible: bool,
    },
    /// Runs one simulation per grid point and writes sweep.csv and summary.json.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated grid values: rates with units ("2 req/s") or stacking factors.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Parses and validates a scenario without running it.
    Validate {
        scenario: PathBuf,
        #[arg(long = "flag", value_name = "KEY=VALUE")]
        flags: Vec<String>,
    },
}

enum Failure {
    Validation(ScenarioError),
    Internal(anyhow::Error),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Validation(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

fn load(path: &Path, flags: &[String], seed: Option<u64>) -> Result<Scenario, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut sc = load_scenario(&text)?;
    for f in flags {
        sc.apply_flag(f)?;
    }
    if let Some(s) = seed {
        sc.seed = s;
    }
    Ok(sc)
}

fn out_dir(flag: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_run(common: &Common, fail_on_infeasible: bool) -> Result<u8, Failure> {
    let sc = load(&common.scenario, &common.flags, common.seed)?;
    let dir = out_dir(&common.out)?;
    let seed = sc.seed;
    let flags = sc.flags;
    let res = Simulation::new(sc).run();
    output::write_run(&dir, &common.scenario, seed, flags, &res)?;
    for (i, o) in &res.outcomes {
        eprintln!("trigger {i}: {}", output::outcome_text(o));
    }
    eprintln!(
        "{} requests completed, run ended: {}; outputs in {}",
        res.metrics.completed,
        res.ended,
        dir.display()
    );
    let infeasible = res.outcomes.iter().any(|(_, o)| o.label() == "infeasible");
    Ok(if fail_on_infeasible && infeasible { EXIT_INFEASIBLE } else { 0 })
}

fn cmd_validate(path: &Path, flags: &[String]) -> Result<u8, Failure> {
    let sc = load(path, flags, None)?;
    println!(
        "ok: {} GPUs, {} layers, k={}, initial {}, {} trigger(s)",
        sc.cluster.len(),
        sc.model.num_layers,
        sc.model.stacking_factor,
        sc.initial,
        sc.triggers.len()
    );
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Run {
            common,
            fail_on_infeasible,
        } => cmd_run(&common, fail_on_infeasible),
        Command::Sweep { common, axis, values } => {
            let sc = load(&common.scenario, &common.flags, common.seed)?;
            let dir = out_dir(&common.out)?;
            sweep::cmd_sweep(sc, axis, &values, &dir)?;
            Ok(0)
        }
        Command::Validate { scenario, flags } => cmd_validate(&scenario, &flags),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match catch_unwind(AssertUnwindSafe(|| dispatch(cli))) {
        Ok(Ok(code)) => code,
        Ok(Err(Failure::Validation(e))) => {
            eprintln!("invalid scenario: {e}");
            EXIT_VALIDATION
        }
        Ok(Err(Failure::Internal(e))) => {
            eprintln!("error: {e:#}");
            EXIT_INTERNAL
        }
        Err(_) => {
            eprintln!("error: internal simulator failure");
            EXIT_INTERNAL
        }
    };
    ExitCode::from(code)
}
