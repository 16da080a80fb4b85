use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctrail::config::{ExperimentConfig, LiveSettings, Mode, OracleSettings};
use ctrail::report::{emit_report, ReportError};
use ctrail::runner::{run_experiment, RunError};

#[derive(Parser)]
#[command(name = "ctrail", version, about = "Trust-calibrated LLM guidance for Monte Carlo trajectory planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop episodes in the simulator.
    Run(RunArgs),
    /// Episodes replayed from a trajectory CSV.
    Replay(RunArgs),
    /// Normal versus error-injected trust traces.
    TrustDynamics(RunArgs),
    /// Every ablation variant on the same seeds.
    Ablate(RunArgs),
    /// Recompute tables of a finished run directory.
    Report {
        /// Run directory holding steps.jsonl and config.toml.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML file.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set planner.search.k=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Query the chat endpoint named by CTRAIL_API_BASE with CTRAIL_API_KEY
    /// instead of the mock oracle.
    #[arg(long)]
    live: bool,
    /// Output directory; overrides `output` in the file.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Io(String),
    Data(String),
    Run(String),
    Report(String),
    Live(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Data(_) => 4,
            Failure::Run(_) => 5,
            Failure::Report(_) => 6,
            Failure::Live(_) => 7,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m)
            | Failure::Io(m)
            | Failure::Data(m)
            | Failure::Run(m)
            | Failure::Report(m)
            | Failure::Live(m) => m,
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let m = e.to_string();
        match e {
            RunError::Config(_) => Failure::Config(m),
            RunError::Data(_) | RunError::NoEpisodes(_) => Failure::Data(m),
            RunError::Live(_) => Failure::Live(m),
            RunError::Env(_) | RunError::Episode { .. } => Failure::Run(m),
            RunError::Io { .. } => Failure::Io(m),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        let m = e.to_string();
        match e {
            ReportError::Write(inner) => inner.into(),
            _ => Failure::Report(m),
        }
    }
}

fn execute(mode: Mode, args: RunArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config, &args.overrides).map_err(|e| Failure::Config(e.to_string()))?;
    cfg.mode = mode;
    if let Some(out) = args.output {
        cfg.output = out;
    }
    if args.live && !matches!(cfg.oracle, OracleSettings::Live(_)) {
        cfg.oracle = OracleSettings::Live(LiveSettings::default());
    }
    let summary = run_experiment(&cfg)?;
    for m in &summary.metrics {
        println!(
            "{:<10} {:<13} {:<9} episodes={:<4} ADE={:.3} FDE={:.3} SR={:.3}±{:.3} RPA={:.3}",
            m.key.scenario.name(),
            m.key.ablation.name(),
            m.key.condition.name(),
            m.episodes,
            m.ade.0,
            m.fde.0,
            m.sr.0,
            m.sr.1,
            m.rpa.0,
        );
    }
    println!("wrote {}", summary.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => execute(Mode::Run, a),
        Command::Replay(a) => execute(Mode::Replay, a),
        Command::TrustDynamics(a) => execute(Mode::TrustDynamics, a),
        Command::Ablate(a) => execute(Mode::Ablate, a),
        Command::Report { dir } => emit_report(&dir)
            .map(|r| println!("{} groups, {} failures -> {}", r.metrics.len(), r.failures.len(), dir.join("report").display()))
            .map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
