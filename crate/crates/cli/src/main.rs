use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tweezer_cli::{run_scenario, RunOptions, Scenario, Stage};

/// Simulate and plan micromirror-driven optical tweezers from a scenario file.
#[derive(Debug, Parser)]
#[command(name = "tweezer", version)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Scenario JSON file.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,

    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the scenario output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Stage to run (repeatable); prerequisites are added automatically.
    #[arg(long = "stage", global = true, value_parser = parse_stage)]
    stages: Vec<Stage>,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize and dither the trap layout.
    Pattern,
    /// Image the mirror pattern, optionally with the axial standing wave.
    Intensity,
    /// Load atoms into the imaged potential and integrate their motion.
    Simulate,
    /// Plan, render and verify release-and-recapture moves.
    Transport,
    /// Assign atoms to target sites and batch the moves.
    Rearrange,
    /// Time-of-flight expansion and temperature fit.
    Tof,
    /// Run every configured stage.
    Report,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::Pattern => Some(Stage::Pattern),
            Command::Intensity => Some(Stage::Intensity),
            Command::Simulate => Some(Stage::Simulate),
            Command::Transport => Some(Stage::Transport),
            Command::Rearrange => Some(Stage::Rearrange),
            Command::Tof => Some(Stage::Tof),
            Command::Report => None,
        }
    }
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = cli.scenario.as_ref() else {
        eprintln!("error: --scenario <path> is required");
        return ExitCode::from(2);
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let scenario = match Scenario::from_path(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let mut stages = cli.stages.clone();
    if let Some(s) = cli.command.as_ref().and_then(Command::stage) {
        stages.push(s);
    }
    let options = RunOptions {
        seed: cli.seed,
        output_dir: cli.out.clone(),
        stages,
    };
    match run_scenario(&scenario, &options) {
        Ok(outcome) => {
            for s in &outcome.report.stages {
                match &s.error {
                    Some(e) => eprintln!("{:<10} {:?}: {}", s.stage.name(), s.status, e.message),
                    None => eprintln!("{:<10} {:?}", s.stage.name(), s.status),
                }
            }
            println!("{}", outcome.report_path.display());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
