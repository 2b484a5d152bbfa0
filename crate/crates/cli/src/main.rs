use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthcut_cli::{CliError, Phase, Run, RunConfig};

// Accepted both before and after the subcommand. Overrides from both
// positions apply, the top-level ones first.
#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply to every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set linearize.mu=2.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress the JSON event log on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Parser)]
#[command(name = "depthcut", version, about = "Train, linearize, distill and compile skeleton models for encrypted inference")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PhaseArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and eval sets.
    SynthData(PhaseArgs),
    /// Train the all-ReLU teacher.
    TrainTeacher(PhaseArgs),
    /// Learn which activation sites to remove.
    Linearize(PhaseArgs),
    /// Replace surviving ReLUs with polynomials and fine-tune.
    Distill(PhaseArgs),
    /// Lower the student (and baseline) to leveled circuits.
    Compile(PhaseArgs),
    /// Run the student circuit on the eval set and compare with plaintext.
    Simulate(PhaseArgs),
    /// Write profile, cost, pareto and summary tables.
    Report(PhaseArgs),
    /// Every phase in order.
    E2e {
        /// Start at this phase, reusing the artifacts of earlier ones.
        #[arg(long, value_enum)]
        skip_to: Option<Phase>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig(PhaseArgs),
}

fn merge(top: Common, sub: &Common) -> Common {
    let mut overrides = top.overrides;
    overrides.extend(sub.overrides.iter().cloned());
    Common {
        config: sub.config.clone().or(top.config),
        overrides,
        quiet: top.quiet || sub.quiet,
    }
}

fn print_report(r: &depthcut_cli::FinalReport) {
    println!("{}", serde_json::to_string_pretty(r).expect("report serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (phase, skip_to, sub) = match &cli.command {
        Command::SynthData(a) => (Some(Phase::SynthData), None, &a.common),
        Command::TrainTeacher(a) => (Some(Phase::TrainTeacher), None, &a.common),
        Command::Linearize(a) => (Some(Phase::Linearize), None, &a.common),
        Command::Distill(a) => (Some(Phase::Distill), None, &a.common),
        Command::Compile(a) => (Some(Phase::Compile), None, &a.common),
        Command::Simulate(a) => (Some(Phase::Simulate), None, &a.common),
        Command::Report(a) => (Some(Phase::Report), None, &a.common),
        Command::E2e { skip_to, common } => (None, *skip_to, common),
        Command::ShowConfig(a) => (None, None, &a.common),
    };
    let opts = merge(cli.common.clone(), sub);
    let cfg = RunConfig::load(opts.config.as_deref(), &opts.overrides)?;
    if let Command::ShowConfig(_) = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let run = Run::new(cfg, opts.quiet)?;
    match phase {
        Some(Phase::Report) => print_report(&run.report()?),
        Some(p) => run.run_phase(p)?,
        None => print_report(&run.e2e(skip_to)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "level": "error", "code": e.exit_code(), "msg": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
