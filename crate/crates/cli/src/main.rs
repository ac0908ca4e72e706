use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use cdrl::experiment::{
    default_run_dir, report, run_eval, run_generalize, run_grid, run_sweep, run_train, Command, ExperimentSpec,
};
use cdrl::qnet::ModelKind;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Train,
    Eval,
    Grid,
    Generalize,
    Sweep,
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::Grid => Command::Grid,
            Cmd::Generalize => Command::Generalize,
            Cmd::Sweep => Command::Sweep,
            Cmd::Report => Command::Report,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Cerebellar-inspired DDQN agents on Pong: training, noise-robustness
/// evaluation, generalization and sensitivity sweeps.
#[derive(Debug, Parser)]
#[command(name = "cdrl", version)]
struct Cli {
    command: Cmd,

    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.gamma=0.9`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory. Defaults to runs/<time>-<command>-<model>.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,

    #[arg(long, value_parser = parse_kind)]
    model: Option<ModelKind>,

    /// Dendritic gate on or off.
    #[arg(long)]
    gate: Option<Switch>,

    /// Checkpoint to evaluate (eval, grid, generalize). Repeatable.
    #[arg(long = "checkpoint", value_name = "PATH")]
    checkpoints: Vec<PathBuf>,

    /// Evaluate each checkpoint on its own training seed.
    #[arg(long)]
    paired: bool,

    /// Run directories to merge (report).
    inputs: Vec<PathBuf>,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: cdrl::Error| e.to_string())
}

fn resolve(cli: &Cli) -> cdrl::Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::resolve(cli.config.as_deref(), &cli.sets)?;
    if let Some(seeds) = &cli.seeds {
        spec.set("run.seeds", seeds)?;
    }
    if let Some(kind) = cli.model {
        spec.model.kind = kind;
    }
    if cli.paired {
        spec.run.paired_seeds = true;
    }
    match cli.gate {
        Some(Switch::On) => {
            spec.model.gate.enabled = true;
            if spec.model.kind == ModelKind::CdrlNoDendrite {
                spec.model.kind = ModelKind::Cdrl;
            }
        }
        Some(Switch::Off) => {
            spec.model.gate.enabled = false;
            if spec.model.kind == ModelKind::Cdrl {
                spec.model.kind = ModelKind::CdrlNoDendrite;
            }
        }
        None => {}
    }
    Ok(spec)
}

fn run(cli: Cli) -> cdrl::Result<()> {
    let command = Command::from(cli.command);
    let spec = resolve(&cli)?;
    let out = match &cli.out {
        Some(o) => o.clone(),
        None => default_run_dir(&std::env::current_dir().unwrap_or_default(), command, &spec),
    };
    match command {
        Command::Train => {
            for o in run_train(&spec, &out)? {
                let last = o.episodes.last();
                println!(
                    "{} episodes, final ema reward {}, checkpoint {}",
                    o.episodes.len(),
                    last.map_or("n/a".into(), |e| format!("{:.3}", e.ema_reward)),
                    o.final_checkpoint.display()
                );
            }
        }
        Command::Eval => {
            for r in run_eval(&spec, &cli.checkpoints, &out)? {
                let (w, ws) = r.win_rate();
                let (m, ms) = r.mean_reward();
                println!("{}: win rate {w:.3} ± {ws:.3}, mean reward {m:.3} ± {ms:.3}", r.model);
            }
        }
        Command::Grid => {
            let grid = run_grid(&spec, &cli.checkpoints, &out)?;
            println!("{} grid cells written to {}", grid.cells.len(), out.display());
        }
        Command::Generalize => {
            for r in run_generalize(&spec, &cli.checkpoints, &out)? {
                let (w, ws) = r.win_rate();
                println!("{} {}: win rate {w:.3} ± {ws:.3}", r.env_id, r.model);
            }
        }
        Command::Sweep => {
            let rows = run_sweep(&spec, &out)?;
            println!("{} sweep rows written to {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::Report => {
            let summary = report(&cli.inputs, &out)?;
            for p in summary.written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            let mut msg = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                msg.push_str(&format!("\n  caused by: {s}"));
                source = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
