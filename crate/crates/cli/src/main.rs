mod commands;
mod io;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::commands::Outcome;
use crate::io::{write_atomic, InputFile};
use crate::manifest::{strip_out, InputDigest, RunManifest};

/// Bounding-box regression losses, anchor assignment and evaluation.
#[derive(Debug, Parser)]
#[command(name = "boxloss", version)]
struct Cli {
    /// Write the report here instead of standard output.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// DIoU distance term of a moving box over a full turn of directions.
    Sweep(commands::SweepArgs),
    /// Analytic against finite-difference gradients; exits 2 on failure.
    Gradcheck(commands::GradcheckArgs),
    /// Gradient-descent regression from a grid of starts.
    Converge(commands::ConvergeArgs),
    /// Toy detector trained on a synthetic scene.
    Toy(commands::ToyArgs),
    /// k-means over box sizes.
    Cluster(commands::ClusterArgs),
    /// Greedy non-maximum suppression per image.
    Nms(commands::NmsArgs),
    /// Average precision of detections against ground truth.
    Eval(commands::EvalArgs),
    /// Tabulate the IoU coefficient.
    Coeff(commands::CoeffArgs),
    /// Re-run the command recorded in a report's manifest line.
    Replay {
        /// A report written by this tool.
        report: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Sweep(_) => "sweep",
            Command::Gradcheck(_) => "gradcheck",
            Command::Converge(_) => "converge",
            Command::Toy(_) => "toy",
            Command::Cluster(_) => "cluster",
            Command::Nms(_) => "nms",
            Command::Eval(_) => "eval",
            Command::Coeff(_) => "coeff",
            Command::Replay { .. } => "replay",
        }
    }
}

fn execute(command: &Command) -> Result<Outcome> {
    match command {
        Command::Sweep(a) => commands::sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Converge(a) => commands::converge(a),
        Command::Toy(a) => commands::toy(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Nms(a) => commands::nms(a),
        Command::Eval(a) => commands::eval(a),
        Command::Coeff(a) => commands::coeff(a),
        Command::Replay { .. } => unreachable!("replay is resolved before execution"),
    }
}

fn emit(command: &Command, argv: Vec<String>, out: Option<&Path>) -> Result<i32> {
    let outcome = execute(command)?;
    let manifest = RunManifest {
        command: command.name().to_string(),
        argv,
        config: outcome.config,
        seed: outcome.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: outcome
            .inputs
            .iter()
            .map(|f: &InputFile| InputDigest {
                path: f.path.display().to_string(),
                sha256: f.sha256(),
            })
            .collect(),
        outputs: vec![out.map_or_else(|| "-".to_string(), |p| p.display().to_string())],
    };
    let text = format!("{}{}", manifest.preamble()?, outcome.body);
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(outcome.exit_code)
}

fn replay(report: &Path, out: Option<&Path>) -> Result<i32> {
    let text = std::fs::read_to_string(report)
        .with_context(|| format!("{}: cannot read report", report.display()))?;
    let manifest = RunManifest::from_report(&text).with_context(|| report.display().to_string())?;
    for input in &manifest.inputs {
        let f = InputFile::read(Path::new(&input.path))?;
        if f.sha256() != input.sha256 {
            anyhow::bail!("{}: input changed since the report was written", input.path);
        }
    }
    let recorded = std::iter::once("boxloss".to_string()).chain(manifest.argv.iter().cloned());
    let cli = Cli::try_parse_from(recorded).context("manifest arguments no longer parse")?;
    if matches!(cli.command, Command::Replay { .. }) {
        anyhow::bail!("a replay manifest cannot name another replay");
    }
    let target = match out {
        Some(p) => Some(p.to_path_buf()),
        None => manifest
            .outputs
            .first()
            .filter(|s| s.as_str() != "-")
            .map(PathBuf::from),
    };
    emit(&cli.command, manifest.argv, target.as_deref())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let result = match &cli.command {
        Command::Replay { report } => replay(report, cli.out.as_deref()),
        other => emit(other, strip_out(&raw), cli.out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
