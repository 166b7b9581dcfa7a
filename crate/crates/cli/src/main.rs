use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lamol_forge::config;
use lamol_forge::inspect::inspect_pseudo;
use lamol_forge::manifest::Manifest;
use lamol_forge::render::render_curves;
use lamol_forge::runner::{run_experiment, RunOptions, METRICS_FILE, RUNS_DIR};

pub const OUT_ENV: &str = "LAMOL_FORGE_OUT";

#[derive(Parser)]
#[command(name = "lamol-forge", version, about = "Lifelong language learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output root; beats $LAMOL_FORGE_OUT and the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method, order and seed of an experiment.
    Run(RunArgs),
    /// Like `run`, skipping runs already complete with intact artifacts.
    Resume(RunArgs),
    /// Draw score curves from metric CSVs (files, or output roots).
    Render {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "curves")]
        out: PathBuf,
    },
    /// List pseudo-samples from a replay dump, flagging prefix/content mismatches.
    Inspect {
        path: PathBuf,
        #[arg(short, long, default_value_t = 20)]
        n: usize,
    },
    /// Re-hash every artifact in an output root's manifest.
    Verify { root: PathBuf },
}

fn output_root(flag: Option<PathBuf>, configured: Option<PathBuf>, base: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return p.into();
    }
    match configured {
        Some(p) if p.is_relative() => base.join(p),
        Some(p) => p,
        None => PathBuf::from("runs"),
    }
}

fn run(args: RunArgs, resume: bool) -> Result<bool> {
    let mut exp = config::load(&args.config)?;
    if let Some(seeds) = args.seeds {
        if seeds.is_empty() {
            bail!("--seeds needs at least one seed");
        }
        exp.seeds = seeds;
    }
    if args.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    let root = output_root(args.out, exp.output.clone(), base);
    let outcome = run_experiment(
        &exp,
        &RunOptions {
            root: root.clone(),
            jobs: args.jobs,
            resume,
        },
    )?;
    println!(
        "{} run(s) executed, {} skipped, {} failed; results in {}",
        outcome.executed,
        outcome.skipped,
        outcome.failed.len(),
        root.display()
    );
    for (id, err) in &outcome.failed {
        eprintln!("failed: {id}: {err}");
    }
    Ok(outcome.failed.is_empty())
}

fn metric_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let runs = input.join(RUNS_DIR);
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)
                .with_context(|| format!("reading {}", runs.display()))?
                .map(|e| e.map(|e| e.path().join(METRICS_FILE)))
                .collect::<Result<_, _>>()?;
            dirs.retain(|p| p.exists());
            dirs.sort();
            out.extend(dirs);
        } else {
            out.push(input.clone());
        }
    }
    Ok(out)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => run(args, false),
        Command::Resume(args) => run(args, true),
        Command::Render { inputs, out } => {
            let written = render_curves(&metric_files(&inputs)?, &out)?;
            println!("wrote {} chart(s) to {}", written.len(), out.display());
            Ok(true)
        }
        Command::Inspect { path, n } => {
            print!("{}", inspect_pseudo(&path, n)?);
            Ok(true)
        }
        Command::Verify { root } => {
            let Some(manifest) = Manifest::load(&root)? else {
                bail!("no manifest in {}", root.display());
            };
            let problems = manifest.verify(&root);
            for p in &problems {
                println!("{p}");
            }
            if problems.is_empty() {
                println!("all artifacts intact");
            }
            Ok(problems.is_empty())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
