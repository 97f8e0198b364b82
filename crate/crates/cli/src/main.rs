use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kneexr_cli::{cmd_evaluate, cmd_gen_phantoms, cmd_ingest, cmd_predict, cmd_report, cmd_split, cmd_train, CliError, Context, EvaluateArgs, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "kneexr", version, about = "Knee radiograph analysis pipeline")]
struct Cli {
    /// TOML configuration; relative paths in it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Serial execution and fixed timestamps.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Defaults to an id derived from the seed and configuration hash.
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic phantoms with exact annotations.
    GenPhantoms {
        #[arg(long)]
        n: usize,
        /// Extra unlabeled non-knee or lateral images.
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a manifest and register its usable scans.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Stratified train/trial split.
    Split {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a pathology detector, `grading` or `gate`.
    Train {
        component: String,
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Gate and analyze every scan of a manifest (default: trial split).
    Predict {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score predictions, or the bundled clinical fixture, into tables.
    Evaluate {
        #[arg(long)]
        reports: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        fixture: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary document and charts for an evaluated run.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let (mut config, base) = match &cli.config {
        Some(p) => (PipelineConfig::load(p)?, p.parent().map(PathBuf::from).unwrap_or_default()),
        None => (PipelineConfig::default(), PathBuf::from(".")),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let mut ctx = Context::new(config, base);
    ctx.deterministic = cli.deterministic;
    ctx.workers = cli.workers;
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be >= 1".into()));
    }
    if let Some(id) = cli.run_id {
        if id.is_empty() || id.contains(['/', '\\']) || id == ".." {
            return Err(CliError::Usage(format!("invalid run id {id:?}")));
        }
        ctx.run_id = id;
    }
    match cli.cmd {
        Cmd::GenPhantoms { n, distractors, out } => println!("{}", cmd_gen_phantoms(&ctx, n, distractors, out.as_deref())?.display()),
        Cmd::Ingest { manifest } => {
            let s = cmd_ingest(&ctx, &manifest)?;
            println!("accepted {} scans, rejected {}", s.accepted, s.rejected.len());
        }
        Cmd::Split { manifest } => {
            let (a, b) = cmd_split(&ctx, manifest.as_deref())?;
            println!("train {a}, trial {b}");
        }
        Cmd::Train { component, epochs } => {
            for p in cmd_train(&ctx, &component, epochs)? {
                println!("{}", p.display());
            }
        }
        Cmd::Predict { manifest } => println!("{}", cmd_predict(&ctx, manifest.as_deref())?.display()),
        Cmd::Evaluate { reports, manifest, fixture, out } => {
            let args = EvaluateArgs { reports: reports.as_deref(), manifest: manifest.as_deref(), fixture, out: out.as_deref() };
            for p in cmd_evaluate(&ctx, &args)? {
                if p.extension().is_some_and(|e| e == "txt") && !p.ends_with("tables.txt") {
                    print!("{}", std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?);
                }
            }
        }
        Cmd::Report => println!("{}", cmd_report(&ctx)?.display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
