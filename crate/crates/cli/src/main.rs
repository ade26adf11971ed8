//! `conbo` command line: run experiments, summarize results, list presets.
//!
//! Failures print a single JSON object `{"error": <kind>, "message": <text>}`
//! on stderr and exit with status 1 (2 for usage errors).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conbo::experiment::{self, ExperimentConfig, PRESETS};
use conbo::report::{self, Format};
use serde_json::json;

#[derive(Parser)]
#[command(name = "conbo", version, about = "Continual Bayesian optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for independent (seed, engine) jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize a results directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
    /// Inspect the built-in presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    /// One line per preset.
    List,
    /// Print a preset's full config as JSON.
    Show { name: String },
}

fn fail(kind: &str, message: impl std::fmt::Display, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message.to_string() }));
    ExitCode::from(code)
}

fn run(command: Command) -> conbo::Result<()> {
    match command {
        Command::Run { config, out, jobs } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out
                .or_else(|| cfg.output.clone())
                .unwrap_or_else(|| PathBuf::from("results").join(&cfg.name));
            if jobs == 0 {
                return Err(conbo::Error::Config("--jobs must be at least 1".into()));
            }
            let summary = experiment::run_experiment(&cfg, &dir, jobs)?;
            println!(
                "{}",
                json!({ "out": summary.out_dir, "jobs": summary.jobs, "rows": summary.rows, "files": summary.files.len() })
            );
        }
        Command::Report { input, format } => {
            let format: Format = format.parse()?;
            let built = report::build_report(&input)?;
            for v in &built.violations {
                log::warn!(
                    "{}: best-so-far regret increased at seed {} engine {} user {} iteration {}",
                    v.file,
                    v.seed,
                    v.engine,
                    v.user,
                    v.iteration
                );
            }
            let paths = report::write_report(&built, &input, format)?;
            match format {
                Format::Markdown => print!("{}", report::render_markdown(&built)),
                Format::Csv => {
                    for p in paths {
                        println!("{}", p.display());
                    }
                }
            }
        }
        Command::Presets { action } => match action {
            PresetAction::List => {
                for p in &PRESETS {
                    println!("{:<18} {}", p.name, p.summary);
                }
            }
            PresetAction::Show { name } => {
                println!("{}", serde_json::to_string_pretty(&experiment::preset(&name)?)?);
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("usage", first, 2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e, 1),
    }
}
