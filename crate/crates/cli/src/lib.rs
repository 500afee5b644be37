//! `gems` command line.
//!
//! Exit codes: 0 success, 1 abort or corrupt run, 2 budget exhausted,
//! 64 usage error.

pub mod config;
pub mod report;
pub mod run;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use gems_core::skills;
use gems_core::store::{RunStore, StoreError};
use gems_core::types::RunId;

use crate::config::{resolve, ConfigLayer};
use crate::run::{batch_exit_code, read_batch, replay, ReplayError, RunContext};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_EXHAUSTED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "gems", version, about = "Closed-loop prompt optimization for image generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the loop on one prompt or a batch file.
    Run(Box<RunArgs>),
    /// Show a stored run.
    Inspect(StoredRunArgs),
    /// List or validate skills.
    #[command(subcommand)]
    Skills(SkillsCommand),
    /// Re-execute a stored run and compare trajectories.
    Replay(StoredRunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// User prompt for a single run.
    #[arg(long, conflicts_with = "batch", required_unless_present = "batch")]
    pub prompt: Option<String>,
    /// File with one prompt per line.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub layer: ConfigLayer,
}

#[derive(Debug, Args)]
pub struct StoredRunArgs {
    pub run_id: String,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum SkillsCommand {
    /// Print skill names and descriptions.
    List {
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Check a SKILL.md, a skill directory, or every skill under a root.
    Validate { path: PathBuf },
}

/// Runs the CLI with process env and stdio.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    execute(args, &config::process_env, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the CLI with injected env and output streams.
pub fn execute<I, T>(
    args: I,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(*a, env, out, err),
        Command::Inspect(a) => cmd_inspect(a, env, out, err),
        Command::Skills(c) => cmd_skills(c, out, err),
        Command::Replay(a) => cmd_replay(a, env, out, err),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: cannot write output: {e}");
        EXIT_FAILURE
    })
}

fn usage(err: &mut dyn Write, message: impl std::fmt::Display) -> std::io::Result<i32> {
    writeln!(err, "error: {message}")?;
    Ok(EXIT_USAGE)
}

fn cmd_run(
    a: RunArgs,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::io::Result<i32> {
    let settings = match resolve(a.layer, a.config.as_deref(), env) {
        Ok(s) => s,
        Err(e) => return usage(err, e),
    };
    let prompts = match (&a.prompt, &a.batch) {
        (Some(p), _) => vec![p.clone()],
        (None, Some(path)) => match read_batch(path) {
            Ok(p) if p.is_empty() => return usage(err, format!("batch file {} has no prompts", path.display())),
            Ok(p) => p,
            Err(e) => return usage(err, format!("cannot read batch file {}: {e}", path.display())),
        },
        (None, None) => return usage(err, "either --prompt or --batch is required"),
    };
    let json_mode = settings.json;
    let ctx = match RunContext::new(settings) {
        Ok(c) => c,
        Err(e) => {
            writeln!(err, "error: {e}")?;
            return Ok(e.exit_code());
        }
    };
    for d in ctx.skills.diagnostics() {
        writeln!(err, "warning: {d}")?;
    }
    let reports = if prompts.len() == 1 {
        vec![ctx.run_one(&prompts[0])]
    } else {
        ctx.run_batch(&prompts)
    };
    for (i, r) in reports.iter().enumerate() {
        if json_mode {
            writeln!(out, "{}", r.to_json())?;
        } else {
            if i > 0 {
                writeln!(out)?;
            }
            r.write_text(out)?;
        }
    }
    Ok(batch_exit_code(&reports))
}

fn stored_run_store(
    a: &StoredRunArgs,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<RunStore, config::ConfigError> {
    let layer = ConfigLayer {
        out_dir: a.out_dir.clone(),
        ..Default::default()
    };
    Ok(RunStore::new(resolve(layer, a.config.as_deref(), env)?.out_dir))
}

fn cmd_inspect(
    a: StoredRunArgs,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::io::Result<i32> {
    let store = match stored_run_store(&a, env) {
        Ok(s) => s,
        Err(e) => return usage(err, e),
    };
    let run_id = RunId::from(a.run_id.as_str());
    match store.load_trajectory(&run_id) {
        Ok(loaded) => {
            if a.json {
                writeln!(out, "{}", report::inspect_json(&loaded.trajectory, &loaded.warnings))?;
            } else {
                report::write_inspect(&loaded.trajectory, &loaded.warnings, out)?;
            }
            Ok(EXIT_OK)
        }
        Err(e) => {
            writeln!(err, "error: {e}")?;
            Ok(EXIT_FAILURE)
        }
    }
}

fn cmd_skills(c: SkillsCommand, out: &mut dyn Write, err: &mut dyn Write) -> std::io::Result<i32> {
    match c {
        SkillsCommand::List { dir, json } => match skills::scan(&dir) {
            Ok(registry) => Ok(if report::skills_list(&registry, json, out, err)? {
                EXIT_OK
            } else {
                EXIT_FAILURE
            }),
            Err(e) => {
                writeln!(err, "error: {e}")?;
                Ok(EXIT_FAILURE)
            }
        },
        SkillsCommand::Validate { path } => {
            let reports = report::skills_validate(&path);
            report::write_validation(&reports, out)?;
            Ok(if reports.iter().all(|r| r.is_valid()) {
                EXIT_OK
            } else {
                EXIT_FAILURE
            })
        }
    }
}

fn cmd_replay(
    a: StoredRunArgs,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::io::Result<i32> {
    let store = match stored_run_store(&a, env) {
        Ok(s) => s,
        Err(e) => return usage(err, e),
    };
    let run_id = RunId::from(a.run_id.as_str());
    let r = match replay(&store, &run_id) {
        Ok(r) => r,
        Err(ReplayError::Store(e @ StoreError::RunNotFound(_))) => {
            writeln!(err, "error: {e}")?;
            return Ok(EXIT_FAILURE);
        }
        Err(e) => {
            writeln!(err, "error: replay failed: {e}")?;
            return Ok(EXIT_FAILURE);
        }
    };
    for n in &r.notes {
        writeln!(err, "note: {n}")?;
    }
    if let Some(reason) = &r.abort {
        writeln!(err, "replay aborted: {reason}")?;
    }
    if a.json {
        writeln!(
            out,
            "{}",
            serde_json::json!({
                "run_id": r.run_id,
                "recorded_digest": r.recorded_digest,
                "replayed_digest": r.replayed_digest,
                "identical": r.identical(),
                "abort": r.abort,
                "notes": r.notes,
            })
        )?;
    } else {
        writeln!(out, "recorded digest: {}", r.recorded_digest)?;
        writeln!(out, "replayed digest: {}", r.replayed_digest)?;
        if r.identical() {
            writeln!(out, "replay: identical")?;
        } else {
            writeln!(out, "replay: digest mismatch")?;
        }
    }
    Ok(if r.identical() { EXIT_OK } else { EXIT_FAILURE })
}
