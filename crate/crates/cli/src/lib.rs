//! Command-line front end: dataset generation, training, evaluation,
//! gradient checking and checkpoint inspection.

mod commands;
mod error;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use demt_core::config::Config;
use demt_core::DemtError;

pub use commands::{
    final_loss_line, parse_loss_line, LossLine, EVAL_LOG, GRADCHECK_REPORT, REPORT_FILE, TRAIN_LOG,
};
pub use error::{CliError, CliResult};

/// Name of the file every command writes its effective configuration to.
pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "DEMT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "demt",
    version,
    about = "Multi-task dense prediction on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset to disk.
    Gen(CommonArgs),
    /// Train a model, logging per-step losses and writing checkpoints.
    Train(CommonArgs),
    /// Evaluate a checkpoint and write a metric report.
    Eval(CommonArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(CommonArgs),
    /// Print the header and records of a checkpoint.
    Inspect(CommonArgs),
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run seed; overrides the `seed` key.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Checkpoint to resume from, evaluate or inspect.
    #[arg(long, value_name = "PATH")]
    pub ckpt: Option<PathBuf>,
    /// Single-task metric report used as the reference for delta_m.
    #[arg(long = "single-task-ref", value_name = "PATH")]
    pub single_task_ref: Option<PathBuf>,
}

impl CommonArgs {
    /// Config file lines, `--set` values and `--seed`, as `key=value` overrides in order.
    pub fn overrides(&self) -> CliResult<Vec<String>> {
        let mut out = Vec::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| DemtError::Io {
                path: path.clone(),
                source: e,
            })?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap().trim();
                if line.is_empty() {
                    continue;
                }
                if !line.contains('=') {
                    return Err(DemtError::Config(format!(
                        "{} line {}: expected key = value",
                        path.display(),
                        i + 1
                    ))
                    .into());
                }
                out.push(line.to_string());
            }
        }
        out.extend(self.set.iter().cloned());
        if let Some(seed) = self.seed {
            out.push(format!("seed={seed}"));
        }
        Ok(out)
    }

    /// Defaults, then the config file, then `--set`, then `--seed`.
    pub fn resolve(&self) -> CliResult<Config> {
        let mut cfg = Config::default();
        for kv in self.overrides()? {
            cfg.apply_override(&kv)?;
        }
        Ok(cfg)
    }

    fn reject(&self, command: &str, flags: &[(&str, bool)]) -> CliResult<()> {
        for &(name, present) in flags {
            if present {
                return Err(CliError::Usage(format!("{command} does not take --{name}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        DemtError::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| {
        DemtError::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub(crate) fn write_resolved(dir: &Path, cfg: &Config) -> CliResult<()> {
    write_file(&dir.join(RESOLVED_CONFIG), &cfg.to_text())
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))
    })?;
    // A pool already built earlier in this process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs one command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    configure_threads()?;
    match command {
        Command::Gen(a) => {
            a.reject(
                "gen",
                &[
                    ("ckpt", a.ckpt.is_some()),
                    ("single-task-ref", a.single_task_ref.is_some()),
                ],
            )?;
            commands::gen(a)
        }
        Command::Train(a) => {
            a.reject("train", &[("single-task-ref", a.single_task_ref.is_some())])?;
            commands::train(a)
        }
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => {
            a.reject(
                "gradcheck",
                &[
                    ("ckpt", a.ckpt.is_some()),
                    ("single-task-ref", a.single_task_ref.is_some()),
                ],
            )?;
            commands::gradcheck(a)
        }
        Command::Inspect(a) => {
            a.reject(
                "inspect",
                &[
                    ("config", a.config.is_some()),
                    ("set", !a.set.is_empty()),
                    ("seed", a.seed.is_some()),
                    ("single-task-ref", a.single_task_ref.is_some()),
                ],
            )?;
            commands::inspect(a)
        }
    }
}
