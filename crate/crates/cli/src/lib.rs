//! Command-line driver: synthetic data, source pretraining, per-user
//! adaptation, evaluation and ablation grids, all from one config file.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration
//! or usage error. Set `EMGUP_LOG` (e.g. `info`, `debug`) for log output.

pub mod commands;

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use emgup::config::RunConfig;
use emgup::eval::AdaptMode;
use emgup::kv::KvMap;
use emgup::{Error, Result};

pub const LOG_ENV: &str = "EMGUP_LOG";
pub const LOCK_FILE: &str = ".emgup.lock";

#[derive(Parser, Debug)]
#[command(name = "emgup", version, about = "Source-free personalization of EMG gesture recognizers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key=value config file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the `out` key.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-user dataset.
    Synth(Common),
    /// Train a source model on one fold's training users.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Personalize a source checkpoint to one user without labels.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: String,
        /// none, ssa, ssp or full.
        #[arg(long, default_value = "full")]
        mode: String,
        checkpoint: PathBuf,
    },
    /// Score a checkpoint on one user's labeled windows.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: String,
        checkpoint: PathBuf,
    },
    /// Run the ablation grid named by `ablate.groups`.
    Ablate(Common),
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f: File = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::io(
                    &path,
                    std::io::Error::new(e.kind(), "output directory is in use by another run"),
                ),
                _ => Error::io(&path, e),
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, u64, PathBuf)> {
    let kv = match &common.config {
        Some(p) => KvMap::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => KvMap::new(),
    };
    let cfg = RunConfig::from_kv(&kv)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("no output directory; pass --out or set `out`".into()))?;
    Ok((cfg, seed, out))
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let (cfg, seed, out) = load_config(&common)?;
            let _lock = OutputLock::acquire(&out)?;
            let m = commands::cmd_synth(&cfg, seed, &out)?;
            commands::write_config(&cfg, seed, &out)?;
            emit(&format!(
                "wrote {} users, {} windows to {}",
                m.users.len(),
                m.total_windows,
                out.display()
            ));
        }
        Command::Pretrain { common, fold } => {
            let (cfg, seed, out) = load_config(&common)?;
            let _lock = OutputLock::acquire(&out)?;
            let source = commands::open_source(&cfg, seed)?;
            let s = commands::cmd_pretrain(&cfg, source.as_ref(), seed, fold, &out)?;
            commands::write_config(&cfg, seed, &out)?;
            emit(&format!(
                "{} (best epoch {}, val acc {:.4}, test users {})",
                s.checkpoint.display(),
                s.best_epoch,
                s.best_val_acc,
                s.test_users.join(",")
            ));
        }
        Command::Adapt {
            common,
            user,
            mode,
            checkpoint,
        } => {
            let (cfg, seed, out) = load_config(&common)?;
            let mode: AdaptMode = mode.parse()?;
            let _lock = OutputLock::acquire(&out)?;
            let source = commands::open_source(&cfg, seed)?;
            let dest = commands::cmd_adapt(&cfg, source.as_ref(), seed, &checkpoint, &user, mode, &out)?;
            commands::write_config(&cfg, seed, &out)?;
            emit(&dest.display().to_string());
        }
        Command::Eval {
            common,
            user,
            checkpoint,
        } => {
            let (cfg, seed, out) = load_config(&common)?;
            let _lock = OutputLock::acquire(&out)?;
            let source = commands::open_source(&cfg, seed)?;
            let r = commands::cmd_eval(&cfg, source.as_ref(), seed, &checkpoint, &user, &out)?;
            commands::write_config(&cfg, seed, &out)?;
            emit(&serde_json::to_string_pretty(&r).map_err(|e| Error::Format(e.to_string()))?);
        }
        Command::Ablate(common) => {
            let (cfg, seed, out) = load_config(&common)?;
            let seeds = match common.seed {
                Some(_) => vec![seed],
                None => cfg.ablate_seeds.clone(),
            };
            let _lock = OutputLock::acquire(&out)?;
            let result = commands::cmd_ablate(&cfg, &seeds, &out)?;
            commands::write_config(&cfg, seed, &out)?;
            emit(emgup::eval::summary_csv(&result.summary).trim_end());
        }
    }
    Ok(())
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_config() {
        2
    } else {
        1
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
