//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O error
//! (including unreadable checkpoints), 4 checkpoint dimension mismatch.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::env::{Dimension, PerturbationSpec};
use crate::error::{CheckpointError, ConfigError, HarnessError};
use crate::harness::{
    self, ablation_csv, emit_ablation, emit_eval, emit_timing, eval_csv, timing_csv, Setting,
};
use crate::model::{checkpoint_digest, load_checkpoint, save_checkpoint, ModelParams};
use crate::ttt::Mode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIMENSION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "foresight-ttt", version, about = "Variance-gated test-time training on a synthetic reach task")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    With,
    Without,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::With => Setting::WithPerturbedTrain,
            SettingArg::Without => Setting::WithoutPerturbedTrain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Base,
    Indiscriminate,
    Fixed,
    Adaptive,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the setting's dataset and train a checkpoint.
    Pretrain {
        #[arg(long, value_enum)]
        setting: SettingArg,
    },
    /// Success rates per (mode, dimension).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        setting: Option<SettingArg>,
        #[arg(long, value_enum, value_delimiter = ',')]
        modes: Option<Vec<ModeArg>>,
        /// Comma-separated dimensions, e.g. `robot,light`.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<String>>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Include one record per episode in report.json.
        #[arg(long)]
        record_episodes: bool,
    },
    /// The four-rung component ladder on the Robot dimension.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Single-threaded wall-clock comparison.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Dimension(_) => EXIT_DIMENSION,
            _ => EXIT_IO,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match e {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Io { .. } | HarnessError::Serialize(_) => EXIT_IO,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
/// Results go to `stdout`; diagnostics go to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    match execute(cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.resolve_seed();
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    match &cli.command {
        Command::Pretrain { setting } => cfg.eval.setting = (*setting).into(),
        Command::Eval { checkpoint, setting, modes, dims, episodes, record_episodes } => {
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
            if let Some(s) = setting {
                cfg.eval.setting = (*s).into();
            }
            if let Some(m) = modes {
                cfg.eval.modes = m.iter().map(|&m| mode_placeholder(m, &cfg)).collect();
            }
            if let Some(d) = dims {
                cfg.eval.dimensions = parse_dims(d)?;
            }
            if let Some(n) = episodes {
                cfg.eval.episodes_per_dim = *n;
            }
            cfg.eval.record_episodes |= *record_episodes;
        }
        Command::Ablate { checkpoint, episodes } => {
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
            if let Some(n) = episodes {
                cfg.eval.episodes_per_dim = *n;
            }
        }
        Command::Bench { checkpoint, episodes } => {
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
            if let Some(n) = episodes {
                cfg.bench.episodes = *n;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `fixed` takes its threshold from the config when one is set there;
/// otherwise a NaN marker asks for the data-derived value at run time.
fn mode_placeholder(m: ModeArg, cfg: &RunConfig) -> Mode {
    match m {
        ModeArg::Base => Mode::Base,
        ModeArg::Indiscriminate => Mode::Indiscriminate,
        ModeArg::Adaptive => Mode::Adaptive,
        ModeArg::Fixed => match cfg.ttt.mode {
            Mode::FixedThreshold(tau) => Mode::FixedThreshold(tau),
            _ => Mode::FixedThreshold(f64::NAN),
        },
    }
}

fn parse_dims(names: &[String]) -> Result<Vec<PerturbationSpec>, Failure> {
    names
        .iter()
        .map(|n| {
            let d = Dimension::parse(n.trim())
                .ok_or_else(|| Failure::config(format!("unknown dimension `{n}`")))?;
            Ok(if d == Dimension::Clean {
                PerturbationSpec::CLEAN
            } else {
                PerturbationSpec::new(d, 1.0)
            })
        })
        .collect()
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join("checkpoint.json"))
}

fn load_params(cfg: &RunConfig) -> Result<(ModelParams, String), Failure> {
    let path = checkpoint_path(cfg);
    let ckpt = load_checkpoint(&path)?;
    if ckpt.params.dims != cfg.model {
        return Err(CheckpointError::Dimension(format!(
            "{} was trained with {:?} but the config asks for {:?}",
            path.display(),
            ckpt.params.dims,
            cfg.model
        ))
        .into());
    }
    let digest = checkpoint_digest(&ckpt)?;
    Ok((ckpt.params, digest))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure {
        code: EXIT_IO,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn create_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: EXIT_IO,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let mut cfg = effective_config(&cli)?;
    let out_dir = cfg.paths.out_dir.clone();
    match cli.command {
        Command::Pretrain { setting } => {
            create_out_dir(&out_dir)?;
            let (mut ckpt, log) = harness::pretrain_setting(
                setting.into(),
                &cfg.env,
                cfg.model,
                cfg.ttt.gap,
                cfg.data.num_demos,
                &cfg.pretrain,
            )?;
            ckpt.notes.insert("run_config".into(), cfg.to_json());
            let path = checkpoint_path(&cfg);
            save_checkpoint(&ckpt, &path)?;
            let mut csv = String::from("epoch,mean_loss\n");
            for e in &log {
                let _ = writeln!(csv, "{},{}", e.epoch, e.mean_loss);
            }
            write_text(&out_dir.join("train_log.csv"), &csv)?;
            let digest = checkpoint_digest(&ckpt)?;
            let last = log.last().map_or(f64::NAN, |e| e.mean_loss);
            let _ = writeln!(stdout, "checkpoint {} sha256 {digest}", path.display());
            let _ = writeln!(stdout, "final mean loss {last:.6} after {} epochs", log.len());
        }
        Command::Eval { .. } => {
            let (params, digest) = load_params(&cfg)?;
            let unresolved = |m: &Mode| matches!(m, Mode::FixedThreshold(t) if t.is_nan());
            if cfg.eval.modes.iter().any(unresolved) {
                let tau = harness::fixed_threshold_tau(&params, &cfg.env, &cfg.ttt, cfg.eval.base_seed)?;
                let _ = writeln!(stderr, "fixed threshold tau = {tau}");
                for m in cfg.eval.modes.iter_mut().filter(|m| unresolved(m)) {
                    *m = Mode::FixedThreshold(tau);
                }
            }
            let mut report = harness::evaluate(&params, &cfg.env, &cfg.eval, &cfg.ttt, Some(digest))?;
            report.metadata.run_config = Some(cfg.to_json());
            for p in emit_eval(&report, &out_dir)? {
                let _ = writeln!(stderr, "wrote {}", p.display());
            }
            let _ = write!(stdout, "{}", eval_csv(&report));
        }
        Command::Ablate { .. } => {
            let (params, digest) = load_params(&cfg)?;
            let mut report = harness::ablate(
                &params,
                &cfg.env,
                &cfg.ttt,
                cfg.eval.episodes_per_dim,
                cfg.eval.base_seed,
                Some(digest),
            )?;
            report.metadata.run_config = Some(cfg.to_json());
            for p in emit_ablation(&report, &out_dir)? {
                let _ = writeln!(stderr, "wrote {}", p.display());
            }
            let _ = writeln!(stderr, "fixed threshold tau = {}", report.tau);
            let _ = write!(stdout, "{}", ablation_csv(&report));
        }
        Command::Bench { .. } => {
            let (params, digest) = load_params(&cfg)?;
            let bench_env = cfg.bench.env(&cfg.env);
            let mut report = harness::bench(
                &params,
                &bench_env,
                &cfg.ttt,
                cfg.bench.episodes,
                cfg.eval.base_seed,
                Some(digest),
            )?;
            report.metadata.run_config = Some(cfg.to_json());
            for p in emit_timing(&report, &out_dir)? {
                let _ = writeln!(stderr, "wrote {}", p.display());
            }
            let _ = write!(stdout, "{}", timing_csv(&report));
        }
    }
    Ok(())
}
