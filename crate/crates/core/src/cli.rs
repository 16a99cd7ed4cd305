//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::Agent;
use crate::config::ExperimentConfig;
use crate::envs::{Env, Task};
use crate::error::{Error, Result};
use crate::harness::{self, AblationKind, RunResult};
use crate::replay::ReplayBuffer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pixelrl", version, about = "Soft actor-critic from pixels with autoencoder variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set sac.gamma=0.98`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (replaces `experiment.output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this single seed instead of `experiment.seeds`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one agent per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also store the final replay buffer (frozen) in each run directory.
        #[arg(long)]
        save_buffer: bool,
    },
    /// Run a setting × seed grid and write a CSV table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of action_repeat, capacity, beta.
        #[arg(long)]
        kind: String,
        /// Comma-separated grid settings, e.g. `1e-6,1e-4`.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
    },
    /// Fit linear probes from a checkpoint's latents to buffered states.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        buffer: PathBuf,
    },
    /// Train pixel SAC on target tasks from a pretrained and a fresh encoder.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target task; repeatable. Defaults to the configured task.
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Train state SAC and SAC+AE offline from a frozen buffer.
    Fixedbuf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        buffer: PathBuf,
    },
    /// Fill a replay buffer with random-policy transitions and save it frozen.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        transitions: usize,
        /// Destination file.
        #[arg(long)]
        file: PathBuf,
    },
}

/// Error plus the exit code it maps to.
struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::Numerical { .. } => EXIT_NUMERICAL,
            _ => EXIT_RUNTIME,
        };
        Failure(code, e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(EXIT_USAGE, msg.into())
}

impl Common {
    fn resolve(&self) -> std::result::Result<ExperimentConfig, Failure> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p).map_err(|e| usage(e.to_string()))?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(out) = &self.out {
            cfg.experiment.output_dir = out.to_string_lossy().into_owned();
        }
        if let Some(seed) = self.seed {
            cfg.experiment.seeds = vec![seed];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.experiment.output_dir)
}

fn need(path: &Path, what: &str) -> std::result::Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure(EXIT_RUNTIME, format!("{what} not found: {}", path.display())))
    }
}

fn report(run: &RunResult) {
    let score = run.final_mean().map_or("n/a".to_string(), |m| format!("{m:.3}"));
    println!("{}\tfinal_mean={score}\tenv_steps={}", run.run_id, run.env_steps);
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_buffer(path: &Path, seed: u64) -> std::result::Result<ReplayBuffer, Failure> {
    need(path, "replay buffer")?;
    Ok(ReplayBuffer::load(path, seed)?)
}

fn execute(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train { common, save_buffer } => {
            let cfg = common.resolve()?;
            for &seed in &cfg.experiment.seeds {
                let run = harness::run_training(&cfg, seed, Some(&out_dir(&cfg)))?;
                if save_buffer {
                    let mut buf = run.buffer.clone();
                    buf.freeze();
                    buf.save(&run.run_dir.as_ref().expect("run has a directory").join("replay.bin"))?;
                }
                report(&run);
            }
        }
        Command::Ablate { common, kind, grid } => {
            let kind = AblationKind::parse(&kind)?;
            let cfg = common.resolve()?;
            let out = out_dir(&cfg);
            let rows = harness::ablation_grid(&cfg, kind, &grid, Some(&out))?;
            let csv = out.join(format!("ablation-{kind}.csv"));
            harness::write_csv(&rows, &csv)?;
            for r in &rows {
                println!("{}\tmean={:.3}\tstd={:.3}", r.setting, r.final_mean, r.final_std);
            }
            println!("wrote {}", csv.display());
        }
        Command::Probe { common, checkpoint, buffer } => {
            let cfg = common.resolve()?;
            need(&checkpoint, "checkpoint")?;
            let seed = cfg.experiment.seeds[0];
            let buf = load_buffer(&buffer, seed)?;
            let mut agent = Agent::new(&cfg, seed)?;
            agent.load_checkpoint(&checkpoint)?;
            let r = harness::probe_agent(&agent, &buf, seed)?;
            let out = out_dir(&cfg);
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join("probe.json");
            write_json(&path, &r)?;
            for (i, c) in r.coords.iter().enumerate() {
                println!("coord {i}\tmse={:.6}\tr2={:.4}", c.mse, c.r2);
            }
            println!("mean_r2={:.4}\trank={}/{}", r.mean_r2, r.rank, r.latent_dim);
        }
        Command::Transfer { common, checkpoint, tasks } => {
            let cfg = common.resolve()?;
            need(&checkpoint, "checkpoint")?;
            let tasks = if tasks.is_empty() {
                vec![cfg.env.task]
            } else {
                let names: Vec<_> = Task::ALL.iter().map(|t| t.name()).collect();
                tasks
                    .iter()
                    .map(|t| Task::parse(t).ok_or_else(|| usage(format!("unknown task {t:?}; valid tasks: {}", names.join(", ")))))
                    .collect::<std::result::Result<Vec<_>, _>>()?
            };
            for task in tasks {
                let mut c = cfg.clone();
                c.env.task = task;
                for &seed in &c.experiment.seeds {
                    let dir = out_dir(&c).join(format!("transfer-{}", task.name()));
                    let (p, s) = harness::transfer_experiment(&c, &checkpoint, seed, Some(&dir))?;
                    report(&p);
                    report(&s);
                }
            }
        }
        Command::Fixedbuf { common, buffer } => {
            let cfg = common.resolve()?;
            for &seed in &cfg.experiment.seeds {
                let buf = load_buffer(&buffer, seed)?;
                let (state, ae) = harness::fixed_buffer_experiment(&cfg, &buf, seed, Some(&out_dir(&cfg)))?;
                report(&state);
                report(&ae);
            }
        }
        Command::Collect { common, transitions, file } => {
            let cfg = common.resolve()?;
            let seed = cfg.experiment.seeds[0];
            let env_cfg = cfg.env.env_config(seed);
            let mut buf = ReplayBuffer::new(harness::layout_for(&env_cfg), transitions.max(1), seed)?;
            let mut env = Env::new(env_cfg)?;
            harness::seed_collect(&mut env, &mut buf, transitions, &mut ChaCha8Rng::seed_from_u64(seed))?;
            buf.freeze();
            buf.save(&file)?;
            println!("wrote {} transitions to {}", buf.len(), file.display());
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}
