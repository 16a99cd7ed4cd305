//! Training and evaluation loops plus the experiment runners built on them.

mod ablation;
mod probe;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{Agent, StepMetrics, UpdateCounts};
use crate::config::{AgentKind, ExperimentConfig, Refresh};
use crate::envs::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::replay::{Layout, ReplayBuffer, Transition};

pub use ablation::{ablation_grid, write_csv, AblationKind, AblationRow, CellResult};
pub use probe::{linear_probe, probe_agent, CoordReport, ProbeReport};

/// Offset between a run's training and evaluation environment seeds.
pub const EVAL_SEED_OFFSET: u64 = 1_000_003;
/// Number of trailing evaluations averaged into a run's final score.
pub const FINAL_EVALS: usize = 5;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub step: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub episodes: usize,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub episode: u64,
    pub loss_q: Option<f64>,
    pub loss_pi: Option<f64>,
    pub loss_ae: Option<f64>,
    pub alpha: f64,
    pub grad_norm_enc_actor: Option<f64>,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
    pub mode: AgentKind,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub evals: Vec<EvalReport>,
    pub records: Vec<MetricsRecord>,
    pub counts: UpdateCounts,
    /// Environment steps taken by the training loop (0 when offline).
    pub env_steps: u64,
    pub run_dir: Option<PathBuf>,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
}

impl RunResult {
    /// Mean of the last [`FINAL_EVALS`] evaluation means.
    pub fn final_mean(&self) -> Option<f64> {
        let tail = &self.evals[self.evals.len().saturating_sub(FINAL_EVALS)..];
        (!tail.is_empty()).then(|| tail.iter().map(|e| e.mean_return).sum::<f64>() / tail.len() as f64)
    }

    /// Metrics stream exactly as written to disk.
    pub fn metrics_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn layout_for(env: &EnvConfig) -> Layout {
    Layout {
        obs_shape: env.obs_shape(),
        action_dim: env.task.action_dim(),
        state_dim: env.task.state_dim(),
    }
}

pub fn uniform_action(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Pushes `n` transitions gathered with uniformly random actions, resetting
/// the environment at episode ends.
pub fn seed_collect(env: &mut Env, buf: &mut ReplayBuffer, n: usize, rng: &mut impl Rng) -> Result<()> {
    let (mut obs, mut state) = env.reset();
    for _ in 0..n {
        let action = uniform_action(rng, env.action_dim());
        let s = env.step(&action)?;
        buf.push(Transition {
            obs,
            action,
            reward: s.reward,
            next_obs: s.obs.clone(),
            // Episodes end on a time limit only, so the bootstrap stays on.
            done: false,
            state,
            next_state: s.state.clone(),
        })?;
        (obs, state) = if s.done { env.reset() } else { (s.obs, s.state) };
    }
    Ok(())
}

/// Undiscounted returns of `episodes` episodes under the mean policy.
pub fn evaluate(agent: &mut Agent, env: &mut Env, episodes: usize) -> Result<Vec<f64>> {
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (mut obs, mut state) = env.reset();
        let mut total = 0.0;
        loop {
            let a = agent.act(&obs, &state, true)?;
            let s = env.step(&a)?;
            total += s.reward;
            if s.done {
                break;
            }
            (obs, state) = (s.obs, s.state);
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Writes `name` into the run directory.
fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

struct Sink {
    file: Option<(PathBuf, BufWriter<fs::File>)>,
}

impl Sink {
    fn line(&mut self, text: &str) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{text}").map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            f.flush().map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }
}

/// One run in progress: agent, replay buffer, environments and the metrics
/// stream. Build it, optionally adjust the agent (e.g. load an encoder), then
/// call [`Trainer::run`] or [`Trainer::run_offline`].
pub struct Trainer {
    cfg: ExperimentConfig,
    seed: u64,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    env: Env,
    eval_env: Env,
    rng: ChaCha8Rng,
    episode: u64,
    t: u64,
    current: Option<(Vec<u8>, Vec<f64>)>,
    latest: StepMetrics,
    trained: bool,
    evals: Vec<EvalReport>,
    records: Vec<MetricsRecord>,
    sink: Sink,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        let agent = Agent::new(&cfg, seed)?;
        let env_cfg = cfg.env.env_config(seed);
        let buffer = ReplayBuffer::new(layout_for(&env_cfg), cfg.replay.capacity, seed)?;
        Ok(Trainer {
            env: Env::new(env_cfg)?,
            eval_env: Env::new(cfg.env.env_config(seed.wrapping_add(EVAL_SEED_OFFSET)))?,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xac7_1015),
            agent,
            buffer,
            seed,
            episode: 0,
            t: 0,
            current: None,
            latest: StepMetrics::default(),
            trained: false,
            evals: Vec::new(),
            records: Vec::new(),
            sink: Sink { file: None },
            cfg,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn run_id(&self) -> String {
        self.cfg.run_id(self.seed)
    }

    /// Creates `<out>/<run-id>` with the resolved config echo and opens the
    /// metrics stream.
    fn open_dir(&mut self, out: Option<&Path>) -> Result<Option<PathBuf>> {
        let Some(out) = out else { return Ok(None) };
        let dir = out.join(self.run_id());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir, "config.toml", &self.cfg.to_toml_string())?;
        write_file(&dir, "config.json", &self.cfg.to_json())?;
        let path = dir.join(METRICS_FILE);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.sink.file = Some((path, BufWriter::new(f)));
        Ok(Some(dir))
    }

    fn train_once(&mut self, clock: u64) -> Result<()> {
        self.latest = self.agent.train_step(&mut self.buffer).map_err(|e| at_step(e, clock))?;
        self.trained = true;
        Ok(())
    }

    fn ae_once(&mut self, clock: u64) -> Result<()> {
        let l = self.agent.ae_step(&mut self.buffer).map_err(|e| at_step(e, clock))?;
        self.latest.loss_ae = Some(l);
        Ok(())
    }

    fn pretrain(&mut self, clock: u64) -> Result<()> {
        if self.cfg.experiment.mode == AgentKind::SacVaeIter {
            for _ in 0..self.cfg.experiment.pretrain_steps {
                self.ae_once(clock)?;
            }
        }
        Ok(())
    }

    /// Iterative mode's autoencoder refresh, due every N training ticks
    /// after pretraining.
    fn maybe_refresh(&mut self, ticks_since_pretrain: u64, clock: u64) -> Result<()> {
        if let (AgentKind::SacVaeIter, Some(Refresh::Every(n))) = (self.cfg.experiment.mode, self.cfg.experiment.iter_n) {
            if ticks_since_pretrain > 0 && ticks_since_pretrain % n == 0 {
                self.ae_once(clock)?;
            }
        }
        Ok(())
    }

    fn evaluate_now(&mut self, step: u64) -> Result<EvalReport> {
        let returns = evaluate(&mut self.agent, &mut self.eval_env, self.cfg.experiment.eval_episodes)?;
        let (mean_return, std_return) = mean_std(&returns);
        let r = EvalReport {
            step,
            mean_return,
            std_return,
            episodes: returns.len(),
        };
        self.evals.push(r);
        Ok(r)
    }

    fn record(&mut self, step: u64, eval: Option<EvalReport>) -> Result<()> {
        let m = &self.latest;
        let rec = MetricsRecord {
            step,
            episode: self.episode,
            loss_q: self.trained.then_some(m.loss_q),
            loss_pi: m.loss_pi,
            loss_ae: m.loss_ae,
            alpha: self.agent.alpha(),
            grad_norm_enc_actor: m.grad_norm_enc_actor,
            eval_mean: eval.map(|e| e.mean_return),
            eval_std: eval.map(|e| e.std_return),
            mode: self.cfg.experiment.mode,
            seed: self.seed,
        };
        self.sink.line(&serde_json::to_string(&rec).expect("records serialize"))?;
        self.records.push(rec);
        Ok(())
    }

    /// Evaluates on the interval (and once at the very end) and logs.
    fn tick_outputs(&mut self, t: u64, total: u64) -> Result<()> {
        let (eval_every, log_every) = (self.cfg.experiment.eval_interval, self.cfg.experiment.log_interval);
        let due = t % eval_every == 0 || t == total;
        let eval = if due { Some(self.evaluate_now(t)?) } else { None };
        if eval.is_some() || t % log_every == 0 {
            self.record(t, eval)?;
        }
        Ok(())
    }

    fn finish(mut self, dir: Option<PathBuf>, env_steps: u64, result: Result<()>) -> Result<RunResult> {
        if let Err(Error::Numerical { loss, step }) = &result {
            let abort = serde_json::json!({ "abort": { "loss": loss, "step": step } });
            self.sink.line(&abort.to_string())?;
        }
        self.sink.flush()?;
        result?;
        if let Some(dir) = &dir {
            self.agent.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
            let summary = serde_json::json!({
                "run_id": self.run_id(),
                "env_steps": env_steps,
                "updates": {
                    "critic": self.agent.counts().critic,
                    "actor": self.agent.counts().actor,
                    "target": self.agent.counts().target,
                    "ae": self.agent.counts().ae,
                },
                "evals": self.evals,
                "encoder_hash": self.agent.encoder_hash(),
            });
            write_file(dir, SUMMARY_FILE, &format!("{summary:#}\n"))?;
        }
        Ok(RunResult {
            run_id: self.run_id(),
            seed: self.seed,
            evals: self.evals,
            records: self.records,
            counts: self.agent.counts(),
            env_steps,
            run_dir: dir,
            agent: self.agent,
            buffer: self.buffer,
        })
    }

    /// Online training: `seed_steps` random-policy steps, a catch-up burst
    /// that brings the update count level with the step count, then one
    /// update per environment step.
    pub fn run(mut self, out: Option<&Path>) -> Result<RunResult> {
        let dir = self.open_dir(out)?;
        let result = (|| {
            while self.t < self.cfg.experiment.steps {
                self.advance()?;
            }
            Ok(())
        })();
        let t = self.t;
        self.finish(dir, t, result)
    }

    /// Environment steps taken so far.
    pub fn env_steps(&self) -> u64 {
        self.t
    }

    /// One environment step of the online loop with the updates, evaluation
    /// and logging due at it.
    pub fn advance(&mut self) -> Result<()> {
        let seed_steps = self.cfg.experiment.seed_steps;
        let (obs, state) = match self.current.take() {
            Some(c) => c,
            None => self.env.reset(),
        };
        self.t += 1;
        let t = self.t;
        let action = if t <= seed_steps {
            uniform_action(&mut self.rng, self.env.action_dim())
        } else {
            self.agent.act(&obs, &state, false)?
        };
        let s = self.env.step(&action)?;
        self.buffer.push(Transition {
            obs,
            action,
            reward: s.reward,
            next_obs: s.obs.clone(),
            done: false,
            state,
            next_state: s.state.clone(),
        })?;
        if s.done {
            self.episode += 1;
        } else {
            self.current = Some((s.obs, s.state));
        }

        if t == seed_steps {
            self.pretrain(t)?;
            for _ in 0..seed_steps {
                self.train_once(t)?;
            }
        } else if t > seed_steps {
            self.train_once(t)?;
            self.maybe_refresh(t - seed_steps, t)?;
        }
        self.tick_outputs(t, self.cfg.experiment.steps)
    }

    /// Offline training from a frozen buffer: `steps` updates and no
    /// environment interaction apart from evaluation.
    pub fn run_offline(mut self, frozen: &ReplayBuffer, out: Option<&Path>) -> Result<RunResult> {
        if !frozen.is_frozen() {
            return Err(Error::Contract("offline training needs a frozen replay buffer".into()));
        }
        if frozen.layout() != self.buffer.layout() {
            return Err(Error::Contract(format!(
                "buffer layout {:?} does not match the configured environment {:?}",
                frozen.layout(),
                self.buffer.layout()
            )));
        }
        self.buffer = frozen.clone();
        self.buffer.reseed(self.seed);
        let dir = self.open_dir(out)?;
        let total = self.cfg.experiment.steps;
        let result = (|| {
            for t in 1..=total {
                if t == 1 {
                    self.pretrain(t)?;
                }
                self.train_once(t)?;
                self.maybe_refresh(t, t)?;
                self.tick_outputs(t, total)?;
            }
            Ok(())
        })();
        self.finish(dir, 0, result)
    }
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Numerical { loss, .. } => Error::Numerical { loss, step },
        other => other,
    }
}

pub fn run_training(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunResult> {
    Trainer::new(cfg, seed)?.run(out)
}

/// Pixel SAC on the target task twice with the same seed: once with the
/// encoder loaded from `checkpoint`, once from scratch. The checkpoint is
/// checked before anything is written.
pub fn transfer_experiment(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    seed: u64,
    out: Option<&Path>,
) -> Result<(RunResult, RunResult)> {
    let mut cfg = cfg.clone();
    cfg.experiment.mode = AgentKind::SacPixel;
    cfg.experiment.iter_n = None;
    let mut pretrained = Trainer::new(&cfg, seed)?;
    pretrained.agent.load_encoder(checkpoint)?;
    let scratch = Trainer::new(&cfg, seed)?;
    let (p_out, s_out) = match out {
        Some(o) => (Some(o.join("pretrained")), Some(o.join("scratch"))),
        None => (None, None),
    };
    let p = pretrained.run(p_out.as_deref())?;
    let s = scratch.run(s_out.as_deref())?;
    Ok((p, s))
}

/// State SAC and SAC+AE trained purely from the same frozen buffer.
pub fn fixed_buffer_experiment(
    cfg: &ExperimentConfig,
    frozen: &ReplayBuffer,
    seed: u64,
    out: Option<&Path>,
) -> Result<(RunResult, RunResult)> {
    if !frozen.is_frozen() {
        return Err(Error::Contract("fixed-buffer experiment needs a frozen replay buffer".into()));
    }
    let mut runs = Vec::new();
    for mode in [AgentKind::SacState, AgentKind::SacAe] {
        let mut c = cfg.clone();
        c.experiment.mode = mode;
        c.experiment.iter_n = None;
        if mode == AgentKind::SacAe && !matches!(c.ae.variant, crate::objectives::AeVariant::Ae) {
            c.ae.variant = crate::objectives::AeVariant::Rae;
        }
        runs.push(Trainer::new(&c, seed)?.run_offline(frozen, out)?);
    }
    let ae = runs.pop().unwrap();
    Ok((runs.pop().unwrap(), ae))
}

#[cfg(test)]
mod tests;
