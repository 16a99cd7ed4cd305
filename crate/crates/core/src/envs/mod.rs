//! Self-rendered continuous-control tasks with the pixel observation
//! pipeline: rendering, frame stacking, action repeat and optional
//! bouncing-ball distractors.
//!
//! Observations are `u8` stacks of shape `[FRAME_STACK * C, H, W]`; divide by
//! 255 (see [`to_unit`]) to get network inputs in `[0, 1)`.

pub mod render;
pub mod tasks;

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use render::{DistractorField, DistractorSpec};
pub use tasks::Task;

pub const FRAME_STACK: usize = 3;
pub const ACTION_REPEATS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: Task,
    pub action_repeat: usize,
    /// Episode length in physics substeps.
    pub episode_len: usize,
    pub render_size: usize,
    pub grayscale: bool,
    pub distractors: Option<DistractorSpec>,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            task: Task::PendulumSwingup,
            action_repeat: 4,
            episode_len: 1000,
            render_size: 32,
            grayscale: false,
            distractors: None,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !ACTION_REPEATS.contains(&self.action_repeat) {
            return Err(Error::Config(format!(
                "action_repeat must be one of {ACTION_REPEATS:?}, got {}",
                self.action_repeat
            )));
        }
        if self.episode_len == 0 || self.episode_len % self.action_repeat != 0 {
            return Err(Error::Config(format!(
                "episode_len {} must be a positive multiple of action_repeat {}",
                self.episode_len, self.action_repeat
            )));
        }
        if self.render_size < 8 {
            return Err(Error::Config(format!("render_size {} is below 8", self.render_size)));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        if self.grayscale {
            1
        } else {
            3
        }
    }

    /// Shape of a stacked observation.
    pub fn obs_shape(&self) -> [usize; 3] {
        [FRAME_STACK * self.channels(), self.render_size, self.render_size]
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape().iter().product()
    }

    /// Agent steps per episode.
    pub fn horizon(&self) -> usize {
        self.episode_len / self.action_repeat
    }
}

#[derive(Debug, Clone)]
pub struct Step {
    pub obs: Vec<u8>,
    pub reward: f64,
    pub done: bool,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    distractor_rng: ChaCha8Rng,
    q: Vec<f64>,
    distractors: Option<DistractorField>,
    frames: VecDeque<Vec<u8>>,
    t: usize,
    clipped: u64,
    ready: bool,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        // Distractors draw from their own stream so physics is identical
        // with and without them.
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let distractor_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Env {
            q: Vec::new(),
            distractors: None,
            frames: VecDeque::with_capacity(FRAME_STACK),
            t: 0,
            clipped: 0,
            ready: false,
            rng,
            distractor_rng,
            cfg,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_dim(&self) -> usize {
        self.cfg.task.action_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.cfg.task.state_dim()
    }

    /// Physics substeps taken in the current episode.
    pub fn elapsed(&self) -> usize {
        self.t
    }

    /// Action coordinates clipped into `[-1, 1]` since construction.
    pub fn clipped_actions(&self) -> u64 {
        self.clipped
    }

    pub fn physical_state(&self) -> &[f64] {
        &self.q
    }

    pub fn reset(&mut self) -> (Vec<u8>, Vec<f64>) {
        self.q = tasks::initial_state(self.cfg.task, &mut self.rng);
        self.distractors = self
            .cfg
            .distractors
            .as_ref()
            .map(|spec| DistractorField::new(spec, self.cfg.render_size, &mut self.distractor_rng));
        self.t = 0;
        self.ready = true;
        let frame = self.render();
        self.frames.clear();
        for _ in 0..FRAME_STACK {
            self.frames.push_back(frame.clone());
        }
        (self.observation(), tasks::proprio(self.cfg.task, &self.q))
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        if !self.ready {
            return Err(Error::Contract("step before reset or after episode end".into()));
        }
        if action.len() != self.action_dim() {
            return Err(Error::Contract(format!(
                "action has {} coordinates, task expects {}",
                action.len(),
                self.action_dim()
            )));
        }
        let mut a = action.to_vec();
        for v in &mut a {
            if !(-1.0..=1.0).contains(v) {
                self.clipped += 1;
                *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
            }
        }
        let mut reward = 0.0;
        for _ in 0..self.cfg.action_repeat {
            tasks::substep(self.cfg.task, &mut self.q, &a);
            reward += tasks::reward(self.cfg.task, &self.q);
        }
        self.t += self.cfg.action_repeat;
        if let Some(d) = &mut self.distractors {
            d.advance();
        }
        let frame = self.render();
        self.frames.pop_front();
        self.frames.push_back(frame);
        let done = self.t >= self.cfg.episode_len;
        if done {
            self.ready = false;
        }
        Ok(Step {
            obs: self.observation(),
            reward,
            done,
            state: tasks::proprio(self.cfg.task, &self.q),
        })
    }

    fn render(&self) -> Vec<u8> {
        render_frame(&self.cfg, &self.q, self.distractors.as_ref())
    }

    fn observation(&self) -> Vec<u8> {
        self.frames.iter().flatten().copied().collect()
    }

    /// The most recent frame, `[C, H, W]`.
    pub fn last_frame(&self) -> &[u8] {
        self.frames.back().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Renders one `[C, H, W]` frame of a physical state.
pub fn render_frame(cfg: &EnvConfig, q: &[f64], distractors: Option<&DistractorField>) -> Vec<u8> {
    let mut canvas = render::Canvas::new(cfg.render_size, tasks::view(cfg.task));
    if let Some(d) = distractors {
        d.draw(&mut canvas);
    }
    tasks::draw(cfg.task, q, &mut canvas);
    canvas.to_chw(cfg.grayscale)
}

/// Scales stored bytes to `[0, 1)`.
pub fn to_unit(pixels: &[u8]) -> Vec<f64> {
    pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
}

/// Quantises `v` in `[0, 1)` to `bits` bits:
/// `floor(v * 256 / 2^(8 - bits)) * 2^(8 - bits) / 256`.
///
/// `bits == 8` leaves the frame untouched: pixels are stored as `k / 255`,
/// which the 1/256 grid would otherwise shift by up to 1/256.
pub fn reduce_bit_depth(frame: &mut [f64], bits: u32) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Config(format!("bit depth must be in 1..=8, got {bits}")));
    }
    if bits == 8 {
        return Ok(());
    }
    let bin = f64::from(1u32 << (8 - bits));
    for v in frame {
        *v = (*v * 256.0 / bin).floor() * bin / 256.0;
    }
    Ok(())
}
