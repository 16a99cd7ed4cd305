//! Experiment configuration: sectioned `key = value` files (a TOML subset),
//! `section.key=value` overrides, JSON export and run ids.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::envs::{DistractorSpec, EnvConfig, Task};
use crate::error::{Error, Result};
use crate::objectives::AeVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    #[serde(alias = "SAC_STATE")]
    SacState,
    #[serde(alias = "SAC_PIXEL")]
    SacPixel,
    #[serde(alias = "SAC_AE")]
    SacAe,
    #[serde(alias = "SAC_VAE_JOINT")]
    SacVaeJoint,
    #[serde(alias = "SAC_VAE_ITER")]
    SacVaeIter,
    #[serde(alias = "SAC_STATE_SUPERVISION")]
    SacStateSupervision,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::SacState => "sac_state",
            AgentKind::SacPixel => "sac_pixel",
            AgentKind::SacAe => "sac_ae",
            AgentKind::SacVaeJoint => "sac_vae_joint",
            AgentKind::SacVaeIter => "sac_vae_iter",
            AgentKind::SacStateSupervision => "sac_state_supervision",
        }
    }

    pub fn uses_pixels(self) -> bool {
        self != AgentKind::SacState
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How often the iterative mode refreshes its autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Refresh {
    /// One autoencoder update every `n` environment steps.
    Every(u64),
    /// Never after pretraining.
    Never,
}

impl Serialize for Refresh {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Refresh::Every(n) => s.serialize_u64(*n),
            Refresh::Never => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Refresh {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("iter_n must be at least 1")),
            Raw::N(n) => Ok(Refresh::Every(n)),
            Raw::S(s) if s == "inf" || s == "never" => Ok(Refresh::Never),
            Raw::S(s) => Err(serde::de::Error::custom(format!("iter_n must be a positive integer or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: AgentKind,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// Environment observations (agent steps) per run.
    pub steps: u64,
    /// Random-policy observations collected before learning starts.
    pub seed_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Metrics rows are written every `log_interval` steps and at evaluations.
    pub log_interval: u64,
    pub batch_size: usize,
    pub block_actor_grads: bool,
    /// Required in, and only in, `sac_vae_iter` mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iter_n: Option<Refresh>,
    pub pretrain_steps: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            mode: AgentKind::SacAe,
            seeds: vec![0],
            output_dir: "runs".into(),
            steps: 50_000,
            seed_steps: 1000,
            eval_interval: 10_000,
            eval_episodes: 10,
            log_interval: 1000,
            batch_size: 128,
            block_actor_grads: true,
            iter_n: None,
            pretrain_steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacHyper {
    pub gamma: f64,
    pub init_alpha: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Defaults to `-action_dim`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_entropy: Option<f64>,
    pub actor_update_freq: u64,
    pub target_update_freq: u64,
    pub tau_q: f64,
    pub tau_enc: f64,
}

impl Default for SacHyper {
    fn default() -> Self {
        SacHyper {
            gamma: 0.99,
            init_alpha: 0.1,
            alpha_lr: 1e-4,
            alpha_beta1: 0.5,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            target_entropy: None,
            actor_update_freq: 2,
            target_update_freq: 2,
            tau_q: 0.01,
            tau_enc: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeHyper {
    /// Reconstruction objective of `sac_ae` mode: `rae` or `ae`. The VAE
    /// modes and state supervision fix their own objective.
    pub variant: AeVariant,
    pub beta: f64,
    pub lambda_z: f64,
    pub lambda_theta: f64,
    pub ae_lr: f64,
    /// Bit depth of reconstruction targets.
    pub bits: u32,
}

impl Default for AeHyper {
    fn default() -> Self {
        AeHyper {
            variant: AeVariant::Rae,
            beta: 1e-6,
            lambda_z: 1e-6,
            lambda_theta: 1e-7,
            ae_lr: 1e-3,
            bits: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub conv_depth: usize,
    pub conv_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: 1024,
            latent_dim: 50,
            conv_depth: 4,
            conv_channels: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub task: Task,
    pub action_repeat: usize,
    pub episode_len: usize,
    pub render_size: usize,
    pub grayscale: bool,
    pub distractors: bool,
    pub distractor_count: usize,
    pub distractor_radius: f64,
    pub distractor_speed: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let d = DistractorSpec::default();
        EnvSection {
            task: Task::PendulumSwingup,
            action_repeat: Task::PendulumSwingup.default_action_repeat(),
            episode_len: 1000,
            render_size: 32,
            grayscale: false,
            distractors: false,
            distractor_count: d.count,
            distractor_radius: d.radius,
            distractor_speed: d.speed,
        }
    }
}

impl EnvSection {
    pub fn env_config(&self, seed: u64) -> EnvConfig {
        EnvConfig {
            task: self.task,
            action_repeat: self.action_repeat,
            episode_len: self.episode_len,
            render_size: self.render_size,
            grayscale: self.grayscale,
            distractors: self.distractors.then_some(DistractorSpec {
                count: self.distractor_count,
                radius: self.distractor_radius,
                speed: self.distractor_speed,
            }),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySection {
    pub capacity: usize,
}

impl Default for ReplaySection {
    fn default() -> Self {
        ReplaySection { capacity: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub sac: SacHyper,
    pub ae: AeHyper,
    pub net: NetConfig,
    pub env: EnvSection,
    pub replay: ReplaySection,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let x = &self.experiment;
        let s = &self.sac;
        let a = &self.ae;
        check(!x.seeds.is_empty(), || "experiment.seeds must not be empty".into())?;
        check(x.batch_size > 0, || "experiment.batch_size must be positive".into())?;
        check(x.seed_steps >= x.batch_size as u64, || {
            format!(
                "experiment.seed_steps ({}) must be at least experiment.batch_size ({})",
                x.seed_steps, x.batch_size
            )
        })?;
        check(x.eval_interval > 0, || "experiment.eval_interval must be positive".into())?;
        check(x.eval_episodes > 0, || "experiment.eval_episodes must be positive".into())?;
        check(x.log_interval > 0, || "experiment.log_interval must be positive".into())?;
        match (x.mode, x.iter_n) {
            (AgentKind::SacVaeIter, None) => {
                return Err(Error::Config("experiment.iter_n is required in sac_vae_iter mode".into()))
            }
            (AgentKind::SacVaeIter, Some(_)) => {}
            (m, Some(_)) => return Err(Error::Config(format!("experiment.iter_n is only valid in sac_vae_iter mode, not {m}"))),
            _ => {}
        }
        check(s.gamma > 0.0 && s.gamma <= 1.0, || format!("sac.gamma must lie in (0, 1], got {}", s.gamma))?;
        check(s.init_alpha > 0.0, || "sac.init_alpha must be positive".into())?;
        check(s.actor_update_freq >= 1, || "sac.actor_update_freq must be at least 1".into())?;
        check(s.target_update_freq >= 1, || "sac.target_update_freq must be at least 1".into())?;
        for (name, tau) in [("sac.tau_q", s.tau_q), ("sac.tau_enc", s.tau_enc)] {
            check((0.0..=1.0).contains(&tau), || format!("{name} must lie in [0, 1], got {tau}"))?;
        }
        for (name, lr) in [
            ("sac.alpha_lr", s.alpha_lr),
            ("sac.actor_lr", s.actor_lr),
            ("sac.critic_lr", s.critic_lr),
            ("ae.ae_lr", a.ae_lr),
        ] {
            check(lr > 0.0, || format!("{name} must be positive, got {lr}"))?;
        }
        check((0.0..1.0).contains(&s.alpha_beta1), || "sac.alpha_beta1 must lie in [0, 1)".into())?;
        check(a.beta >= 0.0, || format!("ae.beta must be non-negative, got {}", a.beta))?;
        check(a.lambda_z >= 0.0 && a.lambda_theta >= 0.0, || "ae.lambda_z and ae.lambda_theta must be non-negative".into())?;
        check((1..=8).contains(&a.bits), || format!("ae.bits must lie in 1..=8, got {}", a.bits))?;
        if x.mode == AgentKind::SacAe {
            check(matches!(a.variant, AeVariant::Ae | AeVariant::Rae), || {
                format!("ae.variant must be \"ae\" or \"rae\" in sac_ae mode, got {:?}", a.variant)
            })?;
        }
        let n = &self.net;
        check(n.hidden > 0 && n.latent_dim >= 2 && n.conv_channels > 0, || {
            "net.hidden and net.conv_channels must be positive and net.latent_dim at least 2".into()
        })?;
        check(self.replay.capacity > 0, || "replay.capacity must be positive".into())?;
        self.env.env_config(0).validate()?;
        if x.mode.uses_pixels() {
            self.conv_spec(3)?.spatial_sizes()?;
        }
        Ok(())
    }

    /// Objective attached to the encoder in this mode.
    pub fn ae_variant(&self) -> AeVariant {
        match self.experiment.mode {
            AgentKind::SacState | AgentKind::SacPixel => AeVariant::None,
            AgentKind::SacAe => self.ae.variant,
            AgentKind::SacVaeJoint | AgentKind::SacVaeIter => AeVariant::Vae,
            AgentKind::SacStateSupervision => AeVariant::StateDecoder,
        }
    }

    pub fn target_entropy(&self) -> f64 {
        self.sac
            .target_entropy
            .unwrap_or(-(self.env.task.action_dim() as f64))
    }

    pub fn conv_spec(&self, frames: usize) -> Result<crate::nets::ConvSpec> {
        let c = self.env.env_config(0);
        let spec = crate::nets::ConvSpec {
            input: [frames * c.channels(), c.render_size, c.render_size],
            depth: self.net.conv_depth,
            channels: self.net.conv_channels,
            latent_dim: self.net.latent_dim,
        };
        Ok(spec)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &location(text, e.span())))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to bare strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml_string()).expect("own output parses");
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not of the form section.key=value")))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key {path:?} must be section.key")))?;
            let value = parse_literal(raw.trim());
            let sec = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match sec {
                toml::Value::Table(t) => {
                    t.insert(key.to_string(), value);
                }
                _ => return Err(Error::Config(format!("{section} is not a section"))),
            }
        }
        let text = toml::to_string(&table).expect("table serialises");
        Self::from_toml_str(&text)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.experiment.seeds = vec![seed];
        c
    }

    /// First 8 hex digits of SHA-256 over the JSON of this configuration
    /// restricted to `seed`, ignoring the output directory.
    pub fn hash8(&self, seed: u64) -> String {
        let mut c = self.with_seed(seed);
        c.experiment.output_dir.clear();
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("configuration serialises"));
        digest.iter().take(4).map(|b| format!("{b:02x}")).collect()
    }

    /// `<mode>-<task>-<seed>-<hash8>`.
    pub fn run_id(&self, seed: u64) -> String {
        format!(
            "{}-{}-{}-{}",
            self.experiment.mode,
            self.env.task.name(),
            seed,
            self.hash8(seed)
        )
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn location(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_hyperparameter_table() {
        let c = ExperimentConfig::default();
        assert_eq!(c.experiment.batch_size, 128);
        assert_eq!(c.sac.gamma, 0.99);
        assert_eq!(c.sac.init_alpha, 0.1);
        assert_eq!((c.sac.critic_lr, c.sac.actor_lr, c.ae.ae_lr, c.sac.alpha_lr), (1e-3, 1e-3, 1e-3, 1e-4));
        assert_eq!((c.sac.tau_q, c.sac.tau_enc), (0.01, 0.05));
        assert_eq!(c.experiment.eval_interval, 10_000);
        assert_eq!(c.experiment.eval_episodes, 10);
        assert_eq!((c.ae.lambda_z, c.ae.lambda_theta), (1e-6, 1e-7));
        assert_eq!(c.net.hidden, 1024);
        assert_eq!(c.target_entropy(), -1.0);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = ExperimentConfig::default();
        c.experiment.mode = AgentKind::SacVaeIter;
        c.experiment.iter_n = Some(Refresh::Never);
        c.experiment.seeds = vec![3, 1, 4];
        c.sac.target_entropy = Some(-0.5);
        c.ae.beta = 1e-7;
        c.env.task = Task::PointReacher;
        let text = c.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        c.experiment.iter_n = Some(Refresh::Every(100));
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = ExperimentConfig::from_toml_str("[experiment]\nmode = \"SAC_PIXEL\"\n[env]\ntask = \"cartpole_balance\"\n").unwrap();
        assert_eq!(c.experiment.mode, AgentKind::SacPixel);
        assert_eq!(c.env.task, Task::CartpoleBalance);
        assert_eq!(c.sac, SacHyper::default());
    }

    #[test]
    fn unknown_field_is_named() {
        let err = ExperimentConfig::from_toml_str("[sac]\ngama = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
    }

    #[test]
    fn overrides_apply_with_types() {
        let c = ExperimentConfig::default()
            .with_overrides(&["sac.gamma=0.5", "env.task=point_reacher", "experiment.seeds=[7, 8]", "env.distractors=true"])
            .unwrap();
        assert_eq!(c.sac.gamma, 0.5);
        assert_eq!(c.env.task, Task::PointReacher);
        assert_eq!(c.experiment.seeds, vec![7, 8]);
        assert!(c.env.distractors);
        assert!(ExperimentConfig::default().with_overrides(&["sac.gamma"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["gamma=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["sac.gamma=fast"]).is_err());
    }

    #[test]
    fn iter_n_required_exactly_in_iter_mode() {
        let mut c = ExperimentConfig::default();
        c.experiment.mode = AgentKind::SacVaeIter;
        assert!(c.validate().is_err());
        c.experiment.iter_n = Some(Refresh::Every(10));
        c.validate().unwrap();
        c.experiment.mode = AgentKind::SacAe;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("[experiment]\niter_n = 0\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for o in [
            "sac.gamma=0.0",
            "experiment.seed_steps=10",
            "env.action_repeat=3",
            "ae.beta=-1.0",
            "experiment.seeds=[]",
            "net.conv_depth=20",
            "ae.variant=\"vae\"",
        ] {
            let c = ExperimentConfig::default().with_overrides(&[o]).unwrap();
            assert!(c.validate().is_err(), "{o}");
        }
    }

    #[test]
    fn run_id_encodes_mode_task_seed_and_hash() {
        let c = ExperimentConfig::default();
        let id = c.run_id(7);
        assert!(id.starts_with("sac_ae-pendulum_swingup-7-"), "{id}");
        assert_eq!(id.len(), "sac_ae-pendulum_swingup-7-".len() + 8);
        assert_eq!(id, c.run_id(7));
        assert_ne!(c.hash8(7), c.hash8(8));
        let mut d = c.clone();
        d.experiment.output_dir = "elsewhere".into();
        assert_eq!(d.run_id(7), id);
        d.ae.beta = 1e-4;
        assert_ne!(d.run_id(7), id);
    }

    #[test]
    fn json_export_parses_back() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
