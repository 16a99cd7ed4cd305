//! The SAC agent in all its variants: parameter bundle, optimizers, loss
//! assembly with per-mode gradient routing, and the update schedule.
//!
//! Routing summary:
//! * critic loss trains the critic encoder (conv trunk + FC/LN) and both Q heads;
//! * actor loss trains the actor head and the actor's own FC/LN; the shared
//!   conv trunk only when `block_actor_grads` is off;
//! * the reconstruction loss trains the critic encoder and the decoder;
//! * in `sac_vae_iter` mode RL losses see frozen latents and only the
//!   autoencoder objective ever moves the encoder.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::config::{AgentKind, ExperimentConfig};
use crate::envs::{reduce_bit_depth, FRAME_STACK};
use crate::error::{Error, Result};
use crate::nets::{self, checkpoint, ActorHead, ConvTrunk, CriticHead, Decoder, Encoder, Mlp};
use crate::objectives::{self, AeVariant};
use crate::params::{Adam, AdamConfig, ParamId, ParamStore};
use crate::replay::{Batch, ReplayBuffer};
use crate::tensor::{Graph, Tensor, Var};

/// Which encoder produces a latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Critic,
    Actor,
    Target,
}

#[derive(Debug, Clone)]
pub struct PixelNets {
    pub critic_enc: Encoder,
    /// Shares the critic's conv trunk; absent in iterative mode, where the
    /// actor reads the critic encoder.
    pub actor_enc: Option<Encoder>,
    /// Absent in iterative mode, where targets read the (RL-frozen) encoder.
    pub target_enc: Option<Encoder>,
    pub decoder: Option<Decoder>,
    pub state_decoder: Option<Mlp>,
}

/// Standard-normal draws consumed by one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossNoise {
    /// `[B, A]` policy noise.
    pub action: Tensor,
    /// `[B, L]` latent noise per encoder pass; used by stochastic encoders only.
    pub latent: [Tensor; 3],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub critic: u64,
    pub actor: u64,
    pub target: u64,
    pub ae: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepMetrics {
    pub loss_q: f64,
    pub loss_pi: Option<f64>,
    pub loss_alpha: Option<f64>,
    pub loss_ae: Option<f64>,
    pub alpha: f64,
    /// Norm of the actor-loss gradient on the shared conv trunk.
    pub grad_norm_enc_actor: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub kind: AgentKind,
    cfg: ExperimentConfig,
    pub store: ParamStore,
    pub pixel: Option<PixelNets>,
    pub critic: CriticHead,
    pub target_critic: CriticHead,
    pub actor: ActorHead,
    pub log_alpha: ParamId,
    critic_opt: Adam,
    actor_opt: Adam,
    alpha_opt: Adam,
    ae_opt: Option<Adam>,
    rng: ChaCha8Rng,
    counts: UpdateCounts,
    variant: AeVariant,
    obs_shape: [usize; 3],
    state_dim: usize,
    action_dim: usize,
    latent_dim: usize,
}

fn copy_all(store: &mut ParamStore, from: &[ParamId], to: &[ParamId]) {
    for (&a, &b) in from.iter().zip(to) {
        store.copy_value(a, b).expect("target mirrors online shapes");
    }
}

impl Agent {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let kind = cfg.experiment.mode;
        let variant = cfg.ae_variant();
        let task = cfg.env.task;
        let (action_dim, state_dim) = (task.action_dim(), task.state_dim());
        let spec = cfg.conv_spec(FRAME_STACK)?;
        let hidden = cfg.net.hidden;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rng = &mut init_rng;

        let (pixel, latent_dim) = if kind.uses_pixels() {
            let stochastic = variant == AeVariant::Vae;
            let iterative = kind == AgentKind::SacVaeIter;
            let trunk = ConvTrunk::new(&mut store, "enc.trunk", spec, rng)?;
            let critic_enc = Encoder::new(&mut store, "enc.critic", trunk.clone(), stochastic, rng)?;
            let actor_enc = if iterative {
                None
            } else {
                Some(Encoder::new(&mut store, "enc.actor", trunk, stochastic, rng)?)
            };
            let target_enc = if iterative {
                None
            } else {
                let t = ConvTrunk::new(&mut store, "target.trunk", spec, rng)?;
                let e = Encoder::new(&mut store, "target.critic", t, stochastic, rng)?;
                copy_all(&mut store, &critic_enc.params(), &e.params());
                Some(e)
            };
            let decoder = match variant {
                AeVariant::Ae | AeVariant::Rae | AeVariant::Vae => Some(Decoder::new(&mut store, "dec", spec, rng)?),
                _ => None,
            };
            let state_decoder = (variant == AeVariant::StateDecoder)
                .then(|| Mlp::new(&mut store, "state_dec", spec.latent_dim, hidden, state_dim, rng));
            let nets = PixelNets {
                critic_enc,
                actor_enc,
                target_enc,
                decoder,
                state_decoder,
            };
            (Some(nets), spec.latent_dim)
        } else {
            (None, state_dim)
        };

        let critic = CriticHead::new(&mut store, "critic", latent_dim, action_dim, hidden, rng);
        let target_critic = CriticHead::new(&mut store, "target.q", latent_dim, action_dim, hidden, rng);
        copy_all(&mut store, &critic.params(), &target_critic.params());
        let actor = ActorHead::new(&mut store, "actor", latent_dim, hidden, action_dim, rng);
        let log_alpha = store.add("log_alpha", Tensor::scalar(cfg.sac.init_alpha.ln()));

        let s = &cfg.sac;
        let block = cfg.experiment.block_actor_grads;
        let mut critic_ids = critic.params();
        let mut actor_ids = actor.params();
        let mut ae_ids = None;
        if let Some(p) = &pixel {
            if kind != AgentKind::SacVaeIter {
                critic_ids.extend(p.critic_enc.params());
            }
            if let Some(ae) = &p.actor_enc {
                actor_ids.extend(ae.head_params());
                if !block {
                    actor_ids.extend(ae.trunk.params());
                }
            }
            let mut ids = p.critic_enc.params();
            if let Some(d) = &p.decoder {
                ids.extend(d.params());
            }
            if let Some(m) = &p.state_decoder {
                ids.extend(m.params());
            }
            if variant != AeVariant::None {
                ae_ids = Some(ids);
            }
        }
        let critic_opt = Adam::new(&store, critic_ids, AdamConfig::with_lr(s.critic_lr));
        let actor_opt = Adam::new(&store, actor_ids, AdamConfig::with_lr(s.actor_lr));
        let alpha_opt = Adam::new(
            &store,
            vec![log_alpha],
            AdamConfig {
                beta1: s.alpha_beta1,
                ..AdamConfig::with_lr(s.alpha_lr)
            },
        );
        let ae_opt = ae_ids.map(|ids| Adam::new(&store, ids, AdamConfig::with_lr(cfg.ae.ae_lr)));

        Ok(Agent {
            kind,
            cfg: cfg.clone(),
            store,
            pixel,
            critic,
            target_critic,
            actor,
            log_alpha,
            critic_opt,
            actor_opt,
            alpha_opt,
            ae_opt,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a9e7),
            counts: UpdateCounts::default(),
            variant,
            obs_shape: spec.input,
            state_dim,
            action_dim,
            latent_dim,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn counts(&self) -> UpdateCounts {
        self.counts
    }

    pub fn variant(&self) -> AeVariant {
        self.variant
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn alpha(&self) -> f64 {
        self.store.value(self.log_alpha).item().exp()
    }

    fn iterative(&self) -> bool {
        self.kind == AgentKind::SacVaeIter
    }

    fn stochastic(&self) -> bool {
        self.variant == AeVariant::Vae
    }

    /// Shared conv trunk parameters (empty for state agents).
    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.pixel
            .as_ref()
            .map(|p| p.critic_enc.trunk.params())
            .unwrap_or_default()
    }

    /// Everything the reconstruction objective alone may train besides the encoder.
    pub fn decoder_params(&self) -> Vec<ParamId> {
        let Some(p) = &self.pixel else { return Vec::new() };
        let mut ids = p.decoder.as_ref().map(Decoder::params).unwrap_or_default();
        if let Some(m) = &p.state_decoder {
            ids.extend(m.params());
        }
        ids
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.pixel
            .as_ref()
            .map(|p| p.critic_enc.params())
            .unwrap_or_default()
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Parameters stepped by the critic update.
    pub fn critic_trained(&self) -> &[ParamId] {
        self.critic_opt.ids()
    }

    /// Parameters stepped by the actor update.
    pub fn actor_trained(&self) -> &[ParamId] {
        self.actor_opt.ids()
    }

    /// Parameters stepped by the reconstruction update; empty without one.
    pub fn ae_trained(&self) -> &[ParamId] {
        self.ae_opt.as_ref().map_or(&[], |o| o.ids())
    }

    /// Hex SHA-256 prefix of the critic encoder's parameter bytes.
    pub fn encoder_hash(&self) -> String {
        let mut h = Sha256::new();
        for id in self.encoder_params() {
            for v in self.store.value(id).data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn draw_noise(&mut self, batch: usize) -> LossNoise {
        let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| self.rng.sample(StandardNormal));
        let l = [batch, self.latent_dim];
        LossNoise {
            action: normal(&[batch, self.action_dim]),
            latent: [normal(&l), normal(&l), normal(&l)],
        }
    }

    /// Latent for a batch of observations (pixel agents) or states.
    #[allow(clippy::too_many_arguments)]
    fn latent(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        role: Role,
        obs: &Tensor,
        states: &Tensor,
        train_trunk: bool,
        train_head: bool,
        noise: &Tensor,
    ) -> Result<Var> {
        let Some(p) = &self.pixel else {
            return Ok(g.constant(states.clone()));
        };
        let enc = match role {
            Role::Critic => &p.critic_enc,
            Role::Actor => p.actor_enc.as_ref().unwrap_or(&p.critic_enc),
            Role::Target => p.target_enc.as_ref().unwrap_or(&p.critic_enc),
        };
        let o = g.constant(obs.clone());
        let noise = self.stochastic().then_some(noise);
        Ok(enc.encode(g, store, o, train_trunk, train_head, noise)?.z)
    }

    /// Soft Bellman targets for a batch; a pure function of the parameters.
    pub fn critic_targets(&self, store: &ParamStore, batch: &Batch, noise: &LossNoise) -> Result<Tensor> {
        let mut g = Graph::new();
        let z_pi = self.latent(store, &mut g, Role::Actor, &batch.next_obs, &batch.next_states, false, false, &noise.latent[0])?;
        let next = self.actor.forward(&mut g, store, z_pi, &noise.action, false)?;
        let z_t = self.latent(store, &mut g, Role::Target, &batch.next_obs, &batch.next_states, false, false, &noise.latent[1])?;
        let (q1, q2) = self.target_critic.forward(&mut g, store, z_t, next.action, false)?;
        let min_q: Vec<f64> = g
            .value(q1)
            .data()
            .iter()
            .zip(g.value(q2).data())
            .map(|(a, b)| a.min(*b))
            .collect();
        let alpha = store.value(self.log_alpha).item().exp();
        Ok(objectives::bellman_target(
            &batch.rewards,
            &batch.dones,
            &min_q,
            g.value(next.log_prob).data(),
            self.cfg.sac.gamma,
            alpha,
        ))
    }

    /// Critic loss against precomputed targets `y`.
    pub fn critic_loss(&self, store: &ParamStore, g: &mut Graph, batch: &Batch, y: &Tensor, noise: &LossNoise) -> Result<Var> {
        let train_enc = !self.iterative();
        let z = self.latent(store, g, Role::Critic, &batch.obs, &batch.states, train_enc, train_enc, &noise.latent[2])?;
        let a = g.constant(batch.actions.clone());
        let (q1, q2) = self.critic.forward(g, store, z, a, true)?;
        objectives::critic_loss(g, q1, q2, y)
    }

    /// Actor loss; also returns the policy log-probabilities for the
    /// temperature update.
    pub fn actor_loss(&self, store: &ParamStore, g: &mut Graph, batch: &Batch, noise: &LossNoise) -> Result<(Var, Tensor)> {
        let iter = self.iterative();
        let train_trunk = !iter && !self.cfg.experiment.block_actor_grads;
        let z = self.latent(store, g, Role::Actor, &batch.obs, &batch.states, train_trunk, !iter, &noise.latent[0])?;
        let out = self.actor.forward(g, store, z, &noise.action, true)?;
        let zc = self.latent(store, g, Role::Critic, &batch.obs, &batch.states, train_trunk, false, &noise.latent[1])?;
        let (q1, q2) = self.critic.forward(g, store, zc, out.action, false)?;
        let alpha = store.value(self.log_alpha).item().exp();
        let loss = objectives::actor_loss(g, out.log_prob, q1, q2, alpha)?;
        Ok((loss, g.value(out.log_prob).clone()))
    }

    pub fn temperature_loss(&self, store: &ParamStore, g: &mut Graph, log_prob: &Tensor) -> Result<Var> {
        let la = g.param(store, self.log_alpha);
        objectives::temperature_loss(g, la, log_prob, self.cfg.target_entropy())
    }

    /// Reconstruction (or state-decoding) loss of the active variant.
    pub fn ae_loss(&self, store: &ParamStore, g: &mut Graph, batch: &Batch, noise: &LossNoise) -> Result<Var> {
        let p = self
            .pixel
            .as_ref()
            .filter(|_| self.variant != AeVariant::None)
            .ok_or_else(|| Error::Contract(format!("{} has no reconstruction objective", self.kind)))?;
        let o = g.constant(batch.obs.clone());
        let noise = self.stochastic().then_some(&noise.latent[2]);
        let lat = p.critic_enc.encode(g, store, o, true, true, noise)?;
        let ae = &self.cfg.ae;
        if let Some(m) = &p.state_decoder {
            let pred = m.forward(g, store, lat.z, true)?;
            return objectives::state_decoder_loss(g, pred, &batch.states);
        }
        let dec = p.decoder.as_ref().expect("reconstruction variants carry a decoder");
        let mut target = batch.obs.clone();
        reduce_bit_depth(target.data_mut(), ae.bits)?;
        let recon = dec.forward(g, store, lat.z, true)?;
        match self.variant {
            AeVariant::Ae => objectives::ae_loss(g, recon, &target),
            AeVariant::Rae => {
                let theta: Vec<Var> = dec.params().into_iter().map(|id| g.param(store, id)).collect();
                objectives::rae_loss(g, recon, &target, lat.z, &theta, ae.lambda_z, ae.lambda_theta)
            }
            AeVariant::Vae => {
                let log_std = lat.log_std.expect("VAE encoder has a log-std head");
                objectives::vae_loss(g, recon, &target, lat.mean, log_std, ae.beta)
            }
            AeVariant::None | AeVariant::StateDecoder => unreachable!(),
        }
    }

    fn finite(&self, name: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical {
                loss: name.into(),
                step: self.counts.critic,
            })
        }
    }

    /// Zeroes every gradient, builds `loss` and accumulates its gradient
    /// into the store without stepping any optimizer.
    fn gradients(&mut self, build: impl FnOnce(&Agent, &mut Graph) -> Result<Var>) -> Result<f64> {
        self.store.zero_all_grads();
        let mut g = Graph::new();
        let loss = build(self, &mut g)?;
        let v = g.value(loss).item();
        g.backward(loss)?;
        self.store.accumulate_grads(&g);
        Ok(v)
    }

    pub fn critic_gradients(&mut self, batch: &Batch, noise: &LossNoise) -> Result<f64> {
        let y = self.critic_targets(&self.store, batch, noise)?;
        self.gradients(|a, g| a.critic_loss(&a.store, g, batch, &y, noise))
    }

    pub fn actor_gradients(&mut self, batch: &Batch, noise: &LossNoise) -> Result<(f64, Tensor)> {
        let mut lp = Tensor::default();
        let v = self.gradients(|a, g| {
            let (l, log_prob) = a.actor_loss(&a.store, g, batch, noise)?;
            lp = log_prob;
            Ok(l)
        })?;
        Ok((v, lp))
    }

    pub fn ae_gradients(&mut self, batch: &Batch, noise: &LossNoise) -> Result<f64> {
        self.gradients(|a, g| a.ae_loss(&a.store, g, batch, noise))
    }

    pub fn update_critic(&mut self, batch: &Batch) -> Result<f64> {
        let noise = self.draw_noise(batch.len());
        let l = self.critic_gradients(batch, &noise)?;
        self.finite("critic", l)?;
        self.critic_opt.step(&mut self.store);
        self.counts.critic += 1;
        Ok(l)
    }

    /// Actor step followed by the temperature step; returns the two losses
    /// and the actor-loss gradient norm on the shared trunk.
    pub fn update_actor_and_alpha(&mut self, batch: &Batch) -> Result<(f64, f64, f64)> {
        let noise = self.draw_noise(batch.len());
        let (l, log_prob) = self.actor_gradients(batch, &noise)?;
        self.finite("actor", l)?;
        let trunk_norm = self.store.grad_norm(&self.trunk_params());
        self.actor_opt.step(&mut self.store);
        let la = self.gradients(|a, g| a.temperature_loss(&a.store, g, &log_prob))?;
        self.finite("temperature", la)?;
        self.alpha_opt.step(&mut self.store);
        self.counts.actor += 1;
        Ok((l, la, trunk_norm))
    }

    pub fn update_targets(&mut self) -> Result<()> {
        let pairs = nets::param_pairs(&self.critic.params(), &self.target_critic.params());
        self.store.polyak(&pairs, self.cfg.sac.tau_q)?;
        if let Some(t) = self.pixel.as_ref().and_then(|p| p.target_enc.as_ref()) {
            let online = self.pixel.as_ref().unwrap().critic_enc.params();
            let pairs = nets::param_pairs(&online, &t.params());
            self.store.polyak(&pairs, self.cfg.sac.tau_enc)?;
        }
        self.counts.target += 1;
        Ok(())
    }

    pub fn update_ae(&mut self, batch: &Batch) -> Result<f64> {
        let noise = self.draw_noise(batch.len());
        let l = self.ae_gradients(batch, &noise)?;
        self.finite("ae", l)?;
        self.ae_opt
            .as_mut()
            .expect("variant with a reconstruction objective")
            .step(&mut self.store);
        self.counts.ae += 1;
        Ok(l)
    }

    /// Samples a batch and applies one autoencoder update.
    pub fn ae_step(&mut self, buf: &mut ReplayBuffer) -> Result<f64> {
        let batch = buf.sample(self.cfg.experiment.batch_size)?;
        self.update_ae(&batch)
    }

    /// One training update: critic every call, actor + temperature and
    /// target mixing on their frequencies, and the joint reconstruction
    /// objective every call (not in iterative mode, whose autoencoder runs on
    /// its own schedule via [`Agent::ae_step`]).
    pub fn train_step(&mut self, buf: &mut ReplayBuffer) -> Result<StepMetrics> {
        let batch = buf.sample(self.cfg.experiment.batch_size)?;
        let u = self.counts.critic + 1;
        let mut m = StepMetrics {
            loss_q: self.update_critic(&batch)?,
            ..StepMetrics::default()
        };
        if u % self.cfg.sac.actor_update_freq == 0 {
            let (lp, la, norm) = self.update_actor_and_alpha(&batch)?;
            m.loss_pi = Some(lp);
            m.loss_alpha = Some(la);
            if self.pixel.is_some() {
                m.grad_norm_enc_actor = Some(norm);
            }
        }
        if u % self.cfg.sac.target_update_freq == 0 {
            self.update_targets()?;
        }
        if self.variant != AeVariant::None && !self.iterative() {
            m.loss_ae = Some(self.update_ae(&batch)?);
        }
        m.alpha = self.alpha();
        Ok(m)
    }

    fn obs_tensor(&self, pixels: &[u8]) -> Result<Tensor> {
        let [c, h, w] = self.obs_shape;
        Tensor::new(&[1, c, h, w], crate::envs::to_unit(pixels))
    }

    /// Action for one observation: a policy sample, or the mean action when
    /// `deterministic`. Latents are encoder means either way.
    pub fn act(&mut self, pixels: &[u8], state: &[f64], deterministic: bool) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let z = match &self.pixel {
            Some(p) => {
                let enc = p.actor_enc.as_ref().unwrap_or(&p.critic_enc);
                let o = g.constant(self.obs_tensor(pixels)?);
                enc.encode(&mut g, &self.store, o, false, false, None)?.mean
            }
            None => {
                if state.len() != self.state_dim {
                    return Err(Error::Contract(format!("state has {} entries, agent expects {}", state.len(), self.state_dim)));
                }
                g.constant(Tensor::new(&[1, self.state_dim], state.to_vec())?)
            }
        };
        let noise = if deterministic {
            Tensor::zeros(&[1, self.action_dim])
        } else {
            Tensor::from_fn(&[1, self.action_dim], |_| self.rng.sample(StandardNormal))
        };
        let out = self.actor.forward(&mut g, &self.store, z, &noise, false)?;
        let a = if deterministic { out.mean_action } else { out.action };
        Ok(g.value(a).data().to_vec())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, &self.all_params(), path)
    }

    /// Restores every parameter; the checkpoint must come from an agent
    /// with the same architecture.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let records = checkpoint::read(path)?;
        let ids = self.all_params();
        checkpoint::load_exact(&mut self.store, &ids, &records)
    }

    /// Copies the pixel encoders (`enc.*`) out of another agent's checkpoint
    /// and resets the target encoder to match. Returns the number of
    /// parameters loaded.
    pub fn load_encoder(&mut self, path: &Path) -> Result<usize> {
        let p = self
            .pixel
            .as_ref()
            .ok_or_else(|| Error::Contract("state agents have no encoder".into()))?;
        let records = checkpoint::read(path)?;
        let n = checkpoint::load_matching(&mut self.store, &records, |name| name.starts_with("enc."))?;
        if n == 0 {
            return Err(Error::Contract(format!("{} holds no encoder parameters", path.display())));
        }
        if let Some(t) = &p.target_enc {
            copy_all(&mut self.store, &p.critic_enc.params(), &t.params());
        }
        Ok(n)
    }

    /// Mean critic-encoder latents, `[N, L]`, for `[N, C, H, W]` observations.
    pub fn latents(&self, obs: &Tensor) -> Result<Tensor> {
        let p = self
            .pixel
            .as_ref()
            .ok_or_else(|| Error::Contract("state agents have no encoder".into()))?;
        let mut g = Graph::new();
        let o = g.constant(obs.clone());
        let lat = p.critic_enc.encode(&mut g, &self.store, o, false, false, None)?;
        Ok(g.value(lat.mean).clone())
    }
}
