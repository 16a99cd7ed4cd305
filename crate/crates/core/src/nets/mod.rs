//! Network building blocks: conv encoder, deconv decoder, actor and twin
//! critic MLPs, all holding [`ParamId`]s into a shared [`ParamStore`].

pub mod checkpoint;
pub mod init;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{conv2d_out_size, Graph, Tensor, Var};

/// Bounds applied to the policy's log standard deviation.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Added inside `log(1 - tanh(u)^2 + eps)` of the squashing correction.
pub const TANH_EPS: f64 = 1e-6;

pub(crate) fn bind(g: &mut Graph, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
    if trainable {
        g.param(store, id)
    } else {
        g.frozen(store, id)
    }
}

/// Fully-connected layer, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = init::orthogonal(in_dim, out_dim, rng);
        let weight = store.add(format!("{name}.weight"), Tensor::new(&[in_dim, out_dim], w).unwrap());
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let w = bind(g, store, self.weight, trainable);
        let b = bind(g, store, self.bias, trainable);
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

/// Three fully-connected layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let dims = [in_dim, hidden, hidden, out_dim];
        let layers = (0..3)
            .map(|i| Linear::new(store, &format!("{name}.l{i}"), dims[i], dims[i + 1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h, trainable)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

/// Architecture of the conv encoder and its mirrored decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    /// `[channels, height, width]` of the stacked observation.
    pub input: [usize; 3],
    pub depth: usize,
    pub channels: usize,
    pub latent_dim: usize,
}

impl ConvSpec {
    /// Spatial side lengths after each conv layer: first stride 2, rest stride 1.
    pub fn spatial_sizes(&self) -> Result<Vec<(usize, usize)>> {
        if self.depth == 0 {
            return Err(Error::Config("conv depth must be at least 1".into()));
        }
        let mut sizes = Vec::with_capacity(self.depth);
        let (mut h, mut w) = (self.input[1], self.input[2]);
        for i in 0..self.depth {
            let stride = if i == 0 { 2 } else { 1 };
            match (conv2d_out_size(h, stride), conv2d_out_size(w, stride)) {
                (Some(a), Some(b)) => {
                    h = a;
                    w = b;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "{}x{} input too small for {} conv layers",
                        self.input[1], self.input[2], self.depth
                    )))
                }
            }
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    pub fn trunk_output(&self) -> Result<[usize; 3]> {
        let &(h, w) = self.spatial_sizes()?.last().unwrap();
        Ok([self.channels, h, w])
    }

    pub fn flat_dim(&self) -> Result<usize> {
        Ok(self.trunk_output()?.iter().product())
    }
}

/// The convolutional trunk shared between actor and critic encoders.
#[derive(Debug, Clone)]
pub struct ConvTrunk {
    pub spec: ConvSpec,
    pub layers: Vec<ConvLayer>,
}

impl ConvTrunk {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.spatial_sizes()?;
        let layers = (0..spec.depth)
            .map(|i| {
                let c_in = if i == 0 { spec.input[0] } else { spec.channels };
                let k = init::delta_orthogonal(spec.channels, c_in, rng);
                ConvLayer {
                    kernels: store.add(
                        format!("{name}.conv{i}.kernels"),
                        Tensor::new(&[spec.channels, c_in, 3, 3], k).unwrap(),
                    ),
                    bias: store.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[spec.channels])),
                    stride: if i == 0 { 2 } else { 1 },
                }
            })
            .collect();
        Ok(ConvTrunk { spec, layers })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.kernels, l.bias]).collect()
    }

    /// `[N, C, H, W]` observations to flattened `[N, flat_dim]` features.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, obs: Var, trainable: bool) -> Result<Var> {
        let shape = g.shape(obs).to_vec();
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(Error::dim(
                "encode",
                format!("observation {shape:?}, encoder expects [N, {:?}]", self.spec.input),
            ));
        }
        let mut h = obs;
        for layer in &self.layers {
            let k = bind(g, store, layer.kernels, trainable);
            let b = bind(g, store, layer.bias, trainable);
            h = g.conv2d(h, k, Some(b), layer.stride)?;
            h = g.relu(h);
        }
        let flat = self.spec.flat_dim()?;
        g.reshape(h, &[shape[0], flat])
    }
}

/// Conv trunk followed by FC -> LayerNorm -> tanh. When `log_std` is present
/// the encoder is a diagonal Gaussian whose mean is the tanh output.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub trunk: ConvTrunk,
    pub fc: Linear,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub log_std: Option<Linear>,
    pub latent_dim: usize,
}

/// Output of [`Encoder::encode`].
#[derive(Debug, Clone, Copy)]
pub struct Latent {
    /// The latent handed to downstream heads: the mean, or a
    /// reparameterized sample for a stochastic encoder.
    pub z: Var,
    pub mean: Var,
    pub log_std: Option<Var>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        trunk: ConvTrunk,
        stochastic: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let latent_dim = trunk.spec.latent_dim;
        let flat = trunk.spec.flat_dim()?;
        let fc = Linear::new(store, &format!("{name}.fc"), flat, latent_dim, rng);
        let ln_gain = store.add(format!("{name}.ln.gain"), Tensor::ones(&[latent_dim]));
        let ln_bias = store.add(format!("{name}.ln.bias"), Tensor::zeros(&[latent_dim]));
        let log_std = stochastic.then(|| Linear::new(store, &format!("{name}.log_std"), flat, latent_dim, rng));
        Ok(Encoder {
            trunk,
            fc,
            ln_gain,
            ln_bias,
            log_std,
            latent_dim,
        })
    }

    /// Everything past the shared trunk.
    pub fn head_params(&self) -> Vec<ParamId> {
        let mut p = self.fc.params();
        p.extend([self.ln_gain, self.ln_bias]);
        if let Some(ls) = &self.log_std {
            p.extend(ls.params());
        }
        p
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.trunk.params();
        p.extend(self.head_params());
        p
    }

    /// Head applied to flattened trunk features.
    pub fn head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        trainable: bool,
        noise: Option<&Tensor>,
    ) -> Result<Latent> {
        let h = self.fc.forward(g, store, features, trainable)?;
        let gain = bind(g, store, self.ln_gain, trainable);
        let bias = bind(g, store, self.ln_bias, trainable);
        let n = g.layer_norm(h, gain, bias)?;
        let mean = g.tanh(n);
        let Some(ls_layer) = &self.log_std else {
            return Ok(Latent {
                z: mean,
                mean,
                log_std: None,
            });
        };
        let raw = ls_layer.forward(g, store, features, trainable)?;
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let z = match noise {
            Some(eps) => g.gaussian_reparam(mean, log_std, eps)?,
            None => mean,
        };
        Ok(Latent {
            z,
            mean,
            log_std: Some(log_std),
        })
    }

    /// `obs: [N, C, H, W]`. `train_trunk` and `train_head` choose which parts
    /// are bound trainable; a frozen trunk passes no gradient to the shared
    /// conv weights. `noise` draws the sample of a stochastic encoder; `None`
    /// yields the mean.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        obs: Var,
        train_trunk: bool,
        train_head: bool,
        noise: Option<&Tensor>,
    ) -> Result<Latent> {
        let mut features = self.trunk.forward(g, store, obs, train_trunk)?;
        if !train_trunk {
            features = g.detach(features);
        }
        self.head(g, store, features, train_head, noise)
    }
}

#[derive(Debug, Clone)]
pub struct DeconvLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub output_padding: usize,
}

/// FC -> ReLU -> reshape -> deconv stack mirroring the encoder; the last
/// deconv has stride 2 and no activation.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub spec: ConvSpec,
    pub fc: Linear,
    pub layers: Vec<DeconvLayer>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        let sizes = spec.spatial_sizes()?;
        let fc = Linear::new(store, &format!("{name}.fc"), spec.latent_dim, spec.flat_dim()?, rng);
        let (h1, w1) = sizes[0];
        let pad_h = spec.input[1] - (2 * h1 + 1);
        let pad_w = spec.input[2] - (2 * w1 + 1);
        if pad_h != pad_w {
            return Err(Error::Config("decoder requires square observations".into()));
        }
        let layers = (0..spec.depth)
            .map(|i| {
                let last = i + 1 == spec.depth;
                let c_out = if last { spec.input[0] } else { spec.channels };
                let k = init::delta_orthogonal(spec.channels, c_out, rng);
                DeconvLayer {
                    kernels: store.add(
                        format!("{name}.deconv{i}.kernels"),
                        Tensor::new(&[spec.channels, c_out, 3, 3], k).unwrap(),
                    ),
                    bias: store.add(format!("{name}.deconv{i}.bias"), Tensor::zeros(&[c_out])),
                    stride: if last { 2 } else { 1 },
                    output_padding: if last { pad_h } else { 0 },
                }
            })
            .collect();
        Ok(Decoder { spec, fc, layers })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc.params();
        p.extend(self.layers.iter().flat_map(|l| [l.kernels, l.bias]));
        p
    }

    /// `[N, latent]` -> `[N, C, H, W]` reconstruction.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, trainable: bool) -> Result<Var> {
        let n = g.shape(z)[0];
        let h = self.fc.forward(g, store, z, trainable)?;
        let h = g.relu(h);
        let [c, hh, ww] = self.spec.trunk_output()?;
        let mut h = g.reshape(h, &[n, c, hh, ww])?;
        for (i, layer) in self.layers.iter().enumerate() {
            let k = bind(g, store, layer.kernels, trainable);
            let b = bind(g, store, layer.bias, trainable);
            h = g.deconv2d(h, k, Some(b), layer.stride, layer.output_padding)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Squashed diagonal Gaussian policy head.
#[derive(Debug, Clone)]
pub struct ActorHead {
    pub trunk: [Linear; 2],
    pub mu: Linear,
    pub log_std: Linear,
    pub action_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ActorOutput {
    /// `tanh(u)` with `u = mu + std * noise`; `[N, A]`.
    pub action: Var,
    /// `[N]`.
    pub log_prob: Var,
    /// `tanh(mu)`, used for evaluation; `[N, A]`.
    pub mean_action: Var,
    pub mu: Var,
    pub log_std: Var,
}

impl ActorHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let l0 = Linear::new(store, &format!("{name}.l0"), in_dim, hidden, rng);
        let l1 = Linear::new(store, &format!("{name}.l1"), hidden, hidden, rng);
        let mu = Linear::new(store, &format!("{name}.mu"), hidden, action_dim, rng);
        let log_std = Linear::new(store, &format!("{name}.log_std"), hidden, action_dim, rng);
        ActorHead {
            trunk: [l0, l1],
            mu,
            log_std,
            action_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.trunk.iter().flat_map(Linear::params).collect();
        p.extend(self.mu.params());
        p.extend(self.log_std.params());
        p
    }

    /// `z: [N, L]`, `noise: [N, A]` standard normal.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        noise: &Tensor,
        trainable: bool,
    ) -> Result<ActorOutput> {
        let mut h = z;
        for layer in &self.trunk {
            h = layer.forward(g, store, h, trainable)?;
            h = g.relu(h);
        }
        let mu = self.mu.forward(g, store, h, trainable)?;
        let raw = self.log_std.forward(g, store, h, trainable)?;
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let u = g.gaussian_reparam(mu, log_std, noise)?;
        let action = g.tanh(u);
        let mean_action = g.tanh(mu);

        // log N(u; mu, std) = sum(-eps^2/2 - log_std) - A/2 log(2 pi)
        let a = self.action_dim as f64;
        let consts: Vec<f64> = noise
            .data()
            .chunks(self.action_dim)
            .map(|e| -0.5 * e.iter().map(|v| v * v).sum::<f64>() - 0.5 * a * (2.0 * std::f64::consts::PI).ln())
            .collect();
        let consts = g.constant(Tensor::from_vec(consts));
        let neg_ls = g.neg(log_std);
        let neg_ls = g.sum_last(neg_ls)?;
        let gauss = g.add(neg_ls, consts)?;

        // minus sum log(1 - tanh(u)^2 + eps)
        let sq = g.square(action);
        let one_minus = g.neg(sq);
        let one_minus = g.add_scalar(one_minus, 1.0 + TANH_EPS);
        let log_jac = g.log(one_minus)?;
        let log_jac = g.sum_last(log_jac)?;
        let log_prob = g.sub(gauss, log_jac)?;

        Ok(ActorOutput {
            action,
            log_prob,
            mean_action,
            mu,
            log_std,
        })
    }
}

/// Twin Q-functions over `(latent, action)`.
#[derive(Debug, Clone)]
pub struct CriticHead {
    pub q1: Mlp,
    pub q2: Mlp,
}

impl CriticHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        latent_dim: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        CriticHead {
            q1: Mlp::new(store, &format!("{name}.q1"), latent_dim + action_dim, hidden, 1, rng),
            q2: Mlp::new(store, &format!("{name}.q2"), latent_dim + action_dim, hidden, 1, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.q1.params();
        p.extend(self.q2.params());
        p
    }

    /// Returns `(q1, q2)`, each `[N]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        action: Var,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let n = g.shape(z)[0];
        let x = g.concat_last(z, action)?;
        let q1 = self.q1.forward(g, store, x, trainable)?;
        let q2 = self.q2.forward(g, store, x, trainable)?;
        Ok((g.reshape(q1, &[n])?, g.reshape(q2, &[n])?))
    }
}

/// Pairs `(online, target)` for Polyak averaging.
pub fn param_pairs(online: &[ParamId], target: &[ParamId]) -> Vec<(ParamId, ParamId)> {
    assert_eq!(online.len(), target.len());
    online.iter().copied().zip(target.iter().copied()).collect()
}

#[cfg(test)]
mod tests;
