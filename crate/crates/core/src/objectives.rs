//! Loss functions. Each builds a scalar node on a caller-supplied [`Graph`]
//! from already-computed network outputs, so the caller decides which
//! parameters are bound trainable, frozen or detached.
//!
//! Reductions: reconstruction error is a mean over pixels and batch, latent
//! penalties a mean over dims and batch, KL a sum over dims averaged over
//! the batch.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Variant of the auxiliary reconstruction objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeVariant {
    None,
    Ae,
    Vae,
    Rae,
    StateDecoder,
}

/// Soft Bellman target `r + gamma * (1 - done) * (min_q_next - alpha * log_pi_next)`.
pub fn bellman_target(
    reward: &[f64],
    done: &[f64],
    min_q_next: &[f64],
    log_pi_next: &[f64],
    gamma: f64,
    alpha: f64,
) -> Tensor {
    let y = reward
        .iter()
        .zip(done)
        .zip(min_q_next.iter().zip(log_pi_next))
        .map(|((&r, &d), (&q, &lp))| r + gamma * (1.0 - d) * (q - alpha * lp))
        .collect();
    Tensor::from_vec(y)
}

fn squared_error_mean(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `mean((q1 - y)^2) + mean((q2 - y)^2)`; `y` enters as a constant.
pub fn critic_loss(g: &mut Graph, q1: Var, q2: Var, y: &Tensor) -> Result<Var> {
    if y.is_empty() {
        return Err(Error::Contract("critic loss on an empty batch".into()));
    }
    let l1 = squared_error_mean(g, q1, y)?;
    let l2 = squared_error_mean(g, q2, y)?;
    g.add(l1, l2)
}

/// `mean(alpha * log_pi - min(q1, q2))`.
pub fn actor_loss(g: &mut Graph, log_prob: Var, q1: Var, q2: Var, alpha: f64) -> Result<Var> {
    let q = g.min(q1, q2)?;
    let ent = g.scale(log_prob, alpha);
    let d = g.sub(ent, q)?;
    Ok(g.mean(d))
}

/// `mean(-alpha * (log_pi + target_entropy))` with `alpha = exp(log_alpha)`
/// and `log_pi` treated as data.
pub fn temperature_loss(g: &mut Graph, log_alpha: Var, log_prob: &Tensor, target_entropy: f64) -> Result<Var> {
    if log_prob.is_empty() {
        return Err(Error::Contract("temperature loss on an empty batch".into()));
    }
    let gap = log_prob.data().iter().map(|lp| lp + target_entropy).sum::<f64>() / log_prob.len() as f64;
    let alpha = g.exp(log_alpha);
    let l = g.scale(alpha, -gap);
    Ok(g.sum(l))
}

/// Unit-variance Gaussian likelihood: mean squared error to `target`.
pub fn ae_loss(g: &mut Graph, recon: Var, target: &Tensor) -> Result<Var> {
    if g.shape(recon) != target.shape() {
        return Err(Error::dim(
            "ae_loss",
            format!("reconstruction {:?} vs target {:?}", g.shape(recon), target.shape()),
        ));
    }
    squared_error_mean(g, recon, target)
}

/// `KL(N(mu, sigma^2) || N(0, I))`, summed over latent dims and averaged over
/// the batch; `mu`, `log_std` are `[N, L]`.
pub fn gaussian_kl(g: &mut Graph, mu: Var, log_std: Var) -> Result<Var> {
    let n = g.shape(mu)[0].max(1) as f64;
    let mu2 = g.square(mu);
    let two_ls = g.scale(log_std, 2.0);
    let var = g.exp(two_ls);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, two_ls)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    Ok(g.scale(s, 0.5 / n))
}

/// Reconstruction from a sampled latent plus `beta * KL`.
pub fn vae_loss(g: &mut Graph, recon: Var, target: &Tensor, mu: Var, log_std: Var, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    let rec = ae_loss(g, recon, target)?;
    let kl = gaussian_kl(g, mu, log_std)?;
    let kl = g.scale(kl, beta);
    g.add(rec, kl)
}

/// Reconstruction + `lambda_z * mean(z^2)` + `lambda_theta * sum(theta^2)`
/// over the decoder parameters `theta`.
pub fn rae_loss(
    g: &mut Graph,
    recon: Var,
    target: &Tensor,
    z: Var,
    decoder_params: &[Var],
    lambda_z: f64,
    lambda_theta: f64,
) -> Result<Var> {
    if lambda_z < 0.0 || lambda_theta < 0.0 {
        return Err(Error::Config("RAE penalties must be non-negative".into()));
    }
    let mut loss = ae_loss(g, recon, target)?;
    let z2 = g.square(z);
    let z2 = g.mean(z2);
    let z2 = g.scale(z2, lambda_z);
    loss = g.add(loss, z2)?;
    for &p in decoder_params {
        let p2 = g.square(p);
        let p2 = g.sum(p2);
        let p2 = g.scale(p2, lambda_theta);
        loss = g.add(loss, p2)?;
    }
    Ok(loss)
}

/// `0.5 * mean((pred - state)^2)`.
pub fn state_decoder_loss(g: &mut Graph, pred: Var, state: &Tensor) -> Result<Var> {
    if state.is_empty() {
        return Err(Error::Contract("transitions carry no proprioceptive state".into()));
    }
    if g.shape(pred) != state.shape() {
        return Err(Error::dim(
            "state_decoder_loss",
            format!("prediction {:?} vs state {:?}", g.shape(pred), state.shape()),
        ));
    }
    let m = squared_error_mean(g, pred, state)?;
    Ok(g.scale(m, 0.5))
}
