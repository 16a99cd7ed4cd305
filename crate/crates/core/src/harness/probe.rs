//! Closed-form linear probes from latents to physical state.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::Agent;
use crate::envs::to_unit;
use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::tensor::Tensor;

/// Share of rows used to fit the probe; the rest is held out.
pub const TRAIN_FRACTION: f64 = 0.8;
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoordReport {
    pub mse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    /// Held-out error per state coordinate.
    pub coords: Vec<CoordReport>,
    pub mean_r2: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Numerical rank of the centred training latents.
    pub rank: usize,
    pub latent_dim: usize,
    /// The design was rank deficient and the fit used the pseudoinverse's
    /// minimum-norm solution.
    pub rank_deficient: bool,
}

fn to_matrix(rows: &[usize], data: &Tensor) -> DMatrix<f64> {
    let cols = data.shape()[1];
    DMatrix::from_fn(rows.len(), cols, |i, j| data.data()[rows[i] * cols + j])
}

/// Fits `s ≈ W z + b` by least squares on a seeded 80% split of the rows of
/// `latents [N, L]` / `states [N, S]` and scores it on the remaining 20%.
pub fn linear_probe(latents: &Tensor, states: &Tensor, seed: u64) -> Result<ProbeReport> {
    let (zs, ss) = (latents.shape(), states.shape());
    if zs.len() != 2 || ss.len() != 2 || zs[0] != ss[0] {
        return Err(Error::dim("linear_probe", format!("latents {zs:?} and states {ss:?}")));
    }
    let n = zs[0];
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    if n_train < 2 || n - n_train < 2 {
        return Err(Error::Contract(format!("linear probe needs at least 10 rows, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = order.split_at(n_train);

    let z = to_matrix(train, latents);
    let s = to_matrix(train, states);
    let (z_mean, s_mean) = (z.row_mean(), s.row_mean());
    let zc = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] - z_mean[j]);
    let sc = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| s[(i, j)] - s_mean[j]);

    let svd = zc.svd(true, true);
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = top * f64::EPSILON * (z.nrows().max(z.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|&&v| v > eps).count();
    let w = svd
        .solve(&sc, eps)
        .map_err(|e| Error::Contract(format!("linear probe solve failed: {e}")))?;

    let zt = to_matrix(test, latents);
    let st = to_matrix(test, states);
    let zt_c = DMatrix::from_fn(zt.nrows(), zt.ncols(), |i, j| zt[(i, j)] - z_mean[j]);
    let pred = zt_c * w;
    let coords: Vec<CoordReport> = (0..st.ncols())
        .map(|j| {
            let col = st.column(j);
            let mean = col.mean();
            let sse: f64 = (0..st.nrows()).map(|i| (pred[(i, j)] + s_mean[j] - st[(i, j)]).powi(2)).sum();
            let sst: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let r2 = if sst > 0.0 {
                1.0 - sse / sst
            } else if sse == 0.0 {
                1.0
            } else {
                0.0
            };
            CoordReport {
                mse: sse / st.nrows() as f64,
                r2,
            }
        })
        .collect();
    let mean_r2 = coords.iter().map(|c| c.r2).sum::<f64>() / coords.len() as f64;
    Ok(ProbeReport {
        coords,
        mean_r2,
        n_train,
        n_test: n - n_train,
        rank,
        latent_dim: zs[1],
        rank_deficient: rank < zs[1],
    })
}

/// Probes the agent's critic-encoder latents of every buffered observation
/// against the physical state stored with it.
pub fn probe_agent(agent: &Agent, buf: &ReplayBuffer, seed: u64) -> Result<ProbeReport> {
    let layout = buf.layout();
    let [c, h, w] = layout.obs_shape;
    let transitions: Vec<_> = buf.iter().collect();
    let mut latents = Vec::new();
    for chunk in transitions.chunks(CHUNK) {
        let pixels: Vec<u8> = chunk.iter().flat_map(|t| t.obs.iter().copied()).collect();
        let obs = Tensor::new(&[chunk.len(), c, h, w], to_unit(&pixels))?;
        latents.extend_from_slice(agent.latents(&obs)?.data());
    }
    let n = transitions.len();
    let states: Vec<f64> = transitions.iter().flat_map(|t| t.state.iter().copied()).collect();
    let latents = Tensor::new(&[n, agent.latent_dim()], latents)?;
    let states = Tensor::new(&[n, layout.state_dim], states)?;
    linear_probe(&latents, &states, seed)
}
