//! Named parameter storage and the Adam optimizer.
//!
//! Networks hold [`ParamId`] handles into a [`ParamStore`]; two networks that
//! share a layer simply hold the same ids.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.grads[id.0].fill(0.0);
        }
    }

    pub fn zero_all_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Adds every parameter gradient recorded on `graph` into the store.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, g) in graph.param_grads() {
            self.grads[id.0].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    /// Euclidean norm of the concatenated gradients of `ids`.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|id| self.grads[id.0].iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Sum of squared values over `ids`.
    pub fn sq_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|id| self.values[id.0].data().iter())
            .map(|v| v * v)
            .sum()
    }

    /// `target <- (1 - tau) * target + tau * online` for every pair.
    pub fn polyak(&mut self, pairs: &[(ParamId, ParamId)], tau: f64) -> Result<()> {
        for &(online, target) in pairs {
            if self.values[online.0].shape() != self.values[target.0].shape() {
                return Err(Error::Contract(format!(
                    "polyak: {} {:?} vs {} {:?}",
                    self.names[online.0],
                    self.values[online.0].shape(),
                    self.names[target.0],
                    self.values[target.0].shape()
                )));
            }
            let src = std::mem::take(&mut self.values[online.0]);
            let dst = self.values[target.0].data_mut();
            if tau == 1.0 {
                dst.copy_from_slice(src.data());
            } else {
                for (t, o) in dst.iter_mut().zip(src.data()) {
                    *t = (1.0 - tau) * *t + tau * o;
                }
            }
            self.values[online.0] = src;
        }
        Ok(())
    }

    /// Overwrites `dst` with a copy of `src`.
    pub fn copy_value(&mut self, src: ParamId, dst: ParamId) -> Result<()> {
        self.polyak(&[(src, dst)], 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed set of parameters; moments are private to the optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, cfg: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        Adam {
            cfg,
            v: m.clone(),
            m,
            ids,
            t: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn zero_grad(&self, store: &mut ParamStore) {
        store.zero_grads(&self.ids);
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let g = &store.grads[id.0];
            let w = store.values[id.0].data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyak_endpoints_and_midpoint() {
        let mut s = ParamStore::new();
        let online = s.add("online", Tensor::full(&[3], 2.0));
        let target = s.add("target", Tensor::zeros(&[3]));
        s.polyak(&[(online, target)], 0.0).unwrap();
        assert_eq!(s.value(target).data(), &[0.0; 3]);
        s.polyak(&[(online, target)], 0.5).unwrap();
        assert_eq!(s.value(target).data(), &[1.0; 3]);
        s.polyak(&[(online, target)], 1.0).unwrap();
        assert_eq!(s.value(target).data(), s.value(online).data());
    }

    #[test]
    fn polyak_rejects_shape_mismatch() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[3]));
        let b = s.add("b", Tensor::zeros(&[2]));
        assert!(matches!(s.polyak(&[(a, b)], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::new();
        let p = s.add("p", Tensor::from_vec(vec![1.0, -1.0]));
        let mut g = Graph::new();
        let v = g.param(&s, p);
        let sq = g.square(v);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        s.accumulate_grads(&g);
        let mut opt = Adam::new(&s, vec![p], AdamConfig::with_lr(0.1));
        opt.step(&mut s);
        let w = s.value(p).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new();
        let p = s.add("p", Tensor::from_vec(vec![3.0, -2.0, 0.5]));
        let mut opt = Adam::new(&s, vec![p], AdamConfig::with_lr(0.05));
        for _ in 0..2000 {
            opt.zero_grad(&mut s);
            let mut g = Graph::new();
            let v = g.param(&s, p);
            let sq = g.square(v);
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            s.accumulate_grads(&g);
            opt.step(&mut s);
        }
        assert!(s.value(p).data().iter().all(|w| w.abs() < 1e-3));
    }
}
