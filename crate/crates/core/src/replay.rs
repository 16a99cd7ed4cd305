//! Uniform replay ring buffer of stacked `u8` observations, actions,
//! rewards and ground-truth proprioceptive states.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<u8>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<u8>,
    pub done: bool,
    pub state: Vec<f64>,
    pub next_state: Vec<f64>,
}

/// Fixed shapes of every stored field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// `[C, H, W]` of a stacked observation.
    pub obs_shape: [usize; 3],
    pub action_dim: usize,
    pub state_dim: usize,
}

impl Layout {
    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Storage {
    obs: Vec<u8>,
    next_obs: Vec<u8>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<u8>,
    states: Vec<f64>,
    next_states: Vec<f64>,
}

/// A sampled minibatch; observations scaled to `[0, 1)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, C, H, W]`.
    pub obs: Tensor,
    pub next_obs: Tensor,
    /// `[B, A]`.
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub dones: Vec<f64>,
    /// `[B, S]`.
    pub states: Tensor,
    pub next_states: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Ring buffer with FIFO overwrite. Storage is shared copy-on-write, so a
/// clone of a frozen buffer is cheap and safe to hand to another thread.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    layout: Layout,
    capacity: usize,
    size: usize,
    cursor: usize,
    frozen: bool,
    data: Arc<Storage>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(layout: Layout, capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            layout,
            capacity,
            size: 0,
            cursor: 0,
            frozen: false,
            data: Arc::new(Storage::default()),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Makes the buffer read-only: later pushes fail, sampling still works.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Replaces the sampling stream, e.g. for each consumer of a shared
    /// frozen buffer.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract("push to a frozen replay buffer".into()));
        }
        let l = self.layout;
        let checks = [
            ("obs", t.obs.len(), l.obs_len()),
            ("next_obs", t.next_obs.len(), l.obs_len()),
            ("action", t.action.len(), l.action_dim),
            ("state", t.state.len(), l.state_dim),
            ("next_state", t.next_state.len(), l.state_dim),
        ];
        for (field, got, want) in checks {
            if got != want {
                return Err(Error::Contract(format!("transition {field} has length {got}, buffer stores {want}")));
            }
        }
        let slot = self.cursor;
        let d = Arc::make_mut(&mut self.data);
        put(&mut d.obs, slot, &t.obs);
        put(&mut d.next_obs, slot, &t.next_obs);
        put(&mut d.actions, slot, &t.action);
        put(&mut d.rewards, slot, &[t.reward]);
        put(&mut d.dones, slot, &[u8::from(t.done)]);
        put(&mut d.states, slot, &t.state);
        put(&mut d.next_states, slot, &t.next_state);
        self.cursor = (self.cursor + 1) % self.capacity;
        self.size = (self.size + 1).min(self.capacity);
        Ok(())
    }

    /// Physical slot of the `i`-th oldest stored transition.
    fn slot(&self, i: usize) -> usize {
        if self.size < self.capacity {
            i
        } else {
            (self.cursor + i) % self.capacity
        }
    }

    /// Stored transition at physical slot `slot`.
    pub fn get(&self, slot: usize) -> Option<Transition> {
        if slot >= self.size {
            return None;
        }
        let l = self.layout;
        let (o, a, s) = (l.obs_len(), l.action_dim, l.state_dim);
        let d = &self.data;
        Some(Transition {
            obs: d.obs[slot * o..(slot + 1) * o].to_vec(),
            next_obs: d.next_obs[slot * o..(slot + 1) * o].to_vec(),
            action: d.actions[slot * a..(slot + 1) * a].to_vec(),
            reward: d.rewards[slot],
            done: d.dones[slot] != 0,
            state: d.states[slot * s..(slot + 1) * s].to_vec(),
            next_state: d.next_states[slot * s..(slot + 1) * s].to_vec(),
        })
    }

    /// Transitions oldest first.
    pub fn iter(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.size).map(|i| self.get(self.slot(i)).unwrap())
    }

    /// `n` independent uniform slot indices in `[0, len)`.
    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if self.size < n || self.size == 0 {
            return Err(Error::NotReady {
                size: self.size,
                needed: n.max(1),
            });
        }
        Ok((0..n).map(|_| self.rng.random_range(0..self.size)).collect())
    }

    pub fn sample(&mut self, batch_size: usize) -> Result<Batch> {
        let idx = self.sample_indices(batch_size)?;
        Ok(self.gather(idx))
    }

    /// Assembles the batch for the given slots.
    pub fn gather(&self, indices: Vec<usize>) -> Batch {
        let l = self.layout;
        let (o, a, s) = (l.obs_len(), l.action_dim, l.state_dim);
        let b = indices.len();
        let d = &self.data;
        let pix = |src: &[u8]| -> Vec<f64> {
            let mut out = Vec::with_capacity(b * o);
            for &i in &indices {
                out.extend(src[i * o..(i + 1) * o].iter().map(|&p| f64::from(p) / 255.0));
            }
            out
        };
        let rows = |src: &[f64], w: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(b * w);
            for &i in &indices {
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
            out
        };
        let [c, h, w] = l.obs_shape;
        Batch {
            obs: Tensor::new(&[b, c, h, w], pix(&d.obs)).unwrap(),
            next_obs: Tensor::new(&[b, c, h, w], pix(&d.next_obs)).unwrap(),
            actions: Tensor::new(&[b, a], rows(&d.actions, a)).unwrap(),
            rewards: indices.iter().map(|&i| d.rewards[i]).collect(),
            dones: indices.iter().map(|&i| f64::from(d.dones[i])).collect(),
            states: Tensor::new(&[b, s], rows(&d.states, s)).unwrap(),
            next_states: Tensor::new(&[b, s], rows(&d.next_states, s)).unwrap(),
            indices,
        }
    }

    /// Content equality, ignoring the sampling stream.
    pub fn same_contents(&self, other: &ReplayBuffer) -> bool {
        self.layout == other.layout
            && self.capacity == other.capacity
            && self.size == other.size
            && self.cursor == other.cursor
            && self.frozen == other.frozen
            && self.data == other.data
    }
}

fn put<T: Copy>(v: &mut Vec<T>, slot: usize, row: &[T]) {
    let w = row.len();
    if v.len() < (slot + 1) * w {
        v.extend_from_slice(row);
    } else {
        v[slot * w..(slot + 1) * w].copy_from_slice(row);
    }
}

const MAGIC: &[u8; 8] = b"PXRLRPLY";
const VERSION: u32 = 1;

impl ReplayBuffer {
    /// Snapshot: magic, version, then u8 frozen flag and u64 capacity, size,
    /// cursor, obs shape (3), action dim, state dim; then the raw field
    /// arrays in slot order (u8 pixels and flags, little-endian f64 otherwise).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(u8::from(self.frozen));
        let l = self.layout;
        let header = [
            self.capacity,
            self.size,
            self.cursor,
            l.obs_shape[0],
            l.obs_shape[1],
            l.obs_shape[2],
            l.action_dim,
            l.state_dim,
        ];
        for h in header {
            out.extend_from_slice(&(h as u64).to_le_bytes());
        }
        let d = &self.data;
        out.extend_from_slice(&d.obs);
        out.extend_from_slice(&d.next_obs);
        out.extend_from_slice(&d.dones);
        for arr in [&d.actions, &d.rewards, &d.states, &d.next_states] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], seed: u64) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let end = pos.checked_add(n).ok_or("length overflow")?;
            let s = bytes.get(pos..end).ok_or("truncated snapshot")?;
            pos = end;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err("not a replay snapshot".into());
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported snapshot version {version}"));
        }
        let frozen = take(1)?[0] != 0;
        let mut header = [0usize; 8];
        for h in &mut header {
            *h = usize::try_from(u64::from_le_bytes(take(8)?.try_into().unwrap())).map_err(|e| e.to_string())?;
        }
        let [capacity, size, cursor, c, h, w, action_dim, state_dim] = header;
        if capacity == 0 || size > capacity || cursor >= capacity || (size < capacity && cursor != size) {
            return Err("inconsistent capacity/size/cursor".into());
        }
        let layout = Layout {
            obs_shape: [c, h, w],
            action_dim,
            state_dim,
        };
        let mul = |a: usize, b: usize| a.checked_mul(b).ok_or_else(|| "size overflow".to_string());
        let o = mul(size, layout.obs_len())?;
        let obs = take(o)?.to_vec();
        let next_obs = take(o)?.to_vec();
        let dones = take(size)?.to_vec();
        let mut f64s = |n: usize| -> std::result::Result<Vec<f64>, String> {
            Ok(take(mul(n, 8)?)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect())
        };
        let actions = f64s(mul(size, action_dim)?)?;
        let rewards = f64s(size)?;
        let states = f64s(mul(size, state_dim)?)?;
        let next_states = f64s(mul(size, state_dim)?)?;
        if pos != bytes.len() {
            return Err("trailing bytes after snapshot".into());
        }
        Ok(ReplayBuffer {
            layout,
            capacity,
            size,
            cursor,
            frozen,
            data: Arc::new(Storage {
                obs,
                next_obs,
                actions,
                rewards,
                dones,
                states,
                next_states,
            }),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, seed).map_err(|d| Error::format(path, d))
    }
}
