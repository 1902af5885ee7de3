//! Fixed-capacity FIFO replay buffer with uniform sampling.
//!
//! # Snapshot layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "FRLRB001"
//! state_dim    u32
//! action_dim   u32
//! capacity     u64
//! occupancy    u64
//! write_cursor u64
//! records      occupancy x { state f64[state_dim], action f64[action_dim],
//!                            reward f64, next_state f64[state_dim], terminal u8 }
//! ```
//!
//! Records are stored in physical slot order, so a restored buffer samples
//! exactly like the original.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{ensure_len, Error, Result};

const MAGIC: &[u8; 8] = b"FRLRB001";

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// A sampled minibatch, one row per transition.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 for terminal transitions, 0.0 otherwise.
    pub terminals: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(items: &[Transition]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("empty transition list"))?;
        let (sd, ad) = (first.state.len(), first.action.len());
        let n = items.len();
        let mut b = Batch {
            states: Array2::zeros((n, sd)),
            actions: Array2::zeros((n, ad)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, sd)),
            terminals: Array1::zeros(n),
        };
        for (i, t) in items.iter().enumerate() {
            ensure_len("state", t.state.len(), sd)?;
            ensure_len("action", t.action.len(), ad)?;
            ensure_len("next_state", t.next_state.len(), sd)?;
            b.states.row_mut(i).assign(&Array1::from(t.state.clone()));
            b.actions.row_mut(i).assign(&Array1::from(t.action.clone()));
            b.next_states.row_mut(i).assign(&Array1::from(t.next_state.clone()));
            b.rewards[i] = t.reward;
            b.terminals[i] = if t.terminal { 1.0 } else { 0.0 };
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    state_dim: usize,
    action_dim: usize,
    capacity: usize,
    occupancy: usize,
    write_cursor: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 || state_dim == 0 || action_dim == 0 {
            return Err(Error::invalid("replay capacity and dims must be >= 1"));
        }
        Ok(Self {
            state_dim,
            action_dim,
            capacity,
            occupancy: 0,
            write_cursor: 0,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            terminals: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.occupancy
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy == 0
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        ensure_len("state", t.state.len(), self.state_dim)?;
        ensure_len("action", t.action.len(), self.action_dim)?;
        ensure_len("next_state", t.next_state.len(), self.state_dim)?;
        if !t.reward.is_finite() {
            return Err(Error::invalid(format!("reward must be finite, got {}", t.reward)));
        }
        let slot = self.write_cursor;
        if self.occupancy < self.capacity && slot == self.rewards.len() {
            // storage grows lazily until the first wrap
            self.states.extend_from_slice(&t.state);
            self.actions.extend_from_slice(&t.action);
            self.next_states.extend_from_slice(&t.next_state);
            self.rewards.push(t.reward);
            self.terminals.push(t.terminal);
        } else {
            let (sd, ad) = (self.state_dim, self.action_dim);
            self.states[slot * sd..(slot + 1) * sd].copy_from_slice(&t.state);
            self.actions[slot * ad..(slot + 1) * ad].copy_from_slice(&t.action);
            self.next_states[slot * sd..(slot + 1) * sd].copy_from_slice(&t.next_state);
            self.rewards[slot] = t.reward;
            self.terminals[slot] = t.terminal;
        }
        self.write_cursor = (slot + 1) % self.capacity;
        self.occupancy = (self.occupancy + 1).min(self.capacity);
        Ok(())
    }

    fn slot(&self, slot: usize) -> Transition {
        let (sd, ad) = (self.state_dim, self.action_dim);
        Transition {
            state: self.states[slot * sd..(slot + 1) * sd].to_vec(),
            action: self.actions[slot * ad..(slot + 1) * ad].to_vec(),
            reward: self.rewards[slot],
            next_state: self.next_states[slot * sd..(slot + 1) * sd].to_vec(),
            terminal: self.terminals[slot],
        }
    }

    /// The `age`-th oldest stored transition (0 = oldest).
    pub fn get(&self, age: usize) -> Option<Transition> {
        if age >= self.occupancy {
            return None;
        }
        let oldest = if self.occupancy < self.capacity {
            0
        } else {
            self.write_cursor
        };
        Some(self.slot((oldest + age) % self.capacity))
    }

    /// `n` uniform draws with replacement over occupied slots.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.occupancy == 0 {
            return Err(Error::Precondition("cannot sample from an empty replay buffer".into()));
        }
        if n == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.occupancy)).collect())
    }

    pub fn gather(&self, slots: &[usize]) -> Batch {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let n = slots.len();
        let mut b = Batch {
            states: Array2::zeros((n, sd)),
            actions: Array2::zeros((n, ad)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, sd)),
            terminals: Array1::zeros(n),
        };
        for (i, &s) in slots.iter().enumerate() {
            for j in 0..sd {
                b.states[[i, j]] = self.states[s * sd + j];
                b.next_states[[i, j]] = self.next_states[s * sd + j];
            }
            for j in 0..ad {
                b.actions[[i, j]] = self.actions[s * ad + j];
            }
            b.rewards[i] = self.rewards[s];
            b.terminals[i] = if self.terminals[s] { 1.0 } else { 0.0 };
        }
        b
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        Ok(self.gather(&idx))
    }

    /// Same draws as [`sample_batch`](Self::sample_batch), as owned transitions.
    pub fn sample_transitions<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        let idx = self.sample_indices(n, rng)?;
        Ok(idx.into_iter().map(|s| self.slot(s)).collect())
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.action_dim as u32).to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.occupancy as u64).to_le_bytes())?;
        w.write_all(&(self.write_cursor as u64).to_le_bytes())?;
        let (sd, ad) = (self.state_dim, self.action_dim);
        for s in 0..self.occupancy {
            for x in &self.states[s * sd..(s + 1) * sd] {
                w.write_all(&x.to_le_bytes())?;
            }
            for x in &self.actions[s * ad..(s + 1) * ad] {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&self.rewards[s].to_le_bytes())?;
            for x in &self.next_states[s * sd..(s + 1) * sd] {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&[self.terminals[s] as u8])?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad replay snapshot magic".into()));
        }
        let sd = read_u32(r)? as usize;
        let ad = read_u32(r)? as usize;
        let capacity = read_u64(r)? as usize;
        let occupancy = read_u64(r)? as usize;
        let write_cursor = read_u64(r)? as usize;
        if occupancy > capacity || (capacity > 0 && write_cursor >= capacity) {
            return Err(Error::Checkpoint("inconsistent replay header".into()));
        }
        let mut buf = Self::new(capacity, sd, ad)?;
        for _ in 0..occupancy {
            for _ in 0..sd {
                buf.states.push(read_f64(r)?);
            }
            for _ in 0..ad {
                buf.actions.push(read_f64(r)?);
            }
            buf.rewards.push(read_f64(r)?);
            for _ in 0..sd {
                buf.next_states.push(read_f64(r)?);
            }
            let mut t = [0u8; 1];
            r.read_exact(&mut t)?;
            buf.terminals.push(t[0] != 0);
        }
        buf.occupancy = occupancy;
        buf.write_cursor = write_cursor;
        Ok(buf)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(k: usize) -> Transition {
        Transition {
            state: vec![k as f64, 0.5],
            action: vec![-(k as f64)],
            reward: k as f64 * 0.1,
            next_state: vec![k as f64 + 1.0, 0.25],
            terminal: k % 2 == 0,
        }
    }

    #[test]
    fn ring_evicts_oldest_first() {
        let mut b = ReplayBuffer::new(2, 2, 1).unwrap();
        for k in 0..3 {
            b.push(tr(k)).unwrap();
        }
        assert_eq!(b.len(), 2);
        assert_eq!(b.get(0), Some(tr(1)));
        assert_eq!(b.get(1), Some(tr(2)));
        assert_eq!(b.get(2), None);
    }

    #[test]
    fn fifo_order_over_many_wraps() {
        let mut b = ReplayBuffer::new(5, 2, 1).unwrap();
        for k in 0..23 {
            b.push(tr(k)).unwrap();
            let oldest = k.saturating_sub(4);
            assert_eq!(b.get(0), Some(tr(oldest)));
            assert_eq!(b.get(b.len() - 1), Some(tr(k)));
        }
    }

    #[test]
    fn occupancy_counts_up_to_capacity() {
        let mut b = ReplayBuffer::new(10, 2, 1).unwrap();
        for k in 0..7 {
            b.push(tr(k)).unwrap();
            assert_eq!(b.len(), k + 1);
        }
    }

    #[test]
    fn pushed_item_is_bit_identical() {
        let mut b = ReplayBuffer::new(4, 2, 1).unwrap();
        let t = Transition {
            state: vec![0.1 + 0.2, -1e-300],
            action: vec![f64::MIN_POSITIVE],
            reward: 1.0 / 3.0,
            next_state: vec![7.0, 8.0],
            terminal: true,
        };
        b.push(t.clone()).unwrap();
        let got = b.get(0).unwrap();
        assert_eq!(got.state[0].to_bits(), t.state[0].to_bits());
        assert_eq!(got, t);
    }

    #[test]
    fn dimension_and_reward_checks() {
        let mut b = ReplayBuffer::new(4, 2, 1).unwrap();
        let mut bad = tr(0);
        bad.action = vec![1.0, 2.0];
        assert!(matches!(b.push(bad), Err(Error::InvalidArgument(_))));
        let mut nan = tr(0);
        nan.reward = f64::NAN;
        assert!(b.push(nan).is_err());
    }

    #[test]
    fn single_item_is_repeated() {
        let mut b = ReplayBuffer::new(4, 2, 1).unwrap();
        b.push(tr(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = b.sample_transitions(4, &mut rng).unwrap();
        assert_eq!(got, vec![tr(3); 4]);
    }

    #[test]
    fn empty_buffer_is_a_precondition_error() {
        let b = ReplayBuffer::new(4, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_batch(1, &mut rng), Err(Error::Precondition(_))));
    }

    #[test]
    fn sampling_is_uniform_chi_square() {
        let mut b = ReplayBuffer::new(10, 2, 1).unwrap();
        for k in 0..10 {
            b.push(tr(k)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for i in b.sample_indices(draws, &mut rng).unwrap() {
            counts[i] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-square 0.99 quantile, 9 degrees of freedom
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn same_seed_same_batch() {
        let mut b = ReplayBuffer::new(16, 2, 1).unwrap();
        for k in 0..16 {
            b.push(tr(k)).unwrap();
        }
        let x = b.sample_transitions(8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let y = b.sample_transitions(8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(x, y);
        let bx = b.sample_batch(8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(Batch::from_transitions(&x).unwrap().states, bx.states);
    }

    #[test]
    fn snapshot_restores_sampling_behavior() {
        let mut b = ReplayBuffer::new(6, 2, 1).unwrap();
        for k in 0..9 {
            b.push(tr(k)).unwrap();
        }
        let mut bytes = Vec::new();
        b.write_snapshot(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"FRLRB001");
        assert_eq!(bytes.len(), 8 + 4 + 4 + 8 * 3 + 6 * (8 * (2 + 1 + 1 + 2) + 1));
        let r = ReplayBuffer::read_snapshot(&mut bytes.as_slice()).unwrap();
        assert_eq!(r, b);
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            r.sample_transitions(5, &mut rng1).unwrap(),
            b.sample_transitions(5, &mut rng2).unwrap()
        );
    }
}
