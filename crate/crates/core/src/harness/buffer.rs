use rand::Rng;

use crate::diffcore::DenseArray;
use crate::envs::{Dataset, Transition};
use crate::error::{config, domain, Result};

/// A sampled minibatch in training precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: DenseArray<f32>,
    pub actions: DenseArray<f32>,
    pub rewards: Vec<f32>,
    pub next_states: DenseArray<f32>,
    pub dones: Vec<f32>,
}

/// Fixed-capacity ring of transitions; once full, new entries overwrite the oldest.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    state_dim: usize,
    action_dim: usize,
    capacity: usize,
    cursor: usize,
    size: usize,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    next_states: Vec<f32>,
    dones: Vec<f32>,
}

impl ReplayBuffer {
    pub fn new(state_dim: usize, action_dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return config("replay capacity must be positive");
        }
        Ok(Self {
            state_dim,
            action_dim,
            capacity,
            cursor: 0,
            size: 0,
            states: vec![0.0; capacity * state_dim],
            actions: vec![0.0; capacity * action_dim],
            rewards: vec![0.0; capacity],
            next_states: vec![0.0; capacity * state_dim],
            dones: vec![0.0; capacity],
        })
    }

    /// Buffer holding `dataset`, with room for at least `capacity` entries.
    pub fn from_dataset(dataset: &Dataset, capacity: usize) -> Result<Self> {
        let mut b = Self::new(
            dataset.state_dim,
            dataset.action_dim,
            capacity.max(dataset.len()).max(1),
        )?;
        for t in &dataset.transitions {
            b.push(t)?;
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        let (n, d) = (self.state_dim, self.action_dim);
        if t.state.len() != n || t.next_state.len() != n || t.action.len() != d {
            return crate::error::shape(format!(
                "transition does not match buffer dims ({n}, {d})"
            ));
        }
        let i = self.cursor;
        let f = |v: &f64| *v as f32;
        for (dst, src) in self.states[i * n..(i + 1) * n].iter_mut().zip(&t.state) {
            *dst = f(src);
        }
        for (dst, src) in self.next_states[i * n..(i + 1) * n]
            .iter_mut()
            .zip(&t.next_state)
        {
            *dst = f(src);
        }
        for (dst, src) in self.actions[i * d..(i + 1) * d].iter_mut().zip(&t.action) {
            *dst = f(src);
        }
        self.rewards[i] = t.reward as f32;
        self.dones[i] = if t.done { 1.0 } else { 0.0 };
        self.cursor = (self.cursor + 1) % self.capacity;
        self.size = (self.size + 1).min(self.capacity);
        Ok(())
    }

    /// Indices drawn uniformly with replacement from the current contents.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.size == 0 {
            return domain("cannot sample from an empty replay buffer");
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.size)).collect())
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (n, d) = (self.state_dim, self.action_dim);
        let rows = |src: &[f32], w: usize| {
            let data = idx
                .iter()
                .flat_map(|&i| src[i * w..(i + 1) * w].iter().copied())
                .collect();
            DenseArray::matrix(idx.len(), w, data).expect("row width")
        };
        Batch {
            states: rows(&self.states, n),
            actions: rows(&self.actions, d),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: rows(&self.next_states, n),
            dones: idx.iter().map(|&i| self.dones[i]).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch> {
        Ok(self.gather(&self.sample_indices(batch, rng)?))
    }
}
