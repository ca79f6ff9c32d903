use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::diffcore::Tensor;
use crate::simulator::OBS_DIM;

/// One joint step. Observation fields are `N x OBS_DIM` row-major; actions
/// are 0-based phase indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs_prev: Vec<f64>,
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub obs_next: Vec<f64>,
}

/// FIFO ring of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Distinct uniform indices; fewer than `size` only if the buffer is smaller.
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, size: usize) -> Vec<usize> {
        index::sample(rng, self.items.len(), size.min(self.items.len())).into_vec()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::from_transitions(indices.iter().map(|&i| &self.items[i]))
    }
}

/// Stacked mini-batch: observation tensors are `(B*N) x OBS_DIM`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub agents: usize,
    pub obs_prev: Tensor,
    pub obs: Tensor,
    pub obs_next: Tensor,
    /// `actions[b][i]`.
    pub actions: Vec<Vec<usize>>,
    /// `rewards[b][i]`.
    pub rewards: Vec<Vec<f64>>,
}

impl Batch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Self {
        let items: Vec<&Transition> = items.into_iter().collect();
        let size = items.len();
        let agents = items.first().map_or(0, |t| t.actions.len());
        let stack = |f: fn(&Transition) -> &Vec<f64>| {
            let values: Vec<f64> = items.iter().flat_map(|t| f(t).iter().copied()).collect();
            Tensor::matrix(size * agents, OBS_DIM, values).expect("transition rows are N x OBS_DIM")
        };
        Self {
            size,
            agents,
            obs_prev: stack(|t| &t.obs_prev),
            obs: stack(|t| &t.obs),
            obs_next: stack(|t| &t.obs_next),
            actions: items.iter().map(|t| t.actions.clone()).collect(),
            rewards: items.iter().map(|t| t.rewards.clone()).collect(),
        }
    }

    /// Rows of agent `i` across the batch, `B x OBS_DIM`.
    pub fn agent_rows(obs: &Tensor, agents: usize, i: usize) -> Vec<f64> {
        let (rows, _) = obs.dims();
        (0..rows / agents)
            .flat_map(|b| obs.values()[(b * agents + i) * OBS_DIM..(b * agents + i + 1) * OBS_DIM].iter().copied())
            .collect()
    }
}
