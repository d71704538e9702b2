//! Episode replay with hindsight ("future") goal relabeling.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goaldist::{GoalState, RewardFn};
use crate::scoopenv::{EnvAction, Observation, ACTION_DIM, OBS_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: EnvAction,
    pub next_obs: Observation,
    pub achieved_next: GoalState,
    pub desired: GoalState,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HerConfig {
    /// Stored transitions before the oldest episodes are evicted.
    pub capacity: usize,
    /// Relabeled samples per real one; the relabel probability is `k/(k+1)`.
    pub k_her: f64,
}

impl Default for HerConfig {
    fn default() -> Self {
        Self { capacity: 1_000_000, k_her: 4.0 }
    }
}

/// Where a sampled row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOrigin {
    /// Monotone id assigned at `store_episode` time.
    pub episode_id: u64,
    /// Step of the sampled transition within its episode.
    pub index: usize,
    /// Step whose achieved goal was used as the hindsight goal, if relabeled.
    pub goal_index: Option<usize>,
}

/// A sampled minibatch; rows are aligned across every field.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_obs: Array2<f64>,
    /// Effective desired goal (`position ‖ amount`) after any relabeling.
    pub goals: Array2<f64>,
    pub rewards: Array1<f64>,
    pub dones: Array1<f64>,
    pub achieved_next: Vec<GoalState>,
    pub desired: Vec<GoalState>,
    pub origins: Vec<SampleOrigin>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn relabeled_count(&self) -> usize {
        self.origins.iter().filter(|o| o.goal_index.is_some()).count()
    }
}

#[derive(Clone, Debug)]
pub struct HerBuffer {
    capacity: usize,
    episode_len: usize,
    relabel_prob: f64,
    episodes: VecDeque<(u64, Vec<Transition>)>,
    n_transitions: usize,
    next_id: u64,
}

impl HerBuffer {
    /// `relabel` off gives a plain episodic replay buffer.
    pub fn new(config: &HerConfig, episode_len: usize, relabel: bool) -> Result<Self> {
        if episode_len == 0 || config.capacity < episode_len {
            return Err(Error::InvalidConfig(format!(
                "replay capacity {} cannot hold one episode of {episode_len} steps",
                config.capacity
            )));
        }
        if !(config.k_her >= 0.0 && config.k_her.is_finite()) {
            return Err(Error::InvalidConfig("k_her must be a finite nonnegative number".into()));
        }
        let relabel_prob = if relabel { config.k_her / (config.k_her + 1.0) } else { 0.0 };
        Ok(Self {
            capacity: config.capacity,
            episode_len,
            relabel_prob,
            episodes: VecDeque::new(),
            n_transitions: 0,
            next_id: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.n_transitions
    }

    pub fn is_empty(&self) -> bool {
        self.n_transitions == 0
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn relabel_probability(&self) -> f64 {
        self.relabel_prob
    }

    pub fn episode_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.episodes.iter().map(|(id, _)| *id)
    }

    /// Stored episode by id.
    pub fn episode(&self, id: u64) -> Option<&[Transition]> {
        self.episodes.iter().find(|(i, _)| *i == id).map(|(_, e)| e.as_slice())
    }

    /// Appends a complete episode, evicting the oldest ones past capacity.
    /// Returns the id assigned to it.
    pub fn store_episode(&mut self, episode: Vec<Transition>) -> Result<u64> {
        if episode.len() != self.episode_len {
            return Err(Error::IncompleteEpisode { expected: self.episode_len, got: episode.len() });
        }
        while self.n_transitions + episode.len() > self.capacity {
            let (_, old) = self.episodes.pop_front().expect("capacity holds at least one episode");
            self.n_transitions -= old.len();
        }
        let id = self.next_id;
        self.next_id += 1;
        self.n_transitions += episode.len();
        self.episodes.push_back((id, episode));
        Ok(id)
    }

    /// Uniform minibatch over stored transitions with "future" relabeling.
    /// Rewards are always recomputed from `(achieved_next, effective goal)`.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R, reward_fn: &RewardFn) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let goal_dim = self.episodes[0].1[0].desired.dim() + 1;
        let mut obs = Array2::zeros((batch_size, OBS_DIM));
        let mut next_obs = Array2::zeros((batch_size, OBS_DIM));
        let mut actions = Array2::zeros((batch_size, ACTION_DIM));
        let mut goals = Array2::zeros((batch_size, goal_dim));
        let mut rewards = Array1::zeros(batch_size);
        let mut dones = Array1::zeros(batch_size);
        let mut achieved_next = Vec::with_capacity(batch_size);
        let mut desired = Vec::with_capacity(batch_size);
        let mut origins = Vec::with_capacity(batch_size);

        for row in 0..batch_size {
            let flat = rng.random_range(0..self.n_transitions);
            let (id, episode) = &self.episodes[flat / self.episode_len];
            let index = flat % self.episode_len;
            let tr = &episode[index];
            let relabel = self.relabel_prob > 0.0 && rng.random::<f64>() < self.relabel_prob;
            let (goal, goal_index) = if relabel {
                let g = rng.random_range(index..self.episode_len);
                (episode[g].achieved_next.clone(), Some(g))
            } else {
                (tr.desired.clone(), None)
            };
            rewards[row] = reward_fn.eval(&tr.achieved_next, &goal);
            dones[row] = if tr.done { 1.0 } else { 0.0 };
            obs.row_mut(row).assign(&ndarray::ArrayView1::from(tr.obs.as_slice()));
            next_obs.row_mut(row).assign(&ndarray::ArrayView1::from(tr.next_obs.as_slice()));
            actions.row_mut(row).assign(&ndarray::ArrayView1::from(&tr.action.0[..]));
            goals.row_mut(row).assign(&Array1::from(goal.to_vec()));
            achieved_next.push(tr.achieved_next.clone());
            desired.push(goal);
            origins.push(SampleOrigin { episode_id: *id, index, goal_index });
        }
        Ok(Batch { obs, actions, next_obs, goals, rewards, dones, achieved_next, desired, origins })
    }
}
