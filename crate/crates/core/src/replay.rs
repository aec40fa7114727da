//! Episode storage and minibatch assembly.
//!
//! Episodes keep compact world snapshots; observation tensors are rebuilt
//! when a minibatch is drawn, so the buffer stays small and intrinsic
//! rewards can be recomputed under the current controller.

use std::collections::VecDeque;

use rand::Rng;

use crate::batch::{build, Batch, BatchDims, RowInput};
use crate::env::{observe_team, EntityObservation, GridConfig, TeamSpec, WorldState};
use crate::error::{contract, Result};

/// A role assignment made at `step` and held until the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleAssignment {
    pub step: usize,
    pub roles: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub spec: TeamSpec,
    /// `len() + 1` states, the last one after the final action.
    pub states: Vec<WorldState>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    /// Whether the final transition ends the episode (no bootstrap).
    pub terminal: bool,
    pub assignments: Vec<RoleAssignment>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.spec.n_agents
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.states.len() != t + 1 || self.rewards.len() != t {
            return Err(contract("episode arrays have inconsistent lengths"));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(contract("episode holds a non-finite reward"));
        }
        if self.actions.iter().any(|a| a.len() != self.spec.n_agents) {
            return Err(contract("joint action size differs from team size"));
        }
        match self.assignments.first() {
            Some(a) if a.step == 0 => {}
            _ => return Err(contract("episode must start with a role assignment")),
        }
        if self.assignments.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(contract("role assignments out of order"));
        }
        Ok(())
    }

    /// Index into `assignments` of the roles in effect at step `t`.
    pub fn assignment_at(&self, t: usize) -> usize {
        self.assignments.partition_point(|a| a.step <= t) - 1
    }
}

/// Episode-level FIFO buffer.
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    stored_steps: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(contract("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(1024)),
            stored_steps: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Transitions across all stored episodes.
    pub fn total_steps(&self) -> usize {
        self.stored_steps
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    pub fn add(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if self.episodes.len() == self.capacity {
            if let Some(old) = self.episodes.pop_front() {
                self.stored_steps -= old.len();
            }
        }
        self.stored_steps += episode.len();
        self.episodes.push_back(episode);
        Ok(())
    }

    /// Indices drawn uniformly with replacement until they cover at least
    /// `min_steps` transitions.
    pub fn sample_indices<R: Rng + ?Sized>(&self, min_steps: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.episodes.is_empty() {
            return Err(contract("cannot sample from an empty replay buffer"));
        }
        let mut idx = Vec::new();
        let mut steps = 0;
        while steps < min_steps.max(1) {
            let i = rng.random_range(0..self.episodes.len());
            steps += self.episodes[i].len().max(1);
            idx.push(i);
        }
        Ok(idx)
    }

    pub fn sample<R: Rng + ?Sized>(&self, min_steps: usize, rng: &mut R) -> Result<Vec<&Episode>> {
        Ok(self
            .sample_indices(min_steps, rng)?
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect())
    }
}

/// Padded episode minibatch.
///
/// Every episode occupies `steps + 1` consecutive rows of `batch`;
/// transitions beyond an episode's length repeat its final observation and
/// are marked invalid. `controller_batch` holds one row per role assignment
/// and `batch.assign_rows` points each step at the assignment in effect.
pub struct EpisodeBatch {
    pub batch: Batch,
    pub controller_batch: Batch,
    pub episodes: usize,
    /// Transitions per episode after padding.
    pub steps: usize,
    /// `[episodes * steps]` environment rewards.
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub valid: Vec<bool>,
    /// Agent count per episode.
    pub team_sizes: Vec<usize>,
    /// Controller-batch row in effect at each `batch` row.
    pub assign_index: Vec<usize>,
}

impl EpisodeBatch {
    pub fn rows_per_episode(&self) -> usize {
        self.steps + 1
    }

    pub fn row(&self, episode: usize, t: usize) -> usize {
        episode * self.rows_per_episode() + t
    }

    pub fn transition(&self, episode: usize, t: usize) -> usize {
        episode * self.steps + t
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn assemble(episodes: &[&Episode], grid: &GridConfig, dims: BatchDims) -> Result<EpisodeBatch> {
    if episodes.is_empty() {
        return Err(contract("empty episode list"));
    }
    let steps = episodes.iter().map(|e| e.len()).max().unwrap_or(0).max(1);
    let rows_per = steps + 1;
    let zero_roles: Vec<Vec<Vec<f64>>> = episodes.iter().map(|e| vec![vec![0.0; dims.d_role]; e.n_agents()]).collect();

    let mut observations: Vec<EntityObservation> = Vec::with_capacity(episodes.len() * rows_per);
    let mut meta = Vec::with_capacity(episodes.len() * rows_per);
    let mut assign_meta = Vec::new();
    let mut assign_index = Vec::with_capacity(episodes.len() * rows_per);
    let mut rewards = Vec::with_capacity(episodes.len() * steps);
    let mut terminals = Vec::with_capacity(episodes.len() * steps);
    let mut valid = Vec::with_capacity(episodes.len() * steps);
    for (ei, ep) in episodes.iter().enumerate() {
        ep.validate()?;
        let len = ep.len();
        let first_assign = assign_meta.len();
        for (k, a) in ep.assignments.iter().enumerate() {
            if a.step > len {
                return Err(contract("role assignment after the episode ended"));
            }
            let prev = if a.step == 0 { None } else { Some(ep.assignment_at(a.step - 1)) };
            assign_meta.push((ei, k, prev, ei * rows_per + a.step));
        }
        for t in 0..rows_per {
            let tt = t.min(len);
            let last = if tt == 0 { &[][..] } else { &ep.actions[tt - 1][..] };
            observations.push(observe_team(&ep.states[tt], grid, last));
            let cur = ep.assignment_at(tt);
            let prev = if tt == 0 { None } else { Some(ep.assignment_at(tt - 1)) };
            assign_index.push(first_assign + cur);
            let action = if t < len { Some(t) } else { None };
            meta.push((ei, cur, prev, first_assign + cur, action));
        }
        for t in 0..steps {
            let ok = t < len;
            rewards.push(if ok { ep.rewards[t] } else { 0.0 });
            terminals.push(ok && t + 1 == len && ep.terminal);
            valid.push(ok);
        }
    }
    let last_roles_of = |ei: usize, prev: Option<usize>| -> &[Vec<f64>] {
        prev.map_or(&zero_roles[ei][..], |p| &episodes[ei].assignments[p].roles[..])
    };
    let rows: Vec<RowInput<'_>> = observations
        .iter()
        .zip(&meta)
        .map(|(obs, &(ei, cur, prev, assign_row, action))| {
            let ep = episodes[ei];
            RowInput {
                obs,
                last_roles: last_roles_of(ei, prev),
                role_noise: &ep.assignments[cur].noise,
                roles: &ep.assignments[cur].roles,
                assign_row,
                actions: action.map(|t| &ep.actions[t][..]),
            }
        })
        .collect();
    let assign_rows: Vec<RowInput<'_>> = assign_meta
        .iter()
        .enumerate()
        .map(|(k, &(ei, a, prev, row))| {
            let ep = episodes[ei];
            RowInput {
                obs: &observations[row],
                last_roles: last_roles_of(ei, prev),
                role_noise: &ep.assignments[a].noise,
                roles: &ep.assignments[a].roles,
                assign_row: k,
                actions: None,
            }
        })
        .collect();
    let batch = build(&rows, dims)?;
    let controller_batch = build(&assign_rows, dims)?;
    if batch.n_agents != controller_batch.n_agents {
        return Err(contract("controller batch lost agent slots"));
    }
    Ok(EpisodeBatch {
        batch,
        controller_batch,
        episodes: episodes.len(),
        steps,
        rewards,
        terminals,
        valid,
        team_sizes: episodes.iter().map(|e| e.n_agents()).collect(),
        assign_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ResourceCollection, TeamSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_episode(n: usize, len: usize, seed: u64) -> Episode {
        let cfg = GridConfig::default();
        let (mut env, _) = ResourceCollection::new(cfg, TeamSpec::full(n, seed)).unwrap();
        let mut states = vec![env.state().clone()];
        let mut actions = vec![];
        let mut rewards = vec![];
        for t in 0..len {
            let a: Vec<usize> = (0..n).map(|i| (t + i) % 5).collect();
            rewards.push(env.step(&a).unwrap().reward);
            actions.push(a);
            states.push(env.state().clone());
        }
        let assignments = (0..len)
            .step_by(5)
            .map(|s| RoleAssignment {
                step: s,
                roles: vec![vec![s as f64; 2]; n],
                noise: vec![vec![0.5; 2]; n],
            })
            .collect();
        Episode {
            spec: TeamSpec::full(n, seed),
            states,
            actions,
            rewards,
            terminal: true,
            assignments,
        }
    }

    #[test]
    fn fifo_eviction_and_empty_sampling() {
        let mut rb = ReplayBuffer::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(rb.sample(1, &mut rng).is_err());
        for s in 0..3 {
            rb.add(toy_episode(1, 3, s)).unwrap();
        }
        assert_eq!(rb.len(), 2);
        assert_eq!(rb.total_steps(), 6);
        assert_eq!(rb.get(0).unwrap().spec.seed, 1);
        assert_eq!(rb.get(1).unwrap().spec.seed, 2);
    }

    #[test]
    fn assembled_batch_pads_ragged_episodes() {
        let a = toy_episode(2, 7, 1);
        let b = toy_episode(3, 4, 2);
        let dims = BatchDims {
            d_role: 2,
            n_actions: 5,
            offset_scale: 5.5,
        };
        let eb = assemble(&[&a, &b], &GridConfig::default(), dims).unwrap();
        assert_eq!((eb.episodes, eb.steps, eb.batch.rows), (2, 7, 16));
        assert_eq!(eb.batch.n_agents, 3);
        assert_eq!(eb.n_valid(), 11);
        assert_eq!(eb.terminals.iter().filter(|&&t| t).count(), 2);
        assert!(eb.terminals[6] && eb.terminals[7 + 3]);
        // roles: episode 0 step 6 uses the assignment made at step 5
        let roles = eb.batch.roles.to_vec3::<f64>().unwrap();
        assert_eq!(roles[6][0], vec![5.0, 5.0]);
        let last = eb.batch.last_roles.to_vec3::<f64>().unwrap();
        assert_eq!(last[5][0], vec![0.0, 0.0]);
        assert_eq!(last[6][0], vec![5.0, 5.0]);
        // episode 0 has assignments at steps 0 and 5, episode 1 at step 0
        assert_eq!(eb.controller_batch.rows, 3);
        assert_eq!(eb.assign_index[6], 1);
        assert_eq!(eb.assign_index[8 + 2], 2);
        assert_eq!(eb.batch.assign_rows.to_vec1::<u32>().unwrap()[6], 1);
        let ctrl_last = eb.controller_batch.last_roles.to_vec3::<f64>().unwrap();
        assert_eq!(ctrl_last[1][0], vec![0.0, 0.0]);
    }
}
