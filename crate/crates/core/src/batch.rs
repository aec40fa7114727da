//! Packs per-step team observations into dense, masked tensors.
//!
//! Rows are timesteps (`row = episode * rows_per_episode + t`). Entity rows
//! are trimmed to the largest team and invader slot actually used in the
//! batch; masked padding never reaches any output, so trimming only saves work.

use candle_core::Tensor;

use crate::env::{EntityObservation, FEAT_DIM, POS_X, POS_Y};
use crate::error::{contract, Result};
use crate::nn::{bool_tensor, device};

/// Per-agent input width of the local observation encoder: entity features
/// plus the entity's offset from the observer in visibility-radius units.
pub const REL_FEAT_DIM: usize = FEAT_DIM + 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchDims {
    pub d_role: usize,
    pub n_actions: usize,
    /// Converts normalised coordinate deltas into visibility-radius units.
    pub offset_scale: f64,
}

/// One timestep's inputs.
pub struct RowInput<'a> {
    pub obs: &'a EntityObservation,
    /// Roles in effect at the previous step (`c_{t-1}`), one per agent.
    pub last_roles: &'a [Vec<f64>],
    /// Noise of the role assignment in effect at this step.
    pub role_noise: &'a [Vec<f64>],
    /// Roles actually used by the agents at this step.
    pub roles: &'a [Vec<f64>],
    /// Index of the controller pass that assigned the roles in effect.
    pub assign_row: usize,
    pub actions: Option<&'a [usize]>,
}

pub struct Batch {
    pub rows: usize,
    pub n_agents: usize,
    pub n_entities: usize,
    pub entity_feats: Tensor,
    pub rel_feats: Tensor,
    pub team_mask: Tensor,
    pub team_view: Tensor,
    pub obs_mask: Tensor,
    pub agent_mask: Tensor,
    pub last_actions: Tensor,
    pub last_roles: Tensor,
    pub role_noise: Tensor,
    pub roles: Tensor,
    pub assign_rows: Tensor,
    pub actions: Tensor,
    pub agent_counts: Vec<usize>,
    pub host_actions: Vec<Vec<usize>>,
}

fn entity_map(obs: &EntityObservation, n_agents: usize, n_invaders: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n_agents).collect();
    rows.extend((0..obs.n_resource_slots).map(|k| obs.resource_row(k)));
    rows.extend((0..n_invaders).map(|k| obs.invader_row(k)));
    rows.push(obs.home_row());
    rows
}

fn used_invader_slots(obs: &EntityObservation) -> usize {
    (0..obs.n_invader_slots)
        .rev()
        .find(|&k| obs.team_mask[obs.invader_row(k)])
        .map_or(0, |k| k + 1)
}

pub fn build(rows: &[RowInput<'_>], dims: BatchDims) -> Result<Batch> {
    if rows.is_empty() {
        return Err(contract("cannot build an empty batch"));
    }
    let n = rows.iter().map(|r| r.obs.n_agents).max().unwrap_or(1).max(1);
    let k = rows.iter().map(|r| used_invader_slots(r.obs)).max().unwrap_or(0);
    let e = n + rows[0].obs.n_resource_slots + k + 1;
    let (a, d) = (dims.n_actions, dims.d_role);
    let r_count = rows.len();

    let mut ent = vec![0.0; r_count * e * FEAT_DIM];
    let mut rel = vec![0.0; r_count * n * e * REL_FEAT_DIM];
    let mut team_mask = vec![false; r_count * e];
    let mut team_view = vec![false; r_count * e];
    let mut obs_mask = vec![false; r_count * n * e];
    let mut agent_mask = vec![false; r_count * n];
    let mut last_act = vec![0.0; r_count * n * a];
    let mut last_roles = vec![0.0; r_count * n * d];
    let mut noise = vec![0.0; r_count * n * d];
    let mut roles = vec![0.0; r_count * n * d];
    let mut assign = vec![0u32; r_count];
    let mut actions = vec![0u32; r_count * n];
    let mut counts = Vec::with_capacity(r_count);
    let mut host_actions = Vec::with_capacity(r_count);

    for (ri, row) in rows.iter().enumerate() {
        let obs = row.obs;
        if obs.n_resource_slots + n + k + 1 != e {
            return Err(contract("rows disagree on the resource layout"));
        }
        let map = entity_map(obs, n, k);
        let view = obs.team_view();
        for (dst, &src) in map.iter().enumerate() {
            let base = (ri * e + dst) * FEAT_DIM;
            ent[base..base + FEAT_DIM].copy_from_slice(&obs.features[src]);
            team_mask[ri * e + dst] = obs.team_mask[src];
            team_view[ri * e + dst] = view[src];
        }
        for i in 0..obs.n_agents {
            agent_mask[ri * n + i] = true;
            let (xi, yi) = (obs.features[i][POS_X], obs.features[i][POS_Y]);
            for (dst, &src) in map.iter().enumerate() {
                let visible = obs.obs_mask[i][src];
                obs_mask[(ri * n + i) * e + dst] = visible;
                if visible {
                    let base = ((ri * n + i) * e + dst) * REL_FEAT_DIM;
                    let f = &obs.features[src];
                    rel[base..base + FEAT_DIM].copy_from_slice(f);
                    rel[base + FEAT_DIM] = (f[POS_X] - xi) * dims.offset_scale;
                    rel[base + FEAT_DIM + 1] = (f[POS_Y] - yi) * dims.offset_scale;
                }
            }
            let la = obs.last_actions.get(i).copied().unwrap_or(0);
            last_act[(ri * n + i) * a + la] = 1.0;
            let copy_role = |dst: &mut [f64], src: &[Vec<f64>]| {
                if let Some(v) = src.get(i) {
                    dst[(ri * n + i) * d..(ri * n + i) * d + d].copy_from_slice(&v[..d]);
                }
            };
            copy_role(&mut last_roles, row.last_roles);
            copy_role(&mut noise, row.role_noise);
            copy_role(&mut roles, row.roles);
        }
        assign[ri] = row.assign_row as u32;
        if let Some(acts) = row.actions {
            for (i, &act) in acts.iter().enumerate().take(n) {
                actions[ri * n + i] = act as u32;
            }
            host_actions.push(acts.to_vec());
        } else {
            host_actions.push(vec![]);
        }
        counts.push(obs.n_agents);
    }

    let dev = device();
    Ok(Batch {
        rows: r_count,
        n_agents: n,
        n_entities: e,
        entity_feats: Tensor::from_vec(ent, (r_count, e, FEAT_DIM), &dev)?,
        rel_feats: Tensor::from_vec(rel, (r_count, n, e, REL_FEAT_DIM), &dev)?,
        team_mask: bool_tensor(&team_mask, &[r_count, e])?,
        team_view: bool_tensor(&team_view, &[r_count, e])?,
        obs_mask: bool_tensor(&obs_mask, &[r_count, n, e])?,
        agent_mask: bool_tensor(&agent_mask, &[r_count, n])?,
        last_actions: Tensor::from_vec(last_act, (r_count, n, a), &dev)?,
        last_roles: Tensor::from_vec(last_roles, (r_count, n, d), &dev)?,
        role_noise: Tensor::from_vec(noise, (r_count, n, d), &dev)?,
        roles: Tensor::from_vec(roles, (r_count, n, d), &dev)?,
        assign_rows: Tensor::from_vec(assign, r_count, &dev)?,
        actions: Tensor::from_vec(actions, (r_count, n), &dev)?,
        agent_counts: counts,
        host_actions,
    })
}
