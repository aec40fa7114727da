//! Acting in the environment with a network snapshot.

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::select_actions;
use crate::batch::{build, BatchDims, RowInput};
use crate::controller::{audit_attention, sample_roles_with_noise, uniform_roles, AttentionAudit, RoleMode};
use crate::env::{builtin_action, GridConfig, ResourceCollection, TeamSpec};
use crate::error::{contract, Result};
use crate::learner::Method;
use crate::model::{NetConfig, Networks};
use crate::nn::device;
use crate::replay::{Episode, RoleAssignment};
use crate::role_math::{affinity_matrix, causal_reward, diversity_reward};

pub fn batch_dims(grid: &GridConfig, net: &NetConfig) -> BatchDims {
    BatchDims {
        d_role: net.d_role,
        n_actions: net.n_actions,
        offset_scale: (grid.grid_size - 1) as f64 / grid.visibility_radius.max(1) as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub method: Method,
    /// Steps between role assignments.
    pub role_period: usize,
    pub epsilon: f64,
    pub role_mode: RoleMode,
    /// Keep a per-step replay log.
    pub record: bool,
    /// Audit every controller pass's attention weights.
    pub audit: bool,
}

impl RolloutConfig {
    pub fn training(method: Method, role_period: usize, epsilon: f64) -> Self {
        Self {
            method,
            role_period,
            epsilon,
            role_mode: RoleMode::Stochastic,
            record: false,
            audit: false,
        }
    }

    /// Greedy actions and mean roles.
    pub fn greedy(method: Method, role_period: usize) -> Self {
        Self {
            method,
            role_period,
            epsilon: 0.0,
            role_mode: RoleMode::Mean,
            record: false,
            audit: false,
        }
    }
}

/// One line of the episode replay log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub step: usize,
    pub state_hash: String,
    pub joint_action: Vec<usize>,
    pub r_e: f64,
    /// Intrinsic rewards of the role assignment in effect at this step.
    pub r_c: f64,
    pub r_d: f64,
}

pub struct EpisodeResult {
    pub episode: Episode,
    pub env_return: f64,
    pub records: Vec<ReplayRecord>,
    pub audit: AttentionAudit,
    pub controller_passes: usize,
    pub mean_r_c: f64,
    pub mean_r_d: f64,
}

/// Play one episode. Learner-controlled agents act epsilon-greedily on their
/// utilities; the others follow the team's scripted policy. The controller
/// always sees the whole team.
pub fn run_episode(nets: &Networks, grid: &GridConfig, spec: TeamSpec, cfg: &RolloutConfig, rng: &mut ChaCha8Rng) -> Result<EpisodeResult> {
    if cfg.role_period == 0 {
        return Err(contract("role period must be positive"));
    }
    let (mut env, _) = ResourceCollection::new(grid.clone(), spec.clone())?;
    let n = spec.n_agents;
    let d = nets.cfg.d_role;
    let dims = batch_dims(grid, &nets.cfg);
    let mut roles = vec![vec![0.0; d]; n];
    let mut h = nets.utility.initial_state(1, n)?;
    let mut states = vec![env.state().clone()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut assignments = Vec::new();
    let mut records = Vec::new();
    let mut audit = AttentionAudit::default();
    let mut passes = 0;
    let (mut rc, mut rd) = (0.0, 0.0);
    let (mut sum_rc, mut sum_rd) = (0.0, 0.0);

    while !env.done() {
        let t = env.state().step_count;
        let obs = env.observation();
        let last_roles = roles.clone();
        let zero = vec![vec![0.0; d]; n];
        let b = build(
            &[RowInput {
                obs: &obs,
                last_roles: &last_roles,
                role_noise: &zero,
                roles: &zero,
                assign_row: 0,
                actions: None,
            }],
            dims,
        )?;
        if t % cfg.role_period == 0 {
            let (new_roles, noise) = if cfg.method.uses_controller() {
                let out = nets.controller.forward(&b)?;
                passes += 1;
                if cfg.audit {
                    audit.merge(&audit_attention(&b, &out)?);
                }
                let posts = out.posteriors(&b.agent_counts)?.remove(0);
                let bases = out.baselines(&b.agent_counts)?.remove(0);
                rc = causal_reward(std::slice::from_ref(&posts), &[bases])?;
                rd = diversity_reward(&affinity_matrix(&posts)?);
                sample_roles_with_noise(&posts, cfg.role_mode, rng)
            } else {
                (uniform_roles(n, d, rng), vec![vec![0.0; d]; n])
            };
            roles = new_roles;
            assignments.push(RoleAssignment {
                step: t,
                roles: roles.clone(),
                noise,
            });
        }
        let flat: Vec<f64> = roles.iter().flatten().copied().collect();
        let role_t = Tensor::from_vec(flat, (1, n, d), &device())?;
        let x = nets.utility.embed(&b, &role_t)?;
        h = nets.utility.step(&x, &h)?;
        let q = nets.utility.q_values(&h)?.squeeze(0)?.to_vec2::<f64>()?;
        let avail: Vec<Vec<bool>> = env.available_actions().iter().map(|a| a.to_vec()).collect();
        let learned = select_actions(&q, &avail, cfg.epsilon, rng)?;
        let joint = (0..n)
            .map(|i| {
                if spec.is_controlled(i) {
                    Ok(learned[i])
                } else {
                    Ok(builtin_action(env.state(), i, spec.builtin_policy)? as usize)
                }
            })
            .collect::<Result<Vec<usize>>>()?;
        let hash = if cfg.record { env.state().hash_hex() } else { String::new() };
        let out = env.step(&joint)?;
        if cfg.record {
            records.push(ReplayRecord {
                step: t,
                state_hash: hash,
                joint_action: joint.clone(),
                r_e: out.reward,
                r_c: rc,
                r_d: rd,
            });
        }
        sum_rc += rc;
        sum_rd += rd;
        rewards.push(out.reward);
        actions.push(joint);
        states.push(env.state().clone());
    }
    let steps = rewards.len().max(1) as f64;
    let env_return = rewards.iter().sum();
    Ok(EpisodeResult {
        episode: Episode {
            spec,
            states,
            actions,
            rewards,
            terminal: true,
            assignments,
        },
        env_return,
        records,
        audit,
        controller_passes: passes,
        mean_r_c: sum_rc / steps,
        mean_r_d: sum_rd / steps,
    })
}

/// Seed for an episode's environment layout drawn from the run RNG.
pub fn draw_episode_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.random()
}
