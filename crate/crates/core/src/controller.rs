//! High-level controller: team fusion, cross-agent influence attention, and
//! the Gaussian role heads.
//!
//! For every agent `i` the controller computes
//!
//! ```text
//! o_i   = mean of the entities agent i sees, each encoded relative to i
//! q_i   = relu(W [fuse(o_i, team view); o_i])
//! k_j   = K [o_j; act_j; c_j],   v_j = V [o_j; act_j; c_j]
//! a_ij  = softmax_{j != i}(q_i . k_j / sqrt(d))      (per head)
//! I_i   = sum_{j != i} a_ij v_j
//! P(c_i | I_i, q_i)  = head([q_i; I_i])
//! P(c_i | I_0, q_i)  = head([q_i; 0])
//! ```
//!
//! Agents with no teammates get `I_i = I_0 = 0`, so their posterior equals
//! their do-baseline.

use candle_core::{Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::batch::{Batch, REL_FEAT_DIM};
use crate::env::FEAT_DIM;
use crate::error::{contract, Result};
use crate::model::NetConfig;
use crate::nn::{attention, device, masked_mean, Linear, Scope, DTYPE};
use crate::role_math::{RoleGaussian, LOG_STD_MAX, LOG_STD_MIN};

#[derive(Clone)]
pub struct Controller {
    obs_enc: Linear,
    entity_enc: Linear,
    action_enc: Linear,
    team_query: Linear,
    team_key: Linear,
    team_value: Linear,
    team_out: Linear,
    individual: Linear,
    key: Linear,
    value: Linear,
    head_hidden: Linear,
    head_out: Linear,
    width: usize,
    heads: usize,
    d_role: usize,
}

/// Everything one controller pass produces, per row and agent slot.
pub struct ControllerOutput {
    /// `[R, N, W]` observation embeddings `o_i`.
    pub obs_embedding: Tensor,
    /// `[R, N, W]` queries `q_i`.
    pub query: Tensor,
    /// `[R, N, W]` keys of each agent as seen by the others.
    pub keys: Tensor,
    /// `[R, N, W]` values `v_j`.
    pub values: Tensor,
    /// `[R, heads, N, E]` team-fusion attention weights.
    pub team_weights: Tensor,
    /// `[R, heads, N, N]` influence weights, row `i` over others `j`.
    pub influence_weights: Tensor,
    /// `[R, N, W]` influence vectors.
    pub influence: Tensor,
    pub post_mean: Tensor,
    pub post_log_std: Tensor,
    pub base_mean: Tensor,
    pub base_log_std: Tensor,
}

/// Host-side copy of the influence attention for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceBundle {
    pub query: Vec<f64>,
    /// Keys and values of every agent slot in the team (including `i`).
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// `weights[h][j]`: head `h`'s weight on agent `j`; zero for `j == i`.
    pub weights: Vec<Vec<f64>>,
    pub influence: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoleMode {
    Stochastic,
    Mean,
}

impl Controller {
    pub fn new(scope: &mut Scope<'_>, cfg: &NetConfig) -> Result<Self> {
        let (w, d) = (cfg.width, cfg.d_role);
        if w % cfg.heads != 0 {
            return Err(contract("controller width must divide into heads"));
        }
        Ok(Self {
            obs_enc: scope.linear("obs_enc", REL_FEAT_DIM, w)?,
            entity_enc: scope.linear("entity_enc", FEAT_DIM, w)?,
            action_enc: scope.linear("action_enc", cfg.n_actions, w)?,
            team_query: scope.linear("team_query", w, w)?,
            team_key: scope.linear("team_key", w, w)?,
            team_value: scope.linear("team_value", w, w)?,
            team_out: scope.linear("team_out", w, w)?,
            individual: scope.linear("individual", 2 * w, w)?,
            key: scope.linear("key", 2 * w + d, w)?,
            value: scope.linear("value", 2 * w + d, w)?,
            head_hidden: scope.linear("head_hidden", 2 * w, w)?,
            head_out: scope.linear("head_out", w, 2 * d)?,
            width: w,
            heads: cfg.heads,
            d_role: d,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn d_role(&self) -> usize {
        self.d_role
    }

    /// Observation embeddings `o_i` and queries `q_i` for every agent slot.
    /// Returns `(obs_embedding, query, team_weights)`.
    pub fn encode_queries(&self, b: &Batch) -> Result<(Tensor, Tensor, Tensor)> {
        let local = self.obs_enc.forward(&b.rel_feats)?.relu()?;
        let obs_emb = masked_mean(&b.obs_mask.unsqueeze(2)?, &local)?.squeeze(2)?;
        let ent = self.entity_enc.forward(&b.entity_feats)?.relu()?;
        let mask = b.team_view.unsqueeze(1)?.unsqueeze(1)?;
        let (fused, team_weights) = attention(
            &self.team_query.forward(&obs_emb)?,
            &self.team_key.forward(&ent)?,
            &self.team_value.forward(&ent)?,
            &mask,
            self.heads,
        )?;
        let global = self.team_out.forward(&fused)?;
        let query = self
            .individual
            .forward(&Tensor::cat(&[&global, &obs_emb], D::Minus1)?)?
            .relu()?;
        Ok((obs_emb, query, team_weights))
    }

    /// Keys, values, weights, and influence vectors. Returns
    /// `(keys, values, weights, influence)`.
    pub fn influence(&self, b: &Batch, obs_emb: &Tensor, query: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let act = self.action_enc.forward(&b.last_actions)?.relu()?;
        let kv_in = Tensor::cat(&[obs_emb, &act, &b.last_roles], D::Minus1)?;
        let keys = self.key.forward(&kv_in)?;
        let values = self.value.forward(&kv_in)?;
        let mask = influence_mask(&b.agent_mask)?.unsqueeze(1)?;
        let (influence, weights) = attention(query, &keys, &values, &mask, self.heads)?;
        Ok((keys, values, weights, influence))
    }

    /// Role head: `(mean, log_std)` with `log_std` clamped.
    pub fn role_head(&self, query: &Tensor, influence: &Tensor) -> Result<(Tensor, Tensor)> {
        let hidden = self
            .head_hidden
            .forward(&Tensor::cat(&[query, influence], D::Minus1)?)?
            .relu()?;
        let out = self.head_out.forward(&hidden)?;
        let mean = out.narrow(D::Minus1, 0, self.d_role)?;
        let log_std = out.narrow(D::Minus1, self.d_role, self.d_role)?.clamp(LOG_STD_MIN, LOG_STD_MAX)?;
        Ok((mean, log_std))
    }

    /// Head evaluated at the constant intervention `I_0 = 0`.
    pub fn do_baseline(&self, query: &Tensor) -> Result<(Tensor, Tensor)> {
        self.role_head(query, &query.zeros_like()?)
    }

    pub fn forward(&self, b: &Batch) -> Result<ControllerOutput> {
        let (obs_embedding, query, team_weights) = self.encode_queries(b)?;
        let (keys, values, influence_weights, influence) = self.influence(b, &obs_embedding, &query)?;
        let (post_mean, post_log_std) = self.role_head(&query, &influence)?;
        let (base_mean, base_log_std) = self.do_baseline(&query)?;
        Ok(ControllerOutput {
            obs_embedding,
            query,
            keys,
            values,
            team_weights,
            influence_weights,
            influence,
            post_mean,
            post_log_std,
            base_mean,
            base_log_std,
        })
    }
}

/// `[R, N, N]` mask: both agents exist and `j != i`.
pub fn influence_mask(agent_mask: &Tensor) -> Result<Tensor> {
    let (_, n) = agent_mask.dims2()?;
    let pair = agent_mask.unsqueeze(2)?.broadcast_mul(&agent_mask.unsqueeze(1)?)?;
    let off_diag = (Tensor::ones((n, n), DTYPE, &device())? - Tensor::eye(n, DTYPE, &device())?)?;
    Ok(pair.broadcast_mul(&off_diag.unsqueeze(0)?)?)
}

impl ControllerOutput {
    /// Posterior Gaussians of the existing agents, one list per row.
    pub fn posteriors(&self, counts: &[usize]) -> Result<Vec<Vec<RoleGaussian>>> {
        to_gaussians(&self.post_mean, &self.post_log_std, counts)
    }

    pub fn baselines(&self, counts: &[usize]) -> Result<Vec<Vec<RoleGaussian>>> {
        to_gaussians(&self.base_mean, &self.base_log_std, counts)
    }

    /// Host copy of agent `i`'s influence attention at `row`.
    pub fn bundle(&self, row: usize, i: usize, n_agents: usize) -> Result<InfluenceBundle> {
        if i >= n_agents {
            return Err(contract(format!("agent {i} outside a team of {n_agents}")));
        }
        let at = |t: &Tensor| -> Result<Vec<Vec<f64>>> {
            Ok(t.get(row)?.narrow(0, 0, n_agents)?.to_vec2::<f64>()?)
        };
        let w = self.influence_weights.get(row)?.to_vec3::<f64>()?;
        Ok(InfluenceBundle {
            query: self.query.get(row)?.get(i)?.to_vec1()?,
            keys: at(&self.keys)?,
            values: at(&self.values)?,
            weights: w.iter().map(|head| head[i][..n_agents].to_vec()).collect(),
            influence: self.influence.get(row)?.get(i)?.to_vec1()?,
        })
    }
}

pub fn to_gaussians(mean: &Tensor, log_std: &Tensor, counts: &[usize]) -> Result<Vec<Vec<RoleGaussian>>> {
    let m = mean.to_vec3::<f64>()?;
    let l = log_std.to_vec3::<f64>()?;
    if m.len() != counts.len() {
        return Err(contract("agent counts do not match the row count"));
    }
    m.into_iter()
        .zip(l)
        .zip(counts)
        .map(|((mr, lr), &n)| {
            mr.into_iter()
                .zip(lr)
                .take(n)
                .map(|(mu, ls)| RoleGaussian::new(mu, ls))
                .collect()
        })
        .collect()
}

/// Draw roles from the posteriors. Returns `(roles, noise)` with
/// `roles[i] = mean_i + std_i * noise[i]`; mean mode uses zero noise.
pub fn sample_roles_with_noise<R: Rng + ?Sized>(
    posteriors: &[RoleGaussian],
    mode: RoleMode,
    rng: &mut R,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    posteriors
        .iter()
        .map(|p| {
            let noise: Vec<f64> = match mode {
                RoleMode::Mean => vec![0.0; p.dim()],
                RoleMode::Stochastic => (0..p.dim()).map(|_| StandardNormal.sample(rng)).collect(),
            };
            let role = p.mean().iter().zip(p.std()).zip(&noise).map(|((m, s), e)| m + s * e).collect();
            (role, noise)
        })
        .unzip()
}

pub fn sample_roles<R: Rng + ?Sized>(posteriors: &[RoleGaussian], mode: RoleMode, rng: &mut R) -> Vec<Vec<f64>> {
    sample_roles_with_noise(posteriors, mode, rng).0
}

/// Roles drawn uniformly from `[-1, 1]^d`, ignoring the controller.
pub fn uniform_roles<R: Rng + ?Sized>(n_agents: usize, d_role: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n_agents)
        .map(|_| (0..d_role).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}

/// Attention-weight violations found in one controller pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionAudit {
    pub rows_checked: usize,
    pub max_normalisation_error: f64,
    pub masked_weight_sum: f64,
    pub min_weight: f64,
}

impl AttentionAudit {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_normalisation_error <= tol && self.masked_weight_sum == 0.0 && self.min_weight >= 0.0
    }

    pub fn merge(&mut self, other: &AttentionAudit) {
        self.rows_checked += other.rows_checked;
        self.max_normalisation_error = self.max_normalisation_error.max(other.max_normalisation_error);
        self.masked_weight_sum += other.masked_weight_sum;
        self.min_weight = self.min_weight.min(other.min_weight);
    }
}

fn audit_weights(weights: &Tensor, mask: &Tensor, audit: &mut AttentionAudit) -> Result<()> {
    // weights [R, H, L, S], mask [R, L, S]
    let w = weights.flatten_from(1)?.to_vec2::<f64>()?;
    let (_, heads, l, s) = weights.dims4()?;
    let m = mask.flatten_from(1)?.to_vec2::<f64>()?;
    for (r, row) in w.iter().enumerate() {
        for h in 0..heads {
            for li in 0..l {
                let mrow = &m[r][li * s..(li + 1) * s];
                let wrow = &row[(h * l + li) * s..(h * l + li + 1) * s];
                let any = mrow.iter().any(|&x| x > 0.0);
                let sum: f64 = wrow.iter().sum();
                let target = if any { 1.0 } else { 0.0 };
                audit.max_normalisation_error = audit.max_normalisation_error.max((sum - target).abs());
                for (&wv, &mv) in wrow.iter().zip(mrow) {
                    audit.min_weight = audit.min_weight.min(wv);
                    if mv == 0.0 {
                        audit.masked_weight_sum += wv.abs();
                    }
                }
                audit.rows_checked += 1;
            }
        }
    }
    Ok(())
}

/// Check both attention layers of `out` against the batch masks: weights
/// are non-negative, sum to one over the allowed entries of every query that
/// has any, and are exactly zero elsewhere.
pub fn audit_attention(b: &Batch, out: &ControllerOutput) -> Result<AttentionAudit> {
    let mut audit = AttentionAudit::default();
    let (r, n, e) = (b.rows, b.n_agents, b.n_entities);
    let team = b
        .team_view
        .unsqueeze(1)?
        .broadcast_as((r, n, e))?
        .broadcast_mul(&b.agent_mask.unsqueeze(2)?)?;
    let team_w = out.team_weights.broadcast_mul(&b.agent_mask.unsqueeze(1)?.unsqueeze(3)?)?;
    audit_weights(&team_w, &team, &mut audit)?;
    audit_weights(&out.influence_weights, &influence_mask(&b.agent_mask)?, &mut audit)?;
    Ok(audit)
}
