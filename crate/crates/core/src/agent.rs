//! Low-level agents and the mixing network.
//!
//! Each agent's utility runs its local entity view through an encoder, pools
//! it, appends its previous action and assigned role, and feeds the result
//! to a recurrent core; a linear head scores the actions. The mixer combines
//! the chosen utilities into `Q_tot` with state-conditioned weights that are
//! kept non-negative, so raising any agent's utility never lowers `Q_tot`.

use candle_core::{Tensor, D};
use rand::Rng;

use crate::batch::{Batch, REL_FEAT_DIM};
use crate::env::FEAT_DIM;
use crate::error::{contract, Result};
use crate::model::NetConfig;
use crate::nn::{attention, device, masked_mean, GruCell, Linear, Scope, DTYPE};

#[derive(Clone)]
pub struct Utility {
    obs_enc: Linear,
    input: Linear,
    gru: GruCell,
    q_hidden: Linear,
    q_out: Linear,
    width: usize,
}

impl Utility {
    pub fn new(scope: &mut Scope<'_>, cfg: &NetConfig) -> Result<Self> {
        let w = cfg.agent_width;
        Ok(Self {
            obs_enc: scope.linear("obs_enc", REL_FEAT_DIM, w)?,
            input: scope.linear("input", w + cfg.n_actions + cfg.d_role, w)?,
            gru: GruCell::new(scope, "gru", w, w)?,
            q_hidden: scope.linear("q_hidden", w, w)?,
            q_out: scope.linear("q_out", w, cfg.n_actions)?,
            width: w,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Per-step recurrent inputs `[R, N, w]` from observations and `roles` `[R, N, d]`.
    pub fn embed(&self, b: &Batch, roles: &Tensor) -> Result<Tensor> {
        let local = self.obs_enc.forward(&b.rel_feats)?.relu()?;
        let pooled = masked_mean(&b.obs_mask.unsqueeze(2)?, &local)?.squeeze(2)?;
        let x = Tensor::cat(&[&pooled, &b.last_actions, roles], D::Minus1)?;
        Ok(self.input.forward(&x)?.relu()?)
    }

    pub fn initial_state(&self, episodes: usize, n_agents: usize) -> Result<Tensor> {
        Ok(Tensor::zeros((episodes, n_agents, self.width), DTYPE, &device())?)
    }

    /// One recurrent step. `x`, `h`: `[B, N, w]`.
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        self.gru.step(x, h)
    }

    /// Run the recurrent core over whole episodes. `x` is `[B * T, N, w]`
    /// with rows episode-major; returns hidden states of the same shape.
    pub fn unroll(&self, x: &Tensor, episodes: usize, steps: usize) -> Result<Tensor> {
        let (rows, n, w) = x.dims3()?;
        if rows != episodes * steps {
            return Err(contract("unroll rows must equal episodes * steps"));
        }
        let gi = self.gru.project_inputs(&x.reshape((episodes, steps, n, w))?)?;
        let mut h = self.initial_state(episodes, n)?;
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            h = self.gru.step_projected(&gi.narrow(1, t, 1)?.squeeze(1)?, &h)?;
            hs.push(h.clone());
        }
        Ok(Tensor::stack(&hs, 1)?.reshape((rows, n, w))?)
    }

    /// Action values `[.., A]` from hidden states.
    pub fn q_values(&self, h: &Tensor) -> Result<Tensor> {
        self.q_out.forward(&self.q_hidden.forward(h)?.relu()?)
    }
}

/// Attention-pooled hypernetwork mixer.
#[derive(Clone)]
pub struct Mixer {
    entity_enc: Linear,
    attn_query: Linear,
    attn_key: Linear,
    attn_value: Linear,
    hyper_w1: Linear,
    hyper_b1: Linear,
    hyper_w2: Linear,
    value_hidden: Linear,
    value_out: Linear,
    heads: usize,
    monotonic: bool,
}

impl Mixer {
    pub fn new(scope: &mut Scope<'_>, cfg: &NetConfig) -> Result<Self> {
        let m = cfg.mix_width;
        if !m.is_multiple_of(cfg.mix_heads) {
            return Err(contract("mixer width must divide into heads"));
        }
        Ok(Self {
            entity_enc: scope.linear("entity_enc", FEAT_DIM, m)?,
            attn_query: scope.linear("attn_query", m, m)?,
            attn_key: scope.linear("attn_key", m, m)?,
            attn_value: scope.linear("attn_value", m, m)?,
            hyper_w1: scope.linear("hyper_w1", m, m)?,
            hyper_b1: scope.linear("hyper_b1", m, m)?,
            hyper_w2: scope.linear("hyper_w2", m, m)?,
            value_hidden: scope.linear("value_hidden", m, m)?,
            value_out: scope.linear("value_out", m, 1)?,
            heads: cfg.mix_heads,
            monotonic: cfg.monotonic,
        })
    }

    pub fn is_monotonic(&self) -> bool {
        self.monotonic
    }

    /// `Q_tot` per row.
    ///
    /// `q`: `[R, N]` chosen utilities; `entities`: `[R, E, F]` with the
    /// first `N` rows being the agents; `team_mask`: `[R, E]`;
    /// `agent_mask`: `[R, N]`.
    pub fn forward_raw(&self, q: &Tensor, entities: &Tensor, team_mask: &Tensor, agent_mask: &Tensor) -> Result<Tensor> {
        let (_, n) = q.dims2()?;
        let ent = self.entity_enc.forward(entities)?.relu()?;
        let state = masked_mean(&team_mask.unsqueeze(1)?, &ent)?.squeeze(1)?;
        let agents = ent.narrow(1, 0, n)?;
        let (attended, _) = attention(
            &self.attn_query.forward(&agents)?,
            &self.attn_key.forward(&ent)?,
            &self.attn_value.forward(&ent)?,
            &team_mask.unsqueeze(1)?.unsqueeze(1)?,
            self.heads,
        )?;
        let agent_ctx = (agents + attended)?;
        let positive = |t: Tensor| -> Result<Tensor> { Ok(if self.monotonic { t.abs()? } else { t }) };
        let w1 = positive(self.hyper_w1.forward(&agent_ctx)?)?;
        let weighted = (q * agent_mask)?.unsqueeze(2)?.broadcast_mul(&w1)?.sum(1)?;
        let hidden = (weighted + self.hyper_b1.forward(&state)?)?.elu(1.0)?;
        let w2 = positive(self.hyper_w2.forward(&state)?)?;
        let v = self
            .value_out
            .forward(&self.value_hidden.forward(&state)?.relu()?)?
            .squeeze(1)?;
        Ok(((hidden * w2)?.sum(1)? + v)?)
    }

    pub fn forward(&self, q: &Tensor, b: &Batch) -> Result<Tensor> {
        self.forward_raw(q, &b.entity_feats, &b.team_mask, &b.agent_mask)
    }

    /// Host-side `Q_tot` for one state.
    pub fn mix(&self, utilities: &[f64], b: &Batch, row: usize) -> Result<f64> {
        let n = b.agent_counts.get(row).copied().unwrap_or(0);
        if n == 0 || utilities.len() != n {
            return Err(contract("mix needs one utility per existing agent"));
        }
        let mut padded = utilities.to_vec();
        padded.resize(b.n_agents, 0.0);
        let q = Tensor::from_vec(padded, (1, b.n_agents), &device())?;
        let out = self.forward_raw(
            &q,
            &b.entity_feats.narrow(0, row, 1)?,
            &b.team_mask.narrow(0, row, 1)?,
            &b.agent_mask.narrow(0, row, 1)?,
        )?;
        Ok(out.to_vec1::<f64>()?[0])
    }
}

/// Index of the largest available value; ties go to the lower index.
pub fn greedy_action(q: &[f64], available: &[bool]) -> Result<usize> {
    q.iter()
        .zip(available)
        .enumerate()
        .filter(|(_, (_, &ok))| ok)
        .fold(None, |best: Option<(usize, f64)>, (i, (&v, _))| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
        .ok_or_else(|| contract("no available action"))
}

/// Independent epsilon-greedy choice per agent over available actions.
pub fn select_actions<R: Rng + ?Sized>(
    q: &[Vec<f64>],
    available: &[Vec<bool>],
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(contract(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if q.len() != available.len() {
        return Err(contract("one availability row per agent required"));
    }
    q.iter()
        .zip(available)
        .map(|(qi, ai)| {
            if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                let allowed: Vec<usize> = (0..ai.len()).filter(|&a| ai[a]).collect();
                if allowed.is_empty() {
                    return Err(contract("no available action"));
                }
                Ok(allowed[rng.random_range(0..allowed.len())])
            } else {
                greedy_action(qi, ai)
            }
        })
        .collect()
}
