//! Double-Q TD learning of the whole hierarchy on shaped rewards.
//!
//! One update:
//! 1. run the online networks over every row of the minibatch;
//! 2. compute `r_c` and `r_d` at every role assignment from the (detached)
//!    online posteriors and add them to the environment reward of each step
//!    the assignment is held for;
//! 3. bootstrap with `y = r + gamma * (1 - done) * Q_tot(s', a*; target)` where
//!    `a*` is each agent's greedy action under the online utilities;
//! 4. minimise the masked mean of `(y - Q_tot)^2`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::agent::greedy_action;
use crate::controller::ControllerOutput;
use crate::env::N_ACTIONS;
use crate::error::{contract, Result};
use crate::model::Networks;
use crate::nn::device;
use crate::optim::{Adam, AdamConfig};
use crate::replay::EpisodeBatch;
use crate::role_math::{affinity_matrix, capped_causal_reward, diversity_reward, shape_reward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cord,
    /// Intrinsic rewards removed.
    CordNoI,
    /// Roles drawn uniformly from `[-1, 1]^d`; the controller is unused.
    Maxent,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cord, Method::CordNoI, Method::Maxent];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cord => "cord",
            Method::CordNoI => "cord_no_i",
            Method::Maxent => "maxent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| crate::CordError::Config(format!("unknown method {s:?}")))
    }

    pub fn uses_controller(self) -> bool {
        self != Method::Maxent
    }

    /// `(lambda_c, lambda_d)` actually applied for this method.
    pub fn lambdas(self, lambda_c: f64, lambda_d: f64) -> (f64, f64) {
        match self {
            Method::Cord => (lambda_c, lambda_d),
            Method::CordNoI | Method::Maxent => (0.0, 0.0),
        }
    }
}

/// Per-agent KL ceiling for the shaped causal reward, in nats.
pub const DEFAULT_R_C_AGENT_CAP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub method: Method,
    pub gamma: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub adam: AdamConfig,
    /// Hard target copy every this many training episodes.
    pub target_period: usize,
    /// Let TD gradients reach the controller through the sampled roles.
    pub role_grad: bool,
    /// Ceiling on each agent's KL inside the shaped `r_c`.
    pub r_c_agent_cap: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            method: Method::Cord,
            gamma: 0.99,
            lambda_c: 0.001,
            lambda_d: 0.001,
            adam: AdamConfig::default(),
            target_period: 200,
            role_grad: true,
            r_c_agent_cap: DEFAULT_R_C_AGENT_CAP,
        }
    }
}

/// Tensors from one pass of a network bundle over a minibatch.
pub struct ForwardPass {
    pub controller: Option<ControllerOutput>,
    /// `[R, N, d]` roles fed to the utilities.
    pub roles: Tensor,
    /// `[R, N, A]` action values.
    pub q: Tensor,
    /// `[R, N]` values of the taken actions.
    pub q_taken: Tensor,
    /// `[R]` mixed team value.
    pub q_tot: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub r_e: f64,
    pub r_c: f64,
    pub r_d: f64,
    pub q_tot: f64,
}

/// Run `nets` over every row of `eb`, feeding `actions` (`[R, N]`) to the mixer.
pub fn forward_pass(nets: &Networks, eb: &EpisodeBatch, method: Method, role_grad: bool, actions: &Tensor) -> Result<ForwardPass> {
    let b = &eb.batch;
    let (controller, roles) = if method.uses_controller() {
        let out = nets.controller.forward(&eb.controller_batch)?;
        let mean = out.post_mean.contiguous()?.index_select(&b.assign_rows, 0)?;
        let std = out.post_log_std.contiguous()?.index_select(&b.assign_rows, 0)?.exp()?;
        let roles = (mean + (std * &b.role_noise)?)?;
        let roles = if role_grad { roles } else { roles.detach() };
        (Some(out), roles)
    } else {
        (None, b.roles.clone())
    };
    let x = nets.utility.embed(b, &roles)?;
    let h = nets.utility.unroll(&x, eb.episodes, eb.rows_per_episode())?;
    let q = nets.utility.q_values(&h)?;
    let q_taken = q.contiguous()?.gather(&actions.unsqueeze(2)?, 2)?.squeeze(2)?;
    let q_tot = nets.mixer.forward(&q_taken, b)?;
    Ok(ForwardPass {
        controller,
        roles,
        q,
        q_taken,
        q_tot,
    })
}

/// Per-step `(r_c, r_d)` indexed like `eb.rewards`. Each step receives the
/// rewards of the role assignment in effect, computed from the controller
/// pass `out` over `eb.controller_batch`.
pub fn intrinsic_rewards(eb: &EpisodeBatch, out: &ControllerOutput, r_c_agent_cap: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let counts = &eb.controller_batch.agent_counts;
    let posts = out.posteriors(counts)?;
    let bases = out.baselines(counts)?;
    let per_assignment = posts
        .iter()
        .zip(&bases)
        .map(|(p, b)| {
            let rc = capped_causal_reward(std::slice::from_ref(p), std::slice::from_ref(b), r_c_agent_cap)?;
            Ok((rc, diversity_reward(&affinity_matrix(p)?)))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let mut rc = vec![0.0; eb.episodes * eb.steps];
    let mut rd = vec![0.0; eb.episodes * eb.steps];
    for e in 0..eb.episodes {
        for t in 0..eb.steps {
            let k = eb.transition(e, t);
            if eb.valid[k] {
                (rc[k], rd[k]) = per_assignment[eb.assign_index[eb.row(e, t)]];
            }
        }
    }
    Ok((rc, rd))
}

/// `y = r + gamma * (1 - terminal) * next_value`.
pub fn td_target_values(rewards: &[f64], terminals: &[bool], next_values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.len() != terminals.len() || rewards.len() != next_values.len() {
        return Err(contract("target inputs differ in length"));
    }
    Ok(rewards
        .iter()
        .zip(terminals)
        .zip(next_values)
        .map(|((&r, &done), &v)| if done { r } else { r + gamma * v })
        .collect())
}

/// Greedy joint actions `[R, N]` under the given action values.
pub fn greedy_actions(q: &Tensor, counts: &[usize]) -> Result<Tensor> {
    let qv = q.to_vec3::<f64>()?;
    let (r, n, _) = q.dims3()?;
    let avail = [true; N_ACTIONS];
    let mut out = vec![0u32; r * n];
    for (row, (qr, &c)) in qv.iter().zip(counts).enumerate() {
        for i in 0..c {
            out[row * n + i] = greedy_action(&qr[i], &avail[..qr[i].len()])? as u32;
        }
    }
    Ok(Tensor::from_vec(out, (r, n), &device())?)
}

pub struct Learner {
    pub cfg: LearnerConfig,
    pub online: Networks,
    pub target: Networks,
    pub optim: Adam,
    pub train_steps: u64,
    pub episodes_seen: u64,
    pub episodes_since_target_update: u64,
}

impl Learner {
    pub fn new(cfg: LearnerConfig, online: Networks) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.gamma) || cfg.lambda_c < 0.0 || cfg.lambda_d < 0.0 || cfg.target_period == 0 {
            return Err(crate::CordError::Config("learner rates out of range".into()));
        }
        let target = online.deep_copy()?;
        let optim = Adam::new(&online.params, cfg.adam)?;
        Ok(Self {
            cfg,
            online,
            target,
            optim,
            train_steps: 0,
            episodes_seen: 0,
            episodes_since_target_update: 0,
        })
    }

    pub fn online_forward(&self, eb: &EpisodeBatch) -> Result<ForwardPass> {
        forward_pass(&self.online, eb, self.cfg.method, self.cfg.role_grad, &eb.batch.actions)
    }

    /// Shaped rewards per transition plus the intrinsic parts.
    pub fn shaped_rewards(&self, eb: &EpisodeBatch, online: &ForwardPass) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (rc, rd) = match &online.controller {
            Some(out) => intrinsic_rewards(eb, out, self.cfg.r_c_agent_cap)?,
            None => (vec![0.0; eb.rewards.len()], vec![0.0; eb.rewards.len()]),
        };
        let (lc, ld) = self.cfg.method.lambdas(self.cfg.lambda_c, self.cfg.lambda_d);
        let shaped = eb
            .rewards
            .iter()
            .zip(&rc)
            .zip(&rd)
            .map(|((&re, &c), &d)| shape_reward(re, c, d, lc, ld))
            .collect::<Result<Vec<_>>>()?;
        Ok((shaped, rc, rd))
    }

    /// Double-Q targets: online utilities pick the next actions, the target
    /// networks score them.
    pub fn td_targets(&self, eb: &EpisodeBatch, online: &ForwardPass, shaped: &[f64]) -> Result<Vec<f64>> {
        let next_actions = greedy_actions(&online.q.detach(), &eb.batch.agent_counts)?;
        let target = forward_pass(&self.target, eb, self.cfg.method, false, &next_actions)?;
        let q_next = target.q_tot.detach().to_vec1::<f64>()?;
        let mut next = Vec::with_capacity(shaped.len());
        for e in 0..eb.episodes {
            for t in 0..eb.steps {
                next.push(q_next[eb.row(e, t + 1)]);
            }
        }
        td_target_values(shaped, &eb.terminals, &next, self.cfg.gamma)
    }

    /// Mean squared TD error over valid transitions.
    pub fn td_loss(&self, eb: &EpisodeBatch, online: &ForwardPass, targets: &[f64]) -> Result<Tensor> {
        td_loss(eb, &online.q_tot, targets)
    }

    pub fn train_step(&mut self, eb: &EpisodeBatch) -> Result<TrainStats> {
        let n_valid = eb.n_valid();
        if n_valid == 0 {
            return Err(contract("minibatch holds no valid transitions"));
        }
        let online = self.online_forward(eb)?;
        let (shaped, rc, rd) = self.shaped_rewards(eb, &online)?;
        let targets = self.td_targets(eb, &online, &shaped)?;
        let loss = self.td_loss(eb, &online, &targets)?;
        let grads = loss.backward()?;
        let grad_norm = self.optim.apply(&self.online.params, &grads)?;
        self.train_steps += 1;
        let mean_valid = |v: &[f64]| v.iter().zip(&eb.valid).filter(|(_, &ok)| ok).map(|(x, _)| x).sum::<f64>() / n_valid as f64;
        Ok(TrainStats {
            loss: loss.to_scalar::<f64>()?,
            grad_norm,
            r_e: mean_valid(&eb.rewards),
            r_c: mean_valid(&rc),
            r_d: mean_valid(&rd),
            q_tot: online.q_tot.mean_all()?.to_scalar::<f64>()?,
        })
    }

    /// Count finished training episodes; copies online parameters into the
    /// target networks once `target_period` have accumulated. Returns whether
    /// a copy happened.
    pub fn note_episodes(&mut self, n: u64) -> Result<bool> {
        self.episodes_seen += n;
        self.episodes_since_target_update += n;
        if self.episodes_since_target_update >= self.cfg.target_period as u64 {
            self.update_targets()?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn update_targets(&mut self) -> Result<()> {
        self.target.params.copy_from(&self.online.params)?;
        self.episodes_since_target_update = 0;
        Ok(())
    }
}

/// Mean squared error between `q_tot` at each transition's row and `targets`,
/// over valid transitions only.
pub fn td_loss(eb: &EpisodeBatch, q_tot: &Tensor, targets: &[f64]) -> Result<Tensor> {
    if targets.len() != eb.valid.len() {
        return Err(contract("one target per transition required"));
    }
    let n_valid = eb.n_valid();
    if n_valid == 0 {
        return Err(contract("minibatch holds no valid transitions"));
    }
    let mut rows = Vec::with_capacity(targets.len());
    for e in 0..eb.episodes {
        for t in 0..eb.steps {
            rows.push(eb.row(e, t) as u32);
        }
    }
    let dev = device();
    let idx = Tensor::from_vec(rows, targets.len(), &dev)?;
    let mask: Vec<f64> = eb.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let y: Vec<f64> = targets.iter().zip(&eb.valid).map(|(&y, &v)| if v { y } else { 0.0 }).collect();
    let diff = (q_tot.contiguous()?.index_select(&idx, 0)? - Tensor::from_vec(y, targets.len(), &dev)?)?;
    let masked = (diff * Tensor::from_vec(mask, targets.len(), &dev)?)?;
    Ok((masked.sqr()?.sum(D::Minus1)? / n_valid as f64)?)
}
