//! TOML experiment configuration: flat training fields plus a `[grid]` table
//! for the environment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{BuiltinPolicy, GridConfig};
use crate::error::{CordError, Result};
use crate::learner::{LearnerConfig, Method, DEFAULT_R_C_AGENT_CAP};
use crate::model::NetConfig;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub train_team_sizes: Vec<usize>,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub total_steps: u64,
    pub seeds: Vec<u64>,
    /// Environment steps between greedy learning-curve evaluations.
    pub eval_every: u64,
    /// Episodes per learning-curve evaluation, spread over the training sizes.
    pub curve_eval_episodes: usize,
    /// Episodes per cell of the final evaluations.
    pub eval_episodes: usize,
    pub unseen_team_sizes: Vec<usize>,
    pub builtin_policy: BuiltinPolicy,
    pub role_period: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    pub buffer_capacity: usize,
    /// Minimum transitions per minibatch.
    pub batch_steps: usize,
    /// Training episodes between target-network copies.
    pub target_period: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub role_grad: bool,
    /// Ceiling on each agent's KL inside the shaped causal reward.
    pub r_c_agent_cap: f64,
    pub checkpoint_every: u64,
    pub width: usize,
    pub heads: usize,
    pub d_role: usize,
    pub agent_width: usize,
    pub mix_width: usize,
    pub mix_heads: usize,
    /// Gradient steps after each collected episode.
    pub updates_per_episode: usize,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            method: Method::Cord,
            train_team_sizes: vec![2, 3, 4],
            lambda_c: 0.001,
            lambda_d: 0.001,
            total_steps: 300_000,
            seeds: (0..5).collect(),
            eval_every: 10_000,
            curve_eval_episodes: 12,
            eval_episodes: 32,
            unseen_team_sizes: vec![5, 6],
            builtin_policy: BuiltinPolicy::Mixed,
            role_period: 5,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            buffer_capacity: 5000,
            batch_steps: 256,
            target_period: 200,
            lr: 3e-4,
            max_grad_norm: 10.0,
            role_grad: true,
            r_c_agent_cap: DEFAULT_R_C_AGENT_CAP,
            checkpoint_every: 50_000,
            width: net.width,
            heads: net.heads,
            d_role: net.d_role,
            agent_width: net.agent_width,
            mix_width: net.mix_width,
            mix_heads: net.mix_heads,
            updates_per_episode: 1,
            grid: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CordError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CordError::Config(e.to_string()))
    }

    pub fn grid(&self) -> GridConfig {
        self.grid.clone()
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            width: self.width,
            heads: self.heads,
            d_role: self.d_role,
            agent_width: self.agent_width,
            mix_width: self.mix_width,
            mix_heads: self.mix_heads,
            ..NetConfig::default()
        }
    }

    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            method: self.method,
            gamma: self.gamma,
            lambda_c: self.lambda_c,
            lambda_d: self.lambda_d,
            adam: AdamConfig {
                lr: self.lr,
                max_grad_norm: self.max_grad_norm,
                ..AdamConfig::default()
            },
            target_period: self.target_period,
            role_grad: self.role_grad,
            r_c_agent_cap: self.r_c_agent_cap,
        }
    }

    /// The `(lambda_c, lambda_d)` this method trains with.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        self.method.lambdas(self.lambda_c, self.lambda_d)
    }

    /// Linear anneal from `epsilon_start` to `epsilon_end`, then constant.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.epsilon_anneal_steps == 0 || step >= self.epsilon_anneal_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_anneal_steps as f64;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CordError::Config(m.to_string()));
        let rates = [
            self.lambda_c,
            self.lambda_d,
            self.gamma,
            self.epsilon_start,
            self.epsilon_end,
            self.lr,
            self.max_grad_norm,
        ];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return bad("rates must be finite and non-negative");
        }
        if self.r_c_agent_cap.is_nan() || self.r_c_agent_cap <= 0.0 {
            return bad("r_c_agent_cap must be positive");
        }
        if self.gamma > 1.0 || self.epsilon_start > 1.0 || self.epsilon_end > 1.0 {
            return bad("gamma and epsilon must lie in [0, 1]");
        }
        self.grid.validate().map_err(|e| CordError::Config(format!("grid: {e}")))?;
        let max_agents = self.grid.max_agents;
        if self.train_team_sizes.is_empty() {
            return bad("train_team_sizes is empty");
        }
        for &n in self.train_team_sizes.iter().chain(&self.unseen_team_sizes) {
            if n == 0 || n > max_agents {
                return Err(CordError::Config(format!("team size {n} outside [1, {max_agents}]")));
            }
        }
        if self.seeds.is_empty() {
            return bad("at least one seed required");
        }
        if self.role_period == 0 || self.updates_per_episode == 0 || self.buffer_capacity == 0 || self.target_period == 0 || self.eval_every == 0 {
            return bad("periods and capacities must be positive");
        }
        if !self.width.is_multiple_of(self.heads) || !self.mix_width.is_multiple_of(self.mix_heads) {
            return bad("widths must divide into attention heads");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::from_toml("method = \"maxent\"\ntotal_steps = 1000\n").unwrap();
        assert_eq!(cfg.method, Method::Maxent);
        assert_eq!(cfg.train_team_sizes, vec![2, 3, 4]);
        assert!(ExperimentConfig::from_toml("lambda = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("lambda_c = -1.0").is_err());
        assert!(ExperimentConfig::from_toml("unseen_team_sizes = [9]").is_err());
    }

    #[test]
    fn grid_table_overrides_single_environment_fields() {
        let cfg = ExperimentConfig::from_toml("[grid]\nvisibility_radius = 4\ninvader_period = 50\n").unwrap();
        let grid = cfg.grid();
        assert_eq!((grid.visibility_radius, grid.invader_period), (4, 50));
        assert_eq!(grid.grid_size, GridConfig::default().grid_size);
        assert!(ExperimentConfig::from_toml("[grid]\nradius = 4\n").is_err());
        assert!(ExperimentConfig::from_toml("[grid]\ngrid_size = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("[grid]\nmax_agents = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("updates_per_episode = 0").is_err());
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.epsilon_at(0), 1.0);
        assert!((cfg.epsilon_at(25_000) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon_at(50_000), 0.05);
        assert_eq!(cfg.epsilon_at(1_000_000), 0.05);
    }

    #[test]
    fn ablation_lambdas() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.effective_lambdas(), (0.001, 0.001));
        cfg.method = Method::CordNoI;
        assert_eq!(cfg.effective_lambdas(), (0.0, 0.0));
    }
}
