//! Greedy evaluation protocols: training sizes, unseen team sizes, and
//! partial control alongside scripted teammates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{BuiltinPolicy, GridConfig, TeamSpec};
use crate::error::{CordError, Result};
use crate::learner::Method;
use crate::model::Networks;
use crate::rollout::{draw_episode_seed, run_episode, RolloutConfig};
use crate::stats::{mean, std_dev};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSummary {
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_r_c: f64,
    pub mean_r_d: f64,
}

impl ReturnSummary {
    fn from_runs(returns: &[f64], rc: &[f64], rd: &[f64]) -> Self {
        Self {
            episodes: returns.len(),
            mean: mean(returns),
            std: std_dev(returns),
            mean_r_c: mean(rc),
            mean_r_d: mean(rd),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamEval {
    pub team_size: usize,
    pub summary: ReturnSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountEval {
    pub controlled: usize,
    pub summary: ReturnSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEval {
    pub team_size: usize,
    pub per_count: Vec<CountEval>,
    /// Average of the per-count means.
    pub mean: f64,
    /// Spread of the per-count means.
    pub std: f64,
}

impl AgentEval {
    pub fn controlled_counts(&self) -> Vec<usize> {
        self.per_count.iter().map(|c| c.controlled).collect()
    }
}

/// Environment-only returns of `episodes` greedy episodes with `spec_of(seed)`.
fn evaluate(
    nets: &Networks,
    grid: &GridConfig,
    method: Method,
    role_period: usize,
    episodes: usize,
    rng: &mut ChaCha8Rng,
    spec_of: impl Fn(u64) -> TeamSpec,
) -> Result<ReturnSummary> {
    let cfg = RolloutConfig::greedy(method, role_period);
    let (mut ret, mut rc, mut rd) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..episodes {
        let seed = draw_episode_seed(rng);
        let r = run_episode(nets, grid, spec_of(seed), &cfg, rng)?;
        ret.push(r.env_return);
        rc.push(r.mean_r_c);
        rd.push(r.mean_r_d);
    }
    Ok(ReturnSummary::from_runs(&ret, &rc, &rd))
}

fn check_size(grid: &GridConfig, n: usize) -> Result<()> {
    if n == 0 || n > grid.max_agents {
        return Err(CordError::Config(format!(
            "team size {n} exceeds the architecture's {} agent slots",
            grid.max_agents
        )));
    }
    Ok(())
}

/// Fully controlled teams of each size in `team_sizes`.
pub fn eval_teams(
    nets: &Networks,
    grid: &GridConfig,
    method: Method,
    role_period: usize,
    team_sizes: &[usize],
    episodes: usize,
    seed: u64,
) -> Result<Vec<TeamEval>> {
    team_sizes.iter().try_for_each(|&n| check_size(grid, n))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    team_sizes
        .iter()
        .map(|&n| {
            let summary = evaluate(nets, grid, method, role_period, episodes, &mut rng, |s| TeamSpec::full(n, s))?;
            Ok(TeamEval { team_size: n, summary })
        })
        .collect()
}

/// Teams of `team_size` where only the first `k` agents are controlled, for
/// each `k` in `controlled_counts` (default `1..team_size`); the remaining
/// agents run `policy`.
#[allow(clippy::too_many_arguments)]
pub fn eval_unseen_agents(
    nets: &Networks,
    grid: &GridConfig,
    method: Method,
    role_period: usize,
    team_size: usize,
    controlled_counts: Option<&[usize]>,
    policy: BuiltinPolicy,
    episodes_per_count: usize,
    seed: u64,
) -> Result<AgentEval> {
    check_size(grid, team_size)?;
    let counts: Vec<usize> = match controlled_counts {
        Some(c) => c.to_vec(),
        None => (1..team_size).collect(),
    };
    if counts.is_empty() || counts.iter().any(|&k| k == 0 || k >= team_size) {
        return Err(CordError::Config(format!(
            "controlled counts must lie in [1, {}]",
            team_size.saturating_sub(1)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_count = counts
        .iter()
        .map(|&k| {
            let summary = evaluate(nets, grid, method, role_period, episodes_per_count, &mut rng, |s| {
                TeamSpec::partial(team_size, k, policy, s)
            })?;
            Ok(CountEval { controlled: k, summary })
        })
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = per_count.iter().map(|c| c.summary.mean).collect();
    Ok(AgentEval {
        team_size,
        mean: mean(&means),
        std: std_dev(&means),
        per_count,
    })
}
