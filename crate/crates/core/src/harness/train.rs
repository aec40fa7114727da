//! The training loop and its on-disk outputs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::ExperimentConfig;
use super::eval::{eval_teams, eval_unseen_agents, AgentEval, TeamEval};
use crate::checkpoint;
use crate::env::TeamSpec;
use crate::error::Result;
use crate::learner::{Learner, Method, TrainStats};
use crate::model::Networks;
use crate::replay::{assemble, ReplayBuffer};
use crate::rollout::{batch_dims, run_episode, ReplayRecord, RolloutConfig};
use crate::stats::mean;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPLAY_LOG_FILE: &str = "replay.jsonl";

/// Distinct, reproducible seed for one evaluation stream of a run.
pub fn derived_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

const TAG_CURVE: u64 = 1;
const TAG_TRAIN_SIZES: u64 = 2;
const TAG_UNSEEN_TEAMS: u64 = 3;
const TAG_UNSEEN_AGENTS: u64 = 4;

pub fn run_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join(method.name()).join(format!("seed_{seed}"))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    /// Stop after this many episodes even if `total_steps` is not reached.
    pub max_episodes: Option<u64>,
    /// Write a per-step replay log.
    pub replay_log: bool,
    /// Continue from the run directory's checkpoint.
    pub resume: bool,
    /// Run the final evaluation protocols.
    pub final_eval: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub train_steps: u64,
    pub wall_seconds: f64,
    /// Greedy return averaged over the training team sizes.
    pub training_return: Option<f64>,
    pub train_sizes: Vec<TeamEval>,
    pub unseen_teams: Vec<TeamEval>,
    pub unseen_agents: Vec<AgentEval>,
}

impl RunSummary {
    pub fn unseen_agents_return(&self, team_size: usize) -> Option<f64> {
        self.unseen_agents.iter().find(|a| a.team_size == team_size).map(|a| a.mean)
    }

    pub fn unseen_team_return(&self, team_size: usize) -> Option<f64> {
        self.unseen_teams
            .iter()
            .find(|t| t.team_size == team_size)
            .map(|t| t.summary.mean)
    }
}

struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Self(BufWriter::new(f)))
    }

    fn write(&mut self, value: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.0, value)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

/// One line of a training run's replay log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedStep {
    pub episode: u64,
    #[serde(flatten)]
    pub record: ReplayRecord,
}

/// Parse a replay log written with [`TrainOptions::replay_log`].
pub fn read_replay_log(path: &Path) -> Result<Vec<LoggedStep>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Greedy learning-curve point: `episodes` spread round-robin over the
/// training sizes.
fn curve_eval(nets: &Networks, cfg: &ExperimentConfig, seed: u64) -> Result<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rc_cfg = RolloutConfig::greedy(cfg.method, cfg.role_period);
    let grid = cfg.grid();
    let (mut ret, mut rc, mut rd) = (vec![], vec![], vec![]);
    for k in 0..cfg.curve_eval_episodes.max(1) {
        let n = cfg.train_team_sizes[k % cfg.train_team_sizes.len()];
        let spec = TeamSpec::full(n, rng.random());
        let r = run_episode(nets, &grid, spec, &rc_cfg, &mut rng)?;
        ret.push(r.env_return);
        rc.push(r.mean_r_c);
        rd.push(r.mean_r_d);
    }
    Ok((mean(&ret), mean(&rc), mean(&rd)))
}

/// Final protocols: training sizes, unseen team sizes, and unseen agents
/// for each unseen size.
pub fn final_evaluation(nets: &Networks, cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<TeamEval>, Vec<TeamEval>, Vec<AgentEval>)> {
    let grid = cfg.grid();
    let m = cfg.method;
    let train = eval_teams(
        nets,
        &grid,
        m,
        cfg.role_period,
        &cfg.train_team_sizes,
        cfg.eval_episodes,
        derived_seed(seed, TAG_TRAIN_SIZES),
    )?;
    let teams = eval_teams(
        nets,
        &grid,
        m,
        cfg.role_period,
        &cfg.unseen_team_sizes,
        cfg.eval_episodes,
        derived_seed(seed, TAG_UNSEEN_TEAMS),
    )?;
    let agents = cfg
        .unseen_team_sizes
        .iter()
        .filter(|&&n| n >= 2)
        .map(|&n| {
            eval_unseen_agents(
                nets,
                &grid,
                m,
                cfg.role_period,
                n,
                None,
                cfg.builtin_policy,
                cfg.eval_episodes,
                derived_seed(seed, TAG_UNSEEN_AGENTS + n as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((train, teams, agents))
}

/// Train one `(method, seed)` run under `root`.
pub fn run_training(cfg: &ExperimentConfig, seed: u64, root: &Path, opts: &TrainOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = run_dir(root, cfg.method, seed);
    std::fs::create_dir_all(&dir)?;
    let grid = cfg.grid();
    let net = cfg.net();
    let dims = batch_dims(&grid, &net);
    let run_config = serde_json::to_value(cfg)?;

    let mut learner = Learner::new(cfg.learner(), Networks::new(&net, seed)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut env_steps = 0u64;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let resuming = opts.resume && ckpt_path.exists();
    if resuming {
        let ck = checkpoint::load(&ckpt_path)?;
        ck.restore_into(&mut learner)?;
        rng = ck.state.rng.restore()?;
        env_steps = ck.state.env_steps;
        log::info!("resuming {} seed {seed} at step {env_steps}", cfg.method.name());
    } else {
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    }
    let mut metrics = JsonLines::open(&dir.join(METRICS_FILE), resuming)?;
    let mut replay_log = if opts.replay_log {
        Some(JsonLines::open(&dir.join(REPLAY_LOG_FILE), resuming)?)
    } else {
        None
    };

    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut next_eval = (env_steps / cfg.eval_every + 1) * cfg.eval_every;
    let mut next_ckpt = env_steps
        .checked_div(cfg.checkpoint_every)
        .map_or(u64::MAX, |k| (k + 1) * cfg.checkpoint_every);
    if !resuming {
        let (ret, rc, rd) = curve_eval(&learner.online, cfg, derived_seed(seed, TAG_CURVE))?;
        metrics.write(&json!({"event": "eval", "step": 0, "return": ret, "r_c": rc, "r_d": rd}))?;
    }
    let mut episodes_this_session = 0u64;
    while env_steps < cfg.total_steps && opts.max_episodes.is_none_or(|m| learner.episodes_seen < m) {
        let n = cfg.train_team_sizes[rng.random_range(0..cfg.train_team_sizes.len())];
        let spec = TeamSpec::full(n, rng.random());
        let epsilon = cfg.epsilon_at(env_steps);
        let mut rcfg = RolloutConfig::training(cfg.method, cfg.role_period, epsilon);
        rcfg.record = opts.replay_log;
        let result = run_episode(&learner.online, &grid, spec, &rcfg, &mut rng)?;
        let episode_index = learner.episodes_seen;
        if let Some(log) = replay_log.as_mut() {
            for rec in &result.records {
                let mut v = serde_json::to_value(rec)?;
                v["episode"] = json!(episode_index);
                log.write(&v)?;
            }
        }
        env_steps += result.episode.len() as u64;
        buffer.add(result.episode)?;
        let mut stats = None;
        if buffer.total_steps() >= cfg.batch_steps {
            for _ in 0..cfg.updates_per_episode {
                let sampled = buffer.sample(cfg.batch_steps, &mut rng)?;
                let eb = assemble(&sampled, &grid, dims)?;
                stats = Some(learner.train_step(&eb)?);
            }
        }
        learner.note_episodes(1)?;
        episodes_this_session += 1;
        let s = stats.unwrap_or_default();
        let TrainStats { loss, r_c, r_d, .. } = s;
        metrics.write(&json!({
            "event": "train",
            "step": env_steps,
            "episode": learner.episodes_seen,
            "team_size": n,
            "return": result.env_return,
            "r_c": result.mean_r_c,
            "r_d": result.mean_r_d,
            "batch_r_c": r_c,
            "batch_r_d": r_d,
            "loss": loss,
            "epsilon": epsilon,
        }))?;
        if env_steps >= next_eval {
            let (ret, rc, rd) = curve_eval(&learner.online, cfg, derived_seed(seed, TAG_CURVE))?;
            metrics.write(&json!({"event": "eval", "step": env_steps, "return": ret, "r_c": rc, "r_d": rd}))?;
            metrics.flush()?;
            log::info!(
                "{} seed {seed}: step {env_steps} greedy return {ret:.2} ({:.0}s)",
                cfg.method.name(),
                started.elapsed().as_secs_f64()
            );
            next_eval += cfg.eval_every;
        }
        if env_steps >= next_ckpt {
            checkpoint::save(&ckpt_path, &learner, env_steps, &rng, run_config.clone())?;
            next_ckpt += cfg.checkpoint_every;
        }
    }
    checkpoint::save(&ckpt_path, &learner, env_steps, &rng, run_config)?;
    metrics.flush()?;
    if let Some(log) = replay_log.as_mut() {
        log.flush()?;
    }
    log::debug!("{episodes_this_session} episodes this session");

    let (train_sizes, unseen_teams, unseen_agents) = if opts.final_eval {
        final_evaluation(&learner.online, cfg, seed)?
    } else {
        (vec![], vec![], vec![])
    };
    let training_return = if train_sizes.is_empty() {
        None
    } else {
        Some(mean(&train_sizes.iter().map(|t| t.summary.mean).collect::<Vec<_>>()))
    };
    let summary = RunSummary {
        method: cfg.method,
        seed,
        env_steps,
        episodes: learner.episodes_seen,
        train_steps: learner.train_steps,
        wall_seconds: started.elapsed().as_secs_f64(),
        training_return,
        train_sizes,
        unseen_teams,
        unseen_agents,
    };
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
