use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cord::checkpoint;
use cord::diagnostics::{self, DiagnosticConfig};
use cord::env::BuiltinPolicy;
use cord::harness::{self, ablation, plots, train, ExperimentConfig, TrainOptions, RUN_DIR_ENV};
use cord::learner::Method;

#[derive(Parser)]
#[command(name = "cord", version, about = "Role-diverse cooperative MARL experiments")]
struct Cli {
    /// Output root for run directories.
    #[arg(long, global = true, env = RUN_DIR_ENV, default_value = "runs")]
    run_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint on fully controlled teams.
    EvalTeams(EvalTeamsArgs),
    /// Greedy evaluation of a checkpoint alongside scripted teammates.
    EvalAgents(EvalAgentsArgs),
    /// Numerical audits; exits nonzero if any check fails.
    Diagnose(DiagnoseArgs),
    /// Learning-curve CSV and SVG figures for every run under the run root.
    Plot(PlotArgs),
    /// Train every method on every seed and compare them.
    Ablation(ConfigArgs),
    /// Print a run's episode replay log.
    Trace(TraceArgs),
}

/// Experiment configuration: a TOML file, then individual overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_delimiter = ',')]
    train_team_sizes: Option<Vec<usize>>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    role_period: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon_anneal_steps: Option<u64>,
    #[arg(long)]
    buffer_capacity: Option<usize>,
    #[arg(long)]
    batch_steps: Option<usize>,
    #[arg(long)]
    target_period: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.method {
            cfg.method = Method::parse(m)?;
        }
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = &self.$f { cfg.$f = v.clone(); } )*};
        }
        set!(
            train_team_sizes,
            lambda_c,
            lambda_d,
            total_steps,
            seeds,
            eval_every,
            eval_episodes,
            role_period,
            gamma,
            epsilon_anneal_steps,
            buffer_capacity,
            batch_steps,
            target_period,
            lr
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from existing checkpoints.
    #[arg(long)]
    resume: bool,
    /// Stop each run after this many episodes.
    #[arg(long)]
    max_episodes: Option<u64>,
    /// Write a per-step replay log.
    #[arg(long)]
    replay_log: bool,
    /// Skip the final evaluation protocols.
    #[arg(long)]
    no_final_eval: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint file, or a run directory containing one.
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalTeamsArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, value_delimiter = ',', default_value = "5,6")]
    team_sizes: Vec<usize>,
}

#[derive(Args)]
struct EvalAgentsArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long, default_value_t = 5)]
    team_size: usize,
    /// Controlled counts; defaults to 1..team_size.
    #[arg(long, value_delimiter = ',')]
    controlled: Option<Vec<usize>>,
    #[arg(long, default_value = "mixed")]
    policy: String,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path; defaults to `<run root>/diagnostics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte-Carlo sample budget for the KL and entropy checks.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// Output directory; defaults to `<run root>/plots`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-render the learning curve from an existing curve CSV only.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// Replay log, or a run directory containing one.
    log: PathBuf,
    /// Only this training episode.
    #[arg(long)]
    episode: Option<u64>,
    /// One line per episode with its reward totals instead of every step.
    #[arg(long)]
    summary: bool,
}

struct Loaded {
    nets: cord::model::Networks,
    cfg: ExperimentConfig,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let file = if path.is_dir() { path.join(train::CHECKPOINT_FILE) } else { path.to_path_buf() };
    let ck = checkpoint::load(&file).with_context(|| format!("loading {}", file.display()))?;
    let cfg: ExperimentConfig = serde_json::from_value(ck.state.run_config.clone()).context("checkpoint run configuration")?;
    Ok(Loaded { nets: ck.networks()?, cfg })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => {
            let cfg = a.config.resolve()?;
            std::fs::create_dir_all(&cli.run_dir).with_context(|| format!("creating {}", cli.run_dir.display()))?;
            let opts = TrainOptions {
                max_episodes: a.max_episodes,
                replay_log: a.replay_log,
                resume: a.resume,
                final_eval: !a.no_final_eval,
            };
            for &seed in &cfg.seeds {
                let s = harness::run_training(&cfg, seed, &cli.run_dir, &opts)?;
                println!(
                    "{} seed {seed}: {} steps, {} episodes, {:.0}s, train-size return {}",
                    s.method.name(),
                    s.env_steps,
                    s.episodes,
                    s.wall_seconds,
                    s.training_return.map_or("n/a".into(), |r| format!("{r:.2}"))
                );
            }
        }
        Command::EvalTeams(a) => {
            let l = load_checkpoint(&a.ckpt.checkpoint)?;
            let res = harness::eval_teams(
                &l.nets,
                &l.cfg.grid(),
                l.cfg.method,
                l.cfg.role_period,
                &a.team_sizes,
                a.ckpt.episodes,
                a.ckpt.seed,
            )?;
            for t in &res {
                println!("{} agents: {:.2} ± {:.2}", t.team_size, t.summary.mean, t.summary.std);
            }
            println!("{}", serde_json::to_string_pretty(&res)?);
        }
        Command::EvalAgents(a) => {
            let l = load_checkpoint(&a.ckpt.checkpoint)?;
            let policy = BuiltinPolicy::parse(&a.policy)?;
            let res = harness::eval_unseen_agents(
                &l.nets,
                &l.cfg.grid(),
                l.cfg.method,
                l.cfg.role_period,
                a.team_size,
                a.controlled.as_deref(),
                policy,
                a.ckpt.episodes,
                a.ckpt.seed,
            )?;
            for c in &res.per_count {
                println!("{} controlled: {:.2} ± {:.2}", c.controlled, c.summary.mean, c.summary.std);
            }
            println!("average over counts {:?}: {:.2} ± {:.2}", res.controlled_counts(), res.mean, res.std);
        }
        Command::Diagnose(a) => {
            let mut cfg = DiagnosticConfig { seed: a.seed, ..DiagnosticConfig::default() };
            if let Some(n) = a.samples {
                cfg.mc_samples = n;
            }
            let report = diagnostics::run_all(&cfg)?;
            let out = a.out.unwrap_or_else(|| cli.run_dir.join("diagnostics.json"));
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.render());
            println!("report written to {}", out.display());
            return Ok(report.passed());
        }
        Command::Plot(a) => {
            let out = a.out.unwrap_or_else(|| cli.run_dir.join("plots"));
            let res = match a.csv {
                Some(csv) => {
                    std::fs::create_dir_all(&out)?;
                    plots::plots_from_csv(&csv, &out)?
                }
                None => plots::emit_plots(&cli.run_dir, &out)?,
            };
            println!("wrote {}", res.csv.display());
            println!("wrote {}", res.learning_curve.display());
            for b in res.bars.iter().chain(&res.summary) {
                println!("wrote {}", b.display());
            }
        }
        Command::Ablation(a) => {
            let cfg = a.resolve()?;
            std::fs::create_dir_all(&cli.run_dir)?;
            let report = ablation::run_ablation(&cfg, &cli.run_dir)?;
            print!("{}", report.render());
            if !report.all_hold() {
                bail!("not every directional comparison holds");
            }
        }
        Command::Trace(a) => trace(&a)?,
    }
    Ok(true)
}

fn trace(a: &TraceArgs) -> Result<()> {
    let file = if a.log.is_dir() { a.log.join(train::REPLAY_LOG_FILE) } else { a.log.clone() };
    let steps = train::read_replay_log(&file).with_context(|| format!("reading {}", file.display()))?;
    let shown = steps.iter().filter(|s| a.episode.is_none_or(|e| s.episode == e));
    if a.summary {
        println!("{:>7} {:>5} {:>9} {:>9} {:>7}", "episode", "steps", "return", "mean r_c", "mean r_d");
        let mut per_episode: Vec<(u64, Vec<&train::LoggedStep>)> = Vec::new();
        for s in shown {
            match per_episode.last_mut() {
                Some((e, v)) if *e == s.episode => v.push(s),
                _ => per_episode.push((s.episode, vec![s])),
            }
        }
        for (e, v) in per_episode {
            let n = v.len() as f64;
            let ret: f64 = v.iter().map(|s| s.record.r_e).sum();
            let rc = v.iter().map(|s| s.record.r_c).sum::<f64>() / n;
            let rd = v.iter().map(|s| s.record.r_d).sum::<f64>() / n;
            println!("{e:>7} {:>5} {ret:>9.2} {rc:>9.4} {rd:>7.4}", v.len());
        }
    } else {
        println!("{:>7} {:>4} {:<16} {:<18} {:>6} {:>8} {:>6}", "episode", "step", "state", "actions", "r_e", "r_c", "r_d");
        for s in shown {
            let r = &s.record;
            let actions: Vec<String> = r.joint_action.iter().map(|a| a.to_string()).collect();
            println!(
                "{:>7} {:>4} {:<16} {:<18} {:>6.1} {:>8.4} {:>6.4}",
                s.episode,
                r.step,
                &r.state_hash[..r.state_hash.len().min(16)],
                actions.join(""),
                r.r_e,
                r.r_c,
                r.r_d
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
