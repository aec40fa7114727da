//! Method-by-seed ablation sweep and its paired comparisons.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::{run_dir, run_training, RunSummary, TrainOptions, SUMMARY_FILE};
use crate::error::{CordError, Result};
use crate::learner::Method;
use crate::stats::{mean, std_dev, wilcoxon_greater, Wilcoxon};

pub const ABLATION_FILE: &str = "ablation.json";

/// Team size of the unseen-agent protocol used for the headline comparison.
pub const HEADLINE_UNSEEN_SIZE: usize = 5;

/// Significance level of the directional comparisons.
pub const DIRECTIONAL_P: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Greedy return on the training team sizes, one entry per seed.
    pub training_return: Vec<f64>,
    /// Unseen-agent return at [`HEADLINE_UNSEEN_SIZE`], one entry per seed.
    pub unseen_agents_5: Vec<f64>,
    pub unseen_agents_6: Vec<f64>,
    pub unseen_teams_5: Vec<f64>,
    pub unseen_teams_6: Vec<f64>,
    pub wall_seconds: f64,
}

impl MethodScores {
    fn from_runs(method: Method, runs: &[RunSummary]) -> Result<Self> {
        let pick = |f: &dyn Fn(&RunSummary) -> Option<f64>, what: &str| {
            runs.iter()
                .map(|r| {
                    f(r).ok_or_else(|| {
                        CordError::Config(format!("{} seed {} has no {what} result", method.name(), r.seed))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        };
        Ok(Self {
            method,
            seeds: runs.iter().map(|r| r.seed).collect(),
            training_return: pick(&|r| r.training_return, "training-size")?,
            unseen_agents_5: pick(&|r| r.unseen_agents_return(5), "5-agent unseen-agent")?,
            unseen_agents_6: pick(&|r| r.unseen_agents_return(6), "6-agent unseen-agent")?,
            unseen_teams_5: pick(&|r| r.unseen_team_return(5), "5-agent team")?,
            unseen_teams_6: pick(&|r| r.unseen_team_return(6), "6-agent team")?,
            wall_seconds: runs.iter().map(|r| r.wall_seconds).sum(),
        })
    }
}

/// One directional claim `better > worse` on a paired metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub better: Method,
    pub worse: Method,
    pub better_mean: f64,
    pub worse_mean: f64,
    pub test: Wilcoxon,
    pub holds: bool,
}

fn compare(metric: &str, better: &MethodScores, worse: &MethodScores, values: fn(&MethodScores) -> &[f64]) -> Result<Comparison> {
    if better.seeds != worse.seeds {
        return Err(CordError::Config("compared methods were run on different seeds".into()));
    }
    let (a, b) = (values(better), values(worse));
    let test = wilcoxon_greater(a, b)?;
    let (better_mean, worse_mean) = (mean(a), mean(b));
    Ok(Comparison {
        metric: metric.to_string(),
        better: better.method,
        worse: worse.method,
        better_mean,
        worse_mean,
        holds: better_mean - worse_mean > 0.0 && test.p_value < DIRECTIONAL_P,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub total_steps: u64,
    pub scores: Vec<MethodScores>,
    pub comparisons: Vec<Comparison>,
    pub wall_seconds: f64,
}

impl AblationReport {
    /// Build the report from finished runs; every method must have the same seeds.
    pub fn from_runs(total_steps: u64, runs: &[RunSummary]) -> Result<Self> {
        let scores = Method::ALL
            .iter()
            .map(|&m| {
                let mine: Vec<RunSummary> = runs.iter().filter(|r| r.method == m).cloned().collect();
                MethodScores::from_runs(m, &mine)
            })
            .collect::<Result<Vec<_>>>()?;
        let get = |m: Method| scores.iter().find(|s| s.method == m).expect("every method scored");
        let (cord, no_i, maxent) = (get(Method::Cord), get(Method::CordNoI), get(Method::Maxent));
        let comparisons = vec![
            compare("training_return", cord, no_i, |s| &s.training_return)?,
            compare("unseen_agents_5", cord, no_i, |s| &s.unseen_agents_5)?,
            compare("unseen_agents_5", cord, maxent, |s| &s.unseen_agents_5)?,
        ];
        let wall_seconds = scores.iter().map(|s| s.wall_seconds).sum();
        Ok(Self { total_steps, scores, comparisons, wall_seconds })
    }

    pub fn all_hold(&self) -> bool {
        self.comparisons.iter().all(|c| c.holds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Plain-text table of per-method means and the comparisons.
    pub fn render(&self) -> String {
        let mut out = format!("{:<10} {:>16} {:>16} {:>16}\n", "method", "train", "unseen agents 5", "unseen agents 6");
        for s in &self.scores {
            let cell = |v: &[f64]| format!("{:.2} ± {:.2}", mean(v), std_dev(v));
            out.push_str(&format!(
                "{:<10} {:>16} {:>16} {:>16}\n",
                s.method.name(),
                cell(&s.training_return),
                cell(&s.unseen_agents_5),
                cell(&s.unseen_agents_6)
            ));
        }
        for c in &self.comparisons {
            out.push_str(&format!(
                "{} > {} on {}: {:.2} vs {:.2}, W+ = {}, p = {:.4} -> {}\n",
                c.better.name(),
                c.worse.name(),
                c.metric,
                c.better_mean,
                c.worse_mean,
                c.test.w_plus,
                c.test.p_value,
                if c.holds { "holds" } else { "does not hold" }
            ));
        }
        out
    }
}

/// Path of the sweep's report under `root`.
pub fn report_path(root: &Path) -> PathBuf {
    root.join(ABLATION_FILE)
}

/// Train every method on every seed in `base.seeds`, reusing finished runs
/// whose summary already exists, then write the report.
pub fn run_ablation(base: &ExperimentConfig, root: &Path) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &method in Method::ALL.iter() {
        for &seed in &base.seeds {
            let cfg = ExperimentConfig { method, ..base.clone() };
            let summary_path = run_dir(root, method, seed).join(SUMMARY_FILE);
            if let Ok(text) = std::fs::read_to_string(&summary_path) {
                let done: RunSummary = serde_json::from_str(&text)?;
                if done.env_steps >= cfg.total_steps && done.training_return.is_some() {
                    log::info!("{} seed {seed} already finished", method.name());
                    runs.push(done);
                    continue;
                }
            }
            let opts = TrainOptions { resume: true, final_eval: true, ..TrainOptions::default() };
            runs.push(run_training(&cfg, seed, root, &opts)?);
        }
    }
    let report = AblationReport::from_runs(base.total_steps, &runs)?;
    report.save(&report_path(root))?;
    Ok(report)
}
