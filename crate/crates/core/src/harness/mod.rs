//! Experiment orchestration: training runs, evaluation protocols, ablation
//! sweeps and plots.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod plots;
pub mod train;

pub use ablation::{run_ablation, AblationReport};
pub use config::ExperimentConfig;
pub use eval::{eval_teams, eval_unseen_agents, AgentEval, ReturnSummary, TeamEval};
pub use train::{run_dir, run_training, RunSummary, TrainOptions};

/// Environment variable overriding the output root.
pub const RUN_DIR_ENV: &str = "CORD_RUN_DIR";
