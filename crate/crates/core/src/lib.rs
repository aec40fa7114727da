//! Hierarchical cooperative multi-agent reinforcement learning with role diversity.
//!
//! A high-level controller attends over team observations to build per-agent
//! influence vectors, emits Gaussian role posteriors, and assigns roles to
//! low-level agents whose utilities are combined by a monotonic mixing
//! network. Two intrinsic rewards shape the team reward:
//!
//! ```text
//! r   = r_e + lambda_c * r_c + lambda_d * r_d
//! r_c = sum_i KL( P(c_i | I_i, q_i) || P(c_i | I_0, q_i) )
//! r_d = det A(c),   A_ij = exp(-(KL(P_i || P_j) + KL(P_j || P_i)))
//! ```
//!
//! Modules:
//! - [`role_math`]: Gaussian KLs, affinity matrix, diversity and causal rewards.
//! - [`env`]: the resource-collection gridworld with scripted teammates.
//! - [`nn`], [`controller`], [`agent`]: networks on top of candle.
//! - [`replay`], [`learner`], [`checkpoint`]: TD learning with double-Q targets.
//! - [`harness`]: training runs, generalisation protocols, ablations, plots.
//! - [`diagnostics`]: numerical audits of the entropy decomposition and the networks.

pub mod agent;
pub mod batch;
pub mod checkpoint;
pub mod controller;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod harness;
pub mod learner;
pub mod model;
pub mod nn;
pub mod optim;
pub mod replay;
pub mod role_math;
pub mod rollout;
pub mod stats;

pub use error::{CordError, Result};
