//! Network sizes and the bundle of controller, utility and mixing networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Mixer, Utility};
use crate::controller::Controller;
use crate::env::N_ACTIONS;
use crate::error::Result;
use crate::nn::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Controller embedding width.
    pub width: usize,
    pub heads: usize,
    pub d_role: usize,
    /// Width of the agents' recurrent core.
    pub agent_width: usize,
    pub mix_width: usize,
    pub mix_heads: usize,
    pub n_actions: usize,
    /// Apply `abs` to the hypernetwork mixing weights.
    pub monotonic: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            d_role: 8,
            agent_width: 64,
            mix_width: 32,
            mix_heads: 4,
            n_actions: N_ACTIONS,
            monotonic: true,
        }
    }
}

impl NetConfig {
    /// The pinned small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            width: 8,
            heads: 4,
            d_role: 2,
            agent_width: 8,
            mix_width: 8,
            mix_heads: 2,
            n_actions: N_ACTIONS,
            monotonic: true,
        }
    }
}

/// Controller, agent utility and mixer sharing one parameter store with
/// sections `controller.*`, `utility.*` and `mixing.*`.
pub struct Networks {
    pub cfg: NetConfig,
    pub params: ParamSet,
    pub controller: Controller,
    pub utility: Utility,
    pub mixer: Mixer,
}

impl Networks {
    /// Initialise from `seed`. Identical `(cfg, seed)` gives identical weights.
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let controller = Controller::new(&mut params.scope("controller", &mut rng), cfg)?;
        let utility = Utility::new(&mut params.scope("utility", &mut rng), cfg)?;
        let mixer = Mixer::new(&mut params.scope("mixing", &mut rng), cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            controller,
            utility,
            mixer,
        })
    }

    /// An independent copy with its own parameter storage.
    pub fn deep_copy(&self) -> Result<Self> {
        let copy = Self::new(&self.cfg, 0)?;
        copy.params.copy_from(&self.params)?;
        Ok(copy)
    }
}
