//! Resource-collection gridworld.
//!
//! Agents start at home, pick up coloured resources, carry them home for a
//! team reward, and intercept invaders that periodically spawn on the border
//! and walk toward home. Observations are entity lists with per-agent
//! visibility masks so teams of any size share one network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, CordError, Result};

pub const N_ACTIONS: usize = 5;
pub const N_RESOURCE_KINDS: usize = 3;

/// Per-entity feature layout:
/// `[is_agent, is_resource, is_invader, is_home, res_r, res_g, res_b, carry_r, carry_g, carry_b, x, y]`.
pub const FEAT_DIM: usize = 12;
pub const POS_X: usize = 10;
pub const POS_Y: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    NoOp = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::NoOp, Action::Up, Action::Down, Action::Left, Action::Right];
    /// Movement actions in tie-break order.
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| contract(format!("action index {i} out of range")))
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::NoOp => (0, 0),
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn chebyshev(self, other: Pos) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResourceKind {
    Red = 0,
    Green = 1,
    Blue = 2,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; N_RESOURCE_KINDS] = [ResourceKind::Red, ResourceKind::Green, ResourceKind::Blue];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: Pos,
    pub carried: Option<ResourceKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resource {
    pub pos: Pos,
    pub kind: ResourceKind,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invader {
    pub pos: Pos,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub grid_size: i32,
    pub home: Pos,
    pub visibility_radius: i32,
    pub episode_limit: usize,
    pub resources_per_kind: usize,
    pub invader_period: usize,
    pub max_agents: usize,
    pub max_invaders: usize,
    pub deposit_reward: f64,
    pub intercept_reward: f64,
    pub breach_penalty: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            grid_size: 12,
            home: Pos::new(6, 6),
            visibility_radius: 2,
            episode_limit: 145,
            resources_per_kind: 3,
            invader_period: 20,
            max_agents: 8,
            max_invaders: 4,
            deposit_reward: 5.0,
            intercept_reward: 3.0,
            breach_penalty: -10.0,
        }
    }
}

impl GridConfig {
    pub fn n_resources(&self) -> usize {
        self.resources_per_kind * N_RESOURCE_KINDS
    }

    /// Padded entity rows: agents, resources, invaders, home.
    pub fn n_entities(&self) -> usize {
        self.max_agents + self.n_resources() + self.max_invaders + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 3 {
            return Err(CordError::Config("grid must be at least 3x3".into()));
        }
        let inside = |p: Pos| p.x > 0 && p.y > 0 && p.x < self.grid_size - 1 && p.y < self.grid_size - 1;
        if !inside(self.home) {
            return Err(CordError::Config("home must be an interior cell".into()));
        }
        let cells = (self.grid_size * self.grid_size) as usize;
        if self.n_resources() + 1 > cells {
            return Err(CordError::Config("too many resources for the grid".into()));
        }
        if self.episode_limit == 0 || self.invader_period == 0 || self.max_agents == 0 {
            return Err(CordError::Config("episode limit, invader period and max agents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub grid_size: i32,
    pub home: Pos,
    pub agents: Vec<AgentState>,
    pub resources: Vec<Resource>,
    /// Fixed slots; a spawn reuses the first dead slot.
    pub invaders: Vec<Invader>,
    pub step_count: usize,
}

impl WorldState {
    /// Short, stable digest of the full state for replay logs.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.grid_size.to_le_bytes());
        h.update(self.home.x.to_le_bytes());
        h.update(self.home.y.to_le_bytes());
        h.update((self.step_count as u64).to_le_bytes());
        for a in &self.agents {
            h.update(a.pos.x.to_le_bytes());
            h.update(a.pos.y.to_le_bytes());
            h.update([a.carried.map_or(0u8, |k| k as u8 + 1)]);
        }
        for r in &self.resources {
            h.update(r.pos.x.to_le_bytes());
            h.update(r.pos.y.to_le_bytes());
            h.update([r.kind as u8, r.alive as u8]);
        }
        for i in &self.invaders {
            h.update(i.pos.x.to_le_bytes());
            h.update(i.pos.y.to_le_bytes());
            h.update([i.alive as u8]);
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn alive_invaders(&self) -> usize {
        self.invaders.iter().filter(|i| i.alive).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinPolicy {
    GreedyCollector,
    InvaderChaser,
    /// Even agent indices collect, odd indices chase.
    Mixed,
}

impl BuiltinPolicy {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "greedy_collector" => Ok(Self::GreedyCollector),
            "invader_chaser" => Ok(Self::InvaderChaser),
            "mixed" => Ok(Self::Mixed),
            other => Err(CordError::Config(format!(
                "unknown builtin policy {other:?} (expected greedy_collector, invader_chaser or mixed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamSpec {
    pub n_agents: usize,
    pub controlled: Vec<usize>,
    pub builtin_policy: BuiltinPolicy,
    pub seed: u64,
}

impl TeamSpec {
    /// Every agent learner-controlled.
    pub fn full(n_agents: usize, seed: u64) -> Self {
        Self {
            n_agents,
            controlled: (0..n_agents).collect(),
            builtin_policy: BuiltinPolicy::Mixed,
            seed,
        }
    }

    /// The first `controlled` agents learn; the rest follow `policy`.
    pub fn partial(n_agents: usize, controlled: usize, policy: BuiltinPolicy, seed: u64) -> Self {
        Self {
            n_agents,
            controlled: (0..controlled.min(n_agents)).collect(),
            builtin_policy: policy,
            seed,
        }
    }

    pub fn is_controlled(&self, agent: usize) -> bool {
        self.controlled.contains(&agent)
    }

    pub fn validate(&self, cfg: &GridConfig) -> Result<()> {
        if self.n_agents == 0 || self.n_agents > cfg.max_agents {
            return Err(CordError::Config(format!(
                "team size {} outside [1, {}]",
                self.n_agents, cfg.max_agents
            )));
        }
        if self.controlled.is_empty() {
            return Err(CordError::Config("at least one agent must be learner-controlled".into()));
        }
        if self.controlled.iter().any(|&i| i >= self.n_agents) {
            return Err(CordError::Config("controlled index outside the team".into()));
        }
        Ok(())
    }
}

/// Entity-structured team observation at one timestep.
///
/// Rows follow [`GridConfig`] padding: agents, resources, invaders, home.
/// Padded rows carry zero features and are absent from both masks.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityObservation {
    pub n_agents: usize,
    pub n_agent_slots: usize,
    pub n_resource_slots: usize,
    pub n_invader_slots: usize,
    pub features: Vec<[f64; FEAT_DIM]>,
    pub team_mask: Vec<bool>,
    /// One visibility row per agent slot.
    pub obs_mask: Vec<Vec<bool>>,
    /// Previous joint action; no-op before the first step.
    pub last_actions: Vec<usize>,
}

impl EntityObservation {
    pub fn n_entities(&self) -> usize {
        self.features.len()
    }

    pub fn resource_row(&self, k: usize) -> usize {
        self.n_agent_slots + k
    }

    pub fn invader_row(&self, k: usize) -> usize {
        self.n_agent_slots + self.n_resource_slots + k
    }

    pub fn home_row(&self) -> usize {
        self.features.len() - 1
    }

    /// Union of the agents' visibility rows: the controller's team view.
    pub fn team_view(&self) -> Vec<bool> {
        let mut v = vec![false; self.n_entities()];
        for row in self.obs_mask.iter().take(self.n_agents) {
            for (dst, &m) in v.iter_mut().zip(row) {
                *dst |= m;
            }
        }
        v
    }
}

/// One agent's slice of the team observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub agent: usize,
    pub features: Vec<[f64; FEAT_DIM]>,
    pub obs_mask: Vec<bool>,
    pub team_mask: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub deposits: usize,
    pub intercepts: usize,
    pub breaches: usize,
    pub spawned: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: EntityObservation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

fn norm_coord(v: i32, size: i32) -> f64 {
    v as f64 / (size - 1) as f64
}

/// Build the team observation for `state`.
pub fn observe_team(state: &WorldState, cfg: &GridConfig, last_actions: &[usize]) -> EntityObservation {
    let n_entities = cfg.n_entities();
    let mut features = vec![[0.0; FEAT_DIM]; n_entities];
    let mut team_mask = vec![false; n_entities];
    let mut positions: Vec<Option<Pos>> = vec![None; n_entities];
    let size = state.grid_size;

    let mut put = |row: usize, pos: Pos, f: &mut [f64; FEAT_DIM]| {
        f[POS_X] = norm_coord(pos.x, size);
        f[POS_Y] = norm_coord(pos.y, size);
        team_mask[row] = true;
        positions[row] = Some(pos);
    };
    for (i, a) in state.agents.iter().enumerate() {
        let f = &mut features[i];
        f[0] = 1.0;
        if let Some(k) = a.carried {
            f[7 + k as usize] = 1.0;
        }
        put(i, a.pos, f);
    }
    let res_base = cfg.max_agents;
    for (k, r) in state.resources.iter().enumerate() {
        if r.alive {
            let f = &mut features[res_base + k];
            f[1] = 1.0;
            f[4 + r.kind as usize] = 1.0;
            put(res_base + k, r.pos, f);
        }
    }
    let inv_base = res_base + cfg.n_resources();
    for (k, inv) in state.invaders.iter().enumerate().take(cfg.max_invaders) {
        if inv.alive {
            let f = &mut features[inv_base + k];
            f[2] = 1.0;
            put(inv_base + k, inv.pos, f);
        }
    }
    let home_row = n_entities - 1;
    let f = &mut features[home_row];
    f[3] = 1.0;
    put(home_row, state.home, f);

    let mut obs_mask = vec![vec![false; n_entities]; cfg.max_agents];
    for (i, a) in state.agents.iter().enumerate() {
        for row in 0..n_entities {
            obs_mask[i][row] = match positions[row] {
                Some(p) => row == i || row == home_row || a.pos.chebyshev(p) <= cfg.visibility_radius,
                None => false,
            };
        }
    }
    let mut actions = vec![Action::NoOp as usize; state.agents.len()];
    for (dst, &a) in actions.iter_mut().zip(last_actions) {
        *dst = a;
    }
    EntityObservation {
        n_agents: state.agents.len(),
        n_agent_slots: cfg.max_agents,
        n_resource_slots: cfg.n_resources(),
        n_invader_slots: cfg.max_invaders,
        features,
        team_mask,
        obs_mask,
        last_actions: actions,
    }
}

/// Agent `agent`'s view of the world.
pub fn observe(state: &WorldState, cfg: &GridConfig, agent: usize) -> Result<AgentObservation> {
    if agent >= state.agents.len() {
        return Err(contract(format!("agent {agent} does not exist")));
    }
    let team = observe_team(state, cfg, &[]);
    Ok(AgentObservation {
        agent,
        obs_mask: team.obs_mask[agent].clone(),
        team_mask: team.team_mask,
        features: team.features,
    })
}

/// First movement (up, down, left, right) that strictly reduces the
/// Manhattan distance from `from` to `to`; no-op when already there.
pub fn step_toward(from: Pos, to: Pos) -> Action {
    let d = from.manhattan(to);
    for a in Action::MOVES {
        let (dx, dy) = a.delta();
        if Pos::new(from.x + dx, from.y + dy).manhattan(to) < d {
            return a;
        }
    }
    Action::NoOp
}

fn nearest<'a>(from: Pos, candidates: impl Iterator<Item = &'a Pos>) -> Option<Pos> {
    let mut best: Option<Pos> = None;
    for &p in candidates {
        match best {
            Some(b) if from.manhattan(b) <= from.manhattan(p) => {}
            _ => best = Some(p),
        }
    }
    best
}

/// Scripted teammate action. Deterministic given the state.
pub fn builtin_action(state: &WorldState, agent: usize, policy: BuiltinPolicy) -> Result<Action> {
    let me = state
        .agents
        .get(agent)
        .ok_or_else(|| contract(format!("agent {agent} does not exist")))?;
    let policy = match policy {
        BuiltinPolicy::Mixed if agent.is_multiple_of(2) => BuiltinPolicy::GreedyCollector,
        BuiltinPolicy::Mixed => BuiltinPolicy::InvaderChaser,
        p => p,
    };
    let target = match policy {
        BuiltinPolicy::GreedyCollector => {
            if me.carried.is_some() {
                Some(state.home)
            } else {
                nearest(me.pos, state.resources.iter().filter(|r| r.alive).map(|r| &r.pos))
            }
        }
        BuiltinPolicy::InvaderChaser => nearest(me.pos, state.invaders.iter().filter(|i| i.alive).map(|i| &i.pos)),
        BuiltinPolicy::Mixed => unreachable!(),
    };
    Ok(target.map_or(Action::NoOp, |t| step_toward(me.pos, t)))
}

/// The resource-collection environment.
#[derive(Debug, Clone)]
pub struct ResourceCollection {
    cfg: GridConfig,
    spec: TeamSpec,
    state: WorldState,
    rng: ChaCha8Rng,
    last_actions: Vec<usize>,
}

impl ResourceCollection {
    pub fn new(cfg: GridConfig, spec: TeamSpec) -> Result<(Self, EntityObservation)> {
        cfg.validate()?;
        let placeholder = WorldState {
            grid_size: cfg.grid_size,
            home: cfg.home,
            agents: vec![],
            resources: vec![],
            invaders: vec![],
            step_count: 0,
        };
        let mut env = Self {
            cfg,
            spec: spec.clone(),
            state: placeholder,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            last_actions: vec![],
        };
        let obs = env.reset(spec)?;
        Ok((env, obs))
    }

    pub fn reset(&mut self, spec: TeamSpec) -> Result<EntityObservation> {
        spec.validate(&self.cfg)?;
        self.rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let size = self.cfg.grid_size;
        let mut taken = vec![self.cfg.home];
        let mut resources = Vec::with_capacity(self.cfg.n_resources());
        for kind in ResourceKind::ALL {
            for _ in 0..self.cfg.resources_per_kind {
                let pos = loop {
                    let p = Pos::new(self.rng.random_range(0..size), self.rng.random_range(0..size));
                    if !taken.contains(&p) {
                        break p;
                    }
                };
                taken.push(pos);
                resources.push(Resource { pos, kind, alive: true });
            }
        }
        self.state = WorldState {
            grid_size: size,
            home: self.cfg.home,
            agents: vec![
                AgentState {
                    pos: self.cfg.home,
                    carried: None,
                };
                spec.n_agents
            ],
            resources,
            invaders: vec![Invader { pos: self.cfg.home, alive: false }; self.cfg.max_invaders],
            step_count: 0,
        };
        self.last_actions = vec![Action::NoOp as usize; spec.n_agents];
        self.spec = spec;
        Ok(self.observation())
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &TeamSpec {
        &self.spec
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn observation(&self) -> EntityObservation {
        observe_team(&self.state, &self.cfg, &self.last_actions)
    }

    /// Every action is always available; moves into walls leave the agent in place.
    pub fn available_actions(&self) -> Vec<[bool; N_ACTIONS]> {
        vec![[true; N_ACTIONS]; self.state.agents.len()]
    }

    pub fn done(&self) -> bool {
        self.state.step_count >= self.cfg.episode_limit
    }

    fn clamp_move(&self, p: Pos, a: Action) -> Pos {
        let (dx, dy) = a.delta();
        let max = self.cfg.grid_size - 1;
        Pos::new((p.x + dx).clamp(0, max), (p.y + dy).clamp(0, max))
    }

    pub fn step(&mut self, joint_action: &[usize]) -> Result<StepOutcome> {
        if self.done() {
            return Err(contract("step called on a finished episode"));
        }
        if joint_action.len() != self.state.agents.len() {
            return Err(contract(format!(
                "expected {} actions, got {}",
                self.state.agents.len(),
                joint_action.len()
            )));
        }
        let actions = joint_action
            .iter()
            .map(|&a| Action::from_index(a))
            .collect::<Result<Vec<_>>>()?;
        let mut info = StepInfo::default();
        self.state.step_count += 1;

        for (i, a) in actions.iter().enumerate() {
            self.state.agents[i].pos = self.clamp_move(self.state.agents[i].pos, *a);
        }
        for i in 0..self.state.agents.len() {
            let pos = self.state.agents[i].pos;
            for inv in self.state.invaders.iter_mut().filter(|v| v.alive && v.pos == pos) {
                inv.alive = false;
                info.intercepts += 1;
            }
            if self.state.agents[i].carried.is_none() {
                if let Some(r) = self.state.resources.iter_mut().find(|r| r.alive && r.pos == pos) {
                    r.alive = false;
                    self.state.agents[i].carried = Some(r.kind);
                }
            }
            if pos == self.state.home && self.state.agents[i].carried.is_some() {
                self.state.agents[i].carried = None;
                info.deposits += 1;
            }
        }

        self.move_invaders(&mut info);
        if self.state.step_count.is_multiple_of(self.cfg.invader_period) {
            info.spawned = self.spawn_invaders();
        }

        self.last_actions = joint_action.to_vec();
        let reward = self.cfg.deposit_reward * info.deposits as f64
            + self.cfg.intercept_reward * info.intercepts as f64
            + self.cfg.breach_penalty * info.breaches as f64;
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done: self.done(),
            info,
        })
    }

    /// Each live invader takes one greedy step toward home; reaching home is a
    /// breach, landing on an agent is an interception.
    fn move_invaders(&mut self, info: &mut StepInfo) {
        let home = self.state.home;
        for k in 0..self.state.invaders.len() {
            if !self.state.invaders[k].alive {
                continue;
            }
            let pos = self.state.invaders[k].pos;
            let next = self.clamp_move(pos, step_toward(pos, home));
            let inv = &mut self.state.invaders[k];
            inv.pos = next;
            if next == home {
                inv.alive = false;
                info.breaches += 1;
            } else if self.state.agents.iter().any(|a| a.pos == next) {
                inv.alive = false;
                info.intercepts += 1;
            }
        }
    }

    /// Spawn one invader on a uniformly drawn border cell. Returns the number
    /// spawned (0 when every invader slot is occupied).
    pub fn spawn_invaders(&mut self) -> usize {
        let Some(slot) = self.state.invaders.iter().position(|i| !i.alive) else {
            return 0;
        };
        let n = self.cfg.grid_size;
        let perimeter = 4 * (n - 1);
        let k = self.rng.random_range(0..perimeter);
        let pos = match k / (n - 1) {
            0 => Pos::new(k % (n - 1), 0),
            1 => Pos::new(n - 1, k % (n - 1)),
            2 => Pos::new(n - 1 - k % (n - 1), n - 1),
            _ => Pos::new(0, n - 1 - k % (n - 1)),
        };
        self.state.invaders[slot] = Invader { pos, alive: true };
        1
    }

    #[cfg(test)]
    pub(crate) fn state_mut(&mut self) -> &mut WorldState {
        &mut self.state
    }
}
