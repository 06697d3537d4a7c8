//! Toy CMDP environments, scripted behavior mixtures and dataset degradation.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::oracle::{BaseTriple, Outcome, TabularCMDP};
use crate::rng::{normal, stream, Rng};
use crate::trajectory::{Trajectory, TrajectoryDataset};

/// 1-D corridor: state `(position, velocity)`, action is an acceleration in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorridorSpec {
    pub length: f64,
    pub velocity_limit: f64,
    pub max_speed: f64,
    pub accel_scale: f64,
    pub horizon: usize,
    /// Standard deviation of Gaussian noise on each velocity update.
    pub epsilon: f64,
    pub c_max: f64,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        Self { length: 100.0, velocity_limit: 0.5, max_speed: 1.0, accel_scale: 0.1, horizon: 100, epsilon: 0.0, c_max: 1.0 }
    }
}

/// Grid world with a rewarding goal cell and costly hazard cells.
///
/// Actions: 0 up, 1 down, 2 left, 3 right, 4 stay. Cells are indexed `y * width + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub hazards: Vec<(usize, usize)>,
    pub goal_reward: f64,
    pub hazard_cost: f64,
    pub horizon: usize,
    /// Probability that the move is replaced by a uniformly random neighbor.
    pub epsilon: f64,
    pub c_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width: 4,
            height: 3,
            start: (0, 0),
            goal: (3, 0),
            hazards: vec![(1, 0), (2, 0)],
            goal_reward: 1.0,
            hazard_cost: 1.0,
            horizon: 8,
            epsilon: 0.0,
            c_max: 1.0,
        }
    }
}

pub const GRID_ACTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    PointCorridor(CorridorSpec),
    TabularGrid(GridSpec),
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::PointCorridor(CorridorSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: usize,
    pub obs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next: EnvState,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        match self {
            EnvSpec::PointCorridor(c) => {
                if c.horizon == 0 {
                    problems.push("horizon must be >= 1".into());
                }
                if !(c.length > 0.0) || !(c.velocity_limit > 0.0) || !(c.max_speed > 0.0) || !(c.accel_scale > 0.0) {
                    problems.push("corridor length, velocity_limit, max_speed and accel_scale must be positive".into());
                }
                if !(c.epsilon >= 0.0) {
                    problems.push(format!("epsilon {} must be >= 0", c.epsilon));
                }
                if !(c.c_max >= 1.0) {
                    problems.push(format!("c_max {} is below the per-step cost 1", c.c_max));
                }
            }
            EnvSpec::TabularGrid(g) => {
                if g.horizon == 0 {
                    problems.push("horizon must be >= 1".into());
                }
                if g.width == 0 || g.height == 0 {
                    problems.push("grid must have at least one cell".into());
                }
                let inside = |(x, y): (usize, usize)| x < g.width && y < g.height;
                if !inside(g.start) || !inside(g.goal) || !g.hazards.iter().all(|&h| inside(h)) {
                    problems.push("start, goal and hazards must lie inside the grid".into());
                }
                if g.hazards.contains(&g.goal) {
                    problems.push("goal cannot be a hazard".into());
                }
                if !(0.0..=1.0).contains(&g.epsilon) {
                    problems.push(format!("epsilon {} outside [0, 1]", g.epsilon));
                }
                if !(g.hazard_cost >= 0.0) || g.hazard_cost > g.c_max {
                    problems.push(format!("hazard_cost {} must lie in [0, c_max {}]", g.hazard_cost, g.c_max));
                }
                if !g.goal_reward.is_finite() {
                    problems.push("goal_reward must be finite".into());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvSpec::PointCorridor(c) => c.horizon,
            EnvSpec::TabularGrid(g) => g.horizon,
        }
    }

    pub fn c_max(&self) -> f64 {
        match self {
            EnvSpec::PointCorridor(c) => c.c_max,
            EnvSpec::TabularGrid(g) => g.c_max,
        }
    }

    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvSpec::PointCorridor(_) => 1,
            EnvSpec::TabularGrid(_) => GRID_ACTIONS,
        }
    }

    pub fn reset(&self) -> EnvState {
        match self {
            EnvSpec::PointCorridor(_) => EnvState { t: 0, obs: vec![0.0, 0.0] },
            EnvSpec::TabularGrid(g) => EnvState { t: 0, obs: vec![g.start.0 as f64, g.start.1 as f64] },
        }
    }

    /// Advances one step. Grid actions are one-hot style vectors decoded by argmax.
    pub fn step(&self, state: &EnvState, action: &[f64], rng: &mut Rng) -> Result<StepResult> {
        if action.len() != self.action_dim() || action.iter().any(|a| !(a.abs() <= 1.0)) {
            return Err(Error::Shape { op: "env_step action", lhs: [1, self.action_dim()], rhs: [1, action.len()] });
        }
        if state.obs.len() != 2 {
            return Err(Error::Shape { op: "env_step state", lhs: [1, 2], rhs: [1, state.obs.len()] });
        }
        match self {
            EnvSpec::PointCorridor(c) => Ok(corridor_step(c, state, action[0], rng)),
            EnvSpec::TabularGrid(g) => {
                let a = argmax(action);
                let cell = g.cell_of(state)?;
                let (next, reward, cost) = g.step_cell(cell, a, rng);
                let t = state.t + 1;
                Ok(StepResult { next: EnvState { t, obs: g.obs_of(next) }, reward, cost, done: t >= g.horizon })
            }
        }
    }
}

fn corridor_step(c: &CorridorSpec, state: &EnvState, a: f64, rng: &mut Rng) -> StepResult {
    let (pos, vel) = (state.obs[0], state.obs[1]);
    let mut v = vel + c.accel_scale * a;
    if c.epsilon > 0.0 {
        v += c.epsilon * normal(rng);
    }
    let v = v.clamp(-c.max_speed, c.max_speed);
    let p = pos + v;
    let cost = if v.abs() > c.velocity_limit || p < 0.0 || p > c.length { 1.0 } else { 0.0 };
    let t = state.t + 1;
    StepResult { next: EnvState { t, obs: vec![p, v] }, reward: v, cost, done: t >= c.horizon }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |best, (i, &x)| if x > xs[best] { i } else { best })
}

fn one_hot(a: usize) -> Vec<f64> {
    let mut v = vec![0.0; GRID_ACTIONS];
    v[a] = 1.0;
    v
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    fn cell(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    fn obs_of(&self, cell: usize) -> Vec<f64> {
        vec![(cell % self.width) as f64, (cell / self.width) as f64]
    }

    fn cell_of(&self, state: &EnvState) -> Result<usize> {
        let (x, y) = (state.obs[0], state.obs[1]);
        if x < 0.0 || y < 0.0 || libm::trunc(x) != x || libm::trunc(y) != y || x as usize >= self.width || y as usize >= self.height {
            return Err(invalid(format!("grid state {:?} is not a cell", state.obs)));
        }
        Ok(self.cell((x as usize, y as usize)))
    }

    /// Deterministic move; walls leave the agent in place.
    pub fn moved(&self, cell: usize, a: usize) -> usize {
        let (x, y) = (cell % self.width, cell / self.width);
        let (nx, ny) = match a {
            0 if y + 1 < self.height => (x, y + 1),
            1 if y > 0 => (x, y - 1),
            2 if x > 0 => (x - 1, y),
            3 if x + 1 < self.width => (x + 1, y),
            _ => (x, y),
        };
        self.cell((nx, ny))
    }

    fn neighbors(&self, cell: usize) -> [usize; 4] {
        [0, 1, 2, 3].map(|a| self.moved(cell, a))
    }

    fn reward_cost(&self, next: usize) -> (f64, f64) {
        let r = if next == self.cell(self.goal) { self.goal_reward } else { 0.0 };
        let c = if self.hazards.iter().any(|&h| self.cell(h) == next) { self.hazard_cost } else { 0.0 };
        (r, c)
    }

    pub fn step_cell(&self, cell: usize, a: usize, rng: &mut Rng) -> (usize, f64, f64) {
        let mut next = self.moved(cell, a);
        if self.epsilon > 0.0 && rng.random::<f64>() < self.epsilon {
            next = self.neighbors(cell)[rng.random_range(0..4)];
        }
        let (r, c) = self.reward_cost(next);
        (next, r, c)
    }

    /// Exports the grid as a tabular CMDP with rewards in units of `goal_reward`
    /// and costs in units of `hazard_cost`.
    pub fn to_cmdp(&self) -> Result<TabularCMDP> {
        EnvSpec::TabularGrid(self.clone()).validate()?;
        let r_unit = if self.goal_reward != 0.0 { self.goal_reward.abs() } else { 1.0 };
        let c_unit = if self.hazard_cost > 0.0 { self.hazard_cost } else { 1.0 };
        let units = |next: usize| {
            let (r, c) = self.reward_cost(next);
            (libm::round(r / r_unit) as i64, libm::round(c / c_unit) as i64)
        };
        let n = self.n_cells();
        let mut outcomes = Vec::with_capacity(n * GRID_ACTIONS);
        let mut base = Vec::with_capacity(n * GRID_ACTIONS);
        for s in 0..n {
            for a in 0..GRID_ACTIONS {
                let det = self.moved(s, a);
                let (r, c) = units(det);
                base.push(BaseTriple { next: det, reward: r, cost: c });
                let mut mass: BTreeMap<usize, f64> = BTreeMap::new();
                *mass.entry(det).or_default() += 1.0 - self.epsilon;
                for nb in self.neighbors(s) {
                    *mass.entry(nb).or_default() += self.epsilon / 4.0;
                }
                outcomes.push(
                    mass.into_iter()
                        .filter(|&(_, p)| p > 0.0)
                        .map(|(next, prob)| {
                            let (reward, cost) = units(next);
                            Outcome { next, reward, cost, prob }
                        })
                        .collect(),
                );
            }
        }
        let mut init = vec![0.0; n];
        init[self.cell(self.start)] = 1.0;
        TabularCMDP::new(n, GRID_ACTIONS, self.horizon, outcomes, base, init, self.epsilon, r_unit, c_unit)
    }

    /// Shortest-path first moves to the goal (BFS), optionally avoiding hazards.
    fn route(&self, avoid_hazards: bool) -> Vec<Option<usize>> {
        let n = self.n_cells();
        let blocked = |c: usize| avoid_hazards && self.hazards.iter().any(|&h| self.cell(h) == c);
        let mut dist = vec![usize::MAX; n];
        let goal = self.cell(self.goal);
        dist[goal] = 0;
        let mut queue = VecDeque::from([goal]);
        while let Some(c) = queue.pop_front() {
            for p in 0..n {
                if dist[p] == usize::MAX && !blocked(p) && (0..4).any(|a| self.moved(p, a) == c) {
                    dist[p] = dist[c] + 1;
                    queue.push_back(p);
                }
            }
        }
        (0..n)
            .map(|s| {
                if s == goal {
                    return Some(4);
                }
                (0..4).find(|&a| {
                    let nx = self.moved(s, a);
                    nx != s && dist[nx] != usize::MAX && dist[nx] + 1 == dist[s]
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    Aggressive,
    Cautious,
    Random,
}

impl core::str::FromStr for Controller {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "aggressive" => Ok(Controller::Aggressive),
            "cautious" => Ok(Controller::Cautious),
            "random" => Ok(Controller::Random),
            other => Err(invalid(format!("unknown controller {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub controller: Controller,
    pub weight: f64,
}

/// Mixture of scripted controllers; one controller is drawn per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorPolicySpec {
    pub mixture: Vec<MixtureEntry>,
    /// Corridor: Gaussian std added to the action. Grid: probability of a random action.
    pub action_noise: f64,
}

impl Default for BehaviorPolicySpec {
    fn default() -> Self {
        Self {
            mixture: vec![
                MixtureEntry { controller: Controller::Aggressive, weight: 0.4 },
                MixtureEntry { controller: Controller::Cautious, weight: 0.4 },
                MixtureEntry { controller: Controller::Random, weight: 0.2 },
            ],
            action_noise: 0.1,
        }
    }
}

impl BehaviorPolicySpec {
    pub fn only(controller: Controller, action_noise: f64) -> Self {
        Self { mixture: vec![MixtureEntry { controller, weight: 1.0 }], action_noise }
    }

    /// Parses `aggressive=0.4,cautious=0.4,random=0.2`.
    pub fn parse_mix(s: &str, action_noise: f64) -> Result<Self> {
        let mixture = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|part| {
                let (name, w) = part.split_once('=').ok_or_else(|| invalid(format!("mixture entry {part:?} is not name=weight")))?;
                let weight = w.trim().parse::<f64>().map_err(|e| invalid(format!("weight {w:?}: {e}")))?;
                Ok(MixtureEntry { controller: name.parse()?, weight })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = Self { mixture, action_noise };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixture.is_empty() {
            return Err(invalid("behavior mixture is empty"));
        }
        if self.mixture.iter().any(|m| !(m.weight >= 0.0)) {
            return Err(invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = self.mixture.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        if !(self.action_noise >= 0.0) {
            return Err(invalid("action_noise must be >= 0"));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut Rng) -> Controller {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for m in &self.mixture {
            acc += m.weight;
            if u < acc {
                return m.controller;
            }
        }
        self.mixture.last().map_or(Controller::Random, |m| m.controller)
    }
}

const RANDOM_HOLD: usize = 10;

/// Per-episode controller parameters.
enum Plan {
    Speed { low: f64, high: f64, burst: core::ops::Range<usize> },
    /// Fresh uniform cruise speed every `RANDOM_HOLD` steps.
    Wander(Vec<f64>),
    Random,
    Route(Vec<Option<usize>>),
}

impl Plan {
    fn new(env: &EnvSpec, controller: Controller, rng: &mut Rng) -> Self {
        match (env, controller) {
            (EnvSpec::PointCorridor(c), Controller::Random) => {
                Plan::Wander((0..c.horizon.div_ceil(RANDOM_HOLD)).map(|_| rng.random_range(0.0..c.max_speed)).collect())
            }
            (_, Controller::Random) => Plan::Random,
            (EnvSpec::PointCorridor(c), Controller::Cautious) => {
                let v = rng.random_range(0.2..0.9) * c.velocity_limit;
                Plan::Speed { low: v, high: v, burst: 0..0 }
            }
            (EnvSpec::PointCorridor(c), Controller::Aggressive) => {
                let low = rng.random_range(0.6..0.9) * c.velocity_limit;
                let high = rng.random_range(1.2..2.0) * c.velocity_limit;
                let start = rng.random_range(0..c.horizon / 2 + 1);
                let len = rng.random_range(5.min(c.horizon - start)..=c.horizon - start);
                Plan::Speed { low, high, burst: start..start + len }
            }
            (EnvSpec::TabularGrid(g), Controller::Cautious) => Plan::Route(g.route(true)),
            (EnvSpec::TabularGrid(g), Controller::Aggressive) => Plan::Route(g.route(false)),
        }
    }

    fn act(&self, env: &EnvSpec, state: &EnvState, noise: f64, rng: &mut Rng) -> Vec<f64> {
        match (self, env) {
            (Plan::Speed { low, high, burst }, EnvSpec::PointCorridor(c)) => {
                let target = if burst.contains(&state.t) { *high } else { *low };
                let a = 0.5 * (target - state.obs[1]) / c.accel_scale + noise * normal(rng);
                vec![a.clamp(-1.0, 1.0)]
            }
            (Plan::Wander(targets), EnvSpec::PointCorridor(c)) => {
                let target = targets[(state.t / RANDOM_HOLD).min(targets.len() - 1)];
                let a = 0.5 * (target - state.obs[1]) / c.accel_scale + noise * normal(rng);
                vec![a.clamp(-1.0, 1.0)]
            }
            (_, EnvSpec::PointCorridor(_)) => vec![rng.random_range(-1.0..=1.0)],
            (Plan::Route(route), EnvSpec::TabularGrid(g)) => {
                let cell = g.cell((state.obs[0] as usize, state.obs[1] as usize));
                let a = match route[cell] {
                    Some(a) if rng.random::<f64>() >= noise => a,
                    _ => rng.random_range(0..GRID_ACTIONS),
                };
                one_hot(a)
            }
            (_, EnvSpec::TabularGrid(_)) => one_hot(rng.random_range(0..GRID_ACTIONS)),
        }
    }
}

/// One behavior episode driven by the rng stream `(seed, index)`.
pub fn generate_episode(env: &EnvSpec, behavior: &BehaviorPolicySpec, seed: u64, index: u64) -> Result<Trajectory> {
    let mut rng = stream(seed, index);
    let plan = Plan::new(env, behavior.draw(&mut rng), &mut rng);
    let mut state = env.reset();
    let (mut states, mut actions, mut rewards, mut costs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    loop {
        let action = plan.act(env, &state, behavior.action_noise, &mut rng);
        let step = env.step(&state, &action, &mut rng)?;
        states.push(core::mem::replace(&mut state, step.next).obs);
        actions.push(action);
        rewards.push(step.reward);
        costs.push(step.cost);
        if step.done {
            break;
        }
    }
    Trajectory::new(states, actions, rewards, costs, env.c_max())
}

/// Sequential dataset generation; episode `i` uses its own stream so parallel callers agree.
pub fn generate_dataset(env: &EnvSpec, behavior: &BehaviorPolicySpec, n_episodes: usize, seed: u64) -> Result<TrajectoryDataset> {
    if n_episodes == 0 {
        return Err(invalid("n_episodes must be >= 1"));
    }
    env.validate()?;
    behavior.validate()?;
    let trajs = (0..n_episodes as u64).map(|i| generate_episode(env, behavior, seed, i)).collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(trajs, env.c_max())
}

/// Indices sorted by return ascending, ties by original index.
fn ranked(ds: &TrajectoryDataset) -> Vec<usize> {
    let returns = ds.returns();
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.sort_by(|&a, &b| returns[a].total_cmp(&returns[b]).then(a.cmp(&b)));
    idx
}

fn keep_count(n: usize, rho: f64) -> usize {
    libm::floor(rho / 100.0 * n as f64 + 1e-9) as usize
}

/// Keeps the `floor(rho% * n)` lowest-return trajectories in their original order.
pub fn degrade_bottom(ds: &TrajectoryDataset, rho_percent: f64) -> Result<TrajectoryDataset> {
    if !(rho_percent > 0.0 && rho_percent <= 100.0) {
        return Err(invalid(format!("rho {rho_percent} outside (0, 100]")));
    }
    let k = keep_count(ds.len(), rho_percent);
    if k == 0 {
        return Err(Error::Empty("degraded dataset"));
    }
    let mut keep = ranked(ds)[..k].to_vec();
    keep.sort_unstable();
    ds.subset(&keep)
}

/// Keeps the union of the top and bottom `rho%` by return, each trajectory once.
pub fn degrade_imbalance(ds: &TrajectoryDataset, rho_percent: f64) -> Result<TrajectoryDataset> {
    if !(rho_percent > 0.0 && rho_percent <= 50.0) {
        return Err(invalid(format!("rho {rho_percent} outside (0, 50]")));
    }
    let k = keep_count(ds.len(), rho_percent);
    if k == 0 {
        return Err(Error::Empty("degraded dataset"));
    }
    let order = ranked(ds);
    let mut keep: Vec<usize> = order[..k].iter().chain(&order[order.len() - k..]).copied().collect();
    keep.sort_unstable();
    keep.dedup();
    ds.subset(&keep)
}
