use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Integer-scaled `(return, cost)`.
pub type Pair = (i64, i64);

/// One possible result of taking an action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub next: usize,
    pub reward: i64,
    pub cost: i64,
    pub prob: f64,
}

/// Deterministic reference transition of an `(s, a)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseTriple {
    pub next: usize,
    pub reward: i64,
    pub cost: i64,
}

const ROW_TOL: f64 = 1e-12;

/// Finite-horizon CMDP with integer rewards and costs.
///
/// Outcomes are stored per `(s, a)` at index `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularCMDP {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    outcomes: Vec<Vec<Outcome>>,
    base: Vec<BaseTriple>,
    init_dist: Vec<f64>,
    epsilon: f64,
    reward_unit: f64,
    cost_unit: f64,
}

impl TabularCMDP {
    /// Validates stochastic rows, nonnegative costs and the declared perturbation level.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        outcomes: Vec<Vec<Outcome>>,
        base: Vec<BaseTriple>,
        init_dist: Vec<f64>,
        epsilon: f64,
        reward_unit: f64,
        cost_unit: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return Err(invalid("n_states, n_actions and horizon must be positive"));
        }
        let pairs = n_states * n_actions;
        if outcomes.len() != pairs || base.len() != pairs {
            return Err(invalid(format!("expected {pairs} (s, a) entries")));
        }
        if init_dist.len() != n_states || (init_dist.iter().sum::<f64>() - 1.0).abs() > ROW_TOL || init_dist.iter().any(|p| *p < 0.0) {
            return Err(invalid("initial distribution must be a probability vector over states"));
        }
        if !(epsilon >= 0.0) || !(reward_unit > 0.0) || !(cost_unit > 0.0) {
            return Err(invalid("epsilon must be >= 0 and units > 0"));
        }
        let m = Self { n_states, n_actions, horizon, outcomes, base, init_dist, epsilon, reward_unit, cost_unit };
        for s in 0..n_states {
            for a in 0..n_actions {
                let outs = m.outcomes(s, a);
                let b = m.base(s, a);
                if b.next >= n_states || b.cost < 0 {
                    return Err(invalid(format!("bad base triple at ({s}, {a})")));
                }
                if outs.iter().any(|o| o.next >= n_states || !(o.prob >= 0.0)) {
                    return Err(invalid(format!("bad outcome at ({s}, {a})")));
                }
                if let Some(o) = outs.iter().find(|o| o.cost < 0) {
                    return Err(Error::NegativeCost { index: s * n_actions + a, value: o.cost as f64 });
                }
                let total: f64 = outs.iter().map(|o| o.prob).sum();
                if (total - 1.0).abs() > ROW_TOL {
                    return Err(invalid(format!("transition row ({s}, {a}) sums to {total}")));
                }
            }
        }
        let measured = m.off_base_mass_max();
        if measured > epsilon + ROW_TOL {
            return Err(invalid(format!("off-base mass {measured} exceeds declared epsilon {epsilon}")));
        }
        Ok(m)
    }

    /// Deterministic CMDP; every `(s, a)` follows its base triple with probability one.
    pub fn deterministic(n_states: usize, n_actions: usize, horizon: usize, base: Vec<BaseTriple>, init_dist: Vec<f64>) -> Result<Self> {
        let outcomes = base
            .iter()
            .map(|b| vec![Outcome { next: b.next, reward: b.reward, cost: b.cost, prob: 1.0 }])
            .collect();
        Self::new(n_states, n_actions, horizon, outcomes, base, init_dist, 0.0, 1.0, 1.0)
    }

    /// Deterministic CMDP from real-valued rewards and costs expressed in `reward_unit` /
    /// `cost_unit` multiples; non-integer multiples are rejected.
    #[allow(clippy::too_many_arguments)]
    pub fn from_real(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        next: &[usize],
        reward: &[f64],
        cost: &[f64],
        init_dist: Vec<f64>,
        reward_unit: f64,
        cost_unit: f64,
    ) -> Result<Self> {
        if !(reward_unit > 0.0 && cost_unit > 0.0) {
            return Err(invalid("units must be positive"));
        }
        let scale = |v: f64, unit: f64, what: &'static str| -> Result<i64> {
            let x = v / unit;
            let r = libm::round(x);
            if (x - r).abs() > 1e-9 || !x.is_finite() {
                return Err(Error::NonInteger { what, value: v });
            }
            Ok(r as i64)
        };
        if next.len() != reward.len() || next.len() != cost.len() {
            return Err(invalid("next/reward/cost tables differ in length"));
        }
        let base = next
            .iter()
            .zip(reward)
            .zip(cost)
            .map(|((&n, &r), &c)| Ok(BaseTriple { next: n, reward: scale(r, reward_unit, "reward")?, cost: scale(c, cost_unit, "cost")? }))
            .collect::<Result<Vec<_>>>()?;
        let mut m = Self::deterministic(n_states, n_actions, horizon, base, init_dist)?;
        m.reward_unit = reward_unit;
        m.cost_unit = cost_unit;
        Ok(m)
    }

    /// Diverts `eps` of every `(s, a)`'s mass from the base successor, uniformly over the
    /// other states. With `reward_cost_noise` the diverted outcomes also carry zero reward
    /// and one extra unit of cost.
    pub fn perturbed(&self, eps: f64, reward_cost_noise: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(invalid(format!("perturbation {eps} outside [0, 1]")));
        }
        if self.n_states < 2 && eps > 0.0 {
            return Err(invalid("perturbation needs at least two states"));
        }
        let mut outcomes = Vec::with_capacity(self.base.len());
        for b in &self.base {
            let mut row = vec![Outcome { next: b.next, reward: b.reward, cost: b.cost, prob: 1.0 - eps }];
            if eps > 0.0 {
                let share = eps / (self.n_states - 1) as f64;
                for s in (0..self.n_states).filter(|&s| s != b.next) {
                    let (reward, cost) = if reward_cost_noise { (0, b.cost + 1) } else { (b.reward, b.cost) };
                    row.push(Outcome { next: s, reward, cost, prob: share });
                }
            }
            outcomes.push(row);
        }
        Self::new(
            self.n_states,
            self.n_actions,
            self.horizon,
            outcomes,
            self.base.clone(),
            self.init_dist.clone(),
            eps,
            self.reward_unit,
            self.cost_unit,
        )
    }

    /// The deterministic reference model of this CMDP.
    pub fn base_model(&self) -> Self {
        let mut m = Self::deterministic(self.n_states, self.n_actions, self.horizon, self.base.clone(), self.init_dist.clone())
            .expect("base model of a valid CMDP is valid");
        m.reward_unit = self.reward_unit;
        m.cost_unit = self.cost_unit;
        m
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        let mut m = self.clone();
        if horizon == 0 {
            return Err(invalid("horizon must be positive"));
        }
        m.horizon = horizon;
        Ok(m)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn declared_epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn reward_unit(&self) -> f64 {
        self.reward_unit
    }

    pub fn cost_unit(&self) -> f64 {
        self.cost_unit
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.outcomes[s * self.n_actions + a]
    }

    pub fn base(&self, s: usize, a: usize) -> BaseTriple {
        self.base[s * self.n_actions + a]
    }

    /// Marginal next-state distribution of `(s, a)`.
    pub fn transition(&self, s: usize, a: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.n_states];
        for o in self.outcomes(s, a) {
            p[o.next] += o.prob;
        }
        p
    }

    pub(crate) fn off_base_mass(&self, s: usize, a: usize) -> f64 {
        let b = self.base(s, a);
        self.outcomes(s, a)
            .iter()
            .filter(|o| o.next != b.next || o.reward != b.reward || o.cost != b.cost)
            .map(|o| o.prob)
            .sum()
    }

    pub(crate) fn off_base_mass_max(&self) -> f64 {
        (0..self.n_states)
            .flat_map(|s| (0..self.n_actions).map(move |a| (s, a)))
            .map(|(s, a)| self.off_base_mass(s, a))
            .fold(0.0, f64::max)
    }
}

/// Stationary tabular policy `probs[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
                return Err(invalid(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states] }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn check_shape(&self, m: &TabularCMDP) -> Result<()> {
        if self.probs.len() != m.n_states() || self.probs.iter().any(|r| r.len() != m.n_actions()) {
            return Err(invalid("policy shape does not match the CMDP"));
        }
        Ok(())
    }
}
