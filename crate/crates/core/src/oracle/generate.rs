use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::cmdp::{BaseTriple, TabularCMDP, TabularPolicy};
use crate::error::Result;
use crate::rng::Rng;

/// Shape of a random instance. Rewards and costs are drawn from `{0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomCmdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub epsilon: f64,
    pub reward_cost_noise: bool,
}

/// Random base dynamics with a random full-support initial distribution, perturbed by `epsilon`.
pub fn random_cmdp(spec: &RandomCmdpSpec, rng: &mut Rng) -> Result<TabularCMDP> {
    let base = (0..spec.n_states * spec.n_actions)
        .map(|_| BaseTriple {
            next: rng.random_range(0..spec.n_states),
            reward: rng.random_range(0..=1),
            cost: rng.random_range(0..=1),
        })
        .collect();
    let init = random_simplex(spec.n_states, rng);
    let m = TabularCMDP::deterministic(spec.n_states, spec.n_actions, spec.horizon, base, init)?;
    if spec.epsilon > 0.0 {
        m.perturbed(spec.epsilon, spec.reward_cost_noise)
    } else {
        Ok(m)
    }
}

/// Random stationary behavior; every action keeps positive probability.
pub fn random_behavior(n_states: usize, n_actions: usize, rng: &mut Rng) -> TabularPolicy {
    let rows = (0..n_states).map(|_| random_simplex(n_actions, rng)).collect();
    TabularPolicy::new(rows).expect("normalized rows")
}

fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}
