//! Alignment-gap sweep over random tabular CMDPs.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use safeseq_core::oracle::{alignment_gap, make_consistent_f, random_behavior, random_cmdp, PickRule, RandomCmdpSpec};
use safeseq_core::rng::stream;

/// Family of instances: sizes are drawn uniformly up to the given maxima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
    pub epsilon: f64,
    pub reward_cost_noise: bool,
    pub rule: PickRule,
    /// Constant in front of the bound.
    pub c_const: f64,
    /// Gap tolerance for noise-free instances.
    pub exact_tol: f64,
    pub seeds: u64,
    pub base_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            max_states: 5,
            max_actions: 3,
            max_horizon: 6,
            epsilon: 0.0,
            reward_cost_noise: false,
            rule: PickRule::MaxCoverage,
            c_const: 10.0,
            exact_tol: 1e-9,
            seeds: 50,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub epsilon: f64,
    pub alpha_f: f64,
    pub reward_gap: f64,
    pub cost_gap: f64,
    pub bound: f64,
    pub pass: bool,
}

impl SweepRow {
    pub fn max_gap(&self) -> f64 {
        self.reward_gap.abs().max(self.cost_gap.abs())
    }
}

/// Instance `seed` of the family; the same seed gives the same base dynamics for every epsilon.
pub fn sweep_one(cfg: &SweepConfig, seed: u64) -> safeseq_core::Result<SweepRow> {
    let mut rng = stream(cfg.base_seed, seed);
    let spec = RandomCmdpSpec {
        n_states: rng.random_range(2..=cfg.max_states.max(2)),
        n_actions: rng.random_range(2..=cfg.max_actions.max(2)),
        horizon: rng.random_range(1..=cfg.max_horizon.max(1)),
        epsilon: cfg.epsilon,
        reward_cost_noise: cfg.reward_cost_noise,
    };
    let beta_seed: u64 = rng.random();
    let m = random_cmdp(&spec, &mut rng)?;
    let beta = random_behavior(spec.n_states, spec.n_actions, &mut stream(beta_seed, 0));
    let f = make_consistent_f(&m, &beta, cfg.rule)?;
    let gap = alignment_gap(&m, &beta, &f, cfg.c_const)?;
    let max_gap = gap.reward_gap.abs().max(gap.cost_gap.abs());
    let pass = if cfg.epsilon == 0.0 { max_gap <= cfg.exact_tol } else { gap.within_bound() };
    Ok(SweepRow {
        seed,
        n_states: spec.n_states,
        n_actions: spec.n_actions,
        horizon: spec.horizon,
        epsilon: cfg.epsilon,
        alpha_f: gap.alpha_f,
        reward_gap: gap.reward_gap,
        cost_gap: gap.cost_gap,
        bound: gap.bound_rhs,
        pass,
    })
}

/// Runs all seeds in parallel on the current rayon pool; rows come back in seed order.
pub fn sweep(cfg: &SweepConfig) -> safeseq_core::Result<Vec<SweepRow>> {
    (0..cfg.seeds).into_par_iter().map(|s| sweep_one(cfg, s)).collect()
}
