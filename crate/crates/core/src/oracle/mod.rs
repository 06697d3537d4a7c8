//! Exact oracle for return/cost conditioned policies on finite CMDPs.
//!
//! Rewards and costs are integers (scaled by declared units) so that the joint
//! `(return, cost)` law of every trajectory suffix has finite support and can be
//! computed exactly by backward dynamic programming.

mod analysis;
mod cmdp;
mod generate;
#[cfg(test)]
mod tests;

pub use analysis::{
    alignment_gap, cdt_conditioned_policy, coverage_alpha, discounted_action_values, make_consistent_f,
    near_determinism_epsilon, policy_value, suffix_distribution, AlignmentGap, ConditionedPolicy, ConditioningFn,
    PickRule, PolicyTable, PolicyValue, ReturnCostDistribution,
};
pub use cmdp::{BaseTriple, Outcome, Pair, TabularCMDP, TabularPolicy};
pub use generate::{random_behavior, random_cmdp, RandomCmdpSpec};
