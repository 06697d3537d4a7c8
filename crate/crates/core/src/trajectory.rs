//! Trajectories, return/cost-to-go annotations, datasets and score normalization.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Suffix sums accumulated from the end, so `out[0]` is bit-identical to
/// [`trajectory_return`] / [`trajectory_cost`].
fn suffix_sums(values: &[f64]) -> Vec<f64> {
    let mut out = alloc::vec![0.0; values.len()];
    let mut acc = 0.0;
    for (o, &v) in out.iter_mut().zip(values).rev() {
        acc += v;
        *o = acc;
    }
    out
}

fn suffix_total(values: &[f64]) -> f64 {
    values.iter().rev().fold(0.0, |acc, &v| acc + v)
}

/// Return-to-go: `out[t] = rewards[t] + rewards[t+1] + ...`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Empty("rewards"));
    }
    Ok(suffix_sums(rewards))
}

/// Cost-to-go over nonnegative per-step costs.
pub fn compute_ctg(costs: &[f64]) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::Empty("costs"));
    }
    check_costs(costs)?;
    Ok(suffix_sums(costs))
}

fn check_costs(costs: &[f64]) -> Result<()> {
    match costs.iter().position(|c| !(*c >= 0.0)) {
        Some(index) => Err(Error::NegativeCost { index, value: costs[index] }),
        None => Ok(()),
    }
}

/// Min-max normalized return against dataset extremes.
pub fn normalized_return(r_pi: f64, r_min: f64, r_max: f64) -> Result<f64> {
    if !(r_max > r_min) {
        return Err(Error::Degenerate("r_max must exceed r_min"));
    }
    Ok((r_pi - r_min) / (r_max - r_min))
}

/// Cumulative cost divided by the evaluation threshold.
pub fn normalized_cost(c_pi: f64, zeta: f64) -> Result<f64> {
    if !(zeta > 0.0) {
        return Err(invalid(format!("cost threshold must be positive, got {zeta}")));
    }
    if !(c_pi >= 0.0) {
        return Err(invalid(format!("cumulative cost must be nonnegative, got {c_pi}")));
    }
    Ok(c_pi / zeta)
}

/// One episode of `(state, action, reward, cost)` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
}

impl Trajectory {
    /// Validates aligned lengths, consistent vector widths, actions in `[-1, 1]`
    /// and costs in `[0, c_max]`.
    pub fn new(
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        costs: Vec<f64>,
        c_max: f64,
    ) -> Result<Self> {
        let h = rewards.len();
        if h == 0 {
            return Err(Error::Empty("trajectory"));
        }
        if states.len() != h || actions.len() != h || costs.len() != h {
            return Err(invalid(format!(
                "length mismatch: states {}, actions {}, rewards {h}, costs {}",
                states.len(),
                actions.len(),
                costs.len()
            )));
        }
        let sd = states[0].len();
        let ad = actions[0].len();
        if states.iter().any(|s| s.len() != sd) || actions.iter().any(|a| a.len() != ad) {
            return Err(invalid("state/action width varies within trajectory"));
        }
        if let Some(t) = actions.iter().position(|a| a.iter().any(|x| !(x.abs() <= 1.0))) {
            return Err(invalid(format!("action at step {t} outside [-1, 1]")));
        }
        check_costs(&costs)?;
        if let Some(t) = costs.iter().position(|&c| c > c_max) {
            return Err(invalid(format!("cost {} at step {t} exceeds c_max {c_max}", costs[t])));
        }
        if rewards.iter().chain(states.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("trajectory"));
        }
        Ok(Self { states, actions, rewards, costs })
    }

    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }
}

pub fn trajectory_return(t: &Trajectory) -> Result<f64> {
    if t.rewards.is_empty() {
        return Err(Error::Empty("rewards"));
    }
    Ok(suffix_total(&t.rewards))
}

pub fn trajectory_cost(t: &Trajectory) -> Result<f64> {
    if t.costs.is_empty() {
        return Err(Error::Empty("costs"));
    }
    Ok(suffix_total(&t.costs))
}

/// A trajectory with its return-to-go and cost-to-go sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTrajectory {
    pub base: Trajectory,
    pub rtg: Vec<f64>,
    pub ctg: Vec<f64>,
}

impl AnnotatedTrajectory {
    pub fn new(base: Trajectory) -> Result<Self> {
        let rtg = compute_rtg(&base.rewards)?;
        let ctg = compute_ctg(&base.costs)?;
        Ok(Self { base, rtg, ctg })
    }

    pub fn ret(&self) -> f64 {
        self.rtg[0]
    }

    pub fn cost(&self) -> f64 {
        self.ctg[0]
    }

    pub fn horizon(&self) -> usize {
        self.base.horizon()
    }
}

/// Offline dataset with summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    trajectories: Vec<AnnotatedTrajectory>,
    r_min: f64,
    r_max: f64,
    state_dim: usize,
    action_dim: usize,
    c_max: f64,
}

impl TrajectoryDataset {
    /// Builds a dataset; errors name the offending trajectory index.
    pub fn new(trajectories: Vec<Trajectory>, c_max: f64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let state_dim = trajectories[0].state_dim();
        let action_dim = trajectories[0].action_dim();
        let mut annotated = Vec::with_capacity(trajectories.len());
        for (index, t) in trajectories.into_iter().enumerate() {
            let t = Trajectory::new(t.states, t.actions, t.rewards, t.costs, c_max)
                .map_err(|e| Error::Trajectory { index, reason: format!("{e}") })?;
            if t.state_dim() != state_dim || t.action_dim() != action_dim {
                return Err(Error::Trajectory {
                    index,
                    reason: format!(
                        "dimension mismatch: state_dim {} action_dim {} (dataset {state_dim}/{action_dim})",
                        t.state_dim(),
                        t.action_dim()
                    ),
                });
            }
            annotated.push(AnnotatedTrajectory::new(t)?);
        }
        Ok(Self::from_annotated(annotated, state_dim, action_dim, c_max))
    }

    fn from_annotated(trajectories: Vec<AnnotatedTrajectory>, state_dim: usize, action_dim: usize, c_max: f64) -> Self {
        let (r_min, r_max) = trajectories
            .iter()
            .map(AnnotatedTrajectory::ret)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
        Self { trajectories, r_min, r_max, state_dim, action_dim, c_max }
    }

    /// Keeps the trajectories at `indices` (in the given order) and recomputes statistics.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("dataset subset"));
        }
        let picked = indices
            .iter()
            .map(|&i| {
                self.trajectories
                    .get(i)
                    .cloned()
                    .ok_or_else(|| invalid(format!("trajectory index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_annotated(picked, self.state_dim, self.action_dim, self.c_max))
    }

    pub fn trajectories(&self) -> &[AnnotatedTrajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(AnnotatedTrajectory::ret).collect()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.trajectories.iter().map(AnnotatedTrajectory::cost).collect()
    }

    pub fn max_cost(&self) -> f64 {
        self.costs().into_iter().fold(0.0, f64::max)
    }

    /// Linear-interpolated quantile of trajectory costs, `q` in `[0, 1]`.
    pub fn cost_quantile(&self, q: f64) -> Result<f64> {
        quantile(&self.costs(), q)
    }

    pub fn summary(&self) -> DatasetSummary {
        let costs = self.costs();
        let qs = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];
        DatasetSummary {
            n_trajectories: self.len(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            c_max: self.c_max,
            r_min: self.r_min,
            r_max: self.r_max,
            cost_quantiles: qs.iter().map(|&q| (q, quantile(&costs, q).unwrap_or(0.0))).collect(),
            return_cost_correlation: pearson(&self.returns(), &costs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_trajectories: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub c_max: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// `(q, value)` pairs.
    pub cost_quantiles: Vec<(f64, f64)>,
    /// `None` when either marginal is constant.
    pub return_cost_correlation: Option<f64>,
}

pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile input"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn traj(rewards: Vec<f64>, costs: Vec<f64>) -> Trajectory {
        let h = rewards.len();
        Trajectory::new(vec![vec![0.0]; h], vec![vec![0.0]; h], rewards, costs, 10.0).unwrap()
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_rtg(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(compute_rtg(&[5.0]).unwrap(), vec![5.0]);
        assert_eq!(compute_rtg(&[]), Err(Error::Empty("rewards")));
    }

    #[test]
    fn ctg_examples() {
        assert_eq!(compute_ctg(&[0.0, 1.0, 0.0]).unwrap(), vec![1.0, 1.0, 0.0]);
        assert_eq!(compute_ctg(&[2.0, 2.0]).unwrap(), vec![4.0, 2.0]);
        assert!(matches!(compute_ctg(&[-1.0]), Err(Error::NegativeCost { index: 0, .. })));
    }

    #[test]
    fn return_and_cost() {
        assert_eq!(trajectory_return(&traj(vec![1.0, 1.0, 1.0], vec![0.0; 3])).unwrap(), 3.0);
        assert_eq!(trajectory_return(&traj(vec![2.0, -1.0], vec![0.0; 2])).unwrap(), 1.0);
        let empty = Trajectory { states: vec![], actions: vec![], rewards: vec![], costs: vec![] };
        assert!(trajectory_cost(&empty).is_err());
        assert!(Trajectory::new(vec![], vec![], vec![], vec![], 1.0).is_err());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalized_return(5.0, 0.0, 10.0).unwrap(), 0.5);
        assert_eq!(normalized_return(0.0, 0.0, 10.0).unwrap(), 0.0);
        assert_eq!(normalized_return(10.0, 0.0, 10.0).unwrap(), 1.0);
        assert!(normalized_return(1.0, 3.0, 3.0).is_err());
        assert_eq!(normalized_cost(30.0, 20.0).unwrap(), 1.5);
        assert_eq!(normalized_cost(0.0, 40.0).unwrap(), 0.0);
        assert_eq!(normalized_cost(20.0, 20.0).unwrap(), 1.0);
        assert!(normalized_cost(1.0, 0.0).is_err());
        assert!(normalized_cost(1.0, -2.0).is_err());
    }

    #[test]
    fn dataset_rejects_mismatched_dims() {
        let a = traj(vec![1.0], vec![0.0]);
        let b = Trajectory { actions: vec![vec![0.0, 0.0]], ..a.clone() };
        match TrajectoryDataset::new(vec![a, b], 10.0) {
            Err(Error::Trajectory { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(vec![vec![0.0]], vec![vec![1.5]], vec![0.0], vec![0.0], 1.0).is_err());
        assert!(Trajectory::new(vec![vec![0.0]], vec![vec![0.5]], vec![0.0], vec![2.0], 1.0).is_err());
        assert!(Trajectory::new(vec![vec![0.0]; 2], vec![vec![0.5]], vec![0.0], vec![0.0], 1.0).is_err());
    }

    #[test]
    fn dataset_stats_and_quantiles() {
        let d = TrajectoryDataset::new(
            vec![traj(vec![1.0, 2.0], vec![0.0, 1.0]), traj(vec![4.0], vec![3.0]), traj(vec![-1.0], vec![0.0])],
            10.0,
        )
        .unwrap();
        assert_eq!(d.r_min(), -1.0);
        assert_eq!(d.r_max(), 4.0);
        assert_eq!(d.cost_quantile(0.5).unwrap(), 1.0);
        assert_eq!(d.cost_quantile(1.0).unwrap(), 3.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.25).unwrap(), 2.5);
        let sub = d.subset(&[0, 2]).unwrap();
        assert_eq!((sub.r_min(), sub.r_max()), (-1.0, 3.0));
    }

    proptest! {
        #[test]
        fn rtg_differences_recover_rewards(rewards in prop::collection::vec(-100.0f64..100.0, 1..60)) {
            let rtg = compute_rtg(&rewards).unwrap();
            for t in 0..rewards.len() - 1 {
                prop_assert!((rtg[t] - rtg[t + 1] - rewards[t]).abs() <= 1e-9 * (1.0 + rtg[t].abs()));
            }
            prop_assert_eq!(rtg[rewards.len() - 1], rewards[rewards.len() - 1]);
        }

        #[test]
        fn annotation_heads_equal_totals(
            rewards in prop::collection::vec(-10.0f64..10.0, 1..40),
            seed in prop::collection::vec(0.0f64..1.0, 40),
        ) {
            let costs: Vec<f64> = seed[..rewards.len()].to_vec();
            let t = traj(rewards, costs);
            let a = AnnotatedTrajectory::new(t.clone()).unwrap();
            prop_assert_eq!(a.rtg[0], trajectory_return(&t).unwrap());
            prop_assert_eq!(a.ctg[0], trajectory_cost(&t).unwrap());
        }

        #[test]
        fn normalized_return_shift_invariant(r in -50.0f64..50.0, lo in -50.0f64..0.0, span in 0.5f64..50.0, shift in -100.0f64..100.0) {
            let a = normalized_return(r, lo, lo + span).unwrap();
            let b = normalized_return(r + shift, lo + shift, lo + span + shift).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
