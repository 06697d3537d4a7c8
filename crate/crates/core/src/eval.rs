//! Zero-shot evaluation across cost thresholds.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{invalid, Error, Result};
use crate::policy::{CdtPolicy, ContextWindow};
use crate::real::Real;
use crate::rng::{stream, Rng};
use crate::trajectory::{normalized_cost, normalized_return, Trajectory, TrajectoryDataset};

/// Anything that maps a context window to the next action.
pub trait SequencePolicy {
    fn context_len(&self) -> usize;
    fn act(&self, window: &ContextWindow, rng: &mut Rng, deterministic: bool) -> Result<Vec<f64>>;
    /// Parameter fingerprint; constant for parameter-free policies.
    fn checksum(&self) -> u64;
}

impl<T: Real> SequencePolicy for CdtPolicy<T> {
    fn context_len(&self) -> usize {
        self.config().context_len
    }

    fn act(&self, window: &ContextWindow, rng: &mut Rng, deterministic: bool) -> Result<Vec<f64>> {
        self.sample_action(window, rng, deterministic)
    }

    fn checksum(&self) -> u64 {
        CdtPolicy::checksum(self)
    }
}

/// Wraps a policy and replaces every CTG token by zero before acting.
#[derive(Debug, Clone)]
pub struct CtgBlind<P>(pub P);

impl<P: SequencePolicy> SequencePolicy for CtgBlind<P> {
    fn context_len(&self) -> usize {
        self.0.context_len()
    }

    fn act(&self, window: &ContextWindow, rng: &mut Rng, deterministic: bool) -> Result<Vec<f64>> {
        let mut w = window.clone();
        w.ctg.iter_mut().for_each(|c| *c = 0.0);
        self.0.act(&w, rng, deterministic)
    }

    fn checksum(&self) -> u64 {
        self.0.checksum()
    }
}

/// Uniform actions in `[-1, 1]^d`.
#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub action_dim: usize,
}

impl SequencePolicy for RandomPolicy {
    fn context_len(&self) -> usize {
        1
    }

    fn act(&self, _: &ContextWindow, rng: &mut Rng, _: bool) -> Result<Vec<f64>> {
        Ok((0..self.action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }

    fn checksum(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRtgRule {
    DatasetMax,
    FractionOfMax(f64),
    /// Best dataset return among trajectories whose cost fits the threshold.
    BudgetMax,
}

/// Return statistics of the training data that evaluation conditions and normalizes on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnReference {
    pub r_min: f64,
    pub r_max: f64,
    /// `(cost, best return among trajectories costing at most that)`, strictly increasing in both.
    #[serde(default)]
    pub frontier: Vec<(f64, f64)>,
}

impl ReturnReference {
    /// A bare return range; enough for every rule except `BudgetMax`.
    pub fn range(r_min: f64, r_max: f64) -> Self {
        Self { r_min, r_max, frontier: Vec::new() }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut by_cost: Vec<(f64, f64)> = pairs.into_iter().map(|(ret, cost)| (cost, ret)).collect();
        if by_cost.is_empty() {
            return Err(Error::Empty("return reference"));
        }
        if by_cost.iter().any(|(c, r)| !c.is_finite() || !r.is_finite()) {
            return Err(invalid("return reference needs finite returns and costs"));
        }
        by_cost.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        let mut frontier: Vec<(f64, f64)> = Vec::new();
        for (c, r) in by_cost.iter().copied() {
            if frontier.last().is_none_or(|&(_, best)| r > best) {
                frontier.push((c, r));
            }
        }
        let r_min = by_cost.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let r_max = frontier.last().expect("nonempty").1;
        Ok(Self { r_min, r_max, frontier })
    }

    pub fn from_dataset(ds: &TrajectoryDataset) -> Self {
        let pairs = ds.trajectories().iter().map(|t| (t.ret(), t.cost()));
        Self::from_pairs(pairs).expect("datasets are nonempty and finite")
    }

    /// Best return affordable within `budget`; below the cheapest trajectory, that trajectory's return.
    pub fn best_within(&self, budget: f64) -> Option<f64> {
        let first = self.frontier.first()?;
        Some(self.frontier.iter().take_while(|p| p.0 <= budget).last().unwrap_or(first).1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub thresholds: Vec<f64>,
    pub episodes_per_threshold: usize,
    pub target_rtg_rule: TargetRtgRule,
    pub seed: u64,
    pub deterministic: bool,
    /// Clamp CTG tokens at zero once the budget is spent.
    pub clamp_ctg: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            thresholds: vec![10.0, 20.0, 40.0],
            episodes_per_threshold: 20,
            target_rtg_rule: TargetRtgRule::DatasetMax,
            seed: 0,
            deterministic: true,
            clamp_ctg: false,
        }
    }
}

impl EvalProtocol {
    /// The default protocol with per-threshold return targets.
    pub fn desk() -> Self {
        Self { target_rtg_rule: TargetRtgRule::BudgetMax, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Empty("thresholds"));
        }
        if let Some(z) = self.thresholds.iter().find(|z| !(**z > 0.0) || !z.is_finite()) {
            return Err(invalid(format!("threshold {z} must be positive and finite")));
        }
        if self.episodes_per_threshold == 0 {
            return Err(invalid("episodes_per_threshold must be >= 1"));
        }
        if let TargetRtgRule::FractionOfMax(f) = self.target_rtg_rule {
            if !(f > 0.0) || !f.is_finite() {
                return Err(invalid(format!("target RTG fraction {f} must be positive")));
            }
        }
        Ok(())
    }

    pub fn target_rtg(&self, reference: &ReturnReference, threshold: f64) -> Result<f64> {
        match self.target_rtg_rule {
            TargetRtgRule::DatasetMax => Ok(reference.r_max),
            TargetRtgRule::FractionOfMax(f) => Ok(f * reference.r_max),
            TargetRtgRule::BudgetMax => reference.best_within(threshold).ok_or_else(|| invalid("budget-max target RTG needs the dataset's return frontier")),
        }
    }
}

/// A realized episode plus the conditioning tokens seen at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Token before step `t`, plus the final token after the last step.
    pub rtg_tokens: Vec<f64>,
    pub ctg_tokens: Vec<f64>,
}

impl Rollout {
    pub fn ret(&self) -> f64 {
        self.trajectory.rewards.iter().sum()
    }

    pub fn cost(&self) -> f64 {
        self.trajectory.costs.iter().sum()
    }
}

/// Runs one episode, decrementing the RTG token by each reward and the CTG token by each cost.
pub fn rollout<P: SequencePolicy + ?Sized>(
    policy: &P,
    env: &EnvSpec,
    target_rtg: f64,
    target_ctg: f64,
    rng: &mut Rng,
    deterministic: bool,
    clamp_ctg: bool,
) -> Result<Rollout> {
    if !target_rtg.is_finite() || !target_ctg.is_finite() {
        return Err(Error::NonFinite("rollout targets"));
    }
    let k = policy.context_len();
    let mut state = env.reset();
    let mut window = ContextWindow::default();
    let (mut rtg, mut ctg) = (target_rtg, target_ctg);
    let (mut rtg_tokens, mut ctg_tokens) = (vec![rtg], vec![ctg]);
    let (mut states, mut actions, mut rewards, mut costs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    loop {
        window.push_step(rtg, ctg, state.obs.clone(), state.t, k);
        let action = policy.act(&window, rng, deterministic)?;
        window.push_action(action.clone());
        let step = env.step(&state, &action, rng)?;
        rtg -= step.reward;
        ctg -= step.cost;
        if clamp_ctg {
            ctg = ctg.max(0.0);
        }
        rtg_tokens.push(rtg);
        ctg_tokens.push(ctg);
        states.push(core::mem::replace(&mut state, step.next).obs);
        actions.push(action);
        rewards.push(step.reward);
        costs.push(step.cost);
        if step.done {
            break;
        }
    }
    Ok(Rollout { trajectory: Trajectory::new(states, actions, rewards, costs, env.c_max())?, rtg_tokens, ctg_tokens })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub threshold: f64,
    pub episode: usize,
    pub target_rtg: f64,
    pub ret: f64,
    pub cost: f64,
    pub normalized_return: f64,
    pub normalized_cost: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub target_rtg: f64,
    pub mean_normalized_return: f64,
    pub se_normalized_return: f64,
    pub mean_normalized_cost: f64,
    pub se_normalized_cost: f64,
    pub mean_return: f64,
    pub mean_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedRow {
    pub mean_normalized_return: f64,
    pub mean_normalized_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ThresholdRow>,
    pub averaged: AveragedRow,
    /// Averaged normalized cost below one.
    pub safe: bool,
    pub episodes: Vec<EpisodeRecord>,
    pub checksum_before: u64,
    pub checksum_after: u64,
}

/// `(threshold index, episode index)` pairs of a protocol.
pub fn episode_jobs(protocol: &EvalProtocol) -> Vec<(usize, usize)> {
    (0..protocol.thresholds.len()).flat_map(|i| (0..protocol.episodes_per_threshold).map(move |e| (i, e))).collect()
}

/// Runs one job. Episode `e` uses stream `(seed, e)` regardless of threshold, so thresholds share seeds.
pub fn run_job<P: SequencePolicy + ?Sized>(
    policy: &P,
    env: &EnvSpec,
    protocol: &EvalProtocol,
    reference: &ReturnReference,
    job: (usize, usize),
) -> Result<EpisodeRecord> {
    let threshold = protocol.thresholds[job.0];
    let target_rtg = protocol.target_rtg(reference, threshold)?;
    let mut rng = stream(protocol.seed, job.1 as u64);
    let ro = rollout(policy, env, target_rtg, threshold, &mut rng, protocol.deterministic, protocol.clamp_ctg)?;
    let (ret, cost) = (ro.ret(), ro.cost());
    Ok(EpisodeRecord {
        threshold,
        episode: job.1,
        target_rtg,
        ret,
        cost,
        normalized_return: normalized_return(ret, reference.r_min, reference.r_max)?,
        normalized_cost: normalized_cost(cost, threshold)?,
        length: ro.trajectory.horizon(),
    })
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var / n))
}

/// Aggregates records in any order; they are sorted by `(threshold index, episode)` first.
pub fn aggregate(protocol: &EvalProtocol, jobs_and_records: Vec<((usize, usize), EpisodeRecord)>, checksums: (u64, u64)) -> Result<EvalReport> {
    protocol.validate()?;
    let mut sorted = jobs_and_records;
    sorted.sort_by_key(|(job, _)| *job);
    let mut rows = Vec::with_capacity(protocol.thresholds.len());
    for (i, &threshold) in protocol.thresholds.iter().enumerate() {
        let recs: Vec<&EpisodeRecord> = sorted.iter().filter(|(job, _)| job.0 == i).map(|(_, r)| r).collect();
        if recs.is_empty() {
            return Err(invalid(format!("no episodes for threshold {threshold}")));
        }
        let col = |f: fn(&EpisodeRecord) -> f64| recs.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let (mnr, snr) = mean_se(&col(|r| r.normalized_return));
        let (mnc, snc) = mean_se(&col(|r| r.normalized_cost));
        rows.push(ThresholdRow {
            threshold,
            target_rtg: recs[0].target_rtg,
            mean_normalized_return: mnr,
            se_normalized_return: snr,
            mean_normalized_cost: mnc,
            se_normalized_cost: snc,
            mean_return: mean_se(&col(|r| r.ret)).0,
            mean_cost: mean_se(&col(|r| r.cost)).0,
        });
    }
    let n = rows.len() as f64;
    let averaged = AveragedRow {
        mean_normalized_return: rows.iter().map(|r| r.mean_normalized_return).sum::<f64>() / n,
        mean_normalized_cost: rows.iter().map(|r| r.mean_normalized_cost).sum::<f64>() / n,
    };
    Ok(EvalReport {
        safe: averaged.mean_normalized_cost < 1.0,
        rows,
        averaged,
        episodes: sorted.into_iter().map(|(_, r)| r).collect(),
        checksum_before: checksums.0,
        checksum_after: checksums.1,
    })
}

/// Evaluates one fixed policy at every threshold against the training data's `reference`.
pub fn evaluate<P: SequencePolicy + ?Sized>(policy: &P, env: &EnvSpec, protocol: &EvalProtocol, reference: &ReturnReference) -> Result<EvalReport> {
    protocol.validate()?;
    let before = policy.checksum();
    let records = episode_jobs(protocol)
        .into_iter()
        .map(|job| run_job(policy, env, protocol, reference, job).map(|r| (job, r)))
        .collect::<Result<Vec<_>>>()?;
    aggregate(protocol, records, (before, policy.checksum()))
}
