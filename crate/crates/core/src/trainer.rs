//! Training loop for the ablation family CDT / WQDT / WCDT / QCDT / TVCDT / RCDT.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::critics::{CriticConfig, CriticPair, Transitions};
use crate::error::{invalid, Error, Result};
use crate::policy::{CdtPolicy, ContextWindow, PolicyConfig};
use crate::real::Real;
use crate::rng::{normal, seeded, stream, Rng};
use crate::trajectory::TrajectoryDataset;
use crate::weighting::{dataset_weights, WeightConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CDT")]
    Cdt,
    #[serde(rename = "WQDT")]
    Wqdt,
    #[serde(rename = "WCDT")]
    Wcdt,
    #[serde(rename = "QCDT")]
    Qcdt,
    #[serde(rename = "TVCDT")]
    Tvcdt,
    #[serde(rename = "RCDT")]
    Rcdt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Cdt, Variant::Wqdt, Variant::Wcdt, Variant::Qcdt, Variant::Tvcdt, Variant::Rcdt];

    pub fn weighting(self) -> bool {
        matches!(self, Variant::Wqdt | Variant::Wcdt | Variant::Tvcdt | Variant::Rcdt)
    }

    pub fn q_guidance(self) -> bool {
        matches!(self, Variant::Wqdt | Variant::Qcdt | Variant::Tvcdt | Variant::Rcdt)
    }

    pub fn cost_penalty(self) -> bool {
        matches!(self, Variant::Wcdt | Variant::Qcdt | Variant::Rcdt)
    }

    pub fn uses_critics(self) -> bool {
        self.q_guidance() || self.cost_penalty()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cdt => "CDT",
            Variant::Wqdt => "WQDT",
            Variant::Wcdt => "WCDT",
            Variant::Qcdt => "QCDT",
            Variant::Tvcdt => "TVCDT",
            Variant::Rcdt => "RCDT",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown variant {s:?}; expected one of CDT, WQDT, WCDT, QCDT, TVCDT, RCDT")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub eta: f64,
    pub beta_dual: f64,
    pub kappa: f64,
    pub lambda_init: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub critic_warmup_iters: u64,
    pub actor_lr: f64,
    pub grad_clip: f64,
    pub log_interval: u64,
    pub seed: u64,
    pub weighting: WeightConfig,
    pub critic: CriticConfig,
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            eta: 0.1,
            beta_dual: 3e-4,
            kappa: 10.0,
            lambda_init: 0.0,
            batch_size: 2048,
            total_iters: 200_000,
            critic_warmup_iters: 50_000,
            actor_lr: 1e-4,
            grad_clip: 0.25,
            log_interval: 100,
            seed: 0,
            weighting: WeightConfig::default(),
            critic: CriticConfig::default(),
        }
    }

    /// Small-batch, short schedule for CPU runs; the warm-up keeps its quarter share.
    /// `kappa` is the critic-unit value of a 10-per-episode budget on the 100-step corridor.
    pub fn desk(variant: Variant) -> Self {
        let critic = CriticConfig { hidden_dims: vec![64; 4], learn_rate: 1e-3, soft_tau: 0.05, ..CriticConfig::default() };
        Self {
            batch_size: 32,
            total_iters: 5_000,
            critic_warmup_iters: 1_250,
            actor_lr: 3e-4,
            beta_dual: 1e-2,
            kappa: kappa_for_budget(10.0, 100, critic.discount),
            log_interval: 250,
            critic,
            ..Self::new(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if !(self.eta >= 0.0) {
            problems.push(format!("eta {} must be >= 0", self.eta));
        }
        if !(self.beta_dual > 0.0) {
            problems.push(format!("beta_dual {} must be > 0", self.beta_dual));
        }
        if !(self.kappa > 0.0) {
            problems.push(format!("kappa {} must be > 0", self.kappa));
        }
        if !(self.lambda_init >= 0.0) {
            problems.push(format!("lambda_init {} must be >= 0", self.lambda_init));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(self.actor_lr > 0.0) || !(self.grad_clip > 0.0) {
            problems.push("actor_lr and grad_clip must be positive".into());
        }
        if self.log_interval == 0 {
            problems.push("log_interval must be positive".into());
        }
        if let Err(Error::InvalidArgument(m)) = self.weighting.validate() {
            problems.push(m);
        }
        if let Err(Error::InvalidArgument(m)) = self.critic.validate() {
            problems.push(m);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

/// Scalar actor objective: `nll - eta * q_mean + lambda * c_mean` with terms gated by variant.
///
/// `nll` must already be weighted for weighting variants and plain otherwise.
pub fn actor_loss(variant: Variant, nll: f64, q_mean: Option<f64>, c_mean: Option<f64>, eta: f64, lambda: f64) -> Result<f64> {
    let mut loss = nll;
    if variant.q_guidance() {
        loss -= eta * q_mean.ok_or_else(|| invalid(format!("{variant} needs a reward critic value")))?;
    }
    if variant.cost_penalty() {
        loss += lambda * c_mean.ok_or_else(|| invalid(format!("{variant} needs a cost critic value")))?;
    }
    Ok(loss)
}

/// Graph version of [`actor_loss`].
pub fn actor_loss_graph<T: Real>(
    g: &mut Graph<T>,
    variant: Variant,
    nll: Var,
    q_mean: Option<Var>,
    c_mean: Option<Var>,
    eta: f64,
    lambda: f64,
) -> Result<Var> {
    let mut loss = nll;
    if variant.q_guidance() {
        let q = q_mean.ok_or_else(|| invalid(format!("{variant} needs a reward critic value")))?;
        let term = g.scale(q, T::of(-eta))?;
        loss = g.add(loss, term)?;
    }
    if variant.cost_penalty() {
        let c = c_mean.ok_or_else(|| invalid(format!("{variant} needs a cost critic value")))?;
        let term = g.scale(c, T::of(lambda))?;
        loss = g.add(loss, term)?;
    }
    Ok(loss)
}

/// Mean discounted cost-to-go over uniformly drawn steps of a `horizon`-step episode that spends
/// `budget` at a constant rate. This is the scale of `E[C]` the dual step compares with `kappa`.
pub fn kappa_for_budget(budget: f64, horizon: usize, discount: f64) -> f64 {
    let rate = budget / horizon as f64;
    let mut to_go = 0.0;
    let mut total = 0.0;
    for _ in 0..horizon {
        to_go = rate + discount * to_go;
        total += to_go;
    }
    total / horizon as f64
}

/// Projected dual ascent `max(0, lambda + beta * (j_c_hat - kappa))`.
pub fn lambda_step(lambda: f64, j_c_hat: f64, kappa: f64, beta_dual: f64) -> f64 {
    (lambda + beta_dual * (j_c_hat - kappa)).max(0.0)
}

/// Policy action for the last position of each window: `mean + sigma * noise`, clamped.
pub fn sample_last_actions<T: Real>(policy: &CdtPolicy<T>, windows: &[ContextWindow], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let vars = policy.params().bind(&mut g, false);
    let heads = policy.forward(&mut g, &vars, windows, false, rng)?;
    let (mean, lv) = (g.value(heads.mean), g.value(heads.log_var));
    let mut out = Vec::with_capacity(windows.len());
    for (row, &(b, t)) in heads.positions.iter().enumerate() {
        if t + 1 == windows[b].len() {
            out.push(
                (0..mean.cols())
                    .map(|c| (mean.get(row, c).as_f64() + libm::exp(0.5 * lv.get(row, c).as_f64()) * normal(rng)).clamp(-1.0, 1.0))
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Mean cost-critic value over every window position with actions sampled from the policy.
pub fn estimate_jc<T: Real>(critics: &CriticPair<T>, policy: &CdtPolicy<T>, windows: &[ContextWindow], rng: &mut Rng) -> Result<f64> {
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for w in windows {
        for end in 1..=w.len() {
            let mut prefix = w.clone();
            prefix.rtg.truncate(end);
            prefix.ctg.truncate(end);
            prefix.states.truncate(end);
            prefix.timesteps.truncate(end);
            prefix.actions.truncate(end - 1);
            actions.extend(sample_last_actions(policy, core::slice::from_ref(&prefix), rng)?);
            states.push(w.states[end - 1].clone());
        }
    }
    let (_, c) = critics.critic_eval(&states, &actions)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

/// Windows with their trajectory weights and the fixed reparameterization noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorBatch {
    pub windows: Vec<ContextWindow>,
    pub weights: Vec<f64>,
    /// One standard-normal draw per (position, action dim), in head row order.
    pub noise: Vec<f64>,
}

/// Graph nodes of one actor objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ActorTerms {
    pub loss: Var,
    pub nll: Var,
    pub weighted_nll: Var,
    pub q_mean: Option<Var>,
    pub c_mean: Option<Var>,
}

/// Builds the full actor objective on `g`. Critic terms appear only when `critics` is given.
#[allow(clippy::too_many_arguments)]
pub fn actor_objective<T: Real>(
    g: &mut Graph<T>,
    policy: &CdtPolicy<T>,
    vars: &[Var],
    batch: &ActorBatch,
    critics: Option<&CriticPair<T>>,
    cfg: &TrainConfig,
    lambda: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<ActorTerms> {
    let heads = policy.forward(g, vars, &batch.windows, train, rng)?;
    let ad = policy.config().action_dim;
    let n = heads.positions.len();
    let target: Vec<T> = heads.positions.iter().flat_map(|&(b, t)| batch.windows[b].actions[t].iter().map(|&x| T::of(x))).collect();
    let target = g.constant(Tensor::new(n, ad, target)?);
    let rows = g.gaussian_nll_rows(heads.mean, heads.log_var, target)?;
    let nll = g.mean(rows)?;
    let w: Vec<T> = heads.positions.iter().map(|&(b, _)| T::of(batch.weights[b] / n as f64)).collect();
    let weighted_nll = g.weighted_sum(rows, &w)?;
    let base = if cfg.variant.weighting() { weighted_nll } else { nll };
    let (mut q_mean, mut c_mean) = (None, None);
    if let Some(critics) = critics {
        if batch.noise.len() != n * ad {
            return Err(Error::Shape { op: "actor noise", lhs: [n, ad], rhs: [batch.noise.len(), 1] });
        }
        let half = g.scale(heads.log_var, T::of(0.5))?;
        let sigma = g.exp(half)?;
        let eps = g.constant(Tensor::new(n, ad, batch.noise.iter().map(|&x| T::of(x)).collect())?);
        let jitter = g.mul(sigma, eps)?;
        let a_hat = g.add(heads.mean, jitter)?;
        let a_hat = g.clamp(a_hat, -T::one(), T::one())?;
        let sd = policy.config().state_dim;
        let states: Vec<T> = heads.positions.iter().flat_map(|&(b, t)| batch.windows[b].states[t].iter().map(|&x| T::of(x))).collect();
        let s = g.constant(Tensor::new(n, sd, states)?);
        let x = g.concat(&[s, a_hat])?;
        if cfg.variant.q_guidance() {
            let qv = critics.q.online().bind(g, false);
            let q = critics.q.forward(g, &qv, x)?;
            q_mean = Some(g.mean(q)?);
        }
        if cfg.variant.cost_penalty() {
            let cv = critics.c.online().bind(g, false);
            let c = critics.c.forward(g, &cv, x)?;
            c_mean = Some(g.mean(c)?);
        }
    }
    let loss = if critics.is_some() {
        actor_loss_graph(g, cfg.variant, base, q_mean, c_mean, cfg.eta, lambda)?
    } else {
        base
    };
    Ok(ActorTerms { loss, nll, weighted_nll, q_mean, c_mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss: f64,
    pub nll: f64,
    pub q_mean: f64,
    pub c_mean: f64,
    pub lambda: f64,
    pub j_c_hat: f64,
    pub grad_norm: f64,
}

/// Training state and loop.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    config: TrainConfig,
    dataset: TrajectoryDataset,
    weights: Vec<f64>,
    policy: CdtPolicy<T>,
    opt: Adam<T>,
    critics: Option<CriticPair<T>>,
    lambda: f64,
    iter: u64,
    rng: Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(dataset: &TrajectoryDataset, policy_config: PolicyConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if policy_config.state_dim != dataset.state_dim() || policy_config.action_dim != dataset.action_dim() {
            return Err(invalid("policy dimensions do not match the dataset"));
        }
        let weights = if config.variant.weighting() { dataset_weights(dataset, &config.weighting)? } else { vec![1.0; dataset.len()] };
        let policy = CdtPolicy::new(policy_config, config.seed)?;
        let opt = Adam::new(AdamConfig { lr: config.actor_lr, clip_norm: Some(config.grad_clip), ..AdamConfig::default() }, policy.params());
        let critics = if config.variant.uses_critics() {
            Some(CriticPair::new(dataset.state_dim(), dataset.action_dim(), config.critic.clone(), config.seed.wrapping_add(7))?)
        } else {
            None
        };
        Ok(Self {
            lambda: config.lambda_init,
            rng: stream(config.seed, 1),
            config,
            dataset: dataset.clone(),
            weights,
            policy,
            opt,
            critics,
            iter: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &CdtPolicy<T> {
        &self.policy
    }

    pub fn critics(&self) -> Option<&CriticPair<T>> {
        self.critics.as_ref()
    }

    pub fn critics_mut(&mut self) -> Option<&mut CriticPair<T>> {
        self.critics.as_mut()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Replaces the learned state, e.g. when resuming from a checkpoint.
    pub fn restore(&mut self, policy: CdtPolicy<T>, critics: Option<CriticPair<T>>, lambda: f64, iter: u64) -> Result<()> {
        if policy.params().census() != self.policy.params().census() {
            return Err(invalid("restored policy has a different shape"));
        }
        if critics.is_some() != self.critics.is_some() || !(lambda >= 0.0) {
            return Err(invalid("restored critics or lambda do not fit this variant"));
        }
        self.policy = policy;
        self.critics = critics;
        self.lambda = lambda;
        self.iter = iter;
        Ok(())
    }

    fn past_warmup(&self) -> bool {
        self.iter >= self.config.critic_warmup_iters
    }

    /// Samples `batch_size` subsequences: trajectory uniformly, start position uniformly.
    pub fn sample_batch(&mut self) -> Result<(Vec<usize>, Vec<ContextWindow>)> {
        let k = self.policy.config().context_len;
        let mut idx = Vec::with_capacity(self.config.batch_size);
        let mut windows = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let i = self.rng.random_range(0..self.dataset.len());
            let traj = &self.dataset.trajectories()[i];
            let start = self.rng.random_range(0..traj.horizon());
            let end = (start + k).min(traj.horizon()) - 1;
            windows.push(ContextWindow::from_trajectory(traj, end, k)?);
            idx.push(i);
        }
        Ok((idx, windows))
    }

    fn critic_step(&mut self, idx: &[usize], windows: &[ContextWindow]) -> Result<()> {
        let k = self.policy.config().context_len;
        let mut batch = Transitions::default();
        let mut next_windows = Vec::new();
        let mut next_slot = Vec::new();
        for (&i, w) in idx.iter().zip(windows) {
            let traj = &self.dataset.trajectories()[i];
            let j = w.timesteps[w.len() - 1];
            batch.states.push(traj.base.states[j].clone());
            batch.actions.push(traj.base.actions[j].clone());
            batch.rewards.push(traj.base.rewards[j]);
            batch.costs.push(traj.base.costs[j]);
            if j + 1 < traj.horizon() {
                let mut nw = ContextWindow::from_trajectory(traj, j + 1, k)?;
                nw.actions.pop();
                next_slot.push(batch.next_states.len());
                next_windows.push(nw);
                batch.next_states.push(traj.base.states[j + 1].clone());
                batch.done.push(false);
            } else {
                batch.next_states.push(traj.base.states[j].clone());
                batch.done.push(true);
            }
            batch.next_actions.push(traj.base.actions[j].clone());
        }
        if !next_windows.is_empty() {
            let sampled = sample_last_actions(&self.policy, &next_windows, &mut self.rng)?;
            for (slot, a) in next_slot.into_iter().zip(sampled) {
                batch.next_actions[slot] = a;
            }
        }
        let critics = self.critics.as_mut().ok_or(Error::Graph("critic step without critics"))?;
        critics.td_update_q(&batch)?;
        critics.td_update_c(&batch)?;
        Ok(())
    }

    /// One iteration: sample, critic TD updates (after warm-up), actor step, dual step.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let (idx, windows) = self.sample_batch()?;
        let active = self.past_warmup() && self.critics.is_some();
        if active {
            self.critic_step(&idx, &windows)?;
        }
        let ad = self.policy.config().action_dim;
        let positions: usize = windows.iter().map(ContextWindow::len).sum();
        let noise = if active { (0..positions * ad).map(|_| normal(&mut self.rng)).collect() } else { Vec::new() };
        let batch = ActorBatch { weights: idx.iter().map(|&i| self.weights[i]).collect(), windows, noise };
        let mut g = Graph::new();
        let vars = self.policy.params().bind(&mut g, true);
        let critics = if active { self.critics.as_ref() } else { None };
        let terms = actor_objective(&mut g, &self.policy, &vars, &batch, critics, &self.config, self.lambda, true, &mut self.rng)?;
        let read = |v: Option<Var>| v.map_or(f64::NAN, |v| g.value(v).item().as_f64());
        let loss = g.value(terms.loss).item().as_f64();
        let nll = g.value(terms.nll).item().as_f64();
        let (q_mean, c_mean) = (read(terms.q_mean), read(terms.c_mean));
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iter: self.iter,
                detail: format!("loss={loss} nll={nll} q_mean={q_mean} c_mean={c_mean} lambda={}", self.lambda),
            });
        }
        let grads = g.backward(terms.loss)?.collect(&vars);
        let grad_norm = self.opt.step(self.policy.params_mut(), grads).map_err(|e| Error::Diverged {
            iter: self.iter,
            detail: format!("{e}; loss={loss} nll={nll} lambda={}", self.lambda),
        })?;
        let j_c_hat = if active && self.config.variant.cost_penalty() { c_mean } else { f64::NAN };
        if j_c_hat.is_finite() {
            self.lambda = lambda_step(self.lambda, j_c_hat, self.config.kappa, self.config.beta_dual);
        }
        let row = MetricsRow { iter: self.iter, loss, nll, q_mean, c_mean, lambda: self.lambda, j_c_hat, grad_norm };
        self.iter += 1;
        Ok(row)
    }

    /// Runs until `total_iters`, passing every logged row to `on_row`; returns the logged rows.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<Vec<MetricsRow>> {
        let mut log = Vec::new();
        while self.iter < self.config.total_iters {
            let row = self.step()?;
            if row.iter % self.config.log_interval == 0 || self.iter == self.config.total_iters {
                on_row(&row);
                log.push(row);
            }
        }
        Ok(log)
    }
}

/// Coupled primal–dual iterates on the scalar problem `min (theta - a)^2 s.t. theta <= kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualTrace {
    pub j_c: Vec<f64>,
    pub lambda: Vec<f64>,
    /// First step whose `j_c` lies within 5% of `kappa`.
    pub entered_at: Option<usize>,
}

/// Gradient descent on `(theta - a)^2 + lambda * theta` interleaved with [`lambda_step`].
pub fn dual_ascent_synthetic(kappa: f64, beta_dual: f64, a: f64, primal_lr: f64, steps: usize) -> DualTrace {
    let mut theta = 0.0;
    let mut lambda = 0.0;
    let mut trace = DualTrace { j_c: Vec::with_capacity(steps), lambda: Vec::with_capacity(steps), entered_at: None };
    for step in 0..steps {
        theta -= primal_lr * (2.0 * (theta - a) + lambda);
        lambda = lambda_step(lambda, theta, kappa, beta_dual);
        if trace.entered_at.is_none() && (theta - kappa).abs() <= 0.05 * kappa {
            trace.entered_at = Some(step + 1);
        }
        trace.j_c.push(theta);
        trace.lambda.push(lambda);
    }
    trace
}

/// Deterministic toy batch for gradient checks and algebra tests.
pub fn random_actor_batch(policy_cfg: &PolicyConfig, n_windows: usize, seed: u64) -> ActorBatch {
    let mut rng = seeded(seed);
    let mut windows = Vec::with_capacity(n_windows);
    for b in 0..n_windows {
        let len = 1 + (b % policy_cfg.context_len);
        let mut w = ContextWindow::default();
        for t in 0..len {
            let state = (0..policy_cfg.state_dim).map(|_| normal(&mut rng)).collect();
            w.push_step(5.0 * normal(&mut rng), normal(&mut rng).abs(), state, t, policy_cfg.context_len);
            w.push_action((0..policy_cfg.action_dim).map(|_| (0.5 * normal(&mut rng)).clamp(-1.0, 1.0)).collect());
        }
        windows.push(w);
    }
    let positions: usize = windows.iter().map(ContextWindow::len).sum();
    let weights = (0..n_windows).map(|_| rng.random_range(0.2..2.0)).collect();
    let noise = (0..positions * policy_cfg.action_dim).map(|_| normal(&mut rng)).collect();
    ActorBatch { windows, weights, noise }
}
