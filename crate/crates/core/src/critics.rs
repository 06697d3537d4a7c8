//! Twin reward and cost critics trained by offline TD learning with soft target updates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Adam, AdamConfig, Graph, Mlp, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub hidden_dims: Vec<usize>,
    pub learn_rate: f64,
    pub soft_tau: f64,
    pub discount: f64,
    /// Two heads per critic, combined pessimistically.
    pub twin: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { hidden_dims: vec![128; 4], learn_rate: 5e-5, soft_tau: 0.01, discount: 0.99, twin: true }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.hidden_dims.contains(&0) {
            problems.push(format!("hidden_dims {:?} contains a zero width", self.hidden_dims));
        }
        if !(self.learn_rate > 0.0) {
            problems.push(format!("critic learn_rate {} must be positive", self.learn_rate));
        }
        if !(self.soft_tau > 0.0 && self.soft_tau <= 1.0) {
            problems.push(format!("soft_tau {} outside (0, 1]", self.soft_tau));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            problems.push(format!("discount {} outside (0, 1]", self.discount));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

/// Offline transitions `(s, a, r, c, s', a')`; `done` marks transitions with no successor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transitions {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
    pub next_actions: Vec<Vec<f64>>,
    pub done: Vec<bool>,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Empty("transitions"));
        }
        let aligned = [self.actions.len(), self.rewards.len(), self.costs.len(), self.next_states.len(), self.next_actions.len(), self.done.len()];
        if aligned.iter().any(|&m| m != n) {
            return Err(invalid("transition fields are not aligned"));
        }
        let widths_ok = self.states.iter().chain(&self.next_states).all(|s| s.len() == state_dim)
            && self.actions.iter().chain(&self.next_actions).all(|a| a.len() == action_dim);
        if !widths_ok {
            return Err(invalid("transition state/action widths do not match the critic"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticKind {
    /// Twin heads combined by `min`.
    Reward,
    /// Twin heads combined by `max`.
    Cost,
}

/// One critic: online heads, their target copy, and the optimizer.
#[derive(Debug, Clone)]
pub struct TwinCritic<T> {
    kind: CriticKind,
    heads: Vec<Mlp>,
    online: ParamStore<T>,
    target: ParamStore<T>,
    opt: Adam<T>,
    frozen: bool,
}

fn input_matrix<T: Real>(states: &[Vec<f64>], actions: &[Vec<f64>]) -> Tensor<T> {
    let sd = states.first().map_or(0, Vec::len);
    let ad = actions.first().map_or(0, Vec::len);
    Tensor::from_fn(states.len(), sd + ad, |r, c| T::of(if c < sd { states[r][c] } else { actions[r][c - sd] }))
}

impl<T: Real> TwinCritic<T> {
    pub fn new(kind: CriticKind, input_dim: usize, cfg: &CriticConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut online = ParamStore::new();
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&cfg.hidden_dims);
        dims.push(1);
        let n_heads = if cfg.twin { 2 } else { 1 };
        let name = match kind {
            CriticKind::Reward => "q",
            CriticKind::Cost => "c",
        };
        let heads: Vec<Mlp> = (0..n_heads)
            .map(|h| Mlp::new(&mut online, &format!("{name}{h}"), &dims, Activation::Mish, 1.0, &mut rng))
            .collect();
        // Scale each weight matrix to unit fan-in variance.
        for mlp in &heads {
            for layer in &mlp.layers {
                let w = &mut online.tensors_mut()[layer.w];
                let s = T::of(1.0 / libm::sqrt(w.rows() as f64));
                w.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        let opt = Adam::new(AdamConfig { lr: cfg.learn_rate, clip_norm: None, ..AdamConfig::default() }, &online);
        Self { kind, heads, target: online.clone(), online, opt, frozen: false }
    }

    pub fn kind(&self) -> CriticKind {
        self.kind
    }

    pub fn online(&self) -> &ParamStore<T> {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.online
    }

    pub fn target(&self) -> &ParamStore<T> {
        &self.target
    }

    pub fn target_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.target
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Makes every head output `value` for all inputs and stops further updates.
    pub fn pin_constant(&mut self, value: f64) {
        for store in [&mut self.online, &mut self.target] {
            for mlp in &self.heads {
                let last = mlp.layers[mlp.layers.len() - 1];
                store.tensors_mut()[last.w].data_mut().iter_mut().for_each(|x| *x = T::zero());
                store.tensors_mut()[last.b].data_mut().iter_mut().for_each(|x| *x = T::of(value));
            }
        }
        self.frozen = true;
    }

    /// Per-head outputs `[n, 1]` on `x = [s | a]`.
    pub fn head_outputs(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Vec<Var>> {
        self.heads.iter().map(|h| h.forward(g, vars, x)).collect()
    }

    /// Pessimistic combination of the heads: `min` for reward, `max` for cost.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let outs = self.head_outputs(g, vars, x)?;
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = match self.kind {
                CriticKind::Reward => g.minimum(acc, o)?,
                CriticKind::Cost => g.maximum(acc, o)?,
            };
        }
        Ok(acc)
    }

    fn evaluate(&self, store: &ParamStore<T>, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = store.bind(&mut g, false);
        let x = g.constant(input_matrix(states, actions));
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.value(out).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Combined online outputs.
    pub fn eval(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.evaluate(&self.online, states, actions)
    }

    /// `y = signal + discount * (1 - done) * combined_target(s', a')`.
    pub fn td_targets(&self, batch: &Transitions, signal: &[f64], discount: f64) -> Result<Vec<f64>> {
        let next = self.evaluate(&self.target, &batch.next_states, &batch.next_actions)?;
        let y: Vec<f64> = signal
            .iter()
            .zip(&next)
            .zip(&batch.done)
            .map(|((&r, &v), &d)| if d { r } else { r + discount * v })
            .collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("critic TD target"));
        }
        Ok(y)
    }

    /// Mean squared TD error over heads and batch, differentiable in `vars`.
    pub fn td_loss(&self, g: &mut Graph<T>, vars: &[Var], batch: &Transitions, targets: &[f64]) -> Result<Var> {
        let x = g.constant(input_matrix(&batch.states, &batch.actions));
        let y = g.constant(Tensor::column(targets.iter().map(|&v| T::of(v)).collect()));
        let outs = self.head_outputs(g, vars, x)?;
        let mut total = None;
        for o in outs {
            let diff = g.sub(o, y)?;
            let sq = g.square(diff)?;
            let m = g.mean(sq)?;
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m)?,
            });
        }
        let total = total.ok_or(Error::Graph("critic without heads"))?;
        g.scale(total, T::of(1.0 / self.heads.len() as f64))
    }

    /// One gradient step on the TD loss followed by the soft target update. Returns the loss.
    pub fn update(&mut self, batch: &Transitions, signal: &[f64], cfg: &CriticConfig) -> Result<f64> {
        let targets = self.td_targets(batch, signal, cfg.discount)?;
        let mut g = Graph::new();
        let vars = self.online.bind(&mut g, true);
        let loss = self.td_loss(&mut g, &vars, batch, &targets)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite("critic TD loss"));
        }
        if self.frozen {
            return Ok(value);
        }
        let grads = g.backward(loss)?.collect(&vars);
        self.opt.step(&mut self.online, grads)?;
        self.target.soft_update_from(&self.online, T::of(cfg.soft_tau))?;
        Ok(value)
    }
}

/// Reward critic `Q` and cost critic `C` over raw `(state, action)` inputs.
#[derive(Debug, Clone)]
pub struct CriticPair<T> {
    pub config: CriticConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub q: TwinCritic<T>,
    pub c: TwinCritic<T>,
}

impl<T: Real> CriticPair<T> {
    pub fn new(state_dim: usize, action_dim: usize, config: CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let q = TwinCritic::new(CriticKind::Reward, state_dim + action_dim, &config, seed);
        let c = TwinCritic::new(CriticKind::Cost, state_dim + action_dim, &config, seed.wrapping_add(1));
        Ok(Self { config, state_dim, action_dim, q, c })
    }

    pub fn td_update_q(&mut self, batch: &Transitions) -> Result<f64> {
        batch.validate(self.state_dim, self.action_dim)?;
        self.q.update(batch, &batch.rewards, &self.config)
    }

    pub fn td_update_c(&mut self, batch: &Transitions) -> Result<f64> {
        batch.validate(self.state_dim, self.action_dim)?;
        if let Some((index, &value)) = batch.costs.iter().enumerate().find(|(_, c)| **c < 0.0) {
            return Err(Error::NegativeCost { index, value });
        }
        self.c.update(batch, &batch.costs, &self.config)
    }

    /// `(min of Q heads, max of C heads)` per row.
    pub fn critic_eval(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        if states.len() != actions.len() || states.is_empty() {
            return Err(invalid("critic_eval needs equally many states and actions"));
        }
        Ok((self.q.eval(states, actions)?, self.c.eval(states, actions)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, GradCheckConfig};
    use crate::oracle::{discounted_action_values, TabularCMDP, TabularPolicy};
    use crate::rng::normal;

    fn cfg() -> CriticConfig {
        CriticConfig { hidden_dims: vec![16, 16], learn_rate: 1e-3, ..CriticConfig::default() }
    }

    fn single(s: f64, a: f64, r: f64, c: f64, done: bool) -> Transitions {
        Transitions {
            states: vec![vec![s]],
            actions: vec![vec![a]],
            rewards: vec![r],
            costs: vec![c],
            next_states: vec![vec![s]],
            next_actions: vec![vec![a]],
            done: vec![done],
        }
    }

    #[test]
    fn targets_use_pessimistic_heads() {
        let mut pair = CriticPair::<f64>::new(1, 1, cfg(), 0).unwrap();
        let batch = single(0.0, 0.0, 1.0, 0.5, false);
        pair.q.pin_constant(0.0);
        assert!((pair.q.td_targets(&batch, &batch.rewards, 0.99).unwrap()[0] - 1.0).abs() < 1e-15);
        // Give the twin heads different constant outputs.
        for (kind, (lo, hi)) in [(CriticKind::Reward, (2.0, 3.0)), (CriticKind::Cost, (1.0, 4.0))] {
            let critic = if kind == CriticKind::Reward { &mut pair.q } else { &mut pair.c };
            critic.pin_constant(0.0);
            let heads = critic.heads.clone();
            for (mlp, v) in heads.iter().zip([lo, hi]) {
                let last = mlp.layers[mlp.layers.len() - 1];
                critic.target.tensors_mut()[last.b].data_mut()[0] = v;
                critic.online.tensors_mut()[last.b].data_mut()[0] = v;
            }
        }
        let yq = pair.q.td_targets(&batch, &batch.rewards, 0.99).unwrap()[0];
        let yc = pair.c.td_targets(&batch, &batch.costs, 0.99).unwrap()[0];
        assert!((yq - (1.0 + 0.99 * 2.0)).abs() < 1e-12);
        assert!((yc - (0.5 + 0.99 * 4.0)).abs() < 1e-12);
        let (q, c) = pair.critic_eval(&batch.states, &batch.actions).unwrap();
        assert_eq!((q[0], c[0]), (2.0, 4.0));
    }

    #[test]
    fn soft_update_with_unit_tau_copies_online() {
        let mut pair = CriticPair::<f64>::new(1, 1, CriticConfig { soft_tau: 1.0, ..cfg() }, 3).unwrap();
        pair.td_update_q(&single(0.3, -0.2, 1.0, 0.0, false)).unwrap();
        assert_eq!(pair.q.target().flatten(), pair.q.online().flatten());
    }

    #[test]
    fn zero_cost_fixed_point_and_negative_cost() {
        let mut pair = CriticPair::<f64>::new(1, 1, cfg(), 4).unwrap();
        pair.c.pin_constant(0.0);
        assert_eq!(pair.td_update_c(&single(0.0, 0.0, 0.0, 0.0, false)).unwrap(), 0.0);
        assert!(matches!(pair.td_update_c(&single(0.0, 0.0, 0.0, -1.0, false)), Err(Error::NegativeCost { index: 0, .. })));
    }

    #[test]
    fn absorbing_transition_converges_to_cost() {
        let mut pair = CriticPair::<f64>::new(1, 1, CriticConfig { discount: 1.0, ..cfg() }, 5).unwrap();
        let batch = single(0.5, 0.1, 0.0, 2.0, true);
        for _ in 0..3000 {
            pair.td_update_c(&batch).unwrap();
        }
        let (_, c) = pair.critic_eval(&batch.states, &batch.actions).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-3, "{c:?}");
    }

    #[test]
    fn fresh_critics_are_near_zero_and_symmetric() {
        let pair = CriticPair::<f64>::new(2, 1, cfg(), 6).unwrap();
        let mut p2 = pair.clone();
        for t in p2.q.online_mut().tensors_mut() {
            if t.rows() == 1 {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let (q, _) = p2.critic_eval(&[vec![0.0, 0.0]], &[vec![0.0]]).unwrap();
        assert_eq!(q[0], 0.0);
        let (a, _) = pair.critic_eval(&[vec![0.1, -0.2]], &[vec![0.3]]).unwrap();
        let (b, _) = pair.critic_eval(&[vec![0.1, -0.2]], &[vec![0.3]]).unwrap();
        assert_eq!(a, b);
    }

    /// s0 -> s1 -> s2 -> end, one-hot states, one action encoded as 0.
    pub(crate) fn chain_fixed_point(updates: usize) -> (f64, f64) {
        let rewards = [1.0, 0.5, 2.0];
        let costs = [1.0, 0.0, 3.0];
        let onehot = |s: usize| (0..3).map(|i| if i == s { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let batch = Transitions {
            states: (0..3).map(onehot).collect(),
            actions: vec![vec![0.0]; 3],
            rewards: rewards.to_vec(),
            costs: costs.to_vec(),
            next_states: vec![onehot(1), onehot(2), onehot(2)],
            next_actions: vec![vec![0.0]; 3],
            done: vec![false, false, true],
        };
        let mut pair = CriticPair::<f64>::new(3, 1, cfg(), 7).unwrap();
        for _ in 0..updates {
            pair.td_update_q(&batch).unwrap();
            pair.td_update_c(&batch).unwrap();
        }
        // Exact values from the tabular DP: states 0..3 plus an absorbing end state 3.
        let m = TabularCMDP::from_real(
            4,
            1,
            3,
            &[1, 2, 3, 3],
            &[1.0, 0.5, 2.0, 0.0],
            &[1.0, 0.0, 3.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            0.5,
            1.0,
        )
        .unwrap();
        let (dq, dc) = discounted_action_values(&m, &TabularPolicy::uniform(4, 1), 0.99, &[false, false, false, true]).unwrap();
        let (q, c) = pair.critic_eval(&batch.states, &batch.actions).unwrap();
        let eq = (0..3).map(|s| (q[s] - dq[s][0]).abs()).fold(0.0, f64::max);
        let ec = (0..3).map(|s| (c[s] - dc[s][0]).abs()).fold(0.0, f64::max);
        (eq, ec)
    }

    #[test]
    fn chain_matches_dynamic_programming() {
        let (eq, ec) = chain_fixed_point(10_000);
        assert!(eq <= 0.05 && ec <= 0.05, "{eq} {ec}");
    }

    #[test]
    fn soft_update_contracts_linear_params() {
        let mut a = CriticPair::<f64>::new(1, 1, cfg(), 8).unwrap();
        let b = CriticPair::<f64>::new(1, 1, cfg(), 9).unwrap();
        let on = b.q.online().clone();
        let before: f64 = a.q.target().flatten().iter().zip(on.flatten()).map(|(x, y)| (x - y) * (x - y)).sum();
        a.q.target_mut().soft_update_from(&on, 0.3).unwrap();
        let after: f64 = a.q.target().flatten().iter().zip(on.flatten()).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((libm::sqrt(after) - 0.7 * libm::sqrt(before)).abs() < 1e-12);
    }

    #[test]
    fn td_loss_gradient_check() {
        let pair = CriticPair::<f64>::new(3, 2, CriticConfig { hidden_dims: vec![8, 8], ..cfg() }, 10).unwrap();
        let mut rng = seeded(11);
        let mut row = |n: usize| (0..n).map(|_| normal(&mut rng)).collect::<Vec<f64>>();
        let batch = Transitions {
            states: (0..6).map(|_| row(3)).collect(),
            actions: (0..6).map(|_| row(2)).collect(),
            rewards: row(6),
            costs: row(6).iter().map(|x| x.abs()).collect(),
            next_states: (0..6).map(|_| row(3)).collect(),
            next_actions: (0..6).map(|_| row(2)).collect(),
            done: vec![false, true, false, false, true, false],
        };
        for critic in [&pair.q, &pair.c] {
            let signal = if critic.kind() == CriticKind::Reward { &batch.rewards } else { &batch.costs };
            let y = critic.td_targets(&batch, signal, 0.99).unwrap();
            let mut g = Graph::new();
            let vars = critic.online().bind(&mut g, true);
            let loss = critic.td_loss(&mut g, &vars, &batch, &y).unwrap();
            let analytic: Vec<f64> = g.backward(loss).unwrap().collect(&vars).iter().flat_map(|t| t.data().to_vec()).collect();
            let report = gradient_check(
                |th: &[f64]| {
                    let mut c = critic.clone();
                    c.online_mut().assign_flat(th)?;
                    let mut g = Graph::new();
                    let vars = c.online().bind(&mut g, false);
                    let l = c.td_loss(&mut g, &vars, &batch, &y)?;
                    Ok(g.value(l).item())
                },
                &critic.online().flatten(),
                &analytic,
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{report:?}");
        }
    }
}
