use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::cmdp::{Outcome, Pair, TabularCMDP, TabularPolicy};
use crate::error::{invalid, Error, Result};

/// Largest |return| or cost a suffix may accumulate before the integer tables are refused.
const PAIR_BOUND: i64 = 1 << 40;

/// Exact distribution of the suffix `(return, cost)` from every `(t, s)`.
///
/// `layers[t][s]` covers steps `t..H`; layer `H` is the point mass at `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnCostDistribution {
    layers: Vec<Vec<BTreeMap<Pair, f64>>>,
}

impl ReturnCostDistribution {
    pub fn horizon(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn at(&self, t: usize, s: usize) -> &BTreeMap<Pair, f64> {
        &self.layers[t][s]
    }

    pub fn prob(&self, t: usize, s: usize, pair: Pair) -> f64 {
        self.layers[t][s].get(&pair).copied().unwrap_or(0.0)
    }

    /// `P((R, C) = pair | s_t = s, a_t = a)`.
    pub fn action_prob(&self, m: &TabularCMDP, t: usize, s: usize, a: usize, pair: Pair) -> f64 {
        m.outcomes(s, a)
            .iter()
            .map(|o| o.prob * self.prob(t + 1, o.next, (pair.0 - o.reward, pair.1 - o.cost)))
            .sum()
    }

    /// Suffix distribution after committing to `a` at `(t, s)`.
    pub fn action_distribution(&self, m: &TabularCMDP, t: usize, s: usize, a: usize) -> BTreeMap<Pair, f64> {
        let mut out = BTreeMap::new();
        for o in m.outcomes(s, a) {
            for (&(r, c), &p) in &self.layers[t + 1][o.next] {
                *out.entry((r + o.reward, c + o.cost)).or_insert(0.0) += o.prob * p;
            }
        }
        out
    }
}

/// Backward DP over suffix `(return, cost)` pairs under the stationary behavior `beta`.
pub fn suffix_distribution(m: &TabularCMDP, beta: &TabularPolicy) -> Result<ReturnCostDistribution> {
    beta.check_shape(m)?;
    let h = m.horizon() as i64;
    for s in 0..m.n_states() {
        for a in 0..m.n_actions() {
            for o in m.outcomes(s, a) {
                let worst = o.reward.abs().max(o.cost);
                if worst.checked_mul(h).is_none_or(|v| v > PAIR_BOUND) {
                    return Err(invalid(format!("reward/cost magnitude {worst} at ({s}, {a}) overflows the suffix tables; rescale the units")));
                }
            }
        }
    }
    let mut terminal = BTreeMap::new();
    terminal.insert((0, 0), 1.0);
    let mut layers = vec![Vec::new(); m.horizon() + 1];
    layers[m.horizon()] = vec![terminal; m.n_states()];
    for t in (0..m.horizon()).rev() {
        let mut layer = Vec::with_capacity(m.n_states());
        for s in 0..m.n_states() {
            let mut row: BTreeMap<Pair, f64> = BTreeMap::new();
            for (a, &pa) in beta.row(s).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for o in m.outcomes(s, a) {
                    let w = pa * o.prob;
                    if w == 0.0 {
                        continue;
                    }
                    for (&(r, c), &p) in &layers[t + 1][o.next] {
                        *row.entry((r + o.reward, c + o.cost)).or_insert(0.0) += w * p;
                    }
                }
            }
            layer.push(row);
        }
        layers[t] = layer;
    }
    Ok(ReturnCostDistribution { layers })
}

/// Per-state conditioning targets in integer units.
///
/// `initial[s]` is the target at the first step. `carried` lists, for every `(t, s)` the
/// conditioned policy can reach on the base dynamics, the remaining targets it can hold there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningFn {
    pub initial: Vec<Option<Pair>>,
    pub carried: BTreeMap<(usize, usize), BTreeSet<Pair>>,
    pub unreachable: Vec<usize>,
}

impl ConditioningFn {
    /// Targets only at the initial states; nothing carried.
    pub fn from_initial(initial: Vec<Option<Pair>>) -> Self {
        Self { initial, carried: BTreeMap::new(), unreachable: Vec::new() }
    }

    pub fn target(&self, s: usize) -> Option<Pair> {
        self.initial.get(s).copied().flatten()
    }

    /// Expected initial target under `mu`, in real units.
    pub fn expected(&self, m: &TabularCMDP) -> Result<(f64, f64)> {
        let mut er = 0.0;
        let mut ec = 0.0;
        for (s, &p) in m.init_dist().iter().enumerate() {
            if p > 0.0 {
                let (r, c) = self.target(s).ok_or_else(|| invalid(format!("no target for initial state {s}")))?;
                er += p * r as f64 * m.reward_unit();
                ec += p * c as f64 * m.cost_unit();
            }
        }
        Ok((er, ec))
    }

    /// Checks `F_t(s) = F_{t+1}(T(s, a)) + (r, c)` along every carried base transition and
    /// that carried targets are exhausted at the horizon.
    pub fn is_consistent(&self, m: &TabularCMDP, beta: &TabularPolicy) -> Result<bool> {
        let base = m.base_model();
        let dist = suffix_distribution(&base, beta)?;
        for (&(t, s), targets) in &self.carried {
            for &target in targets {
                if t == m.horizon() {
                    if target != (0, 0) {
                        return Ok(false);
                    }
                    continue;
                }
                let mut any = false;
                for a in 0..m.n_actions() {
                    if beta.row(s)[a] == 0.0 || dist.action_prob(&base, t, s, a, target) == 0.0 {
                        continue;
                    }
                    any = true;
                    let b = m.base(s, a);
                    let next = (target.0 - b.reward, target.1 - b.cost);
                    if !self.carried.get(&(t + 1, b.next)).is_some_and(|set| set.contains(&next)) {
                        return Ok(false);
                    }
                }
                if !any {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Minimum over initial states of the probability that the trajectory realizes `F(s)`.
pub fn coverage_alpha(dist: &ReturnCostDistribution, f: &ConditioningFn, mu: &[f64]) -> Result<f64> {
    if dist.layers.first().map_or(0, |l| l.len()) != mu.len() {
        return Err(invalid("initial distribution does not match the suffix tables"));
    }
    let mut alpha = f64::INFINITY;
    for (s, &p) in mu.iter().enumerate() {
        if p > 0.0 {
            let q = f.target(s).map_or(0.0, |target| dist.prob(0, s, target));
            alpha = alpha.min(q);
        }
    }
    if alpha.is_infinite() {
        return Err(invalid("initial distribution has no support"));
    }
    Ok(alpha)
}

/// Tabular policy that may depend on the timestep and a memo carried along the episode.
pub trait PolicyTable {
    type Memo: Ord + Clone;
    fn start(&self, s: usize) -> Self::Memo;
    fn probs(&self, t: usize, s: usize, memo: &Self::Memo) -> &[f64];
    fn advance(&self, t: usize, s: usize, memo: &Self::Memo, outcome: &Outcome) -> Self::Memo;
}

impl PolicyTable for TabularPolicy {
    type Memo = ();

    fn start(&self, _s: usize) {}

    fn probs(&self, _t: usize, s: usize, _memo: &()) -> &[f64] {
        self.row(s)
    }

    fn advance(&self, _t: usize, _s: usize, _memo: &(), _outcome: &Outcome) {}
}

/// Behavior reweighted by the likelihood of the remaining target.
///
/// The memo is the remaining `(return, cost)` target, decremented by each realized reward
/// and cost. Once the remaining target has zero probability the memo becomes `None` and the
/// policy falls back to the behavior rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedPolicy {
    beta: TabularPolicy,
    initial: Vec<Option<Pair>>,
    table: BTreeMap<(usize, usize, Pair), Vec<f64>>,
}

impl ConditionedPolicy {
    pub fn conditioned_rows(&self) -> impl Iterator<Item = (&(usize, usize, Pair), &Vec<f64>)> {
        self.table.iter()
    }

    pub fn row(&self, t: usize, s: usize, target: Pair) -> Option<&[f64]> {
        self.table.get(&(t, s, target)).map(|v| v.as_slice())
    }
}

impl PolicyTable for ConditionedPolicy {
    type Memo = Option<Pair>;

    fn start(&self, s: usize) -> Option<Pair> {
        self.initial[s]
    }

    fn probs(&self, t: usize, s: usize, memo: &Option<Pair>) -> &[f64] {
        match memo {
            Some(target) => self.table.get(&(t, s, *target)).map_or(self.beta.row(s), |v| v.as_slice()),
            None => self.beta.row(s),
        }
    }

    fn advance(&self, t: usize, s: usize, memo: &Option<Pair>, o: &Outcome) -> Option<Pair> {
        let target = (*memo)?;
        self.table.contains_key(&(t, s, target)).then_some((target.0 - o.reward, target.1 - o.cost))
    }
}

/// `pi(a | t, s, g) = beta(a | s) P(g | t, s, a) / P(g | t, s)` along every reachable `(t, s, g)`.
pub fn cdt_conditioned_policy(
    m: &TabularCMDP,
    beta: &TabularPolicy,
    f: &ConditioningFn,
    dist: &ReturnCostDistribution,
) -> Result<ConditionedPolicy> {
    beta.check_shape(m)?;
    if dist.horizon() != m.horizon() || f.initial.len() != m.n_states() {
        return Err(invalid("conditioning inputs do not match the CMDP"));
    }
    let mut table = BTreeMap::new();
    let mut frontier: BTreeSet<(usize, Pair)> = BTreeSet::new();
    for (s, &p) in m.init_dist().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let target = f.target(s).ok_or_else(|| invalid(format!("no target for initial state {s}")))?;
        if dist.prob(0, s, target) == 0.0 {
            return Err(Error::ZeroProbability { state: s, step: 0, target });
        }
        frontier.insert((s, target));
    }
    for t in 0..m.horizon() {
        let mut next_frontier = BTreeSet::new();
        for &(s, target) in &frontier {
            let total = dist.prob(t, s, target);
            if total == 0.0 {
                continue;
            }
            let mut row = Vec::with_capacity(m.n_actions());
            for a in 0..m.n_actions() {
                let pa = beta.row(s)[a];
                row.push(if pa == 0.0 { 0.0 } else { pa * dist.action_prob(m, t, s, a, target) / total });
            }
            // Renormalize away accumulation error so rows are exact distributions.
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
            for (a, &pa) in row.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for o in m.outcomes(s, a) {
                    if o.prob > 0.0 {
                        next_frontier.insert((o.next, (target.0 - o.reward, target.1 - o.cost)));
                    }
                }
            }
            table.insert((t, s, target), row);
        }
        frontier = next_frontier;
    }
    Ok(ConditionedPolicy { beta: beta.clone(), initial: f.initial.clone(), table })
}

/// Expected return and cumulative cost in real units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub reward: f64,
    pub cost: f64,
}

/// Exact `(J_R, J_C)` by propagating the state-memo occupancy forward through the horizon.
pub fn policy_value<P: PolicyTable>(m: &TabularCMDP, pi: &P) -> PolicyValue {
    let mut occupancy: BTreeMap<(usize, P::Memo), f64> = BTreeMap::new();
    for (s, &p) in m.init_dist().iter().enumerate() {
        if p > 0.0 {
            *occupancy.entry((s, pi.start(s))).or_insert(0.0) += p;
        }
    }
    let mut reward = 0.0;
    let mut cost = 0.0;
    for t in 0..m.horizon() {
        let mut next = BTreeMap::new();
        for ((s, memo), mass) in occupancy {
            for (a, &pa) in pi.probs(t, s, &memo).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for o in m.outcomes(s, a) {
                    let w = mass * pa * o.prob;
                    if w == 0.0 {
                        continue;
                    }
                    reward += w * o.reward as f64;
                    cost += w * o.cost as f64;
                    *next.entry((o.next, pi.advance(t, s, &memo, o))).or_insert(0.0) += w;
                }
            }
        }
        occupancy = next;
    }
    PolicyValue { reward: reward * m.reward_unit(), cost: cost * m.cost_unit() }
}

/// Maximum probability mass any `(s, a)` places off its base triple.
pub fn near_determinism_epsilon(m: &TabularCMDP) -> f64 {
    m.off_base_mass_max()
}

/// Measured alignment of the conditioned policy against its targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentGap {
    pub reward_gap: f64,
    pub cost_gap: f64,
    pub alpha_f: f64,
    pub epsilon: f64,
    pub horizon: usize,
    pub bound_rhs: f64,
}

impl AlignmentGap {
    pub fn within_bound(&self) -> bool {
        self.reward_gap.abs() <= self.bound_rhs && self.cost_gap.abs() <= self.bound_rhs
    }
}

/// Gaps `E[F(s_1)] - J(pi_CDT)` and the bound `c_const * eps * (1/alpha + 2) * H^2`.
pub fn alignment_gap(m: &TabularCMDP, beta: &TabularPolicy, f: &ConditioningFn, c_const: f64) -> Result<AlignmentGap> {
    let dist = suffix_distribution(m, beta)?;
    let alpha_f = coverage_alpha(&dist, f, m.init_dist())?;
    if alpha_f == 0.0 {
        let (state, target) = m
            .init_dist()
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(s, _)| (s, f.target(s).unwrap_or((0, 0))))
            .find(|&(s, target)| dist.prob(0, s, target) == 0.0)
            .unwrap_or((0, (0, 0)));
        return Err(Error::ZeroProbability { state, step: 0, target });
    }
    let pi = cdt_conditioned_policy(m, beta, f, &dist)?;
    let value = policy_value(m, &pi);
    let (er, ec) = f.expected(m)?;
    let epsilon = near_determinism_epsilon(m);
    let h = m.horizon() as f64;
    Ok(AlignmentGap {
        reward_gap: er - value.reward,
        cost_gap: ec - value.cost,
        alpha_f,
        epsilon,
        horizon: m.horizon(),
        bound_rhs: c_const * epsilon * (1.0 / alpha_f + 2.0) * h * h,
    })
}

/// How `make_consistent_f` chooses one realizable pair per initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PickRule {
    MaxReturn,
    MinCost,
    MaxCoverage,
}

/// Picks a base-dynamics pair per initial state and carries it along every base transition
/// the conditioned policy can take, so consistency holds on all of them by construction.
pub fn make_consistent_f(m: &TabularCMDP, beta: &TabularPolicy, rule: PickRule) -> Result<ConditioningFn> {
    let base = m.base_model();
    let dist = suffix_distribution(&base, beta)?;
    let mut initial = vec![None; m.n_states()];
    for (s, &p) in m.init_dist().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let support = dist.at(0, s).iter().filter(|(_, q)| **q > 0.0);
        let pick = match rule {
            PickRule::MaxReturn => support.max_by(|(x, _), (y, _)| x.0.cmp(&y.0).then(y.1.cmp(&x.1))),
            PickRule::MinCost => support.max_by(|(x, _), (y, _)| y.1.cmp(&x.1).then(x.0.cmp(&y.0))),
            PickRule::MaxCoverage => support.max_by(|(x, p), (y, q)| {
                p.total_cmp(q).then(x.0.cmp(&y.0)).then(y.1.cmp(&x.1))
            }),
        };
        initial[s] = Some(*pick.ok_or(Error::Degenerate("behavior has no support at an initial state"))?.0);
    }
    let mut carried: BTreeMap<(usize, usize), BTreeSet<Pair>> = BTreeMap::new();
    let mut frontier: BTreeSet<(usize, Pair)> = initial.iter().enumerate().filter_map(|(s, f)| f.map(|f| (s, f))).collect();
    for t in 0..=m.horizon() {
        for &(s, target) in &frontier {
            carried.entry((t, s)).or_default().insert(target);
        }
        if t == m.horizon() {
            break;
        }
        let mut next = BTreeSet::new();
        for &(s, target) in &frontier {
            for a in 0..m.n_actions() {
                if beta.row(s)[a] > 0.0 && dist.action_prob(&base, t, s, a, target) > 0.0 {
                    let b = m.base(s, a);
                    next.insert((b.next, (target.0 - b.reward, target.1 - b.cost)));
                }
            }
        }
        frontier = next;
    }
    let visited: BTreeSet<usize> = carried.keys().map(|&(_, s)| s).collect();
    let unreachable = (0..m.n_states()).filter(|s| !visited.contains(s)).collect();
    Ok(ConditioningFn { initial, carried, unreachable })
}

/// Stationary discounted `Q` and cost-`Q` tables `[s][a]` in real units for `policy`.
///
/// Transitions into a state flagged in `terminal` do not bootstrap.
pub fn discounted_action_values(
    m: &TabularCMDP,
    policy: &TabularPolicy,
    discount: f64,
    terminal: &[bool],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    policy.check_shape(m)?;
    if !(0.0..1.0).contains(&discount) || terminal.len() != m.n_states() {
        return Err(invalid("discount must lie in [0, 1) and terminal must flag every state"));
    }
    let (ns, na) = (m.n_states(), m.n_actions());
    let mut q = vec![vec![0.0; na]; ns];
    let mut c = vec![vec![0.0; na]; ns];
    for _ in 0..100_000 {
        let v: Vec<(f64, f64)> = (0..ns)
            .map(|s| {
                let row = policy.row(s);
                (row.iter().zip(&q[s]).map(|(p, x)| p * x).sum(), row.iter().zip(&c[s]).map(|(p, x)| p * x).sum())
            })
            .collect();
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let mut nq = 0.0;
                let mut nc = 0.0;
                for o in m.outcomes(s, a) {
                    let cont = if terminal[o.next] { 0.0 } else { discount };
                    nq += o.prob * (o.reward as f64 * m.reward_unit() + cont * v[o.next].0);
                    nc += o.prob * (o.cost as f64 * m.cost_unit() + cont * v[o.next].1);
                }
                delta = delta.max((nq - q[s][a]).abs()).max((nc - c[s][a]).abs());
                q[s][a] = nq;
                c[s][a] = nc;
            }
        }
        if delta < 1e-13 {
            break;
        }
    }
    Ok((q, c))
}
