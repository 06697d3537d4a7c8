//! Causal-transformer policy over interleaved (RTG, CTG, state, action) tokens.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LayerNorm, Linear, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::rng::{normal, seeded, Rng};
use crate::trajectory::{AnnotatedTrajectory, TrajectoryDataset};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 2.0;
const TOKENS: usize = 4;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub rtg_scale: f64,
    pub ctg_scale: f64,
    pub max_timestep: usize,
    /// Per-dimension state normalization applied before embedding.
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
}

impl PolicyConfig {
    /// Full-size architecture (3 layers, 8 heads, width 128, K = 10) with identity scaling.
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            context_len: 10,
            n_layers: 3,
            n_heads: 8,
            embed_dim: 128,
            dropout: 0.1,
            rtg_scale: 1.0,
            ctg_scale: 1.0,
            max_timestep: 1000,
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
        }
    }

    /// Token scales from the dataset's largest return and cost; state statistics over all steps.
    pub fn fit_dataset(mut self, ds: &TrajectoryDataset) -> Self {
        self.rtg_scale = ds.r_max().abs().max(ds.r_min().abs()).max(1e-6);
        self.ctg_scale = ds.max_cost().max(1.0);
        let n: usize = ds.trajectories().iter().map(|t| t.horizon()).sum();
        let mut mean = vec![0.0; self.state_dim];
        let mut sq = vec![0.0; self.state_dim];
        for t in ds.trajectories() {
            for s in &t.base.states {
                for (i, &x) in s.iter().enumerate() {
                    mean[i] += x;
                    sq[i] += x * x;
                }
            }
        }
        for i in 0..self.state_dim {
            mean[i] /= n as f64;
            sq[i] = libm::sqrt((sq[i] / n as f64 - mean[i] * mean[i]).max(0.0)).max(1e-6);
        }
        self.state_mean = mean;
        self.state_std = sq;
        self.max_timestep = ds.trajectories().iter().map(|t| t.horizon()).max().unwrap_or(1).max(self.max_timestep);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.state_dim == 0 || self.action_dim == 0 {
            problems.push("state_dim and action_dim must be positive".into());
        }
        if self.context_len == 0 {
            problems.push("context_len must be at least 1".into());
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.embed_dim == 0 {
            problems.push("n_layers, n_heads and embed_dim must be positive".into());
        } else if !self.embed_dim.is_multiple_of(self.n_heads) {
            problems.push(format!("embed_dim {} is not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.rtg_scale > 0.0 && self.ctg_scale > 0.0) || !self.rtg_scale.is_finite() || !self.ctg_scale.is_finite() {
            problems.push("rtg_scale and ctg_scale must be positive and finite".into());
        }
        if self.state_mean.len() != self.state_dim || self.state_std.len() != self.state_dim {
            problems.push("state_mean/state_std must have state_dim entries".into());
        } else if self.state_std.iter().any(|s| !(*s > 0.0)) {
            problems.push("state_std entries must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    fn feature_dim(&self) -> usize {
        2 + self.state_dim + self.action_dim + TOKENS
    }
}

/// Most recent `<= K` steps of conditioning context.
///
/// At decision time `actions` is one shorter than `states`; the missing action token
/// is zero-filled and, being later than every state token, cannot affect any prediction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextWindow {
    pub rtg: Vec<f64>,
    pub ctg: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub timesteps: Vec<usize>,
}

impl ContextWindow {
    /// Steps `end + 1 - k ..= end` of `traj` (fewer at the start of the episode).
    pub fn from_trajectory(traj: &AnnotatedTrajectory, end: usize, k: usize) -> Result<Self> {
        if end >= traj.horizon() || k == 0 {
            return Err(invalid(format!("window end {end} outside horizon {}", traj.horizon())));
        }
        let start = (end + 1).saturating_sub(k);
        Ok(Self {
            rtg: traj.rtg[start..=end].to_vec(),
            ctg: traj.ctg[start..=end].to_vec(),
            states: traj.base.states[start..=end].to_vec(),
            actions: traj.base.actions[start..=end].to_vec(),
            timesteps: (start..=end).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Appends a decision step, dropping the oldest once longer than `k`.
    pub fn push_step(&mut self, rtg: f64, ctg: f64, state: Vec<f64>, timestep: usize, k: usize) {
        self.rtg.push(rtg);
        self.ctg.push(ctg);
        self.states.push(state);
        self.timesteps.push(timestep);
        while self.states.len() > k {
            self.rtg.remove(0);
            self.ctg.remove(0);
            self.states.remove(0);
            self.timesteps.remove(0);
            if self.actions.len() > self.states.len() - 1 {
                self.actions.remove(0);
            }
        }
    }

    /// Records the action taken at the latest step.
    pub fn push_action(&mut self, action: Vec<f64>) {
        self.actions.push(action);
    }

    pub fn validate(&self, cfg: &PolicyConfig) -> Result<()> {
        let l = self.len();
        if l == 0 {
            return Err(invalid("empty context window"));
        }
        if l > cfg.context_len {
            return Err(invalid(format!("context window of {l} steps exceeds K = {}", cfg.context_len)));
        }
        if self.rtg.len() != l || self.ctg.len() != l || self.timesteps.len() != l {
            return Err(invalid("rtg/ctg/timesteps are not aligned with states"));
        }
        if self.actions.len() != l && self.actions.len() + 1 != l {
            return Err(invalid("actions must match states or be one shorter"));
        }
        if self.states.iter().any(|s| s.len() != cfg.state_dim) || self.actions.iter().any(|a| a.len() != cfg.action_dim) {
            return Err(invalid("state or action width does not match the policy"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    // No key bias: it shifts every score in a row equally and gets zero gradient.
    k: usize,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    embed: usize,
    time: usize,
    ln_embed: LayerNorm,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    mean_head: Linear,
    log_var_head: Linear,
}

/// Gaussian heads for every real (non-padding) position, in `positions` order.
#[derive(Debug, Clone)]
pub struct PolicyHeads {
    pub mean: Var,
    pub log_var: Var,
    /// `(window index, position within window)` per output row.
    pub positions: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct CdtPolicy<T> {
    config: PolicyConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> CdtPolicy<T> {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let embed = store.push_normal("embed.w", config.feature_dim(), d, INIT_STD, &mut rng);
        let time = store.push_normal("embed.time", config.max_timestep + 1, d, INIT_STD, &mut rng);
        let ln_embed = LayerNorm::new(&mut store, "embed.ln", d);
        let blocks = (0..config.n_layers)
            .map(|i| {
                let name = |p: &str| format!("block{i}.{p}");
                Block {
                    ln1: LayerNorm::new(&mut store, &name("ln1"), d),
                    q: Linear::new(&mut store, &name("q"), d, d, INIT_STD, &mut rng),
                    k: store.push_normal(name("k.w"), d, d, INIT_STD, &mut rng),
                    v: Linear::new(&mut store, &name("v"), d, d, INIT_STD, &mut rng),
                    o: Linear::new(&mut store, &name("o"), d, d, INIT_STD, &mut rng),
                    ln2: LayerNorm::new(&mut store, &name("ln2"), d),
                    fc1: Linear::new(&mut store, &name("fc1"), d, 4 * d, INIT_STD, &mut rng),
                    fc2: Linear::new(&mut store, &name("fc2"), 4 * d, d, INIT_STD, &mut rng),
                }
            })
            .collect();
        let ln_final = LayerNorm::new(&mut store, "final.ln", d);
        let mean_head = Linear::new(&mut store, "head.mean", d, config.action_dim, INIT_STD, &mut rng);
        let log_var_head = Linear::new(&mut store, "head.log_var", d, config.action_dim, INIT_STD, &mut rng);
        let layout = Layout { embed, time, ln_embed, blocks, ln_final, mean_head, log_var_head };
        Ok(Self { config, params: store, layout })
    }

    /// Rebuilds a policy from a config and a flat parameter vector, checking the count.
    pub fn from_flat(config: PolicyConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::new(config, 0)?;
        p.params.assign_flat_f64(flat)?;
        Ok(p)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Builds the forward pass for a batch of windows on `g`; `vars` are this policy's bound parameters.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], batch: &[ContextWindow], train: bool, rng: &mut Rng) -> Result<PolicyHeads> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        for w in batch {
            w.validate(&self.config)?;
        }
        let cfg = &self.config;
        let l = batch.iter().map(ContextWindow::len).max().unwrap_or(1);
        let seq = TOKENS * l;
        let f = cfg.feature_dim();
        let (sd, ad) = (cfg.state_dim, cfg.action_dim);
        let mut feats = vec![T::zero(); batch.len() * seq * f];
        let mut times = vec![0usize; batch.len() * seq];
        let mut starts = Vec::with_capacity(batch.len());
        let mut positions = Vec::new();
        let mut state_rows = Vec::new();
        for (b, w) in batch.iter().enumerate() {
            let pad = l - w.len();
            starts.push(TOKENS * pad);
            for p in 0..w.len() {
                let base = b * seq + TOKENS * (pad + p);
                let ts = w.timesteps[p].min(cfg.max_timestep);
                let row = |tok: usize| (base + tok) * f;
                feats[row(0)] = T::of(w.rtg[p] / cfg.rtg_scale);
                feats[row(1) + 1] = T::of(w.ctg[p] / cfg.ctg_scale);
                for i in 0..sd {
                    feats[row(2) + 2 + i] = T::of((w.states[p][i] - cfg.state_mean[i]) / cfg.state_std[i]);
                }
                if let Some(a) = w.actions.get(p) {
                    for i in 0..ad {
                        feats[row(3) + 2 + sd + i] = T::of(a[i]);
                    }
                }
                for tok in 0..TOKENS {
                    feats[row(tok) + 2 + sd + ad + tok] = T::one();
                    times[base + tok] = ts;
                }
                positions.push((b, p));
                state_rows.push(base + 2);
            }
        }
        let x = g.constant(Tensor::new(batch.len() * seq, f, feats)?);
        let h = g.matmul(x, vars[self.layout.embed])?;
        let te = g.embed(vars[self.layout.time], &times)?;
        let h = g.add(h, te)?;
        let h = self.layout.ln_embed.forward(g, vars, h)?;
        let mut h = g.dropout(h, cfg.dropout, train, rng)?;
        for blk in &self.layout.blocks {
            let a = blk.ln1.forward(g, vars, h)?;
            let q = blk.q.forward(g, vars, a)?;
            let k = g.matmul(a, vars[blk.k])?;
            let v = blk.v.forward(g, vars, a)?;
            let att = g.causal_attention(q, k, v, seq, cfg.n_heads, &starts)?;
            let att = blk.o.forward(g, vars, att)?;
            let att = g.dropout(att, cfg.dropout, train, rng)?;
            h = g.add(h, att)?;
            let m = blk.ln2.forward(g, vars, h)?;
            let m = blk.fc1.forward(g, vars, m)?;
            let m = g.gelu(m)?;
            let m = blk.fc2.forward(g, vars, m)?;
            let m = g.dropout(m, cfg.dropout, train, rng)?;
            h = g.add(h, m)?;
        }
        let h = self.layout.ln_final.forward(g, vars, h)?;
        let s = g.rows(h, &state_rows)?;
        let mean = self.layout.mean_head.forward(g, vars, s)?;
        let lv = self.layout.log_var_head.forward(g, vars, s)?;
        let log_var = g.clamp(lv, T::of(LOG_VAR_MIN), T::of(LOG_VAR_MAX))?;
        Ok(PolicyHeads { mean, log_var, positions })
    }

    /// Eval-mode `(mean, log_var)` at every position of one window.
    pub fn predict_all(&self, window: &ContextWindow) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let heads = self.forward(&mut g, &vars, core::slice::from_ref(window), false, &mut seeded(0))?;
        let rows = |v: Var| {
            let t = g.value(v);
            (0..t.rows()).map(|r| t.row(r).iter().map(|x| x.as_f64()).collect()).collect()
        };
        Ok((rows(heads.mean), rows(heads.log_var)))
    }

    /// Eval-mode `(mean, log_var)` for the latest position.
    pub fn predict(&self, window: &ContextWindow) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut m, mut lv) = self.predict_all(window)?;
        Ok((m.pop().unwrap_or_default(), lv.pop().unwrap_or_default()))
    }

    /// Per-position Gaussian NLL of `taken` (eval mode).
    pub fn nll_of_actions(&self, window: &ContextWindow, taken: &[Vec<f64>]) -> Result<Vec<f64>> {
        if taken.len() != window.len() || taken.iter().any(|a| a.len() != self.config.action_dim) {
            return Err(Error::Shape { op: "nll_of_actions", lhs: [window.len(), self.config.action_dim], rhs: [taken.len(), 0] });
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let heads = self.forward(&mut g, &vars, core::slice::from_ref(window), false, &mut seeded(0))?;
        let target = g.constant(Tensor::from_fn(taken.len(), self.config.action_dim, |r, c| T::of(taken[r][c])));
        let nll = g.gaussian_nll_rows(heads.mean, heads.log_var, target)?;
        Ok(g.value(nll).data().iter().map(|x| x.as_f64()).collect())
    }

    /// Action for the latest position, clamped to `[-1, 1]`.
    pub fn sample_action(&self, window: &ContextWindow, rng: &mut Rng, deterministic: bool) -> Result<Vec<f64>> {
        let (mean, log_var) = self.predict(window)?;
        Ok(mean
            .iter()
            .zip(&log_var)
            .map(|(&m, &lv)| {
                let a = if deterministic { m } else { m + libm::exp(0.5 * lv) * normal(rng) };
                a.clamp(-1.0, 1.0)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, GradCheckConfig};
    use crate::rng::seeded;
    use crate::trajectory::Trajectory;
    use proptest::prelude::*;

    fn small() -> PolicyConfig {
        PolicyConfig { context_len: 4, n_layers: 2, n_heads: 2, embed_dim: 8, max_timestep: 20, ..PolicyConfig::new(3, 2) }
    }

    fn window(len: usize, seed: u64) -> ContextWindow {
        let mut rng = seeded(seed);
        let mut w = ContextWindow::default();
        for t in 0..len {
            w.push_step(normal(&mut rng), normal(&mut rng).abs(), (0..3).map(|_| normal(&mut rng)).collect(), t, 4);
            w.push_action((0..2).map(|_| normal(&mut rng).clamp(-1.0, 1.0)).collect());
        }
        w
    }

    #[test]
    fn causal_positions_ignore_future_tokens() {
        let p = CdtPolicy::<f64>::new(small(), 1).unwrap();
        let a = window(4, 3);
        let mut b = a.clone();
        b.rtg[3] += 5.0;
        b.states[2][0] -= 2.0;
        b.actions[1][1] = -a.actions[1][1];
        let (ma, la) = p.predict_all(&a).unwrap();
        let (mb, lb) = p.predict_all(&b).unwrap();
        assert_eq!(ma[0], mb[0]);
        assert_eq!(la[1], lb[1]);
        assert_eq!(ma[1], mb[1]);
        assert_ne!(ma[2], mb[2]);
    }

    #[test]
    fn latest_action_token_is_invisible() {
        let p = CdtPolicy::<f64>::new(small(), 2).unwrap();
        let full = window(3, 5);
        let mut open = full.clone();
        open.actions.pop();
        assert_eq!(p.predict(&full).unwrap(), p.predict(&open).unwrap());
    }

    #[test]
    fn length_one_window_and_padding_agree() {
        let p = CdtPolicy::<f64>::new(small(), 3).unwrap();
        let short = window(1, 9);
        let long = window(3, 10);
        let mut g = Graph::new();
        let vars = p.params().bind(&mut g, false);
        let heads = p.forward(&mut g, &vars, &[long, short.clone()], false, &mut seeded(0)).unwrap();
        let mean = g.value(heads.mean);
        let solo = p.predict(&short).unwrap().0;
        assert_eq!(heads.positions.last(), Some(&(1, 0)));
        for (x, y) in mean.row(mean.rows() - 1).iter().zip(&solo) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rtg_scale_cancels() {
        let p = CdtPolicy::<f64>::new(small(), 4).unwrap();
        let w = window(3, 11);
        let mut cfg = small();
        cfg.rtg_scale = 7.5;
        let q = CdtPolicy::<f64>::from_flat(cfg, &p.params().flatten_f64()).unwrap();
        let mut w2 = w.clone();
        w2.rtg.iter_mut().for_each(|r| *r *= 7.5);
        let (a, b) = (p.predict(&w).unwrap(), q.predict(&w2).unwrap());
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_at_mean_with_unit_variance() {
        let mut p = CdtPolicy::<f64>::new(small(), 5).unwrap();
        let lv = p.layout.log_var_head;
        for i in [lv.w, lv.b] {
            p.params_mut().tensors_mut()[i].data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let w = window(2, 12);
        let (means, _) = p.predict_all(&w).unwrap();
        let nll = p.nll_of_actions(&w, &means).unwrap();
        let expect = 2.0 * 0.5 * libm::log(2.0 * core::f64::consts::PI);
        assert!(nll.iter().all(|x| (x - expect).abs() < 1e-12));
        let off: Vec<Vec<f64>> = means.iter().map(|m| m.iter().map(|x| x + 0.3).collect()).collect();
        let nll_off = p.nll_of_actions(&w, &off).unwrap();
        assert!(nll_off.iter().zip(&nll).all(|(a, b)| a > b));
    }

    #[test]
    fn identical_windows_identical_nll() {
        let p = CdtPolicy::<f64>::new(small(), 6).unwrap();
        let w = window(3, 13);
        let mut g = Graph::new();
        let vars = p.params().bind(&mut g, false);
        let heads = p.forward(&mut g, &vars, &[w.clone(), w.clone()], false, &mut seeded(0)).unwrap();
        let m = g.value(heads.mean);
        assert_eq!(m.row(0), m.row(3));
        assert_eq!(m.row(2), m.row(5));
    }

    #[test]
    fn sampling() {
        let mut p = CdtPolicy::<f64>::new(small(), 7).unwrap();
        let w = window(2, 14);
        assert_eq!(p.sample_action(&w, &mut seeded(0), true).unwrap(), p.sample_action(&w, &mut seeded(9), true).unwrap());
        assert_eq!(p.sample_action(&w, &mut seeded(3), false).unwrap(), p.sample_action(&w, &mut seeded(3), false).unwrap());
        let lv = p.layout.log_var_head;
        p.params_mut().tensors_mut()[lv.b].data_mut().iter_mut().for_each(|x| *x = -1e3);
        let det = p.sample_action(&w, &mut seeded(0), true).unwrap();
        let sto = p.sample_action(&w, &mut seeded(1), false).unwrap();
        assert!(det.iter().zip(&sto).all(|(a, b)| (a - b).abs() < 1e-2));
    }

    #[test]
    fn rejects_bad_windows_and_configs() {
        let p = CdtPolicy::<f64>::new(small(), 8).unwrap();
        let mut w = window(4, 15);
        w.push_step(0.0, 0.0, vec![0.0; 3], 4, 10);
        assert!(p.predict(&w).is_err());
        assert!(p.predict(&ContextWindow::default()).is_err());
        let bad = PolicyConfig { embed_dim: 10, n_heads: 3, dropout: 1.5, ..small() };
        let msg = alloc::string::ToString::to_string(&bad.validate().unwrap_err());
        assert!(msg.contains("divisible") && msg.contains("dropout"));
    }

    #[test]
    fn window_from_trajectory_truncates_to_prefix() {
        let t = Trajectory::new(
            (0..5).map(|i| vec![i as f64, 0.0, 0.0]).collect(),
            vec![vec![0.0, 0.0]; 5],
            vec![1.0; 5],
            vec![0.0, 1.0, 0.0, 1.0, 0.0],
            10.0,
        )
        .unwrap();
        let a = AnnotatedTrajectory::new(t).unwrap();
        let w = ContextWindow::from_trajectory(&a, 1, 4).unwrap();
        assert_eq!((w.len(), w.timesteps.clone(), w.rtg.clone()), (2, vec![0, 1], vec![5.0, 4.0]));
        let w = ContextWindow::from_trajectory(&a, 4, 3).unwrap();
        assert_eq!((w.timesteps.clone(), w.ctg.clone()), (vec![2, 3, 4], vec![1.0, 1.0, 0.0]));
    }

    fn nll_gradient_report<T: Real>(h: f64) -> crate::autodiff::GradCheckReport {
        let cfg = PolicyConfig { dropout: 0.0, ..small() };
        let mut p = CdtPolicy::<T>::new(cfg, 9).unwrap();
        // Away from the near-zero attention gradients of the initialization.
        let mut rng = seeded(99);
        let jittered: Vec<f64> = p.params().flatten_f64().iter().map(|x| x + 0.3 * normal(&mut rng)).collect();
        p.params_mut().assign_flat_f64(&jittered).unwrap();
        let batch = [window(4, 16), window(2, 17)];
        let loss = |pol: &CdtPolicy<T>, grads: bool| {
            let mut g = Graph::new();
            let vars = pol.params().bind(&mut g, true);
            let heads = pol.forward(&mut g, &vars, &batch, false, &mut seeded(0)).unwrap();
            let target: Vec<T> = heads.positions.iter().flat_map(|&(b, t)| batch[b].actions[t].iter().map(|&x| T::of(x))).collect();
            let target = g.constant(Tensor::new(heads.positions.len(), 2, target).unwrap());
            let l = g.gaussian_nll(heads.mean, heads.log_var, target).unwrap();
            let value = g.value(l).item();
            let flat = grads.then(|| g.backward(l).unwrap().collect(&vars).iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>());
            (value, flat)
        };
        let analytic = loss(&p, true).1.unwrap();
        let theta = p.params().flatten();
        gradient_check(
            |th: &[T]| {
                let mut q = p.clone();
                q.params_mut().assign_flat(th)?;
                Ok(loss(&q, false).0)
            },
            &theta,
            &analytic,
            GradCheckConfig { h, ..GradCheckConfig::default() },
        )
        .unwrap()
    }

    #[test]
    fn nll_gradient_check() {
        let report = nll_gradient_report::<f64>(1e-6);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sampled_actions_stay_in_box(seed in 0u64..10_000, len in 1usize..=4) {
            let p = CdtPolicy::<f32>::new(small(), seed).unwrap();
            let w = window(len, seed + 1);
            let a = p.sample_action(&w, &mut seeded(seed), false).unwrap();
            prop_assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
