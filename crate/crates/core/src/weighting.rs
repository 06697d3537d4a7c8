//! Trajectory-level return/cost weights and the expert-KL ≡ reweighting check.
//!
//! A trajectory with return `R` and cost `C` gets weight
//! `exp(alpha * R) * sigmoid(gamma * (c_lim - C))`, evaluated in log space.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Mlp, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::{normal, seeded, Rng};
use crate::trajectory::TrajectoryDataset;

/// Upper clamp on `log W`.
pub const MAX_LOG_WEIGHT: f64 = 30.0;
/// Lower clamp on `log W`, keeping weights strictly positive in `f64`.
pub const MIN_LOG_WEIGHT: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    /// Return sensitivity.
    pub alpha: f64,
    /// Cost sensitivity.
    pub gamma: f64,
    /// Trajectory-level cost reference.
    pub c_lim: f64,
    pub normalize_to_mean_one: bool,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self { alpha: 0.01, gamma: 0.5, c_lim: 10.0, normalize_to_mean_one: true }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            problems.push(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            problems.push(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.c_lim.is_finite() && self.c_lim >= 0.0) {
            problems.push(format!("c_lim must be finite and >= 0, got {}", self.c_lim));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }
}

/// `log(sigmoid(x))`, stable for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

pub fn log_trajectory_weight(ret: f64, cost: f64, cfg: &WeightConfig) -> Result<f64> {
    if !ret.is_finite() || !cost.is_finite() {
        return Err(Error::NonFinite("trajectory_weight inputs"));
    }
    let lw = cfg.alpha * ret + log_sigmoid(cfg.gamma * (cfg.c_lim - cost));
    Ok(lw.clamp(MIN_LOG_WEIGHT, MAX_LOG_WEIGHT))
}

/// Return/cost shaped trajectory weight; strictly positive and finite.
pub fn trajectory_weight(ret: f64, cost: f64, cfg: &WeightConfig) -> Result<f64> {
    Ok(libm::exp(log_trajectory_weight(ret, cost, cfg)?))
}

/// Rescales to mean one: `w[i] * n / Σ w`.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::Empty("weights"));
    }
    if let Some(i) = weights.iter().position(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(invalid(format!("weight {i} is not a positive finite number: {}", weights[i])));
    }
    let total: f64 = weights.iter().sum();
    let n = weights.len() as f64;
    Ok(weights.iter().map(|w| w * n / total).collect())
}

/// Per-trajectory weights for a dataset, normalized when configured.
pub fn dataset_weights(dataset: &TrajectoryDataset, cfg: &WeightConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let raw = dataset
        .trajectories()
        .iter()
        .map(|t| trajectory_weight(t.ret(), t.cost(), cfg))
        .collect::<Result<Vec<_>>>()?;
    if cfg.normalize_to_mean_one {
        normalize_weights(&raw)
    } else {
        Ok(raw)
    }
}

/// Weight induced by expert-KL regularization: `1 + alpha_kl` on experts, `1` elsewhere.
pub fn rdt_weight(is_expert: bool, alpha_kl: f64) -> Result<f64> {
    if !(alpha_kl >= 0.0) {
        return Err(invalid(format!("alpha_kl must be >= 0, got {alpha_kl}")));
    }
    Ok(if is_expert { 1.0 + alpha_kl } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Config {
    /// Fixed isotropic policy variance.
    pub sigma_sq: f64,
    /// Expert KL coefficient.
    pub alpha_kl: f64,
    /// Indices of expert trajectories.
    pub expert_indices: BTreeSet<usize>,
}

/// Mean network `state -> action mean` used by the reweighting check.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanNetwork {
    pub mlp: Mlp,
    pub params: ParamStore<f64>,
}

impl MeanNetwork {
    /// `hidden` empty gives a linear map.
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut dims = alloc::vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(action_dim);
        let mut params = ParamStore::new();
        let mlp = Mlp::new(&mut params, "mean", &dims, Activation::Tanh, 0.5, rng);
        Self { mlp, params }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Point {
    pub rdt_loss: f64,
    pub weighted_loss: f64,
    /// `weighted_loss - rdt_loss`.
    pub offset: f64,
    pub max_rel_grad_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub points: Vec<Prop1Point>,
    /// `alpha_kl * Σ_{expert steps} (d/2) ln(2π σ²)`.
    pub predicted_offset: f64,
    pub max_rel_grad_diff: f64,
    /// `max offset - min offset` across points.
    pub offset_spread: f64,
    pub max_offset_error: f64,
    pub pass: bool,
}

/// Gradient tolerance and loss-offset tolerance of the check.
pub const PROP1_TOL: f64 = 1e-6;

struct Prop1Data {
    states: Tensor<f64>,
    actions: Tensor<f64>,
    expert_row: Vec<bool>,
}

fn prop1_data(dataset: &TrajectoryDataset, experts: &BTreeSet<usize>) -> Result<Prop1Data> {
    let (sd, ad) = (dataset.state_dim(), dataset.action_dim());
    let (mut s, mut a, mut e) = (Vec::new(), Vec::new(), Vec::new());
    for (i, t) in dataset.trajectories().iter().enumerate() {
        for step in 0..t.horizon() {
            s.extend_from_slice(&t.base.states[step]);
            a.extend_from_slice(&t.base.actions[step]);
            e.push(experts.contains(&i));
        }
    }
    let rows = e.len();
    Ok(Prop1Data { states: Tensor::new(rows, sd, s)?, actions: Tensor::new(rows, ad, a)?, expert_row: e })
}

/// Evaluates both objectives and their gradients at one parameter point.
///
/// Expert-KL route: `Σ NLL + α Σ_{experts} ‖μ − a‖² / (2σ²)` (the KL between equal-variance
/// Gaussians centred at the policy mean and the logged expert action).
/// Weighted route: `Σ W_τ NLL` with `W_τ = 1 + α·[τ expert]`.
fn prop1_point(net: &MeanNetwork, data: &Prop1Data, cfg: &Prop1Config) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let rows = data.expert_row.len();
    let ad = data.actions.cols();
    let log_var = Tensor::filled(rows, ad, libm::log(cfg.sigma_sq));

    let run = |weighted: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = net.params.bind(&mut g, true);
        let s = g.constant(data.states.clone());
        let a = g.constant(data.actions.clone());
        let lv = g.constant(log_var.clone());
        let mu = net.mlp.forward(&mut g, &vars, s)?;
        let nll = g.gaussian_nll_rows(mu, lv, a)?;
        let loss = if weighted {
            let w = data
                .expert_row
                .iter()
                .map(|&e| rdt_weight(e, cfg.alpha_kl))
                .collect::<Result<Vec<_>>>()?;
            g.weighted_sum(nll, &w)?
        } else {
            let base = g.sum(nll)?;
            let diff = g.sub(mu, a)?;
            let sq = g.square(diff)?;
            let per_row = g.row_sum(sq)?;
            let kl = g.scale(per_row, 1.0 / (2.0 * cfg.sigma_sq))?;
            let mask: Vec<f64> = data.expert_row.iter().map(|&e| if e { cfg.alpha_kl } else { 0.0 }).collect();
            let reg = g.weighted_sum(kl, &mask)?;
            g.add(base, reg)?
        };
        let grads = g.backward(loss)?;
        let flat = grads.collect(&vars).into_iter().flat_map(Tensor::into_data).collect();
        Ok((g.value(loss).item(), flat))
    };
    let (rdt, g_rdt) = run(false)?;
    let (weighted, g_w) = run(true)?;
    Ok((rdt, weighted, g_rdt, g_w))
}

/// Checks at `n_points` random parameter points around `net`'s parameters that the
/// expert-KL objective and the `1 + α·[expert]` weighted NLL share gradients and differ
/// by a parameter-independent constant.
pub fn prop1_gradient_check(
    dataset: &TrajectoryDataset,
    cfg: &Prop1Config,
    net: &MeanNetwork,
    n_points: usize,
    seed: u64,
) -> Result<Prop1Report> {
    if !(cfg.sigma_sq > 0.0) {
        return Err(invalid(format!("sigma_sq must be > 0, got {}", cfg.sigma_sq)));
    }
    rdt_weight(true, cfg.alpha_kl)?;
    if cfg.expert_indices.is_empty() && cfg.alpha_kl > 0.0 {
        return Err(invalid("expert set is empty while alpha_kl > 0"));
    }
    if let Some(&i) = cfg.expert_indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(invalid(format!("expert index {i} out of range for {} trajectories", dataset.len())));
    }
    if n_points == 0 {
        return Err(invalid("n_points must be >= 1"));
    }
    let data = prop1_data(dataset, &cfg.expert_indices)?;
    let d = dataset.action_dim() as f64;
    let expert_steps = data.expert_row.iter().filter(|&&e| e).count() as f64;
    let predicted_offset =
        cfg.alpha_kl * expert_steps * 0.5 * d * libm::log(2.0 * core::f64::consts::PI * cfg.sigma_sq);

    let mut rng = seeded(seed);
    let mut probe = net.clone();
    let base = net.params.flatten();
    let mut points = Vec::with_capacity(n_points);
    for k in 0..n_points {
        if k > 0 {
            let moved: Vec<f64> = base.iter().map(|&x| x + 0.5 * normal(&mut rng)).collect();
            probe.params.assign_flat(&moved)?;
        }
        let (rdt, weighted, g1, g2) = prop1_point(&probe, &data, cfg)?;
        let max_rel = g1
            .iter()
            .zip(&g2)
            .map(|(&a, &b)| libm::fabs(a - b) / libm::fabs(a).max(libm::fabs(b)).max(1e-8))
            .fold(0.0, f64::max);
        points.push(Prop1Point { rdt_loss: rdt, weighted_loss: weighted, offset: weighted - rdt, max_rel_grad_diff: max_rel });
    }
    let max_rel_grad_diff = points.iter().map(|p| p.max_rel_grad_diff).fold(0.0, f64::max);
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.offset), hi.max(p.offset)));
    let offset_spread = hi - lo;
    let max_offset_error = points.iter().map(|p| libm::fabs(p.offset - predicted_offset)).fold(0.0, f64::max);
    let pass = max_rel_grad_diff <= PROP1_TOL && offset_spread <= PROP1_TOL;
    Ok(Prop1Report { points, predicted_offset, max_rel_grad_diff, offset_spread, max_offset_error, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Trajectory;
    use alloc::vec;
    use proptest::prelude::*;

    fn cfg(alpha: f64, gamma: f64, c_lim: f64) -> WeightConfig {
        WeightConfig { alpha, gamma, c_lim, normalize_to_mean_one: false }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(trajectory_weight(123.0, 5.0, &cfg(0.0, 1.0, 5.0)).unwrap(), 0.5);
        assert!((trajectory_weight(core::f64::consts::LN_2, 5.0, &cfg(1.0, 1.0, 5.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!((trajectory_weight(0.0, 5.0 - 1000.0, &cfg(1.0, 1.0, 5.0)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weight_clamps_instead_of_overflowing() {
        let w = trajectory_weight(1e6, 0.0, &cfg(1.0, 1.0, 0.0)).unwrap();
        assert_eq!(w, libm::exp(MAX_LOG_WEIGHT));
        let w = trajectory_weight(0.0, 1e9, &cfg(0.0, 1.0, 0.0)).unwrap();
        assert!(w > 0.0 && w.is_finite());
        assert!(trajectory_weight(f64::NAN, 0.0, &cfg(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(normalize_weights(&[1.0, 3.0]).unwrap(), vec![0.5, 1.5]);
        assert_eq!(normalize_weights(&[2.0]).unwrap(), vec![1.0]);
        assert!(normalize_weights(&[1.0, 0.0]).is_err());
        assert!(normalize_weights(&[]).is_err());
    }

    #[test]
    fn rdt_weight_examples() {
        assert_eq!(rdt_weight(true, 0.5).unwrap(), 1.5);
        assert_eq!(rdt_weight(false, 0.5).unwrap(), 1.0);
        assert_eq!(rdt_weight(true, 0.0).unwrap(), 1.0);
        assert!(rdt_weight(true, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn weight_monotone(r1 in -20.0f64..20.0, dr in 0.01f64..10.0, c1 in 0.0f64..30.0, dc in 0.01f64..10.0,
                           alpha in 0.01f64..1.0, gamma in 0.01f64..1.0) {
            let k = cfg(alpha, gamma, 10.0);
            prop_assert!(trajectory_weight(r1 + dr, c1, &k).unwrap() > trajectory_weight(r1, c1, &k).unwrap());
            prop_assert!(trajectory_weight(r1, c1 + dc, &k).unwrap() < trajectory_weight(r1, c1, &k).unwrap());
        }

        #[test]
        fn degenerate_sensitivities(r in -20.0f64..20.0, c in 0.0f64..30.0, r2 in -20.0f64..20.0, alpha in 0.0f64..1.0) {
            let only_cost = cfg(0.0, 0.7, 10.0);
            prop_assert_eq!(trajectory_weight(r, c, &only_cost).unwrap(), trajectory_weight(r2, c, &only_cost).unwrap());
            let only_ret = cfg(alpha, 0.0, 10.0);
            let expected = libm::exp(alpha * r) * 0.5;
            prop_assert!((trajectory_weight(r, c, &only_ret).unwrap() - expected).abs() <= 1e-12 * expected);
        }

        #[test]
        fn normalization_keeps_ratios(w in prop::collection::vec(1e-3f64..1e3, 2..20)) {
            let n = normalize_weights(&w).unwrap();
            let mean = n.iter().sum::<f64>() / n.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
            for i in 1..w.len() {
                prop_assert!((n[i] / n[0] - w[i] / w[0]).abs() <= 1e-12 * (w[i] / w[0]).max(1.0));
            }
        }
    }

    fn line_dataset() -> TrajectoryDataset {
        let mk = |xs: [f64; 2], acts: [f64; 2]| {
            Trajectory::new(vec![vec![xs[0]], vec![xs[1]]], vec![vec![acts[0]], vec![acts[1]]], vec![0.0; 2], vec![0.0; 2], 1.0).unwrap()
        };
        TrajectoryDataset::new(
            vec![mk([0.1, -0.4], [0.3, -0.2]), mk([0.7, 0.2], [0.5, 0.9]), mk([-0.3, 0.8], [-0.6, 0.1]), mk([1.0, -1.0], [0.2, -0.8])],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn prop1_linear_matches_closed_form() {
        // mean = w*s + b; both objectives reduce to Σ_i c_i (w s_i + b - a_i) / σ² with
        // c_i = 1 + α[expert]; computed here independently of the autodiff path.
        let ds = line_dataset();
        let experts: BTreeSet<usize> = [0, 2].into_iter().collect();
        let cfg = Prop1Config { sigma_sq: 0.3, alpha_kl: 0.5, expert_indices: experts.clone() };
        let mut net = MeanNetwork::new(1, 1, &[], &mut seeded(3));
        net.params.assign_flat(&[0.8, -0.1]).unwrap();
        let data = prop1_data(&ds, &experts).unwrap();
        let (_, _, g_rdt, g_w) = prop1_point(&net, &data, &cfg).unwrap();
        let (mut gw, mut gb) = (0.0, 0.0);
        for (i, t) in ds.trajectories().iter().enumerate() {
            let c = if experts.contains(&i) { 1.5 } else { 1.0 };
            for k in 0..2 {
                let (s, a) = (t.base.states[k][0], t.base.actions[k][0]);
                let r = (0.8 * s - 0.1 - a) / 0.3;
                gw += c * r * s;
                gb += c * r;
            }
        }
        for g in [&g_rdt, &g_w] {
            assert!((g[0] - gw).abs() < 1e-12 && (g[1] - gb).abs() < 1e-12, "{g:?} vs {gw} {gb}");
        }
        let report = prop1_gradient_check(&ds, &cfg, &net, 10, 1).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn prop1_alpha_zero_is_plain_nll() {
        let ds = line_dataset();
        let cfg = Prop1Config { sigma_sq: 1.0, alpha_kl: 0.0, expert_indices: BTreeSet::new() };
        let net = MeanNetwork::new(1, 1, &[4], &mut seeded(1));
        let report = prop1_gradient_check(&ds, &cfg, &net, 5, 2).unwrap();
        assert!(report.points.iter().all(|p| p.offset == 0.0 && p.max_rel_grad_diff == 0.0));
    }

    #[test]
    fn prop1_two_layer_offset_matches_nll_constant() {
        let ds = line_dataset();
        let cfg = Prop1Config { sigma_sq: 0.2, alpha_kl: 2.0, expert_indices: [1, 3].into_iter().collect() };
        let net = MeanNetwork::new(1, 1, &[8, 8], &mut seeded(5));
        let report = prop1_gradient_check(&ds, &cfg, &net, 20, 3).unwrap();
        assert!(report.pass, "{report:?}");
        // alpha * |experts| * H * (d/2) ln(2π σ²)
        let expected = 2.0 * 2.0 * 2.0 * 0.5 * (2.0 * core::f64::consts::PI * 0.2).ln();
        assert!((report.predicted_offset - expected).abs() < 1e-12);
        assert!(report.max_offset_error < 1e-9);
    }

    #[test]
    fn prop1_rejects_bad_configs() {
        let ds = line_dataset();
        let net = MeanNetwork::new(1, 1, &[], &mut seeded(1));
        let bad_var = Prop1Config { sigma_sq: 0.0, alpha_kl: 1.0, expert_indices: [0].into_iter().collect() };
        assert!(prop1_gradient_check(&ds, &bad_var, &net, 2, 0).is_err());
        let no_experts = Prop1Config { sigma_sq: 1.0, alpha_kl: 1.0, expert_indices: BTreeSet::new() };
        assert!(prop1_gradient_check(&ds, &no_experts, &net, 2, 0).is_err());
        let out_of_range = Prop1Config { sigma_sq: 1.0, alpha_kl: 1.0, expert_indices: [9].into_iter().collect() };
        assert!(prop1_gradient_check(&ds, &out_of_range, &net, 2, 0).is_err());
    }

    #[test]
    fn dataset_weights_normalized() {
        let ds = line_dataset();
        let w = dataset_weights(&ds, &WeightConfig::default()).unwrap();
        assert!((w.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }
}
