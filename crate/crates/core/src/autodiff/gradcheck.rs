use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Coordinates to compare; all of them when the parameter count is smaller.
    pub coords: usize,
    pub seed: u64,
    /// Five-point stencil, `O(h^4)` truncation; tolerates larger `h` where roundoff dominates.
    pub five_point: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-6, coords: 200, seed: 0, five_point: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` at `theta`.
///
/// Relative error per coordinate uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn gradient_check<T: Real>(
    mut f: impl FnMut(&[T]) -> Result<T>,
    theta: &[T],
    analytic: &[T],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    if analytic.len() != theta.len() {
        return Err(Error::Shape { op: "gradient_check", lhs: [theta.len(), 1], rhs: [analytic.len(), 1] });
    }
    let n = theta.len();
    let mut rng = seeded(cfg.seed);
    let coords: Vec<usize> = if cfg.coords >= n { (0..n).collect() } else { sample(&mut rng, n, cfg.coords).into_vec() };
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, checked: coords.len() };
    for &i in &coords {
        let orig = probe[i];
        let mut eval_at = |k: f64| -> Result<(f64, f64)> {
            let x = orig + T::of(k * cfg.h);
            probe[i] = x;
            let v = f(&probe)?;
            if !v.is_finite() {
                return Err(Error::NonFinite("gradient_check objective"));
            }
            Ok((x.as_f64(), v.as_f64()))
        };
        let numeric = if cfg.five_point {
            let (_, m2) = eval_at(-2.0)?;
            let (_, m1) = eval_at(-1.0)?;
            let (_, p1) = eval_at(1.0)?;
            let (_, p2) = eval_at(2.0)?;
            (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * cfg.h)
        } else {
            let (x_up, up) = eval_at(1.0)?;
            let (x_down, down) = eval_at(-1.0)?;
            // the perturbation actually applied, which differs from h in low precision
            (up - down) / (x_up - x_down)
        };
        probe[i] = orig;
        let a: f64 = analytic[i].as_f64();
        let rel = libm::fabs(a - numeric) / libm::fabs(a).max(libm::fabs(numeric)).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
