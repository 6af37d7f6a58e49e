//! Fractional Riemann-Liouville integrals and Weyl (Marchaud-form) derivatives on
//! a uniform grid, discretized by product integration: the singular power kernel
//! is integrated analytically against a piecewise-linear model of the smooth
//! factor, so nothing ever touches the diagonal singularity head-on.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::Error;
use crate::grid::TimeGrid;
use crate::Result;

/// Hurst parameter, restricted to `(1/2, 1)` in production.
///
/// `H = 1/2` is admitted in diagnostic mode only; every fractional operator then
/// takes its classical Brownian branch exactly rather than approximately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hurst(f64);

impl Hurst {
    pub fn new(h: f64) -> Result<Self> {
        if !(h > 0.5 && h < 1.0) {
            return Err(Error::config(format!("Hurst parameter must lie in (1/2, 1), got {h}")));
        }
        Ok(Hurst(h))
    }

    /// Diagnostic constructor admitting `H = 1/2` alongside the production range.
    pub fn diagnostic(h: f64) -> Result<Self> {
        if h == 0.5 {
            Ok(Hurst(0.5))
        } else {
            Hurst::new(h)
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    pub fn is_brownian(&self) -> bool {
        self.0 == 0.5
    }

    /// The fractional order `H - 1/2` entering the kernel operators.
    pub fn alpha(&self) -> f64 {
        self.0 - 0.5
    }
}

/// Left fractional integral `I^alpha_{0+} f` of order `alpha > 0` at every node.
///
/// Weights are exact for piecewise-linear `f`, which handles the integrable
/// `(x - y)^{alpha - 1}` singularity at the moving endpoint.
pub fn rl_integral_left(grid: &TimeGrid, f: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_samples(grid, f)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("integral order must be positive, got {alpha}")));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let inv_gamma = 1.0 / gamma(alpha);
    // (k*dt)^alpha and (k*dt)^(alpha+1) for the analytic panel moments
    let pow_a: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).powf(alpha)).collect();
    let pow_a1: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).powf(alpha + 1.0)).collect();

    let mut out = vec![0.0; n + 1];
    for j in 1..=n {
        let tj = grid.node(j);
        let mut acc = 0.0;
        for i in 0..j {
            let slope = (f[i + 1] - f[i]) / dt;
            // f_lin(y) = a0 - slope * u with u = t_j - y
            let a0 = f[i] + slope * (tj - grid.node(i));
            let (u1a, u2a) = (pow_a[j - i - 1], pow_a[j - i]);
            let (u1b, u2b) = (pow_a1[j - i - 1], pow_a1[j - i]);
            acc += a0 * (u2a - u1a) / alpha - slope * (u2b - u1b) / (alpha + 1.0);
        }
        out[j] = inv_gamma * acc;
    }
    Ok(out)
}

/// Left Weyl derivative `D^alpha_{0+} f` for `alpha` in `(0, 1)` at every node,
/// via the two-term form `f(x)/x^alpha + alpha ∫ (f(x)-f(y))/(x-y)^{alpha+1} dy`.
///
/// On the cell adjacent to `y = x` the increment is replaced by its linear model,
/// whose weight integrates analytically; the resulting contribution is finite for
/// any `alpha < 1`. At `x = 0` the singular first term is evaluated at the first
/// cell midpoint so the node carries a defined (never consumed) value.
pub fn weyl_derivative_left(grid: &TimeGrid, f: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_samples(grid, f)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("derivative order must lie in (0, 1), got {alpha}")));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let inv_gamma = 1.0 / gamma(1.0 - alpha);
    let pow_neg: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).powf(-alpha)).collect(); // entry 0 unused
    let pow_pos: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).powf(1.0 - alpha)).collect();

    let mut out = vec![0.0; n + 1];
    out[0] = inv_gamma * f[0] * (0.5 * dt).powf(-alpha);
    for j in 1..=n {
        let tj = grid.node(j);
        let mut acc = f[j] * pow_neg[j];
        for i in 0..j {
            let slope = (f[i + 1] - f[i]) / dt;
            // f(x) - f_lin(y) = c0 + slope * u, u = t_j - y; c0 = 0 on the diagonal cell
            let c0 = f[j] - f[i] - slope * (tj - grid.node(i));
            let s_term = slope * (pow_pos[j - i] - pow_pos[j - i - 1]) / (1.0 - alpha);
            if i + 1 == j {
                acc += alpha * s_term;
            } else {
                acc += alpha * (c0 * (pow_neg[j - i - 1] - pow_neg[j - i]) / alpha + s_term);
            }
        }
        out[j] = inv_gamma * acc;
    }
    Ok(out)
}

fn check_samples(grid: &TimeGrid, f: &[f64]) -> Result<()> {
    if f.len() != grid.steps() + 1 {
        return Err(Error::config(format!(
            "sampled function has {} values, grid has {} nodes",
            f.len(),
            grid.steps() + 1
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("sampled function contains non-finite values"));
    }
    Ok(())
}
