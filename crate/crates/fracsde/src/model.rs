//! The degenerate system under study and its coefficient catalogs.
//!
//! Drifts and test functions are catalog entries, never user expressions: each
//! drift ships with its exact spatial gradient and each test function with its
//! exact gradient, so estimator cross-checks compare like against like.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::frac_ops::Hurst;
use crate::grid::TimeGrid;
use crate::Result;

/// Second-component drift `b~(t, x, y)` with exact gradient blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Drift {
    /// `b~ = G1 x + G2 y`.
    Linear { g1: Vec<Vec<f64>>, g2: Vec<Vec<f64>> },
    /// `b~_i = -y_i + amp sin(x_i)` (needs `d1 == d2`).
    SinPerturbed { amp: f64 },
    /// `b~_i = -y_i + amp tanh(x_i)` (needs `d1 == d2`).
    TanhSaturated { amp: f64 },
}

/// Deterministic diffusion coefficient `sigma(t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SigmaSpec {
    Constant { value: Vec<Vec<f64>> },
    /// `sigma(t) = base + t * slope`.
    AffineTime { base: Vec<Vec<f64>>, slope: Vec<Vec<f64>> },
}

/// Hölder/Lipschitz exponents the formulas depend on.
///
/// `delta` is the time-Hölder order of `sigma`, `gamma`/`varrho` the space/time
/// Hölder orders of the drift gradient, `lambda` the path-regularity exponent
/// used in the quadratic-variation bound. Validity windows are tied to `H` and
/// checked by [`DegenerateModel::validate_for`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regularity {
    pub lipschitz: f64,
    pub sigma_holder: f64,
    pub delta: f64,
    pub grad_bound: f64,
    pub gamma: f64,
    pub varrho: f64,
    pub lambda: Option<f64>,
}

impl Default for Regularity {
    fn default() -> Self {
        Regularity {
            lipschitz: 1.0,
            sigma_holder: 0.0,
            delta: 1.0,
            grad_bound: 1.0,
            gamma: 0.9,
            varrho: 1.0,
            lambda: None,
        }
    }
}

impl Regularity {
    /// The `lambda` to use at Hurst parameter `h`: the stored value if present,
    /// otherwise the midpoint of its admissible window `((H-1/2)/gamma, H)`.
    pub fn lambda_for(&self, h: Hurst) -> f64 {
        self.lambda.unwrap_or_else(|| {
            let lo = (h.alpha() / self.gamma).max(1.0 - self.delta);
            0.5 * (lo + h.value())
        })
    }
}

/// The degenerate model: linear first-component drift `A x + B y`, catalog
/// second-component drift, deterministic diffusion.
#[derive(Debug, Clone)]
pub struct DegenerateModel {
    pub d1: usize,
    pub d2: usize,
    pub d: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub drift: Drift,
    pub sigma: SigmaSpec,
    pub reg: Regularity,
}

/// Serializable model description (the on-disk format).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d1: usize,
    pub d2: usize,
    pub d: usize,
    /// Row-major `d1 x d1`.
    pub a: Vec<Vec<f64>>,
    /// Row-major `d1 x d2`.
    pub b: Vec<Vec<f64>>,
    pub drift: Drift,
    pub sigma: SigmaSpec,
    #[serde(default)]
    pub regularity: Option<Regularity>,
}

fn rows_to_matrix(rows: &[Vec<f64>], nr: usize, nc: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::config(format!("{what} must be {nr}x{nc}")));
    }
    Ok(DMatrix::from_row_slice(nr, nc, &rows.iter().flatten().copied().collect::<Vec<_>>()))
}

impl DegenerateModel {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        if cfg.d1 == 0 || cfg.d2 == 0 || cfg.d == 0 {
            return Err(Error::config("dimensions d1, d2, d must all be >= 1"));
        }
        let a = rows_to_matrix(&cfg.a, cfg.d1, cfg.d1, "A")?;
        let b = rows_to_matrix(&cfg.b, cfg.d1, cfg.d2, "B")?;
        match &cfg.drift {
            Drift::Linear { g1, g2 } => {
                rows_to_matrix(g1, cfg.d2, cfg.d1, "drift.g1")?;
                rows_to_matrix(g2, cfg.d2, cfg.d2, "drift.g2")?;
            }
            Drift::SinPerturbed { .. } | Drift::TanhSaturated { .. } => {
                if cfg.d1 != cfg.d2 {
                    return Err(Error::config("componentwise drifts need d1 == d2"));
                }
            }
        }
        match &cfg.sigma {
            SigmaSpec::Constant { value } => {
                rows_to_matrix(value, cfg.d2, cfg.d, "sigma.value")?;
            }
            SigmaSpec::AffineTime { base, slope } => {
                rows_to_matrix(base, cfg.d2, cfg.d, "sigma.base")?;
                rows_to_matrix(slope, cfg.d2, cfg.d, "sigma.slope")?;
            }
        }
        Ok(DegenerateModel {
            d1: cfg.d1,
            d2: cfg.d2,
            d: cfg.d,
            a,
            b,
            drift: cfg.drift.clone(),
            sigma: cfg.sigma.clone(),
            reg: cfg.regularity.unwrap_or_default(),
        })
    }

    /// Scalar kinetic model `d1 = d2 = d = 1`, `A = 0`, `B = 1` with the given drift.
    pub fn kinetic_scalar(drift: Drift) -> Self {
        DegenerateModel {
            d1: 1,
            d2: 1,
            d: 1,
            a: DMatrix::zeros(1, 1),
            b: DMatrix::identity(1, 1),
            drift,
            sigma: SigmaSpec::Constant { value: vec![vec![1.0]] },
            reg: Regularity::default(),
        }
    }

    /// 2D nilpotent model `A = [[0,1],[0,0]]`, `B = (0,1)^T`, scalar noisy leg.
    pub fn kinetic_2d(drift: Drift) -> Self {
        DegenerateModel {
            d1: 2,
            d2: 1,
            d: 1,
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            drift,
            sigma: SigmaSpec::Constant { value: vec![vec![1.0]] },
            reg: Regularity::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d1 + self.d2
    }

    /// `b~(t, x, y)` into `out` (`d2` entries).
    pub fn drift_eval(&self, _t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        match &self.drift {
            Drift::Linear { g1, g2 } => {
                for i in 0..self.d2 {
                    let mut acc = 0.0;
                    for j in 0..self.d1 {
                        acc += g1[i][j] * x[j];
                    }
                    for j in 0..self.d2 {
                        acc += g2[i][j] * y[j];
                    }
                    out[i] = acc;
                }
            }
            Drift::SinPerturbed { amp } => {
                for i in 0..self.d2 {
                    out[i] = -y[i] + amp * x[i].sin();
                }
            }
            Drift::TanhSaturated { amp } => {
                for i in 0..self.d2 {
                    out[i] = -y[i] + amp * x[i].tanh();
                }
            }
        }
    }

    /// Gradient blocks `(∇^1 b~, ∇^2 b~)` at `(t, x, y)`, row-major `d2 x d1` and
    /// `d2 x d2`.
    pub fn drift_grad(&self, _t: f64, x: &[f64], _y: &[f64], g1: &mut [f64], g2: &mut [f64]) {
        g1.fill(0.0);
        g2.fill(0.0);
        match &self.drift {
            Drift::Linear { g1: m1, g2: m2 } => {
                for i in 0..self.d2 {
                    for j in 0..self.d1 {
                        g1[i * self.d1 + j] = m1[i][j];
                    }
                    for j in 0..self.d2 {
                        g2[i * self.d2 + j] = m2[i][j];
                    }
                }
            }
            Drift::SinPerturbed { amp } => {
                for i in 0..self.d2 {
                    g1[i * self.d1 + i] = amp * x[i].cos();
                    g2[i * self.d2 + i] = -1.0;
                }
            }
            Drift::TanhSaturated { amp } => {
                for i in 0..self.d2 {
                    let c = x[i].cosh();
                    g1[i * self.d1 + i] = amp / (c * c);
                    g2[i * self.d2 + i] = -1.0;
                }
            }
        }
    }

    /// `sigma(t)` as a `d2 x d` matrix.
    pub fn sigma_at(&self, t: f64) -> DMatrix<f64> {
        match &self.sigma {
            SigmaSpec::Constant { value } => DMatrix::from_row_slice(
                self.d2,
                self.d,
                &value.iter().flatten().copied().collect::<Vec<_>>(),
            ),
            SigmaSpec::AffineTime { base, slope } => {
                let b = DMatrix::from_row_slice(
                    self.d2,
                    self.d,
                    &base.iter().flatten().copied().collect::<Vec<_>>(),
                );
                let s = DMatrix::from_row_slice(
                    self.d2,
                    self.d,
                    &slope.iter().flatten().copied().collect::<Vec<_>>(),
                );
                b + s * t
            }
        }
    }

    pub fn sigma_is_constant(&self) -> bool {
        matches!(self.sigma, SigmaSpec::Constant { .. })
    }

    /// `theta(t) = sigma^*(t) (sigma sigma^*)^{-1}(t)`, `d x d2`.
    pub fn theta_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let sigma = self.sigma_at(t);
        let gram = &sigma * sigma.transpose();
        let inv = gram.clone().try_inverse().ok_or_else(|| {
            Error::degenerate(format!("sigma sigma^* singular at t = {t}"))
        })?;
        Ok(sigma.transpose() * inv)
    }

    /// Flat `theta(t_k)` samples for every node, row-major `d x d2` per node.
    pub fn theta_nodes(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let n = grid.steps();
        let mut out = vec![0.0; (n + 1) * self.d * self.d2];
        for k in 0..=n {
            let th = self.theta_at(grid.node(k))?;
            for r in 0..self.d {
                for c in 0..self.d2 {
                    out[k * self.d * self.d2 + r * self.d2 + c] = th[(r, c)];
                }
            }
        }
        Ok(out)
    }

    /// Checks the exponent windows tying the model to a Hurst parameter and the
    /// boundedness of `(sigma sigma^*)^{-1}` on the grid nodes.
    pub fn validate_for(&self, h: Hurst, grid: &TimeGrid) -> Result<()> {
        let hv = h.value();
        let r = &self.reg;
        let lo_delta = (1.0 - hv).max(hv - 0.5);
        if !(r.delta > lo_delta && r.delta <= 1.0) {
            return Err(Error::config(format!(
                "sigma Hölder order delta={} outside ({lo_delta}, 1] for H={hv}",
                r.delta
            )));
        }
        if !(r.gamma > 1.0 - 1.0 / (2.0 * hv) && r.gamma <= 1.0) {
            return Err(Error::config(format!(
                "gradient Hölder order gamma={} outside (1 - 1/(2H), 1] for H={hv}",
                r.gamma
            )));
        }
        if !(r.varrho > hv - 0.5 && r.varrho <= 1.0) {
            return Err(Error::config(format!(
                "time Hölder order varrho={} outside (H - 1/2, 1]",
                r.varrho
            )));
        }
        let lambda = r.lambda_for(h);
        if !(lambda > 1.0 - r.delta && lambda < hv && lambda * r.gamma > hv - 0.5) {
            return Err(Error::config(format!(
                "path exponent lambda={lambda} violates lambda in (1-delta, H), lambda*gamma > H-1/2"
            )));
        }
        for k in 0..=grid.steps() {
            self.theta_at(grid.node(k))?;
        }
        Ok(())
    }
}

/// Test functions `f` with exact gradients.
///
/// `CoordX`/`CoordY` are raw coordinate projections: outside the bounded class
/// the derivative formulas assume, but indispensable for the linear closed-form
/// checks, hence the `is_bounded` flag. The positive entries are the Harnack
/// probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    /// `f(z) = x_i` (unbounded, flagged).
    CoordX { index: usize },
    /// `f(z) = y_i` (unbounded, flagged).
    CoordY { index: usize },
    /// `f(z) = tanh(x_i)`.
    TanhX { index: usize },
    /// `f(z) = 1 + 0.5 tanh(x_i)`: strictly positive, bounded, C^1.
    PositiveTanhX { index: usize },
    /// `f(z) = exp(-|z|^2 / 2)`: strictly positive, bounded, C^1.
    PositiveGauss,
}

impl TestFunction {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "coord_x" => Ok(TestFunction::CoordX { index: 0 }),
            "coord_y" => Ok(TestFunction::CoordY { index: 0 }),
            "tanh_x" => Ok(TestFunction::TanhX { index: 0 }),
            "positive_tanh_x" => Ok(TestFunction::PositiveTanhX { index: 0 }),
            "positive_gauss" => Ok(TestFunction::PositiveGauss),
            other => Err(Error::config(format!(
                "unknown test function '{other}' (catalog: coord_x, coord_y, tanh_x, \
                 positive_tanh_x, positive_gauss)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::CoordX { .. } => "coord_x",
            TestFunction::CoordY { .. } => "coord_y",
            TestFunction::TanhX { .. } => "tanh_x",
            TestFunction::PositiveTanhX { .. } => "positive_tanh_x",
            TestFunction::PositiveGauss => "positive_gauss",
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, TestFunction::CoordX { .. } | TestFunction::CoordY { .. })
    }

    pub fn is_positive(&self) -> bool {
        matches!(self, TestFunction::PositiveTanhX { .. } | TestFunction::PositiveGauss)
    }

    /// `f(z)` for `z = (x, y)` laid out as `d1` then `d2` coordinates.
    pub fn eval(&self, z: &[f64], d1: usize) -> f64 {
        match self {
            TestFunction::CoordX { index } => z[*index],
            TestFunction::CoordY { index } => z[d1 + index],
            TestFunction::TanhX { index } => z[*index].tanh(),
            TestFunction::PositiveTanhX { index } => 1.0 + 0.5 * z[*index].tanh(),
            TestFunction::PositiveGauss => {
                (-0.5 * z.iter().map(|v| v * v).sum::<f64>()).exp()
            }
        }
    }

    pub fn grad(&self, z: &[f64], d1: usize) -> DVector<f64> {
        let mut g = DVector::zeros(z.len());
        match self {
            TestFunction::CoordX { index } => g[*index] = 1.0,
            TestFunction::CoordY { index } => g[d1 + index] = 1.0,
            TestFunction::TanhX { index } => {
                let c = z[*index].cosh();
                g[*index] = 1.0 / (c * c);
            }
            TestFunction::PositiveTanhX { index } => {
                let c = z[*index].cosh();
                g[*index] = 0.5 / (c * c);
            }
            TestFunction::PositiveGauss => {
                let f = self.eval(z, d1);
                for i in 0..z.len() {
                    g[i] = -z[i] * f;
                }
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_catalog_gradients_match_central_differences() {
        let models = [
            DegenerateModel::kinetic_scalar(Drift::SinPerturbed { amp: 0.3 }),
            DegenerateModel::kinetic_scalar(Drift::TanhSaturated { amp: 0.5 }),
            DegenerateModel::kinetic_scalar(Drift::Linear {
                g1: vec![vec![0.2]],
                g2: vec![vec![-1.0]],
            }),
        ];
        let eps = 1e-6;
        for m in &models {
            for (x0, y0) in [(0.3, -0.7), (-1.1, 0.4)] {
                let mut g1 = vec![0.0];
                let mut g2 = vec![0.0];
                m.drift_grad(0.0, &[x0], &[y0], &mut g1, &mut g2);
                let mut fp = [0.0];
                let mut fm = [0.0];
                m.drift_eval(0.0, &[x0 + eps], &[y0], &mut fp);
                m.drift_eval(0.0, &[x0 - eps], &[y0], &mut fm);
                assert!((g1[0] - (fp[0] - fm[0]) / (2.0 * eps)).abs() < 1e-6);
                m.drift_eval(0.0, &[x0], &[y0 + eps], &mut fp);
                m.drift_eval(0.0, &[x0], &[y0 - eps], &mut fm);
                assert!((g2[0] - (fp[0] - fm[0]) / (2.0 * eps)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn test_function_gradients_match_central_differences() {
        let fns = [
            TestFunction::CoordX { index: 0 },
            TestFunction::CoordY { index: 0 },
            TestFunction::TanhX { index: 0 },
            TestFunction::PositiveTanhX { index: 0 },
            TestFunction::PositiveGauss,
        ];
        let z = [0.4, -0.9];
        let eps = 1e-6;
        for f in &fns {
            let g = f.grad(&z, 1);
            for i in 0..2 {
                let mut zp = z;
                let mut zm = z;
                zp[i] += eps;
                zm[i] -= eps;
                let fd = (f.eval(&zp, 1) - f.eval(&zm, 1)) / (2.0 * eps);
                assert!((g[i] - fd).abs() < 1e-6, "{} coord {i}", f.name());
            }
        }
    }

    #[test]
    fn theta_for_identity_sigma() {
        let m = DegenerateModel::kinetic_scalar(Drift::SinPerturbed { amp: 0.3 });
        let th = m.theta_at(0.3).unwrap();
        assert_eq!(th[(0, 0)], 1.0);
    }

    #[test]
    fn validation_windows() {
        let m = DegenerateModel::kinetic_scalar(Drift::SinPerturbed { amp: 0.3 });
        let grid = TimeGrid::new(1.0, 16).unwrap();
        for hval in [0.6, 0.75, 0.9] {
            m.validate_for(Hurst::new(hval).unwrap(), &grid).unwrap();
        }
        let mut bad = m.clone();
        bad.reg.gamma = 0.1; // below 1 - 1/(2H) for H >= 0.6
        assert!(bad.validate_for(Hurst::new(0.75).unwrap(), &grid).is_err());
        let mut sing = m;
        sing.sigma = SigmaSpec::Constant { value: vec![vec![0.0]] };
        assert!(sing.validate_for(Hurst::new(0.75).unwrap(), &grid).is_err());
    }

    #[test]
    fn test_function_parse_and_flags() {
        assert!(TestFunction::parse("coord_x").unwrap().is_bounded() == false);
        assert!(TestFunction::parse("positive_tanh_x").unwrap().is_positive());
        assert!(TestFunction::parse("nope").is_err());
    }
}
