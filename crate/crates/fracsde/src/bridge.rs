//! Linear-control machinery: matrix exponentials, the Kalman rank condition,
//! the weighted controllability Gramian, the polynomial weights `alpha_1`,
//! `alpha_2`, and the bridge pair `(g, g~)` that steers the coupled trajectory
//! into exact terminal coalescence.
//!
//! The bridge is built so that `g~(0) = v_2`, `g~(T) = 0` hold exactly by the
//! endpoint values of the alphas, while `g(T) = 0` is a quadrature-level
//! cancellation certified by a postcondition check.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Error;
use crate::grid::TimeGrid;
use crate::model::DegenerateModel;
use crate::Result;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_THRESHOLD: f64 = 1e-10;

/// `e^{tA}`; exact truncated series for exactly nilpotent `A`, Padé
/// scaling-and-squaring otherwise.
pub fn matrix_exp(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    if let Some(idx) = nilpotency_index(a) {
        let mut acc = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..idx {
            term = (&term * a) * (t / k as f64);
            acc += &term;
        }
        return acc;
    }
    (a * t).exp()
}

/// Smallest `k >= 1` with `A^k = 0` exactly (entries identically zero), if any.
pub fn nilpotency_index(a: &DMatrix<f64>) -> Option<usize> {
    let n = a.nrows();
    let mut power = a.clone();
    for k in 1..=n {
        if power.iter().all(|&v| v == 0.0) {
            return Some(k);
        }
        power = &power * a;
    }
    None
}

/// Outcome of the Kalman rank scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KalmanRank {
    /// Smallest `k0` with `rank [B, AB, ..., A^{k0} B] = d1`.
    Feasible { k0: usize },
    Infeasible,
}

/// Scans `k0 = 0 .. d1-1` for full row rank of the stacked controllability
/// matrix; rank via singular values with the [`RANK_THRESHOLD`] convention.
pub fn kalman_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> KalmanRank {
    let d1 = a.nrows();
    let dcols = b.ncols();
    let mut blocks = Vec::with_capacity(d1);
    let mut current = b.clone();
    for _ in 0..d1 {
        blocks.push(current.clone());
        current = a * &current;
    }
    for k0 in 0..d1 {
        let mut stacked = DMatrix::zeros(d1, (k0 + 1) * dcols);
        for (i, block) in blocks.iter().take(k0 + 1).enumerate() {
            stacked.view_mut((0, i * dcols), (d1, dcols)).copy_from(block);
        }
        let sv = stacked.svd(false, false).singular_values;
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let rank = sv.iter().filter(|&&s| s > RANK_THRESHOLD * max && max > 0.0).count();
        if rank == d1 {
            return KalmanRank::Feasible { k0 };
        }
    }
    KalmanRank::Infeasible
}

/// How `alpha_1` is chosen.
///
/// `Endpoint` only pins `alpha_1(0) = 1`, `alpha_1(T) = 0` (the simplest linear
/// choice); the bridge then needs a third Gramian term to cancel `g(T)`.
/// `Moment` additionally kills `∫_0^T alpha_1(t) e^{(T-t)A} B dt`, which makes
/// that third term vanish identically; it requires a nilpotent `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BridgeMode {
    Endpoint,
    Moment,
}

/// Which linear system produced the `Moment`-mode coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CoeffSystem {
    /// Endpoint mode: no coefficient system at all.
    None,
    /// The inverse-binomial system solved in least squares and validated.
    Binomial,
    /// Fallback: exact power-moment conditions `∫ alpha_1 (T-t)^j dt = 0`.
    MomentFallback,
}

/// `alpha_1` as a polynomial in `tau = (T - t)/T`: coefficients of `tau^i`,
/// `i = 1..`, plus evaluation helpers.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaPair {
    pub horizon: f64,
    /// Coefficient of `tau^{i+1}` at index `i`.
    pub a1_coeffs: Vec<f64>,
    pub system: CoeffSystem,
}

impl AlphaPair {
    pub fn alpha1(&self, t: f64) -> f64 {
        let tau = (self.horizon - t) / self.horizon;
        let mut acc = 0.0;
        let mut p = tau;
        for c in &self.a1_coeffs {
            acc += c * p;
            p *= tau;
        }
        acc
    }

    pub fn alpha1_prime(&self, t: f64) -> f64 {
        let tau = (self.horizon - t) / self.horizon;
        let mut acc = 0.0;
        let mut p = 1.0;
        for (i, c) in self.a1_coeffs.iter().enumerate() {
            acc += c * (i as f64 + 1.0) * p;
            p *= tau;
        }
        -acc / self.horizon
    }

    pub fn alpha2(&self, t: f64) -> f64 {
        t * (self.horizon - t) / (self.horizon * self.horizon)
    }

    pub fn alpha2_prime(&self, t: f64) -> f64 {
        (self.horizon - 2.0 * t) / (self.horizon * self.horizon)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc *= (n - i) as f64 / (k - i) as f64;
    }
    acc
}

/// `∫_0^T alpha_1(t) e^{(T-t)A} B dt` by composite Simpson on 2048 internal
/// panels; the moment-mode acceptance gate.
fn alpha1_moment_integral(
    alpha: &AlphaPair,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> DMatrix<f64> {
    let t_end = alpha.horizon;
    let m = 2048usize;
    let h = t_end / m as f64;
    let mut acc = DMatrix::zeros(b.nrows(), b.ncols());
    for k in 0..=m {
        let t = t_end * k as f64 / m as f64;
        let w = if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += matrix_exp(a, t_end - t) * b * (alpha.alpha1(t) * w);
    }
    acc * (h / 3.0)
}

/// Builds `(alpha_1, alpha_2)` for the requested mode.
///
/// Moment mode solves the inverse-binomial coefficient system first, validates
/// the defining integral directly, and falls back to the power-moment system
/// `∫_0^T alpha_1(t) (T-t)^j dt = 0, j = 0..n0-1` when validation fails; the
/// system actually used is recorded in the result.
pub fn alpha_functions(
    mode: BridgeMode,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    horizon: f64,
) -> Result<AlphaPair> {
    match mode {
        BridgeMode::Endpoint => Ok(AlphaPair {
            horizon,
            a1_coeffs: vec![1.0],
            system: CoeffSystem::None,
        }),
        BridgeMode::Moment => {
            let n0 = nilpotency_index(a).ok_or_else(|| {
                Error::config(
                    "moment mode requires a nilpotent A (A^{n0} = 0); use endpoint mode",
                )
            })?;
            let tol = 1e-8 * b.norm().max(1e-300);

            // inverse-binomial system: n0 + 2 equations, n0 + 1 unknowns
            let unknowns = n0 + 1;
            let mut m = DMatrix::zeros(n0 + 2, unknowns);
            let mut rhs = DVector::zeros(n0 + 2);
            for i in 1..=unknowns {
                m[(0, i - 1)] = 1.0;
            }
            rhs[0] = 1.0;
            for j in 1..=n0 + 1 {
                for i in 1..=unknowns {
                    m[(j, i - 1)] = 1.0 / binomial(i + j + 1, j + 1);
                }
            }
            let svd = m.svd(true, true);
            if let Ok(sol) = svd.solve(&rhs, 1e-12) {
                let candidate = AlphaPair {
                    horizon,
                    a1_coeffs: sol.iter().copied().collect(),
                    system: CoeffSystem::Binomial,
                };
                let endpoint_ok = (candidate.alpha1(0.0) - 1.0).abs() < 1e-9;
                if endpoint_ok && alpha1_moment_integral(&candidate, a, b).norm() <= tol {
                    return Ok(candidate);
                }
            }

            // power-moment fallback: Σ a_i = 1 and Σ a_i/(i+m+1) = 0, m = 0..n0-1
            let mut m2 = DMatrix::zeros(unknowns, unknowns);
            let mut rhs2 = DVector::zeros(unknowns);
            for i in 1..=unknowns {
                m2[(0, i - 1)] = 1.0;
            }
            rhs2[0] = 1.0;
            for mm in 0..n0 {
                for i in 1..=unknowns {
                    m2[(mm + 1, i - 1)] = 1.0 / (i + mm + 1) as f64;
                }
            }
            let sol = m2.lu().solve(&rhs2).ok_or_else(|| {
                Error::degenerate("alpha_1 coefficient system singular".to_string())
            })?;
            let candidate = AlphaPair {
                horizon,
                a1_coeffs: sol.iter().copied().collect(),
                system: CoeffSystem::MomentFallback,
            };
            let residual = alpha1_moment_integral(&candidate, a, b).norm();
            if residual > tol {
                return Err(Error::degenerate(format!(
                    "alpha_1 moment validation failed: |∫ alpha_1 e^((T-t)A) B dt| = \
                     {residual:.3e} > {tol:.3e}"
                )));
            }
            Ok(candidate)
        }
    }
}

/// Eigenvalue certificate of a Gramian.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GramianCertificate {
    pub min_eig: f64,
    pub max_eig: f64,
}

/// `U_T = ∫_0^T alpha_2(s) e^{(T-s)A} B B^* e^{(T-s)A^*} ds` by trapezoidal
/// quadrature on the grid, with its eigenvalue certificate. The smallest
/// eigenvalue at or below the rank threshold is a degeneracy (and coincides
/// with Kalman infeasibility).
pub fn gramian(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    alpha: &AlphaPair,
    grid: &TimeGrid,
) -> Result<(DMatrix<f64>, GramianCertificate)> {
    let n = grid.steps();
    let dt = grid.dt();
    let d1 = a.nrows();
    let mut u = DMatrix::zeros(d1, d1);
    let step = matrix_exp(a, dt);
    // e^{(T - t_k)A} accumulated from k = n downward
    let mut e = DMatrix::identity(d1, d1);
    let mut terms: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    for k in (0..=n).rev() {
        let eb = &e * b;
        terms.push(&eb * eb.transpose() * alpha.alpha2(grid.node(k)));
        if k > 0 {
            e = &e * &step;
        }
    }
    terms.reverse();
    for (k, term) in terms.iter().enumerate() {
        let w = if k == 0 || k == n { 0.5 * dt } else { dt };
        u += term * w;
    }
    // enforce exact symmetry before the eigen decomposition
    let u = (&u + u.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(u.clone());
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_eig = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cert = GramianCertificate { min_eig, max_eig };
    if !(min_eig > RANK_THRESHOLD * max_eig.max(0.0)) || min_eig <= 0.0 {
        return Err(Error::degenerate(format!(
            "degenerate Gramian: min eigenvalue {min_eig:.3e} (max {max_eig:.3e})"
        )));
    }
    Ok((u, cert))
}

/// The bridge data for one `(model, v, grid, mode)`: sampled `alpha`s, the
/// Gramian and its inverse, `g~` with its exact derivative, and the convolved
/// `g`. When the direction is a coupling shift `z~`, `g` doubles as `kappa` and
/// `g~` as `h~`.
#[derive(Debug, Clone)]
pub struct BridgeSet {
    pub grid: TimeGrid,
    pub mode: BridgeMode,
    pub alpha: AlphaPair,
    pub k0: usize,
    pub u_t: DMatrix<f64>,
    pub u_t_inv: DMatrix<f64>,
    pub certificate: GramianCertificate,
    pub v1: DVector<f64>,
    pub v2: DVector<f64>,
    /// `g~(t_k)`, flat, `d2` per node.
    pub g_tilde: Vec<f64>,
    /// Analytic `g~'(t_k)`, flat, `d2` per node.
    pub g_tilde_prime: Vec<f64>,
    /// `g(t_k)`, flat, `d1` per node.
    pub g: Vec<f64>,
    /// `|g(T)|` measured after the convolution.
    pub terminal_residual: f64,
}

impl BridgeSet {
    pub fn g_tilde_at(&self, k: usize) -> &[f64] {
        let d2 = self.v2.len();
        &self.g_tilde[k * d2..(k + 1) * d2]
    }

    pub fn g_tilde_prime_at(&self, k: usize) -> &[f64] {
        let d2 = self.v2.len();
        &self.g_tilde_prime[k * d2..(k + 1) * d2]
    }

    pub fn g_at(&self, k: usize) -> &[f64] {
        let d1 = self.v1.len();
        &self.g[k * d1..(k + 1) * d1]
    }
}

/// Assembles the bridge. Postconditions: `g~(0) = v_2`, `g~(T) = 0` exactly;
/// `|g(T)| <= 10 dt |v|`, enforced, with the measured residual retained.
pub fn build_bridge(
    model: &DegenerateModel,
    v1: &DVector<f64>,
    v2: &DVector<f64>,
    grid: &TimeGrid,
    mode: BridgeMode,
) -> Result<BridgeSet> {
    if v1.len() != model.d1 || v2.len() != model.d2 {
        return Err(Error::config("direction v has wrong block dimensions"));
    }
    let k0 = match kalman_rank(&model.a, &model.b) {
        KalmanRank::Feasible { k0 } => k0,
        KalmanRank::Infeasible => {
            return Err(Error::degenerate(
                "Kalman rank condition infeasible: Gramian cannot be invertible",
            ))
        }
    };
    let horizon = grid.horizon();
    let alpha = alpha_functions(mode, &model.a, &model.b, horizon)?;
    let (u_t, certificate) = gramian(&model.a, &model.b, &alpha, grid)?;
    let u_t_inv = u_t.clone().try_inverse().ok_or_else(|| {
        Error::degenerate("Gramian inversion failed despite positive certificate")
    })?;

    let n = grid.steps();
    let dt = grid.dt();
    let d1 = model.d1;
    let d2 = model.d2;

    // e^{k dt A} for k = 0..n, shared by every term below
    let step = matrix_exp(&model.a, dt);
    let mut powers: Vec<DMatrix<f64>> = Vec::with_capacity(n + 1);
    powers.push(DMatrix::identity(d1, d1));
    for k in 1..=n {
        powers.push(&powers[k - 1] * &step);
    }

    // trapezoid of alpha_1 e^{(T-s)A} B on the same nodes (endpoint-mode third term)
    let mut q = DMatrix::zeros(d1, d2);
    for k in 0..=n {
        let w = if k == 0 || k == n { 0.5 * dt } else { dt };
        q += &powers[n - k] * &model.b * (alpha.alpha1(grid.node(k)) * w);
    }

    // constant steering vector: U_T^{-1} (e^{TA} v1 [+ q v2 in endpoint mode])
    let mut target = &powers[n] * v1;
    if mode == BridgeMode::Endpoint {
        target += &q * v2;
    }
    let steer = &u_t_inv * target;

    let bt = model.b.transpose();
    let mut g_tilde = vec![0.0; (n + 1) * d2];
    let mut g_tilde_prime = vec![0.0; (n + 1) * d2];
    for k in 0..=n {
        let t = grid.node(k);
        let back = powers[n - k].transpose(); // e^{(T-t)A^*}
        let gram_dir = &bt * (&back * &steer);
        // d/dt [B^* e^{(T-t)A^*}] = -B^* e^{(T-t)A^*} A^*
        let gram_dir_dt = -(&bt * (&back * (model.a.transpose() * &steer)));
        let a1 = alpha.alpha1(t);
        let a2 = alpha.alpha2(t);
        let a1p = alpha.alpha1_prime(t);
        let a2p = alpha.alpha2_prime(t);
        for c in 0..d2 {
            g_tilde[k * d2 + c] = a1 * v2[c] - a2 * gram_dir[c];
            g_tilde_prime[k * d2 + c] =
                a1p * v2[c] - a2p * gram_dir[c] - a2 * gram_dir_dt[c];
        }
    }
    // exact endpoint values by construction; pin them against rounding
    for c in 0..d2 {
        g_tilde[c] = v2[c];
        g_tilde[n * d2 + c] = 0.0;
    }

    // g(t) = e^{tA} v1 + ∫_0^t e^{(t-s)A} B g~(s) ds, trapezoid per prefix
    let mut g = vec![0.0; (n + 1) * d1];
    {
        let mut bg: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let gt = DVector::from_column_slice(self_slice(&g_tilde, k, d2));
            bg.push(&model.b * gt);
        }
        for j in 0..=n {
            let mut acc = &powers[j] * v1;
            if j > 0 {
                for k in 0..=j {
                    let w = if k == 0 || k == j { 0.5 * dt } else { dt };
                    acc += &powers[j - k] * &bg[k] * w;
                }
            }
            for c in 0..d1 {
                g[j * d1 + c] = acc[c];
            }
        }
    }

    let terminal_residual =
        (0..d1).map(|c| g[n * d1 + c] * g[n * d1 + c]).sum::<f64>().sqrt();
    let vnorm = (v1.norm_squared() + v2.norm_squared()).sqrt();
    if terminal_residual > 10.0 * dt * vnorm.max(1e-300) {
        return Err(Error::bridge(format!(
            "terminal residual |g(T)| = {terminal_residual:.3e} exceeds {:.3e}",
            10.0 * dt * vnorm
        )));
    }

    Ok(BridgeSet {
        grid: *grid,
        mode,
        alpha,
        k0,
        u_t,
        u_t_inv,
        certificate,
        v1: v1.clone(),
        v2: v2.clone(),
        g_tilde,
        g_tilde_prime,
        g,
        terminal_residual,
    })
}

fn self_slice(flat: &[f64], k: usize, dim: usize) -> &[f64] {
    &flat[k * dim..(k + 1) * dim]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Drift;

    fn kinetic_scalar() -> DegenerateModel {
        DegenerateModel::kinetic_scalar(Drift::Linear {
            g1: vec![vec![0.0]],
            g2: vec![vec![-1.0]],
        })
    }

    #[test]
    fn matrix_exp_identity_and_nilpotent() {
        let zero = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(matrix_exp(&zero, 2.0), DMatrix::identity(3, 3));
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = matrix_exp(&a, 0.7);
        assert_eq!(e, DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 0.0, 1.0]));
    }

    #[test]
    fn matrix_exp_inverse_identity_random() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[0.3, -1.2, 0.5, 0.8, 0.1, -0.4, -0.6, 0.9, 0.2],
        );
        let prod = matrix_exp(&a, 0.9) * matrix_exp(&a, -0.9);
        let err = (&prod - DMatrix::<f64>::identity(3, 3)).norm();
        assert!(err < 1e-10, "e^A e^-A deviates by {err}");
    }

    #[test]
    fn kalman_rank_catalog() {
        // invertible B: k0 = 0
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let b = DMatrix::identity(2, 2);
        assert_eq!(kalman_rank(&a, &b), KalmanRank::Feasible { k0: 0 });
        // kinetic pair: rank needs [B, AB]
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(kalman_rank(&a, &b), KalmanRank::Feasible { k0: 1 });
        // zero B: infeasible
        let b0 = DMatrix::zeros(2, 1);
        assert_eq!(kalman_rank(&a, &b0), KalmanRank::Infeasible);
    }

    #[test]
    fn alpha2_endpoints_and_peak() {
        let alpha = AlphaPair { horizon: 1.0, a1_coeffs: vec![1.0], system: CoeffSystem::None };
        assert_eq!(alpha.alpha2(0.0), 0.0);
        assert_eq!(alpha.alpha2(1.0), 0.0);
        assert!((alpha.alpha2(0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn alpha_endpoint_mode_is_linear() {
        let m = kinetic_scalar();
        let alpha = alpha_functions(BridgeMode::Endpoint, &m.a, &m.b, 1.0).unwrap();
        assert!((alpha.alpha1(0.0) - 1.0).abs() < 1e-15);
        assert_eq!(alpha.alpha1(1.0), 0.0);
        assert!((alpha.alpha1(0.25) - 0.75).abs() < 1e-15);
    }

    // A = 0 (n0 = 1): the printed inverse-binomial system is inconsistent with
    // the defining integral, so the power-moment fallback must kick in and give
    // alpha_1 = -2 tau + 3 tau^2 with a vanishing validation integral.
    #[test]
    fn alpha_moment_mode_scalar_falls_back() {
        let m = kinetic_scalar();
        let alpha = alpha_functions(BridgeMode::Moment, &m.a, &m.b, 1.0).unwrap();
        assert_eq!(alpha.system, CoeffSystem::MomentFallback);
        assert!((alpha.a1_coeffs[0] + 2.0).abs() < 1e-9, "{:?}", alpha.a1_coeffs);
        assert!((alpha.a1_coeffs[1] - 3.0).abs() < 1e-9);
        assert!((alpha.alpha1(0.0) - 1.0).abs() < 1e-12);
        let v = alpha1_moment_integral(&alpha, &m.a, &m.b).norm();
        assert!(v <= 1e-8 * m.b.norm(), "moment integral {v}");
    }

    #[test]
    fn alpha_moment_mode_rejects_non_nilpotent() {
        let a = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let b = DMatrix::identity(1, 1);
        assert!(alpha_functions(BridgeMode::Moment, &a, &b, 1.0).is_err());
    }

    // Scalar A = 0, B = 1, T = 1: U_T = ∫ s(1-s) ds = 1/6.
    #[test]
    fn gramian_scalar_closed_form() {
        let m = kinetic_scalar();
        let grid = TimeGrid::new(1.0, 2048).unwrap();
        let alpha = alpha_functions(BridgeMode::Endpoint, &m.a, &m.b, 1.0).unwrap();
        let (u, cert) = gramian(&m.a, &m.b, &alpha, &grid).unwrap();
        assert!((u[(0, 0)] - 1.0 / 6.0).abs() < 1e-6, "U_T = {}", u[(0, 0)]);
        assert!(cert.min_eig > 0.0);
    }

    #[test]
    fn gramian_zero_b_degenerate() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::zeros(2, 1);
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let alpha = alpha_functions(BridgeMode::Endpoint, &a, &b, 1.0).unwrap();
        assert!(gramian(&a, &b, &alpha, &grid).is_err());
    }

    #[test]
    fn gramian_kinetic_positive() {
        let m = DegenerateModel::kinetic_2d(Drift::Linear {
            g1: vec![vec![0.0, 0.0]],
            g2: vec![vec![-1.0]],
        });
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let alpha = alpha_functions(BridgeMode::Endpoint, &m.a, &m.b, 1.0).unwrap();
        let (_, cert) = gramian(&m.a, &m.b, &alpha, &grid).unwrap();
        assert!(cert.min_eig > 0.0, "kinetic Gramian certificate {cert:?}");
    }

    #[test]
    fn bridge_zero_direction_is_zero() {
        let m = kinetic_scalar();
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let br = build_bridge(
            &m,
            &DVector::zeros(1),
            &DVector::zeros(1),
            &grid,
            BridgeMode::Moment,
        )
        .unwrap();
        assert!(br.g_tilde.iter().all(|&v| v == 0.0));
        assert!(br.g.iter().all(|&v| v.abs() < 1e-300));
    }

    #[test]
    fn bridge_pure_v2_moment_mode_is_alpha1_v2() {
        let m = kinetic_scalar();
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let v2 = DVector::from_element(1, 2.0);
        let br =
            build_bridge(&m, &DVector::zeros(1), &v2, &grid, BridgeMode::Moment).unwrap();
        for k in 0..=128 {
            let want = br.alpha.alpha1(grid.node(k)) * 2.0;
            assert!((br.g_tilde_at(k)[0] - want).abs() < 1e-12);
        }
    }

    // Scalar closed form: v = (1, 0), moment mode gives g~ = -alpha_2 U^{-1} = -6 t (1-t)
    // and the convolution cancels g(T) to quadrature accuracy.
    #[test]
    fn bridge_scalar_closed_form() {
        let m = kinetic_scalar();
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let v1 = DVector::from_element(1, 1.0);
        let br =
            build_bridge(&m, &v1, &DVector::zeros(1), &grid, BridgeMode::Moment).unwrap();
        let uinv = br.u_t_inv[(0, 0)];
        for k in (0..=256).step_by(37) {
            let t = grid.node(k);
            let want = -t * (1.0 - t) * uinv;
            assert!(
                (br.g_tilde_at(k)[0] - want).abs() < 1e-10 * uinv.abs(),
                "node {k}"
            );
        }
        assert!(br.terminal_residual <= 10.0 * grid.dt());
        assert!((br.g_tilde_at(0)[0] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn bridge_endpoints_exact_and_residual_shrinks() {
        for model in [
            kinetic_scalar(),
            DegenerateModel::kinetic_2d(Drift::Linear {
                g1: vec![vec![0.0, 0.0]],
                g2: vec![vec![-1.0]],
            }),
        ] {
            let v1 = DVector::from_element(model.d1, 0.8);
            let v2 = DVector::from_element(model.d2, -0.6);
            let mut residuals = Vec::new();
            for n in [256usize, 512] {
                let grid = TimeGrid::new(1.0, n).unwrap();
                let br = build_bridge(&model, &v1, &v2, &grid, BridgeMode::Moment).unwrap();
                for c in 0..model.d2 {
                    assert_eq!(br.g_tilde_at(0)[c], v2[c]);
                    assert_eq!(br.g_tilde_at(n)[c], 0.0);
                }
                residuals.push(br.terminal_residual);
            }
            assert!(
                residuals[1] <= 0.6 * residuals[0] + 1e-12,
                "terminal residual did not shrink: {residuals:?}"
            );
        }
    }

    #[test]
    fn bridge_linear_in_direction() {
        let m = kinetic_scalar();
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let build = |x: f64, y: f64| {
            build_bridge(
                &m,
                &DVector::from_element(1, x),
                &DVector::from_element(1, y),
                &grid,
                BridgeMode::Moment,
            )
            .unwrap()
        };
        let a = build(1.0, 0.0);
        let b = build(0.0, 1.0);
        let ab = build(1.0, 1.0);
        for k in 0..=64 {
            assert!((a.g_tilde_at(k)[0] + b.g_tilde_at(k)[0] - ab.g_tilde_at(k)[0]).abs() < 1e-10);
            assert!((a.g_at(k)[0] + b.g_at(k)[0] - ab.g_at(k)[0]).abs() < 1e-10);
        }
    }

    // Kalman infeasibility and Gramian degeneracy agree on a small catalog.
    #[test]
    fn kalman_iff_gramian_invertible() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let cases: Vec<(DMatrix<f64>, DMatrix<f64>)> = vec![
            (DMatrix::zeros(1, 1), DMatrix::identity(1, 1)),
            (DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
             DMatrix::from_row_slice(2, 1, &[0.0, 1.0])),
            (DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
             DMatrix::from_row_slice(2, 1, &[1.0, 0.0])), // B in the dead direction
            (DMatrix::zeros(2, 2), DMatrix::from_row_slice(2, 1, &[1.0, 1.0])),
        ];
        for (a, b) in cases {
            let feasible = matches!(kalman_rank(&a, &b), KalmanRank::Feasible { .. });
            let alpha = alpha_functions(BridgeMode::Endpoint, &a, &b, 1.0).unwrap();
            let gram_ok = gramian(&a, &b, &alpha, &grid).is_ok();
            assert_eq!(feasible, gram_ok, "A={a:?} B={b:?}");
        }
    }
}
