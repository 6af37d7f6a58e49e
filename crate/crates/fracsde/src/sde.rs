//! Explicit Euler schemes for the degenerate system, the coupled companion
//! system used by the change-of-measure construction, and the pathwise
//! variational equation.
//!
//! The diffusion coefficient is deterministic, so the left-point
//! Riemann-Stieltjes reading of `sigma(t) dB^H` is the correct Young-integral
//! discretization and no Milstein-type correction arises.

use crate::bridge::BridgeSet;
use crate::error::Error;
use crate::fbm::NoisePair;
use crate::grid::{Path, TimeGrid};
use crate::model::DegenerateModel;
use crate::Result;

/// States beyond this norm abort integration; catalog drifts are globally
/// Lipschitz, so reaching it means a misconfiguration.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// One realized solution path `Z = (X, Y)` with its initial point.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub z: Path,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
}

impl Trajectory {
    pub fn x_at(&self, k: usize, d1: usize) -> &[f64] {
        &self.z.at(k)[..d1]
    }

    pub fn y_at(&self, k: usize, d1: usize) -> &[f64] {
        &self.z.at(k)[d1..]
    }

    pub fn terminal(&self) -> &[f64] {
        self.z.at(self.z.grid().steps())
    }
}

/// Directional-derivative path `J = (∇_v X, ∇_v Y)` along a realized trajectory.
#[derive(Debug, Clone)]
pub struct VariationalTrajectory {
    pub j: Path,
    pub v: Vec<f64>,
}

fn check_state(state: &[f64], step: usize) -> Result<()> {
    let norm2: f64 = state.iter().map(|v| v * v).sum();
    if !norm2.is_finite() || norm2 > DIVERGENCE_BOUND * DIVERGENCE_BOUND {
        return Err(Error::Divergence { step, bound: DIVERGENCE_BOUND });
    }
    Ok(())
}

/// Explicit Euler for the degenerate system driven by the fBm leg of `noise`:
/// `X += (A X + B Y) dt`, `Y += b~(t, Z) dt + sigma(t) dB^H`.
pub fn euler_solve(
    model: &DegenerateModel,
    x0: &[f64],
    y0: &[f64],
    noise: &NoisePair,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    if noise.bh.grid() != *grid {
        return Err(Error::config("noise and solver grids differ"));
    }
    if noise.bh.dim() != model.d {
        return Err(Error::config("noise dimension does not match the model"));
    }
    if x0.len() != model.d1 || y0.len() != model.d2 {
        return Err(Error::config("initial point has wrong block dimensions"));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let (d1, d2, d) = (model.d1, model.d2, model.d);
    let mut z = Path::zeros(*grid, d1 + d2);
    z.at_mut(0)[..d1].copy_from_slice(x0);
    z.at_mut(0)[d1..].copy_from_slice(y0);

    let mut drift = vec![0.0; d2];
    for k in 0..n {
        let t = grid.node(k);
        let sigma = model.sigma_at(t);
        let state: Vec<f64> = z.at(k).to_vec();
        let (x, y) = state.split_at(d1);
        model.drift_eval(t, x, y, &mut drift);
        let out = z.at_mut(k + 1);
        for i in 0..d1 {
            let mut ax = 0.0;
            for j in 0..d1 {
                ax += model.a[(i, j)] * x[j];
            }
            for j in 0..d2 {
                ax += model.b[(i, j)] * y[j];
            }
            out[i] = x[i] + ax * dt;
        }
        for i in 0..d2 {
            let mut diff = 0.0;
            for c in 0..d {
                diff += sigma[(i, c)] * noise.dbh(k, c);
            }
            out[d1 + i] = y[i] + drift[i] * dt + diff;
        }
        check_state(z.at(k + 1), k + 1)?;
    }
    Ok(Trajectory { z, x0: x0.to_vec(), y0: y0.to_vec() })
}

/// The coupled pair: the base trajectory restarted at `z + eps z~` whose `Y` leg
/// follows the *frozen* drift of the base path plus the steering term.
///
/// The deterministic steering integral is accumulated through exact increments
/// of `h~`, which makes the closed-form difference
/// `Y^eps - Y = eps h~(t)`, `X^eps - X = eps kappa(t)` hold at the discrete
/// level up to the Euler error of the `X` block alone.
pub fn solve_coupled(
    model: &DegenerateModel,
    base: &Trajectory,
    eps: f64,
    bridge: &BridgeSet,
    noise: &NoisePair,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    if bridge.grid != *grid {
        return Err(Error::config("bridge and solver grids differ"));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let (d1, d2, d) = (model.d1, model.d2, model.d);
    let mut z = Path::zeros(*grid, d1 + d2);
    for i in 0..d1 {
        z.at_mut(0)[i] = base.x0[i] + eps * bridge.v1[i];
    }
    for i in 0..d2 {
        z.at_mut(0)[d1 + i] = base.y0[i] + eps * bridge.v2[i];
    }

    let mut drift = vec![0.0; d2];
    for k in 0..n {
        let t = grid.node(k);
        let sigma = model.sigma_at(t);
        let state: Vec<f64> = z.at(k).to_vec();
        let (x, y) = state.split_at(d1);
        // frozen drift: evaluated along the base path, not the coupled one
        let bx = base.x_at(k, d1);
        let by = base.y_at(k, d1);
        model.drift_eval(t, bx, by, &mut drift);
        let ht_now = bridge.g_tilde_at(k);
        let ht_next = bridge.g_tilde_at(k + 1);
        let out = z.at_mut(k + 1);
        for i in 0..d1 {
            let mut ax = 0.0;
            for j in 0..d1 {
                ax += model.a[(i, j)] * x[j];
            }
            for j in 0..d2 {
                ax += model.b[(i, j)] * y[j];
            }
            out[i] = x[i] + ax * dt;
        }
        for i in 0..d2 {
            let mut diff = 0.0;
            for c in 0..d {
                diff += sigma[(i, c)] * noise.dbh(k, c);
            }
            out[d1 + i] = y[i] + drift[i] * dt + diff + eps * (ht_next[i] - ht_now[i]);
        }
        check_state(z.at(k + 1), k + 1)?;
    }
    Ok(Trajectory {
        z,
        x0: (0..d1).map(|i| base.x0[i] + eps * bridge.v1[i]).collect(),
        y0: (0..d2).map(|i| base.y0[i] + eps * bridge.v2[i]).collect(),
    })
}

/// Explicit Euler for the variational system `J' = M(t) J` with
/// `M = [[A, B], [∇^1 b~, ∇^2 b~]]` evaluated along the realized path; `J_0 = v`.
pub fn variational_solve(
    model: &DegenerateModel,
    base: &Trajectory,
    v: &[f64],
    grid: &TimeGrid,
) -> Result<VariationalTrajectory> {
    let (d1, d2) = (model.d1, model.d2);
    if v.len() != d1 + d2 {
        return Err(Error::config("direction v has wrong dimension"));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let mut j = Path::zeros(*grid, d1 + d2);
    j.at_mut(0).copy_from_slice(v);
    let mut g1 = vec![0.0; d2 * d1];
    let mut g2 = vec![0.0; d2 * d2];
    for k in 0..n {
        let t = grid.node(k);
        let bx = base.x_at(k, d1);
        let by = base.y_at(k, d1);
        model.drift_grad(t, bx, by, &mut g1, &mut g2);
        let state: Vec<f64> = j.at(k).to_vec();
        let (jx, jy) = state.split_at(d1);
        let out = j.at_mut(k + 1);
        for i in 0..d1 {
            let mut acc = 0.0;
            for l in 0..d1 {
                acc += model.a[(i, l)] * jx[l];
            }
            for l in 0..d2 {
                acc += model.b[(i, l)] * jy[l];
            }
            out[i] = jx[i] + acc * dt;
        }
        for i in 0..d2 {
            let mut acc = 0.0;
            for l in 0..d1 {
                acc += g1[i * d1 + l] * jx[l];
            }
            for l in 0..d2 {
                acc += g2[i * d2 + l] * jy[l];
            }
            out[d1 + i] = jy[i] + acc * dt;
        }
    }
    Ok(VariationalTrajectory { j, v: v.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{build_bridge, BridgeMode};
    use crate::frac_ops::Hurst;
    use crate::grid::SeedSpec;
    use crate::kernel::VolterraKernels;
    use crate::model::Drift;
    use nalgebra::{DMatrix, DVector};

    fn noise(grid: TimeGrid, h: f64, seed: u64, idx: u64) -> NoisePair {
        let hurst = Hurst::diagnostic(h).unwrap();
        let kernels = VolterraKernels::new(grid, hurst).unwrap();
        NoisePair::sample(&kernels, 1, SeedSpec::new(seed), idx).unwrap()
    }

    fn silent_model() -> DegenerateModel {
        let mut m = DegenerateModel::kinetic_scalar(Drift::Linear {
            g1: vec![vec![0.0]],
            g2: vec![vec![0.0]],
        });
        m.sigma = crate::model::SigmaSpec::Constant { value: vec![vec![0.0]] };
        m
    }

    // A = 0, B = 1, no drift, no noise: X_t = x + t y exactly (Y constant).
    #[test]
    fn euler_deterministic_linear_flow() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let np = noise(grid, 0.75, 1, 0);
        let m = silent_model();
        let traj = euler_solve(&m, &[0.5], &[2.0], &np, &grid).unwrap();
        for k in 0..=64 {
            let t = grid.node(k);
            assert!((traj.x_at(k, 1)[0] - (0.5 + 2.0 * t)).abs() < 1e-12);
            assert!((traj.y_at(k, 1)[0] - 2.0).abs() < 1e-15);
        }
    }

    // A = B = 0, b~ = 0, sigma = 1: Y = y + B^H, X = x.
    #[test]
    fn euler_pure_noise() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let np = noise(grid, 0.8, 3, 5);
        let mut m = DegenerateModel::kinetic_scalar(Drift::Linear {
            g1: vec![vec![0.0]],
            g2: vec![vec![0.0]],
        });
        m.b = DMatrix::zeros(1, 1);
        let traj = euler_solve(&m, &[1.0], &[-0.5], &np, &grid).unwrap();
        for k in 0..=64 {
            assert_eq!(traj.x_at(k, 1)[0], 1.0);
            assert!((traj.y_at(k, 1)[0] - (-0.5 + np.bh.at(k)[0])).abs() < 1e-12);
        }
    }

    // b~ = -y, sigma = 1: the noise is centered, so E Y_t = y e^{-t}.
    #[test]
    fn euler_ou_mean_mc() {
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let h = Hurst::new(0.75).unwrap();
        let kernels = VolterraKernels::new(grid, h).unwrap();
        let m = DegenerateModel::kinetic_scalar(Drift::Linear {
            g1: vec![vec![0.0]],
            g2: vec![vec![-1.0]],
        });
        let y0 = 1.5;
        let n_paths = 20_000u64;
        let seed = SeedSpec::new(29);
        let vals: Vec<f64> = (0..n_paths)
            .map(|i| {
                let np = NoisePair::sample(&kernels, 1, seed, i).unwrap();
                let traj = euler_solve(&m, &[0.0], &[y0], &np, &grid).unwrap();
                traj.y_at(512, 1)[0]
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (vals.len() - 1) as f64;
        let se = (var / vals.len() as f64).sqrt();
        let exact = y0 * (-1.0f64).exp();
        let bias_allowance = 2.0 * grid.dt();
        assert!(
            (mean - exact).abs() < 4.0 * se + bias_allowance,
            "mean {mean} vs {exact} (se {se})"
        );
    }

    // Deterministic Euler-mean bias for linear f halves when dt halves: with
    // additive centered noise the Euler mean follows the noise-free recursion,
    // so the bias is computable without Monte Carlo.
    #[test]
    fn euler_weak_bias_halves_linear_model() {
        let m = DegenerateModel::kinetic_scalar(Drift::Linear {
            g1: vec![vec![0.0]],
            g2: vec![vec![-1.0]],
        });
        let (x0, y0) = (0.3, 0.7);
        let exact_x = x0 + y0 * (1.0 - (-1.0f64).exp());
        let bias_at = |n: usize| -> f64 {
            let grid = TimeGrid::new(1.0, n).unwrap();
            let np = noise(grid, 0.5, 0, 0); // unused randomness; sigma contributes mean 0
            let mut silent = m.clone();
            silent.sigma = crate::model::SigmaSpec::Constant { value: vec![vec![0.0]] };
            let traj = euler_solve(&silent, &[x0], &[y0], &np, &grid).unwrap();
            (traj.x_at(n, 1)[0] - exact_x).abs()
        };
        let b64 = bias_at(64);
        let b128 = bias_at(128);
        let ratio = b128 / b64;
        assert!(
            (0.375..=0.625).contains(&ratio),
            "bias ratio {ratio} not within 25% of halving ({b64} -> {b128})"
        );
    }

    #[test]
    fn euler_divergence_guard() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let np = noise(grid, 0.75, 7, 0);
        // explosive linear drift well beyond the guard within 16 steps
        let m = DegenerateModel::kinetic_scalar(Drift::Linear {
            g1: vec![vec![0.0]],
            g2: vec![vec![1e13]],
        });
        let err = euler_solve(&m, &[1.0], &[1.0], &np, &grid).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn coupled_zero_eps_identical() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let np = noise(grid, 0.7, 11, 2);
        let m = DegenerateModel::kinetic_scalar(Drift::SinPerturbed { amp: 0.3 });
        let traj = euler_solve(&m, &[0.2], &[-0.1], &np, &grid).unwrap();
        let br = build_bridge(
            &m,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 0.5),
            &grid,
            BridgeMode::Moment,
        )
        .unwrap();
        let coupled = solve_coupled(&m, &traj, 0.0, &br, &np, &grid).unwrap();
        assert_eq!(traj.z, coupled.z);
    }

    // The discrete difference must follow the closed form: Y-block exactly (the
    // steering term is integrated exactly), X-block to Euler accuracy.
    #[test]
    fn coupled_difference_matches_closed_form() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let np = noise(grid, 0.7, 13, 4);
        let m = DegenerateModel::kinetic_scalar(Drift::SinPerturbed { amp: 0.3 });
        let traj = euler_solve(&m, &[0.2], &[-0.1], &np, &grid).unwrap();
        let (zx, zy) = (0.8, -0.4);
        let br = build_bridge(
            &m,
            &DVector::from_element(1, zx),
            &DVector::from_element(1, zy),
            &grid,
            BridgeMode::Moment,
        )
        .unwrap();
        let eps = 0.01;
        let coupled = solve_coupled(&m, &traj, eps, &br, &np, &grid).unwrap();
        let znorm = (zx * zx + zy * zy).sqrt();
        // Y^eps - Y = eps * (y~ + h~(t) - h~(0)) = eps h~(t) since h~(0) = y~
        let mid = 128;
        let y_diff = coupled.y_at(mid, 1)[0] - traj.y_at(mid, 1)[0];
        let want_y = eps * br.g_tilde_at(mid)[0];
        assert!((y_diff - want_y).abs() < 1e-13, "Y diff {y_diff} vs {want_y}");
        // X^eps - X = eps kappa(t) to Euler accuracy
        let x_diff = coupled.x_at(mid, 1)[0] - traj.x_at(mid, 1)[0];
        let want_x = eps * br.g_at(mid)[0];
        assert!(
            (x_diff - want_x).abs() <= 5.0 * grid.dt() * eps * (1.0 + znorm),
            "X diff {x_diff} vs {want_x}"
        );
        // terminal coalescence
        let n = grid.steps();
        let term: f64 = (0..2)
            .map(|c| (coupled.z.at(n)[c] - traj.z.at(n)[c]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(term <= 5.0 * grid.dt() * eps * (1.0 + znorm), "terminal gap {term}");
    }

    // Terminal coalescence error scales like dt for fixed eps.
    #[test]
    fn coupled_terminal_gap_shrinks_with_dt() {
        let m = DegenerateModel::kinetic_scalar(Drift::SinPerturbed { amp: 0.3 });
        let eps = 0.05;
        let mut gaps = Vec::new();
        for n in [128usize, 256] {
            let grid = TimeGrid::new(1.0, n).unwrap();
            let np = noise(grid, 0.7, 17, 1);
            let traj = euler_solve(&m, &[0.2], &[-0.1], &np, &grid).unwrap();
            let br = build_bridge(
                &m,
                &DVector::from_element(1, 1.0),
                &DVector::from_element(1, -1.0),
                &grid,
                BridgeMode::Moment,
            )
            .unwrap();
            let coupled = solve_coupled(&m, &traj, eps, &br, &np, &grid).unwrap();
            let gap: f64 = (0..2)
                .map(|c| (coupled.z.at(n)[c] - traj.z.at(n)[c]).powi(2))
                .sum::<f64>()
                .sqrt();
            gaps.push(gap);
        }
        assert!(gaps[1] < 0.75 * gaps[0], "terminal gaps {gaps:?}");
    }

    #[test]
    fn variational_zero_direction() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let np = noise(grid, 0.7, 19, 0);
        let m = DegenerateModel::kinetic_scalar(Drift::SinPerturbed { amp: 0.3 });
        let traj = euler_solve(&m, &[0.2], &[0.1], &np, &grid).unwrap();
        let var = variational_solve(&m, &traj, &[0.0, 0.0], &grid).unwrap();
        assert!(var.j.values().iter().all(|&v| v == 0.0));
    }

    // Constant-gradient drift makes J_t = e^{tM} v; compare against the matrix
    // exponential oracle.
    #[test]
    fn variational_matches_matrix_exponential() {
        let grid = TimeGrid::new(1.0, 4096).unwrap();
        let np = noise(grid, 0.7, 23, 0);
        let m = DegenerateModel::kinetic_scalar(Drift::Linear {
            g1: vec![vec![0.4]],
            g2: vec![vec![-1.0]],
        });
        let traj = euler_solve(&m, &[0.2], &[0.1], &np, &grid).unwrap();
        let v = [1.0, -0.5];
        let var = variational_solve(&m, &traj, &v, &grid).unwrap();
        let big = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.4, -1.0]);
        let oracle = crate::bridge::matrix_exp(&big, 1.0) * DVector::from_column_slice(&v);
        let got = var.j.at(grid.steps());
        for c in 0..2 {
            assert!(
                (got[c] - oracle[c]).abs() < 3.0 * grid.dt(),
                "coord {c}: {got:?} vs {oracle:?}"
            );
        }
    }

    #[test]
    fn variational_linear_in_v() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let np = noise(grid, 0.7, 31, 0);
        let m = DegenerateModel::kinetic_scalar(Drift::SinPerturbed { amp: 0.3 });
        let traj = euler_solve(&m, &[0.2], &[0.1], &np, &grid).unwrap();
        let a = variational_solve(&m, &traj, &[1.0, 0.0], &grid).unwrap();
        let b = variational_solve(&m, &traj, &[0.0, 1.0], &grid).unwrap();
        let ab = variational_solve(&m, &traj, &[1.0, 1.0], &grid).unwrap();
        for k in 0..=128 {
            for c in 0..2 {
                assert!(
                    (a.j.at(k)[c] + b.j.at(k)[c] - ab.j.at(k)[c]).abs() < 1e-10,
                    "superposition at node {k}"
                );
            }
        }
    }

    #[test]
    fn determinism_same_seed_same_trajectory() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let h = Hurst::new(0.7).unwrap();
        let kernels = VolterraKernels::new(grid, h).unwrap();
        let m = DegenerateModel::kinetic_scalar(Drift::SinPerturbed { amp: 0.3 });
        let run = || {
            let np = NoisePair::sample(&kernels, 1, SeedSpec::new(99), 3).unwrap();
            euler_solve(&m, &[0.2], &[0.1], &np, &grid).unwrap().z
        };
        assert_eq!(run(), run());
    }
}
