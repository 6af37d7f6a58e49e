//! Three cross-validating estimators of the semigroup gradient `∇_v P_T f(z)`:
//! the Malliavin/coupling weight (an Itô sum of a singular-kernel transform of
//! the bridge data against the driving Wiener increments), the pathwise
//! derivative through the variational equation, and central finite differences
//! with common random numbers.
//!
//! The weight integrand is assembled in two algebraically equivalent ways from
//! the same panel atoms: a grouped form organized by difference structure and an
//! expanded form mirroring the coupling derivation. Their agreement to rounding
//! error certifies the sign and grouping conventions; their disagreement would
//! flag a broken kernel identity.

use rayon::prelude::*;
use serde::Serialize;

use crate::bridge::{build_bridge, BridgeMode, BridgeSet};
use crate::error::Error;
use crate::fbm::NoisePair;
use crate::grid::{SeedSpec, TimeGrid};
use crate::kernel::{InversionAtoms, VolterraKernels};
use crate::model::{DegenerateModel, TestFunction};
use crate::sde::{euler_solve, solve_coupled, variational_solve, Trajectory};
use crate::Result;

/// Mean, standard error, and provenance of a Monte Carlo quantity.
///
/// Wall time is kept out of serialized reports so reruns with equal seeds
/// produce byte-identical output files; timings surface in the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: u64,
    pub master_seed: u64,
    #[serde(skip)]
    pub wall_ms: u128,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64], seed: SeedSpec, wall_ms: u128) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::config("Monte Carlo estimate needs at least 2 samples"));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        Ok(McEstimate {
            mean,
            stderr: (var / n).sqrt(),
            n_samples: samples.len() as u64,
            master_seed: seed.master_seed,
            wall_ms,
        })
    }

    /// Combined standard error of a difference of two independent estimates.
    pub fn combined_stderr(&self, other: &McEstimate) -> f64 {
        (self.stderr * self.stderr + other.stderr * other.stderr).sqrt()
    }
}

/// Which algebraic organization of the weight integrand to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightForm {
    /// Difference-structured terms sharing the `(t-r)^{-1/2-H}` kernel.
    Grouped,
    /// Coupling-style terms carrying the `(t/r)^{H-1/2}` kernel.
    Expanded,
}

/// Shared per-run context for weight assembly: atom tables, kernel set, and the
/// deterministic `theta = sigma^* (sigma sigma^*)^{-1}` samples.
pub struct WeightContext<'a> {
    pub kernels: &'a VolterraKernels,
    pub atoms: &'a InversionAtoms,
    /// Flat `theta(t_k)`, row-major `d x d2` per node.
    pub theta: Vec<f64>,
    pub theta_constant: bool,
    pub d: usize,
    pub d2: usize,
}

impl<'a> WeightContext<'a> {
    pub fn new(
        model: &DegenerateModel,
        kernels: &'a VolterraKernels,
        atoms: &'a InversionAtoms,
    ) -> Result<Self> {
        let theta = model.theta_nodes(&kernels.grid())?;
        Ok(WeightContext {
            kernels,
            atoms,
            theta,
            theta_constant: model.sigma_is_constant(),
            d: model.d,
            d2: model.d2,
        })
    }

    fn theta_at(&self, k: usize) -> &[f64] {
        &self.theta[k * self.d * self.d2..(k + 1) * self.d * self.d2]
    }

    /// `p_k = theta(t_k) eta(t_k)` for every node.
    fn projected(&self, eta: &[f64], n: usize) -> Vec<f64> {
        let (d, d2) = (self.d, self.d2);
        let mut p = vec![0.0; (n + 1) * d];
        for k in 0..=n {
            let th = self.theta_at(k);
            let ek = &eta[k * d2..(k + 1) * d2];
            for r in 0..d {
                let mut acc = 0.0;
                for c in 0..d2 {
                    acc += th[r * d2 + c] * ek[c];
                }
                p[k * d + r] = acc;
            }
        }
        p
    }
}

/// The weight integrand `u` at the left nodes `t_0 .. t_{n-1}` together with its
/// four-term split, an Itô sum against the Wiener increments, and the
/// discretized quadratic variation.
#[derive(Debug, Clone)]
pub struct WeightBreakdown {
    /// Flat, `d` per left node.
    pub u: Vec<f64>,
    /// Same layout, one array per term of the split.
    pub terms: [Vec<f64>; 4],
    pub m_t: f64,
    pub quadratic_variation: f64,
    /// Per-term Itô sums (summing to `m_t`).
    pub m_terms: [f64; 4],
}

/// Evaluates the weight integrand for a sampled `eta` (flat, `d2` per node).
///
/// `u(t_0)` uses the first-cell midpoint-limit convention for the `t^{1/2-H}`
/// factor so the Itô sum starts from a finite, deterministic value.
pub fn assemble_weight_integrand(
    ctx: &WeightContext,
    eta: &[f64],
    form: WeightForm,
) -> (Vec<f64>, [Vec<f64>; 4]) {
    let grid = ctx.kernels.grid();
    let n = grid.steps();
    let d = ctx.d;
    let d2 = ctx.d2;
    let h = ctx.kernels.hurst();
    let mut u = vec![0.0; n * d];
    let mut terms = [vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]];

    let p = ctx.projected(eta, n);

    if h.is_brownian() {
        // classical reduction: u = theta eta exactly
        u.copy_from_slice(&p[..n * d]);
        terms[0].copy_from_slice(&p[..n * d]);
        return (u, terms);
    }

    let hv = h.value();
    let alpha = h.alpha();
    let norm = ctx.kernels.inverse_norm();
    let dt = grid.dt();

    // left-endpoint convention
    let scale0 = norm * (0.5 * dt).powf(0.5 - hv);
    for r in 0..d {
        let v = scale0 * p[r];
        u[r] = v;
        terms[0][r] = v;
    }

    let dd2 = d * d2;
    let mut theta_sum = vec![0.0; dd2];
    let mut theta_dx_sum = vec![0.0; dd2];
    for j in 1..n {
        let row = ctx.atoms.row(j);
        let tj = grid.node(j);
        let tj_neg = tj.powf(0.5 - hv);
        let tj_pos = tj.powf(hv - 0.5);
        let eta_j = &eta[j * d2..(j + 1) * d2];
        let p_j = &p[j * d..(j + 1) * d];
        let th_j = ctx.theta_at(j);

        // row accumulations over panels
        let mut p_aj = vec![0.0; d];
        let mut p_a2 = vec![0.0; d];
        let mut p_dx = vec![0.0; d];
        let mut s_aj = 0.0;
        let mut s_dx = 0.0;
        if ctx.theta_constant {
            for i in 0..j {
                let (a0, a1) = (row.aj0[i], row.aj1[i]);
                let (b0, b1) = (row.a2_0[i], row.a2_1[i]);
                s_aj += a0 + a1;
                for r in 0..d {
                    p_aj[r] += a0 * p[i * d + r] + a1 * p[(i + 1) * d + r];
                    p_a2[r] += b0 * p[i * d + r] + b1 * p[(i + 1) * d + r];
                }
            }
            if form == WeightForm::Expanded {
                for i in 0..j {
                    let (x0, x1) = (row.dx0[i], row.dx1[i]);
                    s_dx += x0 + x1;
                    for r in 0..d {
                        p_dx[r] += x0 * p[i * d + r] + x1 * p[(i + 1) * d + r];
                    }
                }
            }
        } else {
            theta_sum.fill(0.0);
            theta_dx_sum.fill(0.0);
            for i in 0..j {
                let (a0, a1) = (row.aj0[i], row.aj1[i]);
                let (b0, b1) = (row.a2_0[i], row.a2_1[i]);
                s_aj += a0 + a1;
                let th_i = ctx.theta_at(i);
                let th_i1 = ctx.theta_at(i + 1);
                for r in 0..d {
                    p_aj[r] += a0 * p[i * d + r] + a1 * p[(i + 1) * d + r];
                    p_a2[r] += b0 * p[i * d + r] + b1 * p[(i + 1) * d + r];
                }
                for e in 0..dd2 {
                    theta_sum[e] += a0 * th_i[e] + a1 * th_i1[e];
                }
                if form == WeightForm::Expanded {
                    let (x0, x1) = (row.dx0[i], row.dx1[i]);
                    s_dx += x0 + x1;
                    for r in 0..d {
                        p_dx[r] += x0 * p[i * d + r] + x1 * p[(i + 1) * d + r];
                    }
                    for e in 0..dd2 {
                        theta_dx_sum[e] += x0 * th_i[e] + x1 * th_i1[e];
                    }
                }
            }
        }

        let base = j * d;
        match form {
            WeightForm::Grouped => {
                for r in 0..d {
                    let j1 = tj_neg * p_j[r];
                    let j2 = alpha * tj_pos * p_a2[r];
                    let j3 = if ctx.theta_constant {
                        0.0
                    } else {
                        let mut acc = 0.0;
                        for c in 0..d2 {
                            acc += (s_aj * th_j[r * d2 + c] - theta_sum[r * d2 + c]) * eta_j[c];
                        }
                        alpha * acc
                    };
                    let j4 = if ctx.theta_constant {
                        alpha * (s_aj * p_j[r] - p_aj[r])
                    } else {
                        let mut acc = 0.0;
                        for c in 0..d2 {
                            acc += theta_sum[r * d2 + c] * eta_j[c];
                        }
                        alpha * (acc - p_aj[r])
                    };
                    terms[0][base + r] = norm * j1;
                    terms[1][base + r] = norm * j2;
                    terms[2][base + r] = norm * j3;
                    terms[3][base + r] = norm * j4;
                    u[base + r] = norm * (j1 + j2 + j3 + j4);
                }
            }
            WeightForm::Expanded => {
                for r in 0..d {
                    let j1 = tj_neg * p_j[r];
                    let chi2 = alpha * tj_pos * row.a2_sum * p_j[r];
                    let chi3 = if ctx.theta_constant {
                        0.0
                    } else {
                        let mut acc = 0.0;
                        for c in 0..d2 {
                            let full_sum = theta_sum[r * d2 + c] + theta_dx_sum[r * d2 + c];
                            acc += ((s_aj + s_dx) * th_j[r * d2 + c] - full_sum) * eta_j[c];
                        }
                        alpha * acc
                    };
                    let chi45 = if ctx.theta_constant {
                        alpha * ((s_aj + s_dx) * p_j[r] - (p_aj[r] + p_dx[r]))
                    } else {
                        let mut acc = 0.0;
                        for c in 0..d2 {
                            acc += (theta_sum[r * d2 + c] + theta_dx_sum[r * d2 + c]) * eta_j[c];
                        }
                        alpha * (acc - (p_aj[r] + p_dx[r]))
                    };
                    terms[0][base + r] = norm * j1;
                    terms[1][base + r] = norm * chi2;
                    terms[2][base + r] = norm * chi3;
                    terms[3][base + r] = norm * chi45;
                    u[base + r] = norm * (j1 + chi2 + chi3 + chi45);
                }
            }
        }
    }
    (u, terms)
}

/// The weight's integrand samples: at node `k < n`, the predictable cell value
/// `∇^1 b~(Z_k) ḡ_k + ∇^2 b~(Z_k) ḡ~_k - ḡ~'_k`, where the bars are averages of
/// the deterministic bridge functions over `[t_k, t_{k+1}]` (the derivative one
/// exactly, by its increment). Path factors stay frozen at `t_k`, so every
/// sample is `F_{t_k}`-measurable and the Itô sum keeps zero mean exactly;
/// averaging the deterministic factors removes the dominant left-endpoint bias
/// of the estimator. Node `n` carries the plain terminal value.
pub fn eta_integrand(
    model: &DegenerateModel,
    traj: &Trajectory,
    bridge: &BridgeSet,
    grid: &TimeGrid,
) -> Vec<f64> {
    let n = grid.steps();
    let dt = grid.dt();
    let (d1, d2) = (model.d1, model.d2);
    let mut eta = vec![0.0; (n + 1) * d2];
    let mut g1 = vec![0.0; d2 * d1];
    let mut g2 = vec![0.0; d2 * d2];
    let mut g_bar = vec![0.0; d1];
    let mut gt_bar = vec![0.0; d2];
    let mut gtp_bar = vec![0.0; d2];
    for k in 0..=n {
        let t = grid.node(k);
        model.drift_grad(t, traj.x_at(k, d1), traj.y_at(k, d1), &mut g1, &mut g2);
        if k < n {
            let g_now = bridge.g_at(k);
            let g_next = bridge.g_at(k + 1);
            for l in 0..d1 {
                g_bar[l] = 0.5 * (g_now[l] + g_next[l]);
            }
            let gt_now = bridge.g_tilde_at(k);
            let gt_next = bridge.g_tilde_at(k + 1);
            for l in 0..d2 {
                gt_bar[l] = 0.5 * (gt_now[l] + gt_next[l]);
                gtp_bar[l] = (gt_next[l] - gt_now[l]) / dt;
            }
        } else {
            g_bar.copy_from_slice(bridge.g_at(k));
            gt_bar.copy_from_slice(bridge.g_tilde_at(k));
            gtp_bar.copy_from_slice(bridge.g_tilde_prime_at(k));
        }
        for i in 0..d2 {
            let mut acc = -gtp_bar[i];
            for l in 0..d1 {
                acc += g1[i * d1 + l] * g_bar[l];
            }
            for l in 0..d2 {
                acc += g2[i * d2 + l] * gt_bar[l];
            }
            eta[k * d2 + i] = acc;
        }
    }
    eta
}

/// Assembles the weight and reduces it against the Wiener increments of `noise`.
pub fn malliavin_weight(
    ctx: &WeightContext,
    eta: &[f64],
    noise: &NoisePair,
    form: WeightForm,
) -> WeightBreakdown {
    let grid = ctx.kernels.grid();
    let n = grid.steps();
    let d = ctx.d;
    let dt = grid.dt();
    let (u, terms) = assemble_weight_integrand(ctx, eta, form);
    let mut m_t = 0.0;
    let mut qv = 0.0;
    let mut m_terms = [0.0; 4];
    for k in 0..n {
        for c in 0..d {
            let dw = noise.dw(k, c);
            let val = u[k * d + c];
            m_t += val * dw;
            qv += val * val * dt;
            for (ti, term) in terms.iter().enumerate() {
                m_terms[ti] += term[k * d + c] * dw;
            }
        }
    }
    WeightBreakdown { u, terms, m_t, quadratic_variation: qv, m_terms }
}

/// Everything fixed across paths for one gradient run.
pub struct GradientRun<'a> {
    pub model: &'a DegenerateModel,
    pub kernels: &'a VolterraKernels,
    pub atoms: &'a InversionAtoms,
    pub bridge: &'a BridgeSet,
    pub ctx: &'a WeightContext<'a>,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub f: TestFunction,
}

/// Estimator selector mirroring the command-line interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    Bismut,
    Pathwise,
    Fd,
}

/// One gradient estimate plus optional per-term variance diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct GradientEstimate {
    pub method: GradientMethod,
    pub estimate: McEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_stderr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub term_variances: Option<[f64; 4]>,
}

struct PathOutput {
    bismut: f64,
    weight: f64,
    m_terms: [f64; 4],
    pathwise: f64,
    fd: f64,
}

fn run_paths(
    run: &GradientRun,
    n_paths: u64,
    seed: SeedSpec,
    fd_eps: f64,
    want_pathwise: bool,
    want_fd: bool,
) -> Result<Vec<PathOutput>> {
    let grid = run.kernels.grid();
    let d1 = run.model.d1;
    let v: Vec<f64> =
        run.bridge.v1.iter().chain(run.bridge.v2.iter()).copied().collect();
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let noise = NoisePair::sample(run.kernels, run.model.d, seed, i)?;
            let traj = euler_solve(run.model, &run.x0, &run.y0, &noise, &grid)?;
            let z_t = traj.terminal();
            let f_t = run.f.eval(z_t, d1);

            let eta = eta_integrand(run.model, &traj, run.bridge, &grid);
            let wt = malliavin_weight(run.ctx, &eta, &noise, WeightForm::Grouped);
            let bismut = f_t * wt.m_t;

            let pathwise = if want_pathwise {
                let var = variational_solve(run.model, &traj, &v, &grid)?;
                let grad_f = run.f.grad(z_t, d1);
                let j_t = var.j.at(grid.steps());
                grad_f.iter().zip(j_t).map(|(a, b)| a * b).sum()
            } else {
                0.0
            };

            let fd = if want_fd {
                let xp: Vec<f64> =
                    (0..run.x0.len()).map(|c| run.x0[c] + fd_eps * run.bridge.v1[c]).collect();
                let yp: Vec<f64> =
                    (0..run.y0.len()).map(|c| run.y0[c] + fd_eps * run.bridge.v2[c]).collect();
                let xm: Vec<f64> =
                    (0..run.x0.len()).map(|c| run.x0[c] - fd_eps * run.bridge.v1[c]).collect();
                let ym: Vec<f64> =
                    (0..run.y0.len()).map(|c| run.y0[c] - fd_eps * run.bridge.v2[c]).collect();
                let plus = euler_solve(run.model, &xp, &yp, &noise, &grid)?;
                let minus = euler_solve(run.model, &xm, &ym, &noise, &grid)?;
                (run.f.eval(plus.terminal(), d1) - run.f.eval(minus.terminal(), d1))
                    / (2.0 * fd_eps)
            } else {
                0.0
            };

            Ok(PathOutput { bismut, weight: wt.m_t, m_terms: wt.m_terms, pathwise, fd })
        })
        .collect()
}

/// Bismut-weight estimator of `∇_v P_T f(z)`; also reports the raw weight mean
/// (a zero-mean diagnostic) and per-term Itô variances.
pub fn estimate_gradient_bismut(
    run: &GradientRun,
    n_paths: u64,
    seed: SeedSpec,
) -> Result<GradientEstimate> {
    let t0 = std::time::Instant::now();
    let outs = run_paths(run, n_paths, seed, 0.0, false, false)?;
    let samples: Vec<f64> = outs.iter().map(|o| o.bismut).collect();
    let est = McEstimate::from_samples(&samples, seed, t0.elapsed().as_millis())?;
    let weights: Vec<f64> = outs.iter().map(|o| o.weight).collect();
    let west = McEstimate::from_samples(&weights, seed, 0)?;
    let mut tv = [0.0; 4];
    for ti in 0..4 {
        let vals: Vec<f64> = outs.iter().map(|o| o.m_terms[ti]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        tv[ti] =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
    }
    Ok(GradientEstimate {
        method: GradientMethod::Bismut,
        estimate: est,
        weight_mean: Some(west.mean),
        weight_stderr: Some(west.stderr),
        term_variances: Some(tv),
    })
}

/// Pathwise estimator `E[⟨∇f(Z_T), J_T⟩]` on the same seed streams.
pub fn estimate_gradient_pathwise(
    run: &GradientRun,
    n_paths: u64,
    seed: SeedSpec,
) -> Result<GradientEstimate> {
    let t0 = std::time::Instant::now();
    let outs = run_paths(run, n_paths, seed, 0.0, true, false)?;
    let samples: Vec<f64> = outs.iter().map(|o| o.pathwise).collect();
    let est = McEstimate::from_samples(&samples, seed, t0.elapsed().as_millis())?;
    Ok(GradientEstimate {
        method: GradientMethod::Pathwise,
        estimate: est,
        weight_mean: None,
        weight_stderr: None,
        term_variances: None,
    })
}

/// Central-difference estimator with common random numbers across `z ± eps v`.
pub fn estimate_gradient_fd(
    run: &GradientRun,
    n_paths: u64,
    seed: SeedSpec,
    eps: f64,
) -> Result<GradientEstimate> {
    if !(eps > 0.0) {
        return Err(Error::config("finite-difference eps must be positive"));
    }
    let t0 = std::time::Instant::now();
    let outs = run_paths(run, n_paths, seed, eps, false, true)?;
    let samples: Vec<f64> = outs.iter().map(|o| o.fd).collect();
    let est = McEstimate::from_samples(&samples, seed, t0.elapsed().as_millis())?;
    Ok(GradientEstimate {
        method: GradientMethod::Fd,
        estimate: est,
        weight_mean: None,
        weight_stderr: None,
        term_variances: None,
    })
}

/// All three estimators off one shared set of paths.
pub fn estimate_gradient_all(
    run: &GradientRun,
    n_paths: u64,
    seed: SeedSpec,
    fd_eps: f64,
) -> Result<Vec<GradientEstimate>> {
    let t0 = std::time::Instant::now();
    let outs = run_paths(run, n_paths, seed, fd_eps, true, true)?;
    let wall = t0.elapsed().as_millis();
    let mut result = Vec::with_capacity(3);
    let bismut: Vec<f64> = outs.iter().map(|o| o.bismut).collect();
    let weights: Vec<f64> = outs.iter().map(|o| o.weight).collect();
    let west = McEstimate::from_samples(&weights, seed, 0)?;
    let mut tv = [0.0; 4];
    for ti in 0..4 {
        let vals: Vec<f64> = outs.iter().map(|o| o.m_terms[ti]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        tv[ti] =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
    }
    result.push(GradientEstimate {
        method: GradientMethod::Bismut,
        estimate: McEstimate::from_samples(&bismut, seed, wall)?,
        weight_mean: Some(west.mean),
        weight_stderr: Some(west.stderr),
        term_variances: Some(tv),
    });
    let pathwise: Vec<f64> = outs.iter().map(|o| o.pathwise).collect();
    result.push(GradientEstimate {
        method: GradientMethod::Pathwise,
        estimate: McEstimate::from_samples(&pathwise, seed, wall)?,
        weight_mean: None,
        weight_stderr: None,
        term_variances: None,
    });
    let fd: Vec<f64> = outs.iter().map(|o| o.fd).collect();
    result.push(GradientEstimate {
        method: GradientMethod::Fd,
        estimate: McEstimate::from_samples(&fd, seed, wall)?,
        weight_mean: None,
        weight_stderr: None,
        term_variances: None,
    });
    Ok(result)
}

/// Convenience: build the bridge and shared tables for `(model, v, grid, mode)`.
pub fn prepare_bridge(
    model: &DegenerateModel,
    v: &[f64],
    grid: &TimeGrid,
    mode: BridgeMode,
) -> Result<BridgeSet> {
    if v.len() != model.dim() {
        return Err(Error::config("direction v has wrong dimension"));
    }
    let v1 = nalgebra::DVector::from_column_slice(&v[..model.d1]);
    let v2 = nalgebra::DVector::from_column_slice(&v[model.d1..]);
    build_bridge(model, &v1, &v2, grid, mode)
}

/// Girsanov density along one path:
/// `R_eps = exp[-Σ ⟨u_eps, ΔW⟩ - (1/2) Σ |u_eps|^2 dt]` where `u_eps` is the
/// kernel-inverse transform of the frozen-drift mismatch plus steering term.
pub fn girsanov_weight(
    model: &DegenerateModel,
    ctx: &WeightContext,
    bridge: &BridgeSet,
    base: &Trajectory,
    coupled: &Trajectory,
    noise: &NoisePair,
    eps: f64,
) -> Result<f64> {
    let grid = ctx.kernels.grid();
    let n = grid.steps();
    let dt = grid.dt();
    let (d1, d2) = (model.d1, model.d2);
    // integrand: b~(Z) - b~(Z^eps) + eps h~', the steering derivative taken as
    // its exact cell average (predictable, like the weight's integrand)
    let mut diff = vec![0.0; (n + 1) * d2];
    let mut b_base = vec![0.0; d2];
    let mut b_coup = vec![0.0; d2];
    for k in 0..=n {
        let t = grid.node(k);
        model.drift_eval(t, base.x_at(k, d1), base.y_at(k, d1), &mut b_base);
        model.drift_eval(t, coupled.x_at(k, d1), coupled.y_at(k, d1), &mut b_coup);
        for c in 0..d2 {
            let hp = if k < n {
                (bridge.g_tilde_at(k + 1)[c] - bridge.g_tilde_at(k)[c]) / dt
            } else {
                bridge.g_tilde_prime_at(k)[c]
            };
            diff[k * d2 + c] = b_base[c] - b_coup[c] + eps * hp;
        }
    }
    let (u, _) = assemble_weight_integrand(ctx, &diff, WeightForm::Grouped);
    let dt = grid.dt();
    let d = ctx.d;
    let mut ito = 0.0;
    let mut qv = 0.0;
    for k in 0..n {
        for c in 0..d {
            let val = u[k * d + c];
            ito += val * noise.dw(k, c);
            qv += val * val * dt;
        }
    }
    let exponent = -ito - 0.5 * qv;
    if exponent.abs() > 700.0 {
        return Err(Error::degenerate(format!(
            "Girsanov exponent overflow: {exponent:.1}"
        )));
    }
    Ok(exponent.exp())
}

/// Monte Carlo summary of a Girsanov run: the density mean (a martingale check)
/// and the finite-shift weak derivative `[E R_eps f(Z_T) - E f(Z_T)] / eps`.
#[derive(Debug, Clone, Serialize)]
pub struct GirsanovRun {
    pub eps: f64,
    pub density_mean: McEstimate,
    pub weak_derivative: McEstimate,
}

pub fn girsanov_run(
    model: &DegenerateModel,
    ctx: &WeightContext,
    bridge: &BridgeSet,
    x0: &[f64],
    y0: &[f64],
    f: TestFunction,
    eps: f64,
    n_paths: u64,
    seed: SeedSpec,
) -> Result<GirsanovRun> {
    let grid = ctx.kernels.grid();
    let d1 = model.d1;
    let t0 = std::time::Instant::now();
    let pairs: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let noise = NoisePair::sample(ctx.kernels, model.d, seed, i)?;
            let traj = euler_solve(model, x0, y0, &noise, &grid)?;
            let coupled = solve_coupled(model, &traj, eps, bridge, &noise, &grid)?;
            let r = girsanov_weight(model, ctx, bridge, &traj, &coupled, &noise, eps)?;
            let f_t = f.eval(traj.terminal(), d1);
            Ok((r, (r - 1.0) * f_t / eps))
        })
        .collect::<Result<_>>()?;
    let wall = t0.elapsed().as_millis();
    let density: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let deriv: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(GirsanovRun {
        eps,
        density_mean: McEstimate::from_samples(&density, seed, wall)?,
        weak_derivative: McEstimate::from_samples(&deriv, seed, wall)?,
    })
}
