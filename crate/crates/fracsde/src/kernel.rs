//! The Volterra kernel `K_H` representing fBm over a Wiener process, its adjoint
//! `K_H*`, its inverse, and the singular-quadrature tables they share.
//!
//! For `H > 1/2` the kernel is taken through its derivative form
//! `∂K_H/∂t (t,s) = c_H (t/s)^{H-1/2} (t-s)^{H-3/2}`, which factorizes as
//! `K_H(t,s) = s^{1/2-H} psi(t,s)` with `psi` bounded up to `s = 0`. Every
//! quadrature below integrates the singular power factors analytically against
//! piecewise-linear models of the bounded ones; plain Riemann sums would lose
//! several percent of mass near `s = 0` at large `H`.
//!
//! The normalization `c_H = sqrt(H(2H-1)/B(2-2H, H-1/2))` is written down in
//! closed form and then *validated* against the covariance identity
//! `∫ K_H(t,r) K_H(s,r) dr = R_H(t,s)` on a probe lattice at construction;
//! a failure is a hard error, not a warning.

use rayon::prelude::*;
use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

use crate::error::Error;
use crate::fbm::covariance_rh;
use crate::frac_ops::Hurst;
use crate::grid::TimeGrid;
use crate::Result;

/// Geometric refinement of the first grid cell used by the fBm sampler: the
/// kernel mass near `s = 0` scales like `s^{1-2H}` and a single midpoint weight
/// per cell misses enough of it at `H = 0.9` to bias the sampled covariance.
const SUB_OCTAVES: usize = 40;
const SUB_PER_OCTAVE: usize = 3;
/// Number of graded sub-cells the first grid cell is split into, for every `H`.
pub const SUB_CELLS: usize = SUB_OCTAVES * SUB_PER_OCTAVE + 1;

/// Boundaries of the graded sub-partition of `[0, dt]`: one tiny seed cell, then
/// `SUB_PER_OCTAVE` equal cells per octave up to `dt`. Pure grid geometry,
/// independent of `H`, so the Wiener sampler can draw matching sub-increments.
pub fn graded_subcell_bounds(dt: f64) -> Vec<f64> {
    let mut bounds = Vec::with_capacity(SUB_CELLS + 1);
    bounds.push(0.0);
    bounds.push(dt * 2f64.powi(-(SUB_OCTAVES as i32)));
    for oct in (0..SUB_OCTAVES).rev() {
        let lo = dt * 2f64.powi(-(oct as i32 + 1));
        let hi = dt * 2f64.powi(-(oct as i32));
        for s in 1..=SUB_PER_OCTAVE {
            bounds.push(lo + (hi - lo) * s as f64 / SUB_PER_OCTAVE as f64);
        }
    }
    debug_assert_eq!(bounds.len(), SUB_CELLS + 1);
    bounds
}

/// Widths of the graded sub-cells of `[0, dt]`.
pub fn graded_subcell_widths(dt: f64) -> Vec<f64> {
    let b = graded_subcell_bounds(dt);
    (0..SUB_CELLS).map(|k| b[k + 1] - b[k]).collect()
}

/// Relative tolerance for the construction-time covariance probe.
pub const DEFAULT_KERNEL_TOL: f64 = 1e-2;

const GL6_X: [f64; 6] = [
    -0.932469514203152,
    -0.661209386466265,
    -0.238619186083197,
    0.238619186083197,
    0.661209386466265,
    0.932469514203152,
];
const GL6_W: [f64; 6] = [
    0.171324492379170,
    0.360761573048139,
    0.467913934572691,
    0.467913934572691,
    0.360761573048139,
    0.171324492379170,
];

/// Closed-form normalization constant of the `H > 1/2` Volterra kernel.
pub fn kernel_constant(h: Hurst) -> f64 {
    if h.is_brownian() {
        return 1.0;
    }
    let hv = h.value();
    (hv * (2.0 * hv - 1.0) / beta(2.0 - 2.0 * hv, hv - 0.5)).sqrt()
}

/// `psi(t, s) = c_H ∫_s^t u^{H-1/2} (u-s)^{H-3/2} du`, the bounded co-factor of
/// the kernel, accumulated over `[lo, hi]` panels with the power weight handled
/// analytically. `phi_lo`/`phi_hi` are `u^{H-1/2}` at the panel ends.
fn psi_panel(h: f64, s: f64, lo: f64, hi: f64, phi_lo: f64, phi_hi: f64) -> f64 {
    let (wa, wb) = (lo - s, hi - s);
    let c1 = (phi_hi - phi_lo) / (wb - wa);
    let c0 = phi_lo - c1 * wa;
    let em = h - 0.5;
    let ep = h + 0.5;
    let wa_em = if wa == 0.0 { 0.0 } else { wa.powf(em) };
    let wa_ep = if wa == 0.0 { 0.0 } else { wa.powf(ep) };
    c0 * (wb.powf(em) - wa_em) / em + c1 * (wb.powf(ep) - wa_ep) / ep
}

/// Point evaluation `K_H(t, s)` on its own graded partition, independent of any
/// grid. Returns 0 for `s >= t`; `s = 0` is a genuine singularity and rejected.
pub fn kernel_value(t: f64, s: f64, h: Hurst) -> Result<f64> {
    if s <= 0.0 {
        return Err(Error::config("kernel evaluation requires 0 < s"));
    }
    if s >= t {
        return Ok(0.0);
    }
    if h.is_brownian() {
        return Ok(1.0);
    }
    let hv = h.value();
    let c_h = kernel_constant(h);
    // geometric panels expanding away from the u = s singularity, subdivided
    // within each octave to keep the chord model of u^{H-1/2} tight
    let len = t - s;
    let mut acc = 0.0;
    let mut lo = s;
    let mut phi_lo = s.powf(hv - 0.5);
    let octaves: i32 = 48;
    let per_octave = 8;
    for k in 0..octaves * per_octave {
        let e = -(octaves as f64) + (k + 1) as f64 / per_octave as f64;
        let hi = if k + 1 == octaves * per_octave { t } else { s + len * 2f64.powf(e) };
        if hi <= lo {
            // panel underflowed the float resolution near u = s
            continue;
        }
        let phi_hi = hi.powf(hv - 0.5);
        acc += psi_panel(hv, s, lo, hi, phi_lo, phi_hi);
        lo = hi;
        phi_lo = phi_hi;
    }
    Ok(c_h * s.powf(0.5 - hv) * acc)
}

/// Precomputed kernel tables for one `(grid, H)` pair.
///
/// Shared read-only by the sampler, the operator applications, and the gradient
/// machinery; immutable after construction.
#[derive(Debug, Clone)]
pub struct VolterraKernels {
    grid: TimeGrid,
    h: Hurst,
    c_h: f64,
    /// psi(t_j, m_i) for cell midpoints m_i, i < j; row j stored at offset j(j-1)/2.
    psi_mid: Vec<f64>,
    /// m_i^{1/2-H} and its reciprocal power.
    mid_pow: Vec<f64>,
    mid_pow_inv: Vec<f64>,
    /// ∫_cell r^{1/2-H} dr and ∫_cell r^{1-2H} dr.
    w_half: Vec<f64>,
    w_sq: Vec<f64>,
    /// Graded refinement of cell 0 for the sampler; `sub_pow` carries the
    /// cell-averaged `r^{1/2-H}` factor.
    sub_mids: Vec<f64>,
    sub_widths: Vec<f64>,
    sub_pow: Vec<f64>,
    /// psi(t_j, sub_mid_k), row j-1, stride = sub count.
    psi_sub: Vec<f64>,
    /// Largest relative covariance-probe error observed at construction.
    probe_error: f64,
}

fn tri_offset(j: usize) -> usize {
    j * (j - 1) / 2
}

impl VolterraKernels {
    pub fn new(grid: TimeGrid, h: Hurst) -> Result<Self> {
        Self::with_tolerance(grid, h, DEFAULT_KERNEL_TOL)
    }

    /// Builds the tables and validates the covariance identity at the given
    /// relative tolerance on a probe lattice.
    pub fn with_tolerance(grid: TimeGrid, h: Hurst, tol: f64) -> Result<Self> {
        let n = grid.steps();
        if h.is_brownian() {
            return Ok(VolterraKernels {
                grid,
                h,
                c_h: 1.0,
                psi_mid: Vec::new(),
                mid_pow: vec![1.0; n],
                mid_pow_inv: vec![1.0; n],
                w_half: vec![grid.dt(); n],
                w_sq: vec![grid.dt(); n],
                sub_mids: Vec::new(),
                sub_widths: Vec::new(),
                sub_pow: Vec::new(),
                psi_sub: Vec::new(),
                probe_error: 0.0,
            });
        }

        let hv = h.value();
        let c_h = kernel_constant(h);
        let dt = grid.dt();

        let mids: Vec<f64> = (0..n).map(|i| grid.midpoint(i)).collect();
        let mid_pow: Vec<f64> = mids.iter().map(|m| m.powf(0.5 - hv)).collect();
        let mid_pow_inv: Vec<f64> = mids.iter().map(|m| m.powf(hv - 0.5)).collect();

        let e_half = 1.5 - hv;
        let e_sq = 2.0 - 2.0 * hv;
        let node_pow_half: Vec<f64> = (0..=n).map(|k| grid.node(k).powf(e_half)).collect();
        let node_pow_sq: Vec<f64> = (0..=n).map(|k| grid.node(k).powf(e_sq)).collect();
        let w_half: Vec<f64> =
            (0..n).map(|i| (node_pow_half[i + 1] - node_pow_half[i]) / e_half).collect();
        let w_sq: Vec<f64> = (0..n).map(|i| (node_pow_sq[i + 1] - node_pow_sq[i]) / e_sq).collect();

        // psi columns in parallel, then transposed into triangular row storage
        let columns: Vec<Vec<f64>> =
            (0..n).into_par_iter().map(|i| psi_column(&grid, hv, c_h, mids[i])).collect();
        let mut psi_mid = vec![0.0; n * (n + 1) / 2];
        for j in 1..=n {
            let off = tri_offset(j);
            for i in 0..j {
                psi_mid[off + i] = columns[i][j - i - 1];
            }
        }
        drop(columns);

        // graded sub-cells of [0, dt]
        let bounds = graded_subcell_bounds(dt);
        let m_sub = SUB_CELLS;
        let sub_mids: Vec<f64> = (0..m_sub).map(|k| 0.5 * (bounds[k] + bounds[k + 1])).collect();
        let sub_widths: Vec<f64> = (0..m_sub).map(|k| bounds[k + 1] - bounds[k]).collect();
        // cell-averaged power factor: the L2 projection of the kernel onto
        // per-cell constants keeps the sampled covariance tight even at H = 0.9
        let sub_pow: Vec<f64> = (0..m_sub)
            .map(|k| {
                (bounds[k + 1].powf(e_half) - bounds[k].powf(e_half))
                    / (e_half * sub_widths[k])
            })
            .collect();

        let sub_columns: Vec<Vec<f64>> =
            sub_mids.par_iter().map(|&s| psi_column(&grid, hv, c_h, s)).collect();
        let mut psi_sub = vec![0.0; n * m_sub];
        for j in 1..=n {
            for (k, col) in sub_columns.iter().enumerate() {
                psi_sub[(j - 1) * m_sub + k] = col[j - 1];
            }
        }

        let mut kernels = VolterraKernels {
            grid,
            h,
            c_h,
            psi_mid,
            mid_pow,
            mid_pow_inv,
            w_half,
            w_sq,
            sub_mids,
            sub_widths,
            sub_pow,
            psi_sub,
            probe_error: 0.0,
        };

        // covariance-identity probe: the closed-form constant is checked, not trusted
        let mut worst = 0.0f64;
        let probes = [n / 5, 2 * n / 5, 3 * n / 5, 4 * n / 5, n];
        for &a in &probes {
            for &b in &probes {
                if a == 0 || b == 0 || a > b {
                    continue;
                }
                let got = kernels.covariance_quadrature(a, b);
                let want = covariance_rh(grid.node(a), grid.node(b), h);
                let scale = covariance_rh(grid.node(b), grid.node(b), h);
                worst = worst.max((got - want).abs() / scale);
            }
        }
        if worst > tol {
            return Err(Error::degenerate(format!(
                "kernel covariance identity failed: probe error {worst:.3e} > {tol:.1e} \
                 (H={}, n={})",
                h.value(),
                n
            )));
        }
        kernels.probe_error = worst;
        Ok(kernels)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn hurst(&self) -> Hurst {
        self.h
    }

    /// `psi(t_j, 0) = c_H t_j^{2H-1} / (2H - 1)`: the closed-form left anchor of
    /// the bounded kernel co-factor. `psi` has a Hölder kink of order `2H-1` at
    /// `s = 0`, so first-cell quadratures hang their linear model on this value
    /// instead of extrapolating from the midpoint.
    fn psi_at_zero(&self, j: usize) -> f64 {
        let hv = self.h.value();
        self.c_h * self.grid.node(j).powf(2.0 * hv - 1.0) / (2.0 * hv - 1.0)
    }

    pub fn constant(&self) -> f64 {
        self.c_h
    }

    /// Worst relative covariance-probe error measured at construction.
    pub fn probe_error(&self) -> f64 {
        self.probe_error
    }

    fn check_grid(&self, len: usize) -> Result<()> {
        if len != self.grid.steps() + 1 {
            return Err(Error::config(format!(
                "sampled function has {len} values, kernel grid has {} nodes",
                self.grid.steps() + 1
            )));
        }
        Ok(())
    }

    /// Kernel value at a cell midpoint, `K_H(t_j, m_i)`, `i < j`.
    pub fn kernel_at_midpoint(&self, j: usize, i: usize) -> f64 {
        if self.h.is_brownian() {
            return 1.0;
        }
        self.mid_pow[i] * self.psi_mid[tri_offset(j) + i]
    }

    /// Per-cell constant the sampler multiplies `ΔW_i` by: `psi` at the cell
    /// midpoint times the cell-averaged `r^{1/2-H}` factor, approximating the
    /// cell average of `K_H(t_j, ·)`.
    pub fn sampler_weight(&self, j: usize, i: usize) -> f64 {
        if self.h.is_brownian() {
            return 1.0;
        }
        let dt = self.grid.dt();
        self.psi_mid[tri_offset(j) + i] * self.w_half[i] / dt
    }

    /// Sub-cell sampler weights of the graded first cell:
    /// `(width_k, cell-averaged K_H(t_j, ·) over sub-cell k)`.
    pub fn first_cell(&self, j: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        let m = self.sub_mids.len();
        (0..m).map(move |k| {
            (self.sub_widths[k], self.sub_pow[k] * self.psi_sub[(j - 1) * m + k])
        })
    }

    pub fn sub_cell_count(&self) -> usize {
        self.sub_mids.len()
    }

    pub fn sub_cell_widths(&self) -> &[f64] {
        &self.sub_widths
    }

    /// `(K_H f)(t_j) = ∫_0^{t_j} K_H(t_j, s) f(s) ds` at every node, with the
    /// `s^{1/2-H}` factor integrated exactly per cell.
    pub fn apply_kh(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_grid(f.len())?;
        let n = self.grid.steps();
        let mut out = vec![0.0; n + 1];
        if self.h.is_brownian() {
            let dt = self.grid.dt();
            for j in 1..=n {
                out[j] = out[j - 1] + 0.5 * (f[j - 1] + f[j]) * dt;
            }
            return Ok(out);
        }
        let dt = self.grid.dt();
        let hv = self.h.value();
        let w1_half = dt.powf(2.5 - hv) / (2.5 - hv);
        for j in 1..=n {
            let off = tri_offset(j);
            // first cell: linear model of psi * f anchored at the closed-form
            // psi(t_j, 0), integrated against r^{1/2-H} exactly
            let g0 = self.psi_at_zero(j) * f[0];
            let g_mid = self.psi_mid[off] * 0.5 * (f[0] + f[1]);
            let mut acc = g0 * self.w_half[0] + (g_mid - g0) / (0.5 * dt) * w1_half;
            for i in 1..j {
                acc += self.w_half[i] * self.psi_mid[off + i] * 0.5 * (f[i] + f[i + 1]);
            }
            out[j] = acc;
        }
        Ok(out)
    }

    /// `(K_H* phi)(s) = ∫_s^T phi(r) ∂K_H/∂r(r, s) dr` evaluated at the cell
    /// midpoints (the left-endpoint power singularity keeps node 0 off-limits).
    pub fn apply_kh_star(&self, phi: &[f64]) -> Result<Vec<f64>> {
        self.check_grid(phi.len())?;
        let n = self.grid.steps();
        if self.h.is_brownian() {
            return Ok((0..n).map(|i| 0.5 * (phi[i] + phi[i + 1])).collect());
        }
        let hv = self.h.value();
        let out: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let s = self.grid.midpoint(i);
                // smooth factor F(r) = phi(r) r^{H-1/2} against (r-s)^{H-3/2}
                let mut acc = 0.0;
                let mut lo = s;
                let mut f_lo = 0.5 * (phi[i] + phi[i + 1]) * s.powf(hv - 0.5);
                for k in (i + 1)..=n {
                    let hi = self.grid.node(k);
                    let f_hi = phi[k] * hi.powf(hv - 0.5);
                    acc += psi_panel(hv, s, lo, hi, f_lo, f_hi);
                    lo = hi;
                    f_lo = f_hi;
                }
                self.c_h * s.powf(0.5 - hv) * acc
            })
            .collect();
        Ok(out)
    }

    /// `K_H* 1_{[0, t_cut]}` at the cell midpoints. Step functions are the
    /// operator's natural domain and the transform of an indicator is the
    /// kernel section itself, `K_H(t_cut, s) 1_{s < t_cut}`, evaluated here
    /// without any interpolation smear.
    pub fn kh_star_indicator(&self, cut: usize) -> Vec<f64> {
        let n = self.grid.steps();
        debug_assert!(cut >= 1 && cut <= n);
        (0..n)
            .map(|i| if i < cut { self.kernel_at_midpoint(cut, i) } else { 0.0 })
            .collect()
    }

    /// L2 inner product of two midpoint-sampled functions, weighted so that the
    /// `s^{1/2-H}` behavior of `K_H*` outputs is integrated exactly. The first
    /// cell anchors a linear model of the smooth co-factors at `s = 0` by
    /// extrapolation from the first two midpoints.
    pub fn weighted_l2_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.grid.steps();
        debug_assert_eq!(a.len(), n);
        debug_assert_eq!(b.len(), n);
        let dt = self.grid.dt();
        if self.h.is_brownian() {
            return a.iter().zip(b).map(|(x, y)| x * y * dt).sum();
        }
        let hv = self.h.value();
        let sa0 = a[0] * self.mid_pow_inv[0];
        let sb0 = b[0] * self.mid_pow_inv[0];
        let sa1 = a[1] * self.mid_pow_inv[1];
        let sb1 = b[1] * self.mid_pow_inv[1];
        let p_zero = (1.5 * sa0 - 0.5 * sa1) * (1.5 * sb0 - 0.5 * sb1);
        let p_mid = sa0 * sb0;
        let w1_sq = dt.powf(3.0 - 2.0 * hv) / (3.0 - 2.0 * hv);
        let mut acc = p_zero * self.w_sq[0] + (p_mid - p_zero) / (0.5 * dt) * w1_sq;
        for i in 1..n {
            acc += self.w_sq[i]
                * (a[i] * self.mid_pow_inv[i])
                * (b[i] * self.mid_pow_inv[i]);
        }
        acc
    }

    /// `∫_0^{t_a ∧ t_b} K_H(t_a, r) K_H(t_b, r) dr` by the same cell quadrature
    /// the operators use; compared against `R_H` at construction.
    pub fn covariance_quadrature(&self, a: usize, b: usize) -> f64 {
        let m = a.min(b);
        if self.h.is_brownian() {
            return self.grid.node(m);
        }
        if m == 0 {
            return 0.0;
        }
        let (oa, ob) = (tri_offset(a), tri_offset(b));
        let dt = self.grid.dt();
        let hv = self.h.value();
        // first cell: psi_a psi_b modeled linearly from its closed-form value at
        // r = 0, against the exact r^{1-2H} moments
        let p0 = self.psi_at_zero(a) * self.psi_at_zero(b);
        let p_mid = self.psi_mid[oa] * self.psi_mid[ob];
        let w1_sq = dt.powf(3.0 - 2.0 * hv) / (3.0 - 2.0 * hv);
        let mut acc = p0 * self.w_sq[0] + (p_mid - p0) / (0.5 * dt) * w1_sq;
        for i in 1..m {
            acc += self.w_sq[i] * self.psi_mid[oa + i] * self.psi_mid[ob + i];
        }
        acc
    }

    /// Discrete covariance of the graded-cell sampler itself (deterministic),
    /// `E[B^H_{t_a} B^H_{t_b}]` under the per-cell constant kernel weights.
    pub fn sampler_covariance(&self, a: usize, b: usize) -> f64 {
        let m = a.min(b);
        if m == 0 {
            return 0.0;
        }
        if self.h.is_brownian() {
            return self.grid.node(m);
        }
        let dt = self.grid.dt();
        let mut acc = 0.0;
        for ((wk, ka), (_, kb)) in self.first_cell(a).zip(self.first_cell(b)) {
            acc += wk * ka * kb;
        }
        for i in 1..m {
            acc += dt * self.sampler_weight(a, i) * self.sampler_weight(b, i);
        }
        acc
    }

    /// `(K_H f)'` at the nodes: `c_H t^{H-1/2} ∫_0^t s^{1/2-H} f(s) (t-s)^{H-3/2} ds`.
    pub fn kh_derivative(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_grid(f.len())?;
        if self.h.is_brownian() {
            return Ok(f.to_vec());
        }
        let n = self.grid.steps();
        let hv = self.h.value();
        let dt = self.grid.dt();
        let nu0 = dt.powf(1.5 - hv) / (1.5 - hv);
        let nu1 = dt.powf(2.5 - hv) / (2.5 - hv);
        let mut out = vec![0.0; n + 1];
        out[1] = self.c_h
            * self.grid.node(1).powf(hv - 0.5)
            * 0.5
            * (f[0] + f[1])
            * beta(1.5 - hv, hv - 0.5);
        for j in 2..=n {
            let tj = self.grid.node(j);
            // first cell: s^{1/2-H} weight against the linearized remainder
            let p0 = f[0] * tj.powf(hv - 1.5);
            let p1 = f[1] * (tj - dt).powf(hv - 1.5);
            let mut acc = p0 * nu0 + (p1 - p0) * nu1 / dt;
            // interior and diagonal cells: (t-s)^{H-3/2} weight, G(s) = s^{1/2-H} f(s)
            let mut lo = self.grid.node(1);
            let mut g_lo = f[1] * lo.powf(0.5 - hv);
            for i in 1..j {
                let hi = self.grid.node(i + 1);
                let g_hi = f[i + 1] * hi.powf(0.5 - hv);
                // reuse psi_panel with roles swapped: weight (t_j - s)^{H-3/2} means
                // integrating in w = t_j - s from t_j - hi to t_j - lo
                acc += psi_panel(hv, 0.0, tj - hi, tj - lo, g_hi, g_lo);
                lo = hi;
                g_lo = g_hi;
            }
            out[j] = self.c_h * tj.powf(hv - 0.5) * acc;
        }
        Ok(out)
    }

    /// `K_H^{-1}` applied to a node-sampled derivative `h'`:
    /// `norm * t^{H-1/2} D^{H-1/2}_{0+} [ s^{1/2-H} h' ](t)`, evaluated through the
    /// same panel atoms the gradient weight uses. The normalization
    /// `1/(c_H Γ(H-1/2))` ties the constant-free fractional composition back to
    /// the covariance-calibrated kernel.
    pub fn kh_inverse(&self, hprime: &[f64]) -> Result<Vec<f64>> {
        self.check_grid(hprime.len())?;
        if self.h.is_brownian() {
            return Ok(hprime.to_vec());
        }
        let n = self.grid.steps();
        let hv = self.h.value();
        let alpha = self.h.alpha();
        let norm = self.inverse_norm();
        let dt = self.grid.dt();
        let mut out = vec![0.0; n + 1];
        out[0] = norm * (0.5 * dt).powf(0.5 - hv) * hprime[0];
        let rows: Vec<f64> = (1..=n)
            .into_par_iter()
            .map(|j| {
                let row = AtomRow::compute(&self.grid, self.h, j);
                let tj = self.grid.node(j);
                let j1 = tj.powf(0.5 - hv) * hprime[j];
                let mut j2 = 0.0;
                let mut j4 = 0.0;
                for i in 0..j {
                    j2 += row.a2_0[i] * hprime[i] + row.a2_1[i] * hprime[i + 1];
                    j4 += row.aj0[i] * (hprime[j] - hprime[i])
                        + row.aj1[i] * (hprime[j] - hprime[i + 1]);
                }
                norm * (j1 + alpha * tj.powf(hv - 0.5) * j2 + alpha * j4)
            })
            .collect();
        out[1..].copy_from_slice(&rows);
        Ok(out)
    }

    /// `1 / (c_H Γ(H-1/2) Γ(3/2-H))`: the full prefactor of the inverse operator,
    /// with the Weyl-derivative gamma folded in. Tends to 1 as `H -> 1/2`.
    pub fn inverse_norm(&self) -> f64 {
        if self.h.is_brownian() {
            return 1.0;
        }
        let alpha = self.h.alpha();
        1.0 / (self.c_h * gamma(alpha) * gamma(1.0 - alpha))
    }
}

/// psi(t_j, s) for every node `t_j > s`, accumulated panel by panel.
fn psi_column(grid: &TimeGrid, hv: f64, c_h: f64, s: f64) -> Vec<f64> {
    let n = grid.steps();
    let j0 = (0..=n).find(|&j| grid.node(j) > s).expect("s below horizon");
    let mut out = Vec::with_capacity(n - j0 + 1);
    let mut acc = 0.0;
    let mut lo = s;
    let mut phi_lo = s.powf(hv - 0.5);
    for j in j0..=n {
        let hi = grid.node(j);
        let phi_hi = hi.powf(hv - 0.5);
        acc += psi_panel(hv, s, lo, hi, phi_lo, phi_hi);
        out.push(c_h * acc);
        lo = hi;
        phi_lo = phi_hi;
    }
    out
}

/// Panel atoms for one outer node `t_j`: linear functionals sending the nodal
/// values of a smooth factor to its integral against each singular kernel.
///
/// `aj*` integrate `(t_j - r)^{-1/2-H}` against the left/right hat functions,
/// `a2_*` integrate `(t_j^{1/2-H} - r^{1/2-H})(t_j - r)^{-1/2-H}`, and `dx*`
/// integrate `((t_j/r)^{H-1/2} - 1)(t_j - r)^{-1/2-H}`. The three kernels obey
/// `a2 = -t_j^{1/2-H} dx` pointwise, which the grouped/expanded weight routes
/// exploit; atoms are computed at shared quadrature nodes so that identity
/// survives discretization to rounding error.
///
/// On the diagonal panel the individually divergent right-hat functionals are
/// set to zero; every consumer pairs them with a factor that vanishes there.
#[derive(Debug, Clone)]
pub struct AtomRow {
    pub aj0: Vec<f64>,
    pub aj1: Vec<f64>,
    pub a2_0: Vec<f64>,
    pub a2_1: Vec<f64>,
    pub dx0: Vec<f64>,
    pub dx1: Vec<f64>,
    /// Σ_i (a2_0 + a2_1): the scalar kernel integral of the expanded route.
    pub a2_sum: f64,
}

impl AtomRow {
    pub fn compute(grid: &TimeGrid, h: Hurst, j: usize) -> AtomRow {
        debug_assert!(j >= 1 && j <= grid.steps());
        let hv = h.value();
        let dt = grid.dt();
        let tj = grid.node(j);
        let em = 0.5 - hv; // exponent of the outer power
        let beta1 = 0.5 - hv; // (-1/2-H) + 1
        let beta2 = 1.5 - hv;
        let tj_pow = tj.powf(em);
        let tj_pow_inv = tj.powf(-em);

        let mut aj0 = vec![0.0; j];
        let mut aj1 = vec![0.0; j];
        let mut a2_0 = vec![0.0; j];
        let mut a2_1 = vec![0.0; j];
        let mut dx0 = vec![0.0; j];
        let mut dx1 = vec![0.0; j];

        if j == 1 {
            // single panel with singularities at both ends
            let b33 = beta(1.5 - hv, 1.5 - hv);
            aj0[0] = dt.powf(0.5 - hv) / (1.5 - hv);
            a2_0[0] = dt.powf(0.5 - 2.0 * hv + 0.5) * (1.0 / (1.5 - hv) - b33);
            // right-hat J2 atom: bounded integrand, geometric composite toward r = dt
            a2_1[0] = j2_right_hat_first_row(hv, dt);
            dx0[0] = -tj_pow_inv * a2_0[0];
            dx1[0] = -tj_pow_inv * a2_1[0];
            let a2_sum = a2_0[0] + a2_1[0];
            return AtomRow { aj0, aj1, a2_0, a2_1, dx0, dx1, a2_sum };
        }

        for i in 0..j - 1 {
            let (r0, r1) = (grid.node(i), grid.node(i + 1));
            // analytic hat moments of (t_j - r)^{-1/2-H}
            let (w1, w2) = (tj - r1, tj - r0);
            let i0 = (w2.powf(beta1) - w1.powf(beta1)) / beta1;
            let i1 = tj * i0 - (w2.powf(beta2) - w1.powf(beta2)) / beta2;
            aj0[i] = (r1 * i0 - i1) / dt;
            aj1[i] = (i1 - r0 * i0) / dt;

            if i == 0 {
                // r^{1/2-H} handled by its own moments; remainder linearized
                let nu0 = dt.powf(1.5 - hv) / (1.5 - hv);
                let nu1 = dt.powf(2.5 - hv) / (2.5 - hv);
                for (hat, dx, a2) in [
                    (true, &mut dx0[0], &mut a2_0[0]),
                    (false, &mut dx1[0], &mut a2_1[0]),
                ] {
                    let g0 = tj.powf(-0.5 - hv) * if hat { 1.0 } else { 0.0 };
                    let g1 = (tj - dt).powf(-0.5 - hv) * if hat { 0.0 } else { 1.0 };
                    let mh = g0 * nu0 + (g1 - g0) * nu1 / dt;
                    *dx = tj.powf(hv - 0.5) * mh - if hat { aj0[0] } else { aj1[0] };
                    *a2 = tj_pow * (if hat { aj0[0] } else { aj1[0] }) - mh;
                }
            } else {
                // shared Gauss nodes for both power-power kernels
                let half = 0.5 * dt;
                let mid = 0.5 * (r0 + r1);
                let mut d0 = 0.0;
                let mut d1 = 0.0;
                let mut b0 = 0.0;
                let mut b1 = 0.0;
                for (x, w) in GL6_X.iter().zip(GL6_W) {
                    let r = mid + half * x;
                    let common = (tj - r).powf(-0.5 - hv);
                    let hat_l = (r1 - r) / dt;
                    let hat_r = (r - r0) / dt;
                    let kd = ((tj / r).powf(hv - 0.5) - 1.0) * common;
                    let k2 = (tj_pow - r.powf(em)) * common;
                    d0 += w * kd * hat_l;
                    d1 += w * kd * hat_r;
                    b0 += w * k2 * hat_l;
                    b1 += w * k2 * hat_r;
                }
                dx0[i] = half * d0;
                dx1[i] = half * d1;
                a2_0[i] = half * b0;
                a2_1[i] = half * b1;
            }
        }

        // diagonal panel [t_{j-1}, t_j]
        let i = j - 1;
        let rho = (tj / grid.node(j - 1)).powf(hv - 0.5);
        let base = dt.powf(0.5 - hv);
        aj0[i] = base / (1.5 - hv);
        aj1[i] = 0.0;
        dx0[i] = (rho - 1.0) * base / (2.5 - hv);
        dx1[i] = (rho - 1.0) * base / ((1.5 - hv) * (2.5 - hv));
        a2_0[i] = -tj_pow * dx0[i];
        a2_1[i] = -tj_pow * dx1[i];

        let a2_sum = a2_0.iter().zip(&a2_1).map(|(a, b)| a + b).sum();
        AtomRow { aj0, aj1, a2_0, a2_1, dx0, dx1, a2_sum }
    }
}

/// `∫_0^dt (dt^{1/2-H} - r^{1/2-H}) (dt-r)^{-1/2-H} (r/dt) dr`: bounded integrand
/// (it vanishes like `(dt-r)^{1/2-H}` at the right end) whose derivative blows up
/// there; geometric Gauss panels shrinking toward `r = dt` resolve it.
fn j2_right_hat_first_row(hv: f64, dt: f64) -> f64 {
    let kernel =
        |r: f64| (dt.powf(0.5 - hv) - r.powf(0.5 - hv)) * (dt - r).powf(-0.5 - hv) * r / dt;
    let mut acc = 0.0;
    let mut a = 0.0;
    for level in 1..=60i32 {
        let b = if level == 60 { dt } else { dt - dt * 2f64.powi(-level) };
        if b <= a {
            // remaining sliver is below float resolution; the integrand vanishes
            // toward r = dt, so truncating it is harmless
            break;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut s = 0.0;
        for (x, w) in GL6_X.iter().zip(GL6_W) {
            let val = kernel(mid + half * x);
            if val.is_finite() {
                s += w * val;
            }
        }
        acc += half * s;
        a = b;
    }
    acc
}

/// Full atom table for one `(grid, H)`: built once, shared across Monte Carlo
/// paths by the gradient machinery.
#[derive(Debug, Clone)]
pub struct InversionAtoms {
    rows: Vec<AtomRow>,
    grid: TimeGrid,
    h: Hurst,
}

impl InversionAtoms {
    pub fn build(grid: TimeGrid, h: Hurst) -> Self {
        let n = grid.steps();
        let rows = if h.is_brownian() {
            Vec::new()
        } else {
            (1..=n).into_par_iter().map(|j| AtomRow::compute(&grid, h, j)).collect()
        };
        InversionAtoms { rows, grid, h }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn hurst(&self) -> Hurst {
        self.h
    }

    /// Atom row for outer node `j >= 1`.
    pub fn row(&self, j: usize) -> &AtomRow {
        &self.rows[j - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn kernel_vanishes_at_diagonal_and_beyond() {
        let h = Hurst::new(0.75).unwrap();
        assert_eq!(kernel_value(0.5, 0.7, h).unwrap(), 0.0);
        assert_eq!(kernel_value(0.5, 0.5, h).unwrap(), 0.0);
        // K ~ (t-s)^{H-1/2} near the diagonal: monotone vanishing
        let near = kernel_value(0.5, 0.5 - 1e-6, h).unwrap();
        let nearer = kernel_value(0.5, 0.5 - 1e-12, h).unwrap();
        assert!(near < 0.05, "K close to the diagonal: {near}");
        assert!(nearer < 2e-3 && nearer < near, "K(t,s) -> 0 as s -> t: {nearer}");
        assert!(kernel_value(0.5, 0.0, h).is_err());
    }

    #[test]
    fn brownian_kernel_is_one() {
        let h = Hurst::diagnostic(0.5).unwrap();
        assert_eq!(kernel_value(1.0, 0.3, h).unwrap(), 1.0);
        let k = VolterraKernels::new(grid(16), h).unwrap();
        assert_eq!(k.kernel_at_midpoint(5, 2), 1.0);
    }

    // Covariance identity at (t, s) = (1, 0.5), H = 0.75, against the closed-form
    // R_H oracle; run at n = 512 here, n = 2048 in the acceptance suite.
    #[test]
    fn covariance_identity_probe() {
        let h = Hurst::new(0.75).unwrap();
        let g = grid(512);
        let k = VolterraKernels::new(g, h).unwrap();
        let got = k.covariance_quadrature(256, 512);
        let want = covariance_rh(0.5, 1.0, h);
        assert!(
            (got - want).abs() <= 1e-2 * covariance_rh(1.0, 1.0, h),
            "quadrature {got} vs closed form {want}"
        );
    }

    #[test]
    fn construction_rejects_wrong_constant() {
        // With the kernel forced off-calibration the probe must fail loudly; we
        // emulate that by checking the probe error the honest build reports is
        // far below the rejection threshold, then verifying the threshold logic.
        let h = Hurst::new(0.9).unwrap();
        let k = VolterraKernels::new(grid(256), h).unwrap();
        assert!(k.probe_error() < 1e-2);
        assert!(VolterraKernels::with_tolerance(grid(256), h, k.probe_error() * 0.1).is_err());
    }

    #[test]
    fn apply_kh_reduces_to_running_integral_at_half() {
        let h = Hurst::diagnostic(0.5).unwrap();
        let g = grid(64);
        let k = VolterraKernels::new(g, h).unwrap();
        let ones = vec![1.0; 65];
        let out = k.apply_kh(&ones).unwrap();
        for j in 0..=64 {
            assert!((out[j] - g.node(j)).abs() < 1e-14);
        }
        let zeros = vec![0.0; 65];
        assert!(k.apply_kh(&zeros).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_kh_zero_at_origin_and_grid_mismatch() {
        let h = Hurst::new(0.7).unwrap();
        let k = VolterraKernels::new(grid(64), h).unwrap();
        let f: Vec<f64> = (0..=64).map(|i| (i as f64 / 64.0).sin()).collect();
        let out = k.apply_kh(&f).unwrap();
        assert_eq!(out[0], 0.0);
        assert!(k.apply_kh(&f[..60]).is_err());
    }

    #[test]
    fn kh_star_brownian_restriction_and_zero() {
        let h = Hurst::diagnostic(0.5).unwrap();
        let g = grid(32);
        let k = VolterraKernels::new(g, h).unwrap();
        let phi: Vec<f64> = g.nodes().iter().map(|t| t * t).collect();
        let out = k.apply_kh_star(&phi).unwrap();
        for i in 0..32 {
            assert!((out[i] - 0.5 * (phi[i] + phi[i + 1])).abs() < 1e-15);
        }
        let zeros = vec![0.0; 33];
        assert!(k.apply_kh_star(&zeros).unwrap().iter().all(|&v| v == 0.0));
    }

    // <K_H* 1_[0,t], K_H* 1_[0,s]> should reproduce R_H(t, s).
    #[test]
    fn kh_star_isometry_on_indicators() {
        let h = Hurst::new(0.7).unwrap();
        let g = grid(512);
        let k = VolterraKernels::new(g, h).unwrap();
        let a = k.kh_star_indicator(410); // t = 0.8
        let b = k.kh_star_indicator(154); // s ~ 0.3
        let got = k.weighted_l2_inner(&a, &b);
        let want = covariance_rh(g.node(410), g.node(154), h);
        let scale = covariance_rh(g.node(410), g.node(410), h);
        assert!((got - want).abs() <= 1e-2 * scale, "isometry {got} vs {want}");

        // the generic piecewise-linear route on a smooth input agrees with the
        // step route in the Brownian limit
        let bm = Hurst::diagnostic(0.5).unwrap();
        let kb = VolterraKernels::new(g, bm).unwrap();
        let ind = kb.kh_star_indicator(256);
        let inner = kb.weighted_l2_inner(&ind, &ind);
        assert!((inner - 0.5).abs() < 1e-12, "Brownian indicator variance {inner}");
    }

    #[test]
    fn kh_inverse_identity_at_half() {
        let h = Hurst::diagnostic(0.5).unwrap();
        let k = VolterraKernels::new(grid(32), h).unwrap();
        let hp: Vec<f64> = (0..=32).map(|i| (i as f64).cos()).collect();
        assert_eq!(k.kh_inverse(&hp).unwrap(), hp);
        assert_eq!(k.kh_derivative(&hp).unwrap(), hp);
    }

    // Round trip K_H^{-1} ((K_H f)') = f on the production pathway; full-scale
    // tolerances live in the acceptance suite.
    #[test]
    fn inverse_round_trip_midscale() {
        for hval in [0.6, 0.75, 0.9] {
            let h = Hurst::new(hval).unwrap();
            let g = grid(512);
            let k = VolterraKernels::new(g, h).unwrap();
            let f: Vec<f64> = g.nodes().iter().map(|t| t * t).collect();
            let deriv = k.kh_derivative(&f).unwrap();
            let back = k.kh_inverse(&deriv).unwrap();
            let from = 26; // 0.05 T
            let num: f64 =
                (from..=512).map(|i| (back[i] - f[i]) * (back[i] - f[i])).sum::<f64>();
            let den: f64 = (from..=512).map(|i| f[i] * f[i]).sum();
            let rel = (num / den).sqrt();
            assert!(rel < 2e-2, "H={hval}: relative L2 error {rel}");
        }
    }

    // Constant h' exercises the J1 + J2 split alone; the independent oracle is
    // the power-rule derivative D^a x^mu = Gamma(mu+1)/Gamma(mu+1-a) x^{mu-a}
    // with mu = 1/2-H, a = H-1/2, which gives
    // K_H^{-1}(c)(t) = c / (c_H Gamma(a)) * Gamma(3/2-H) / Gamma(2-2H) * t^{1/2-H}.
    #[test]
    fn kh_inverse_constant_matches_power_law() {
        let h = Hurst::new(0.75).unwrap();
        let g = grid(256);
        let k = VolterraKernels::new(g, h).unwrap();
        let c = 1.7;
        let hp = vec![c; 257];
        let out = k.kh_inverse(&hp).unwrap();
        let hv = h.value();
        let a = h.alpha();
        let scale = c / (k.constant() * gamma(a)) * gamma(1.5 - hv) / gamma(2.0 - 2.0 * hv);
        for j in (26..=256).step_by(23) {
            let t: f64 = g.node(j);
            let exact = scale * t.powf(0.5 - hv);
            assert!(
                (out[j] - exact).abs() <= 1e-3 * exact.abs(),
                "node {j}: {} vs {exact}",
                out[j]
            );
        }
    }
}
