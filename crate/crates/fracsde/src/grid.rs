//! Uniform time grids, sampled vector paths, Hölder-seminorm statistics, and the
//! deterministic random-number contract shared by every module.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Pair counts above this grid size switch the Hölder seminorm to a banded scan.
pub const HOLDER_FULL_SCAN_MAX: usize = 4096;
/// Band half-width `|j - i| <= 512` used beyond [`HOLDER_FULL_SCAN_MAX`].
pub const HOLDER_BAND: usize = 512;

/// Uniform discretization of `[0, T]` with nodes `t_k = k T / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::config(format!("horizon T must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::config(format!("step count n must be >= 2, got {steps}")));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_k`; exact at both endpoints.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * (k as f64 / self.steps as f64)
    }

    /// Midpoint of cell `[t_k, t_{k+1}]`.
    pub fn midpoint(&self, k: usize) -> f64 {
        debug_assert!(k < self.steps);
        self.horizon * ((k as f64 + 0.5) / self.steps as f64)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// A grid over the same horizon with twice the steps.
    pub fn refined(&self) -> TimeGrid {
        TimeGrid { horizon: self.horizon, steps: self.steps * 2 }
    }
}

/// Vector-valued samples on a [`TimeGrid`]: `dim` coordinates at each of the
/// `n + 1` nodes, stored row-major by node.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Path {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Path { grid, dim, values: vec![0.0; (grid.steps + 1) * dim] }
    }

    pub fn from_values(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != (grid.steps + 1) * dim {
            return Err(Error::config(format!(
                "path needs {} values ({} nodes x dim {}), got {}",
                (grid.steps + 1) * dim,
                grid.steps + 1,
                dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("path contains non-finite entries"));
        }
        Ok(Path { grid, dim, values })
    }

    /// Scalar path from a closure sampled at the nodes.
    pub fn sample_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..=grid.steps).map(|k| f(grid.node(k))).collect();
        Path { grid, dim: 1, values }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Coordinates at node `k`.
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn at_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Single coordinate as a freshly allocated scalar series.
    pub fn coordinate(&self, c: usize) -> Vec<f64> {
        (0..=self.grid.steps).map(|k| self.values[k * self.dim + c]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Master seed plus the derivation rule for independent per-path streams.
///
/// Path `i` draws from a ChaCha8 generator seeded with the master seed on
/// counter stream `i`, so identical `(master_seed, path_index)` reproduces an
/// identical path bit for bit, in parallel or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64) -> Self {
        SeedSpec { master_seed }
    }

    pub fn rng_for_path(&self, path_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(path_index);
        rng
    }
}

/// Result of a Hölder-seminorm scan; `banded` flags the truncated pair set used
/// above [`HOLDER_FULL_SCAN_MAX`] nodes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HolderNorm {
    pub value: f64,
    pub banded: bool,
}

/// Grid restriction of `sup_{s != t} |f(t) - f(s)| / |t - s|^lambda`.
///
/// All `O(n^2)` node pairs are scanned up to 4096 steps; larger grids restrict
/// to `|j - i| <= 512` and flag the result.
pub fn holder_norm_report(path: &Path, lambda: f64) -> Result<HolderNorm> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::config(format!("Hölder exponent must lie in (0, 1], got {lambda}")));
    }
    let n = path.grid.steps;
    let banded = n > HOLDER_FULL_SCAN_MAX;
    let band = if banded { HOLDER_BAND } else { n };
    let mut best = 0.0f64;
    for i in 0..n {
        let fi = path.at(i);
        let hi = (i + band).min(n);
        for j in (i + 1)..=hi {
            let fj = path.at(j);
            let mut d2 = 0.0;
            for c in 0..path.dim {
                let d = fj[c] - fi[c];
                d2 += d * d;
            }
            let dt = path.grid.node(j) - path.grid.node(i);
            let r = d2.sqrt() / dt.powf(lambda);
            if r > best {
                best = r;
            }
        }
    }
    Ok(HolderNorm { value: best, banded })
}

/// Convenience wrapper returning just the seminorm value.
pub fn holder_norm(path: &Path, lambda: f64) -> Result<f64> {
    holder_norm_report(path, lambda).map(|h| h.value)
}
