//! Command-line surface: subcommands, flags, and the file-backed configuration
//! they merge with. Flags override file values; defaults fill the rest.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "fracsde",
    version,
    about = "Degenerate SDEs driven by fractional Brownian motion: operator checks, \
             fBm sampling, bridge certificates, simulation, gradient estimators, and \
             Harnack probes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the fractional-operator identity checks and emit a JSON report
    CheckOps(CheckOpsArgs),
    /// Sample fractional Brownian paths (CSV) with a covariance-check summary
    SampleFbm(SampleFbmArgs),
    /// Build the steering bridge for a model and direction; emit CSV + certificate
    Bridge(BridgeArgs),
    /// Integrate the degenerate system; emit trajectories or summary statistics
    Simulate(SimulateArgs),
    /// Estimate the semigroup gradient by the weight, pathwise, or FD estimator
    Gradient(GradientArgs),
    /// Probe the Harnack / log-Harnack inequalities along a shift sweep
    Harnack(HarnackArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Bismut,
    Pathwise,
    Fd,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Endpoint,
    Moment,
}

/// Flags shared by every subcommand. Optional here so that a `--config` file can
/// supply them; resolution order is flag, then file, then documented default.
#[derive(Args, Clone, Debug)]
pub struct CommonArgs {
    /// Configuration file (TOML) supplying any of the flags; flags win
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hurst parameter in (1/2, 1); exactly 0.5 selects the Brownian diagnostic mode
    #[arg(long)]
    pub hurst: Option<f64>,
    /// Horizon T > 0
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    /// Number of uniform grid steps (default 256)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of Monte Carlo paths (default 50000)
    #[arg(long)]
    pub paths: Option<u64>,
    /// Master seed for the per-path counter streams (default 1)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file for the primary artifact; stdout otherwise
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output format of the primary artifact
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Deterministic fixed-order reductions (always active; flag accepted for
    /// interface stability)
    #[arg(long)]
    pub fixed_order: bool,
}

#[derive(Args, Clone, Debug)]
pub struct CheckOpsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Clone, Debug)]
pub struct SampleFbmArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of noise coordinates per path
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Clone, Debug)]
pub struct BridgeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model description file (TOML)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Direction v = (v1, v2), comma-separated, d1 + d2 entries
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub v: Option<Vec<f64>>,
    /// alpha_1 regime: endpoint constraints only, or the extra moment condition
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Args, Clone, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Initial point z = (x, y), comma-separated, d1 + d2 entries
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub z: Option<Vec<f64>>,
}

#[derive(Args, Clone, Debug)]
pub struct GradientArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub z: Option<Vec<f64>>,
    /// Differentiation direction v, comma-separated, d1 + d2 entries
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub v: Option<Vec<f64>>,
    /// Test function from the catalog (coord_x, coord_y, tanh_x, positive_tanh_x,
    /// positive_gauss)
    #[arg(long)]
    pub f: Option<String>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Central-difference shift for the FD estimator
    #[arg(long)]
    pub fd_eps: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Args, Clone, Debug)]
pub struct HarnackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub z: Option<Vec<f64>>,
    /// Shift direction z~, comma-separated, d1 + d2 entries
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub ztilde: Option<Vec<f64>>,
    #[arg(long)]
    pub f: Option<String>,
    /// Harnack exponent p > 1
    #[arg(long)]
    pub p: Option<f64>,
    /// Shift magnitudes probed along z~/|z~| (a zero-shift Jensen point is always
    /// included)
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    /// Enable the gradient-entropy probe at these theta values
    #[arg(long, value_delimiter = ',')]
    pub thetas: Option<Vec<f64>>,
    /// Generic constant for the analytic exponent; enables domination reporting
    #[arg(long)]
    pub constant: Option<f64>,
}

/// File-backed configuration mirroring the flags; unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub hurst: Option<f64>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub steps: Option<usize>,
    pub paths: Option<u64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub model: Option<PathBuf>,
    pub dim: Option<usize>,
    pub z: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
    pub ztilde: Option<Vec<f64>>,
    pub f: Option<String>,
    pub method: Option<MethodArg>,
    pub fd_eps: Option<f64>,
    pub mode: Option<ModeArg>,
    pub p: Option<f64>,
    pub sweep: Option<Vec<f64>>,
    pub thetas: Option<Vec<f64>>,
    pub constant: Option<f64>,
}
