//! Command implementations: configuration resolution, experiment dispatch,
//! result persistence, and the reproducibility manifest.
//!
//! Every run emits a manifest to stdout — success or failure — carrying the
//! fully resolved configuration, per-phase wall times, and the invariant checks
//! encountered. Primary artifacts written with `--out` contain no timings, so a
//! rerun with the same configuration is byte-identical.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use fracsde::bridge::{kalman_rank, BridgeMode, KalmanRank};
use fracsde::error::Error;
use fracsde::fbm::{covariance_rh, NoisePair};
use fracsde::frac_ops::{rl_integral_left, Hurst};
use fracsde::gradient::{
    estimate_gradient_all, estimate_gradient_bismut, estimate_gradient_fd,
    estimate_gradient_pathwise, prepare_bridge, GradientEstimate, GradientRun, WeightContext,
};
use fracsde::grid::{SeedSpec, TimeGrid};
use fracsde::harnack::{
    check_harnack, check_log_harnack, gradient_entropy_check, HarnackConstants,
};
use fracsde::kernel::{InversionAtoms, VolterraKernels};
use fracsde::model::{DegenerateModel, ModelConfig, TestFunction};
use fracsde::sde::euler_solve;
use fracsde::Result;

use crate::args::{
    BridgeArgs, CheckOpsArgs, Cli, Command, CommonArgs, FileConfig, Format, GradientArgs,
    HarnackArgs, MethodArg, ModeArg, SampleFbmArgs, SimulateArgs,
};

const DEFAULT_STEPS: usize = 256;
const DEFAULT_PATHS: u64 = 50_000;
const DEFAULT_SEED: u64 = 1;
const DEFAULT_FD_EPS: f64 = 1e-3;

#[derive(Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub config: Value,
    pub phases_ms: Vec<PhaseTime>,
    pub checks: Vec<CheckOutcome>,
    pub status: String,
}

#[derive(Serialize)]
pub struct PhaseTime {
    pub phase: String,
    pub ms: u128,
}

pub struct RunState {
    manifest: RunManifest,
    clock: Instant,
}

impl RunState {
    fn new(command: &str) -> Self {
        RunState {
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                config: Value::Null,
                phases_ms: Vec::new(),
                checks: Vec::new(),
                status: "ok".to_string(),
            },
            clock: Instant::now(),
        }
    }

    fn phase(&mut self, name: &str) {
        self.manifest.phases_ms.push(PhaseTime {
            phase: name.to_string(),
            ms: self.clock.elapsed().as_millis(),
        });
        self.clock = Instant::now();
    }

    fn check(&mut self, name: &str, value: f64, threshold: f64, pass: bool) {
        self.manifest.checks.push(CheckOutcome {
            name: name.to_string(),
            value,
            threshold,
            pass,
        });
    }

    fn all_checks_passed(&self) -> bool {
        self.manifest.checks.iter().all(|c| c.pass)
    }
}

/// Runs the command, printing the manifest to stdout in every case. Returns the
/// process exit code.
pub fn dispatch(cli: Cli) -> i32 {
    let name = match &cli.command {
        Command::CheckOps(_) => "check-ops",
        Command::SampleFbm(_) => "sample-fbm",
        Command::Bridge(_) => "bridge",
        Command::Simulate(_) => "simulate",
        Command::Gradient(_) => "gradient",
        Command::Harnack(_) => "harnack",
    };
    let mut state = RunState::new(name);
    let outcome = match cli.command {
        Command::CheckOps(a) => run_check_ops(a, &mut state),
        Command::SampleFbm(a) => run_sample_fbm(a, &mut state),
        Command::Bridge(a) => run_bridge(a, &mut state),
        Command::Simulate(a) => run_simulate(a, &mut state),
        Command::Gradient(a) => run_gradient(a, &mut state),
        Command::Harnack(a) => run_harnack(a, &mut state),
    };
    let code = match outcome {
        Ok(()) => {
            if state.all_checks_passed() {
                0
            } else {
                state.manifest.status = "check-failed".to_string();
                3
            }
        }
        Err(e) => {
            state.manifest.status = format!("error: {e}");
            e.exit_code()
        }
    };
    match serde_json::to_string_pretty(&state.manifest) {
        Ok(text) => println!("{text}"),
        Err(e) => eprintln!("manifest serialization failed: {e}"),
    }
    code
}

// --- configuration resolution -------------------------------------------------

struct Resolved {
    file: FileConfig,
}

impl Resolved {
    fn load(common: &CommonArgs) -> Result<Self> {
        let file = match &common.config {
            None => FileConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| Error::config(format!("config {}: {e}", p.display())))?
            }
        };
        Ok(Resolved { file })
    }

    fn hurst(&self, common: &CommonArgs) -> Result<Hurst> {
        let raw = common
            .hurst
            .or(self.file.hurst)
            .ok_or_else(|| Error::config("missing --hurst (H in (1/2,1), or 0.5 diagnostic)"))?;
        Hurst::diagnostic(raw)
    }

    fn grid(&self, common: &CommonArgs) -> Result<TimeGrid> {
        let t = common.horizon.or(self.file.horizon).unwrap_or(1.0);
        let n = common.steps.or(self.file.steps).unwrap_or(DEFAULT_STEPS);
        TimeGrid::new(t, n)
    }

    fn paths(&self, common: &CommonArgs) -> u64 {
        common.paths.or(self.file.paths).unwrap_or(DEFAULT_PATHS)
    }

    fn seed(&self, common: &CommonArgs) -> SeedSpec {
        SeedSpec::new(common.seed.or(self.file.seed).unwrap_or(DEFAULT_SEED))
    }

    fn out(&self, common: &CommonArgs) -> Option<PathBuf> {
        common.out.clone().or_else(|| self.file.out.clone())
    }

    fn format(&self, common: &CommonArgs) -> Format {
        common.format.or(self.file.format).unwrap_or(Format::Json)
    }

    fn model(&self, flag: &Option<PathBuf>) -> Result<(PathBuf, DegenerateModel)> {
        let path = flag
            .clone()
            .or_else(|| self.file.model.clone())
            .ok_or_else(|| Error::config("missing --model <file>"))?;
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::config(format!("cannot read model {}: {e}", path.display())))?;
        let cfg: ModelConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("model {}: {e}", path.display())))?;
        Ok((path, DegenerateModel::from_config(&cfg)?))
    }

    fn vector(
        &self,
        flag: &Option<Vec<f64>>,
        file_value: Option<Vec<f64>>,
        what: &str,
        dim: usize,
    ) -> Result<Vec<f64>> {
        let v = flag
            .clone()
            .or(file_value)
            .ok_or_else(|| Error::config(format!("missing --{what}")))?;
        if v.len() != dim {
            return Err(Error::config(format!(
                "--{what} needs {dim} comma-separated entries, got {}",
                v.len()
            )));
        }
        Ok(v)
    }

    fn test_function(&self, flag: &Option<String>) -> Result<TestFunction> {
        let name = flag
            .clone()
            .or_else(|| self.file.f.clone())
            .ok_or_else(|| Error::config("missing --f <catalog name>"))?;
        TestFunction::parse(&name)
    }
}

fn mode_to_bridge(m: ModeArg) -> BridgeMode {
    match m {
        ModeArg::Endpoint => BridgeMode::Endpoint,
        ModeArg::Moment => BridgeMode::Moment,
    }
}

fn write_artifact(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, content)
            .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display()))),
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

fn rel_l2(a: &[f64], b: &[f64], from: usize) -> f64 {
    let num: f64 = a[from..].iter().zip(&b[from..]).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b[from..].iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

// --- check-ops -----------------------------------------------------------------

fn round_trip_error(kernels: &VolterraKernels) -> Result<f64> {
    let grid = kernels.grid();
    let f: Vec<f64> = grid.nodes().iter().map(|t| t * t).collect();
    let deriv = kernels.kh_derivative(&f)?;
    let back = kernels.kh_inverse(&deriv)?;
    Ok(rel_l2(&back, &f, grid.steps() / 20))
}

fn run_check_ops(args: CheckOpsArgs, state: &mut RunState) -> Result<()> {
    let r = Resolved::load(&args.common)?;
    let h = r.hurst(&args.common)?;
    let grid = r.grid(&args.common)?;
    state.manifest.config = json!({
        "hurst": h.value(), "T": grid.horizon(), "steps": grid.steps(),
        "out": r.out(&args.common),
    });
    let n = grid.steps();
    let kernels = VolterraKernels::new(grid, h)?;
    state.phase("kernel-tables");

    state.check("covariance_probe", kernels.probe_error(), 1e-2, true);

    // covariance identity on the 5x5 lattice
    let lattice = [n / 5, 2 * n / 5, 3 * n / 5, 4 * n / 5, n];
    let mut cov_err = 0.0f64;
    for &a in &lattice {
        for &b in &lattice {
            if a == 0 || b == 0 || a > b {
                continue;
            }
            let got = kernels.covariance_quadrature(a, b);
            let want = covariance_rh(grid.node(a), grid.node(b), h);
            let scale = covariance_rh(grid.node(b), grid.node(b), h);
            cov_err = cov_err.max((got - want).abs() / scale);
        }
    }
    state.check("covariance_identity_lattice", cov_err, 1e-2, cov_err <= 1e-2);
    state.phase("covariance-lattice");

    // isometry on indicators through the adjoint operator
    let mut iso_err = 0.0f64;
    let transformed: Vec<(usize, Vec<f64>)> = lattice
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| (k, kernels.kh_star_indicator(k)))
        .collect();
    for (ka, fa) in &transformed {
        for (kb, fb) in &transformed {
            if ka > kb {
                continue;
            }
            let got = kernels.weighted_l2_inner(fa, fb);
            let want = covariance_rh(grid.node(*ka), grid.node(*kb), h);
            let scale = covariance_rh(grid.node(*kb), grid.node(*kb), h);
            iso_err = iso_err.max((got - want).abs() / scale);
        }
    }
    state.check("isometry_indicators_lattice", iso_err, 1e-2, iso_err <= 1e-2);
    state.phase("isometry-lattice");

    // inverse pair round trip, with a refinement ratio against the half grid
    let rt_fine = round_trip_error(&kernels)?;
    state.check("inverse_round_trip", rt_fine, 1e-2, rt_fine <= 1e-2);
    let coarse = VolterraKernels::new(TimeGrid::new(grid.horizon(), n / 2)?, h)?;
    let rt_coarse = round_trip_error(&coarse)?;
    let ratio = rt_fine / rt_coarse.max(1e-300);
    state.check("round_trip_refinement_ratio", ratio, 0.75, ratio <= 0.75);
    state.phase("round-trip");

    // fractional-integral semigroup on a smooth sample
    let f: Vec<f64> = grid.nodes().iter().map(|t| (2.0 * t).sin() + 1.0).collect();
    let lhs = rl_integral_left(&grid, &rl_integral_left(&grid, &f, 0.2)?, 0.3)?;
    let rhs = rl_integral_left(&grid, &f, 0.5)?;
    let semi = rel_l2(&lhs, &rhs, n / 20);
    state.check("rl_semigroup", semi, 1e-2, semi <= 1e-2);

    if h.is_brownian() {
        // classical reductions must be exact, not approximate
        let probe: Vec<f64> = grid.nodes().iter().map(|t| (3.0 * t).cos()).collect();
        let id_err = kernels
            .kh_inverse(&probe)?
            .iter()
            .zip(&probe)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        state.check("brownian_reduction_exact", id_err, 0.0, id_err == 0.0);
    }
    state.phase("semigroup");

    let report = json!({
        "hurst": h.value(),
        "T": grid.horizon(),
        "steps": n,
        "kernel_constant": kernels.constant(),
        "checks": &state.manifest.checks,
    });
    write_artifact(&r.out(&args.common), &serde_json::to_string_pretty(&report).unwrap())
}

// --- sample-fbm ----------------------------------------------------------------

fn run_sample_fbm(args: SampleFbmArgs, state: &mut RunState) -> Result<()> {
    let r = Resolved::load(&args.common)?;
    let h = r.hurst(&args.common)?;
    let grid = r.grid(&args.common)?;
    let n_paths = r.paths(&args.common);
    let seed = r.seed(&args.common);
    let dim = args.dim.or(r.file.dim).unwrap_or(1);
    if dim == 0 {
        return Err(Error::config("--dim must be >= 1"));
    }
    state.manifest.config = json!({
        "hurst": h.value(), "T": grid.horizon(), "steps": grid.steps(),
        "paths": n_paths, "seed": seed.master_seed, "dim": dim,
        "out": r.out(&args.common),
    });
    let kernels = VolterraKernels::new(grid, h)?;
    state.check("covariance_probe", kernels.probe_error(), 1e-2, true);
    state.phase("kernel-tables");

    let n = grid.steps();
    let paths: Vec<NoisePair> = (0..n_paths)
        .map(|i| NoisePair::sample(&kernels, dim, seed, i))
        .collect::<Result<_>>()?;
    state.phase("sampling");

    // covariance summary on a 4x4 lattice, first coordinate
    let lattice = [n / 4, n / 2, 3 * n / 4, n];
    let mut summary = Vec::new();
    let mut worst_z = 0.0f64;
    for &a in &lattice {
        for &b in &lattice {
            if a > b {
                continue;
            }
            let prods: Vec<f64> =
                paths.iter().map(|p| p.bh.at(a)[0] * p.bh.at(b)[0]).collect();
            let mean = prods.iter().sum::<f64>() / prods.len() as f64;
            let var = prods.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (prods.len().max(2) - 1) as f64;
            let se = (var / prods.len() as f64).sqrt();
            let want = covariance_rh(grid.node(a), grid.node(b), h);
            let z = (mean - want).abs() / se.max(1e-300);
            worst_z = worst_z.max(z);
            summary.push(json!({
                "t": grid.node(a), "s": grid.node(b),
                "empirical": mean, "stderr": se, "exact": want, "z": z,
            }));
        }
    }
    state.check("covariance_mc_max_z", worst_z, 4.0, worst_z <= 4.0);
    state.phase("covariance-summary");

    let mut csv = String::from("path_index,node_index,t,coordinate,value\n");
    for (idx, p) in paths.iter().enumerate() {
        for k in 0..=n {
            for c in 0..dim {
                csv.push_str(&format!(
                    "{idx},{k},{:.17e},{c},{:.17e}\n",
                    grid.node(k),
                    p.bh.at(k)[c]
                ));
            }
        }
    }
    write_artifact(&r.out(&args.common), &csv)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "covariance_check": summary })).unwrap()
    );
    Ok(())
}

// --- bridge ----------------------------------------------------------------------

fn run_bridge(args: BridgeArgs, state: &mut RunState) -> Result<()> {
    let r = Resolved::load(&args.common)?;
    let grid = r.grid(&args.common)?;
    let (model_path, model) = r.model(&args.model)?;
    let v = r.vector(&args.v, r.file.v.clone(), "v", model.dim())?;
    let mode = args.mode.or(r.file.mode).unwrap_or(ModeArg::Moment);
    state.manifest.config = json!({
        "model": model_path, "v": v, "T": grid.horizon(), "steps": grid.steps(),
        "mode": mode, "out": r.out(&args.common),
    });

    let bridge = prepare_bridge(&model, &v, &grid, mode_to_bridge(mode))?;
    state.phase("bridge");
    let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 10.0 * grid.dt() * vnorm.max(1e-300);
    state.check("terminal_residual", bridge.terminal_residual, tol, bridge.terminal_residual <= tol);
    state.check(
        "gramian_min_eigenvalue",
        bridge.certificate.min_eig,
        0.0,
        bridge.certificate.min_eig > 0.0,
    );

    let mut csv = String::from("t,alpha1,alpha2");
    for c in 0..model.d2 {
        csv.push_str(&format!(",g_tilde_{c}"));
    }
    for c in 0..model.d2 {
        csv.push_str(&format!(",g_tilde_prime_{c}"));
    }
    for c in 0..model.d1 {
        csv.push_str(&format!(",g_{c}"));
    }
    csv.push('\n');
    for k in 0..=grid.steps() {
        let t = grid.node(k);
        csv.push_str(&format!("{t:.17e},{:.17e},{:.17e}", bridge.alpha.alpha1(t), bridge.alpha.alpha2(t)));
        for val in bridge.g_tilde_at(k) {
            csv.push_str(&format!(",{val:.17e}"));
        }
        for val in bridge.g_tilde_prime_at(k) {
            csv.push_str(&format!(",{val:.17e}"));
        }
        for val in bridge.g_at(k) {
            csv.push_str(&format!(",{val:.17e}"));
        }
        csv.push('\n');
    }
    write_artifact(&r.out(&args.common), &csv)?;

    let certificate = json!({
        "k0": bridge.k0,
        "terminal_residual": bridge.terminal_residual,
        "gramian_min_eigenvalue": bridge.certificate.min_eig,
        "gramian_max_eigenvalue": bridge.certificate.max_eig,
        "alpha1_coefficients": bridge.alpha.a1_coeffs,
        "coefficient_system": bridge.alpha.system,
        "mode": mode,
    });
    println!("{}", serde_json::to_string_pretty(&certificate).unwrap());
    Ok(())
}

// --- simulate ----------------------------------------------------------------------

fn run_simulate(args: SimulateArgs, state: &mut RunState) -> Result<()> {
    let r = Resolved::load(&args.common)?;
    let h = r.hurst(&args.common)?;
    let grid = r.grid(&args.common)?;
    let (model_path, model) = r.model(&args.model)?;
    let z = r.vector(&args.z, r.file.z.clone(), "z", model.dim())?;
    let n_paths = r.paths(&args.common);
    let seed = r.seed(&args.common);
    let format = r.format(&args.common);
    model.validate_for(h, &grid)?;
    state.manifest.config = json!({
        "model": model_path, "z": z, "hurst": h.value(), "T": grid.horizon(),
        "steps": grid.steps(), "paths": n_paths, "seed": seed.master_seed,
        "format": format, "out": r.out(&args.common),
    });
    let kernels = VolterraKernels::new(grid, h)?;
    state.check("covariance_probe", kernels.probe_error(), 1e-2, true);
    state.phase("kernel-tables");

    let (x0, y0) = z.split_at(model.d1);
    let dim = model.dim();
    let n = grid.steps();
    match format {
        Format::Csv => {
            let mut csv = String::from("path_index,node_index,t,coordinate,value\n");
            for i in 0..n_paths {
                let noise = NoisePair::sample(&kernels, model.d, seed, i)?;
                let traj = euler_solve(&model, x0, y0, &noise, &grid)?;
                for k in 0..=n {
                    for c in 0..dim {
                        csv.push_str(&format!(
                            "{i},{k},{:.17e},{c},{:.17e}\n",
                            grid.node(k),
                            traj.z.at(k)[c]
                        ));
                    }
                }
            }
            state.phase("simulate");
            write_artifact(&r.out(&args.common), &csv)
        }
        Format::Json => {
            let mut terminals: Vec<Vec<f64>> = vec![Vec::new(); dim];
            for i in 0..n_paths {
                let noise = NoisePair::sample(&kernels, model.d, seed, i)?;
                let traj = euler_solve(&model, x0, y0, &noise, &grid)?;
                for c in 0..dim {
                    terminals[c].push(traj.terminal()[c]);
                }
            }
            state.phase("simulate");
            let stats: Vec<Value> = terminals
                .iter()
                .enumerate()
                .map(|(c, vals)| {
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / (vals.len().max(2) - 1) as f64;
                    json!({
                        "coordinate": c,
                        "terminal_mean": mean,
                        "terminal_std": var.sqrt(),

         "stderr": (var / vals.len() as f64).sqrt(),
                    })
                })
                .collect();
            let report = json!({
                "paths": n_paths, "steps": n, "T": grid.horizon(), "hurst": h.value(),
                "seed": seed.master_seed, "terminal": stats,
            });
            write_artifact(&r.out(&args.common), &serde_json::to_string_pretty(&report).unwrap())
        }
    }
}

// --- gradient ----------------------------------------------------------------------

#[derive(Serialize)]
struct GradientReportEntry {
    method: String,
    mean: f64,
    stderr: f64,
    #[serde(rename = "N")]
    n_paths: u64,
    n: usize,
    #[serde(rename = "H")]
    h: f64,
    #[serde(rename = "T")]
    t: f64,
    seed: u64,
    #[serde(rename = "J_term_variances", skip_serializing_if = "Option::is_none")]
    j_term_variances: Option<[f64; 4]>,
}

fn entry(
    e: &GradientEstimate,
    grid: &TimeGrid,
    h: Hurst,
    seed: SeedSpec,
) -> GradientReportEntry {
    GradientReportEntry {
        method: format!("{:?}", e.method).to_lowercase(),
        mean: e.estimate.mean,
        stderr: e.estimate.stderr,
        n_paths: e.estimate.n_samples,
        n: grid.steps(),
        h: h.value(),
        t: grid.horizon(),
        seed: seed.master_seed,
        j_term_variances: e.term_variances,
    }
}

fn run_gradient(args: GradientArgs, state: &mut RunState) -> Result<()> {
    let r = Resolved::load(&args.common)?;
    let h = r.hurst(&args.common)?;
    let grid = r.grid(&args.common)?;
    let (model_path, model) = r.model(&args.model)?;
    let z = r.vector(&args.z, r.file.z.clone(), "z", model.dim())?;
    let v = r.vector(&args.v, r.file.v.clone(), "v", model.dim())?;
    let f = r.test_function(&args.f)?;
    let method = args.method.or(r.file.method).unwrap_or(MethodArg::All);
    let fd_eps = args.fd_eps.or(r.file.fd_eps).unwrap_or(DEFAULT_FD_EPS);
    let mode = args.mode.or(r.file.mode).unwrap_or(ModeArg::Moment);
    let n_paths = r.paths(&args.common);
    let seed = r.seed(&args.common);
    model.validate_for(h, &grid)?;
    state.manifest.config = json!({
        "model": model_path, "z": z, "v": v, "f": f.name(), "hurst": h.value(),
        "T": grid.horizon(), "steps": grid.steps(), "paths": n_paths,
        "seed": seed.master_seed, "method": method, "fd_eps": fd_eps, "mode": mode,
        "out": r.out(&args.common),
    });

    let kernels = VolterraKernels::new(grid, h)?;
    state.check("covariance_probe", kernels.probe_error(), 1e-2, true);
    let atoms = InversionAtoms::build(grid, h);
    let ctx = WeightContext::new(&model, &kernels, &atoms)?;
    let bridge = prepare_bridge(&model, &v, &grid, mode_to_bridge(mode))?;
    let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    state.check(
        "bridge_terminal_residual",
        bridge.terminal_residual,
        10.0 * grid.dt() * vnorm.max(1e-300),
        true,
    );
    state.phase("tables-and-bridge");

    let run = GradientRun {
        model: &model,
        kernels: &kernels,
        atoms: &atoms,
        bridge: &bridge,
        ctx: &ctx,
        x0: z[..model.d1].to_vec(),
        y0: z[model.d1..].to_vec(),
        f,
    };

    let estimates = match method {
        MethodArg::Bismut => vec![estimate_gradient_bismut(&run, n_paths, seed)?],
        MethodArg::Pathwise => vec![estimate_gradient_pathwise(&run, n_paths, seed)?],
        MethodArg::Fd => vec![estimate_gradient_fd(&run, n_paths, seed, fd_eps)?],
        MethodArg::All => estimate_gradient_all(&run, n_paths, seed, fd_eps)?,
    };
    state.phase("monte-carlo");

    for e in &estimates {
        if let (Some(wm), Some(ws)) = (e.weight_mean, e.weight_stderr) {
            state.check("weight_zero_mean_z", wm.abs() / ws.max(1e-300), 4.0, wm.abs() <= 4.0 * ws);
        }
    }
    let mut pairwise = serde_json::Map::new();
    for i in 0..estimates.len() {
        for j in (i + 1)..estimates.len() {
            let a = &estimates[i].estimate;
            let b = &estimates[j].estimate;
            let zscore = (a.mean - b.mean).abs() / a.combined_stderr(b).max(1e-300);
            pairwise.insert(
                format!(
                    "{:?}_vs_{:?}",
                    estimates[i].method, estimates[j].method
                )
                .to_lowercase(),
                json!(zscore),
            );
        }
    }

    let entries: Vec<GradientReportEntry> =
        estimates.iter().map(|e| entry(e, &grid, h, seed)).collect();
    let report = if entries.len() == 1 {
        serde_json::to_value(&entries[0]).unwrap()
    } else {
        json!({ "estimates": entries, "pairwise_z": pairwise })
    };
    write_artifact(&r.out(&args.common), &serde_json::to_string_pretty(&report).unwrap())
}

// --- harnack ----------------------------------------------------------------------

fn run_harnack(args: HarnackArgs, state: &mut RunState) -> Result<()> {
    let r = Resolved::load(&args.common)?;
    let h = r.hurst(&args.common)?;
    let grid = r.grid(&args.common)?;
    let (model_path, model) = r.model(&args.model)?;
    let z = r.vector(&args.z, r.file.z.clone(), "z", model.dim())?;
    let ztilde = r.vector(&args.ztilde, r.file.ztilde.clone(), "ztilde", model.dim())?;
    let f = r.test_function(&args.f)?;
    let p = args.p.or(r.file.p).unwrap_or(2.0);
    let sweep = args.sweep.clone().or(r.file.sweep.clone()).unwrap_or(vec![0.4, 0.2, 0.1]);
    let thetas = args.thetas.clone().or(r.file.thetas.clone());
    let constant = args.constant.or(r.file.constant);
    let n_paths = r.paths(&args.common);
    let seed = r.seed(&args.common);
    model.validate_for(h, &grid)?;
    if constant.is_some() && model.reg.gamma >= 1.0 {
        return Err(Error::config(
            "analytic exponent evaluation requires gamma < 1 in the model regularity \
             block (the gamma/(1-gamma) exponent degenerates at gamma = 1)",
        ));
    }
    state.manifest.config = json!({
        "model": model_path, "z": z, "ztilde": ztilde, "f": f.name(), "p": p,
        "hurst": h.value(), "T": grid.horizon(), "steps": grid.steps(),
        "paths": n_paths, "seed": seed.master_seed, "sweep": sweep,
        "thetas": thetas, "constant": constant, "out": r.out(&args.common),
    });

    let constants = match constant {
        Some(c) => {
            let k0 = match kalman_rank(&model.a, &model.b) {
                KalmanRank::Feasible { k0 } => k0,
                KalmanRank::Infeasible => {
                    return Err(Error::degenerate("Kalman rank infeasible for this model"))
                }
            };
            Some(HarnackConstants::new(
                c,
                grid.horizon(),
                h,
                model.reg.delta,
                model.reg.gamma,
                model.reg.varrho,
                model.reg.lambda_for(h),
                k0,
            )?)
        }
        None => None,
    };
    let kernels = VolterraKernels::new(grid, h)?;
    state.check("covariance_probe", kernels.probe_error(), 1e-2, true);
    state.phase("kernel-tables");

    let znorm = ztilde.iter().map(|x| x * x).sum::<f64>().sqrt();
    if znorm == 0.0 {
        return Err(Error::config("--ztilde must be a nonzero direction"));
    }
    let unit: Vec<f64> = ztilde.iter().map(|x| x / znorm).collect();

    let mut points = Vec::new();
    for (idx, scale) in std::iter::once(0.0).chain(sweep.iter().copied()).enumerate() {
        let shift: Vec<f64> = unit.iter().map(|u| u * scale).collect();
        let point_seed = SeedSpec::new(seed.master_seed.wrapping_add(idx as u64 * 7919));
        let harnack = check_harnack(
            &model, &kernels, &z, &shift, f, p, n_paths, point_seed, constants.as_ref(),
        )?;
        let log_harnack =
            check_log_harnack(&model, &kernels, &z, &shift, f, n_paths, point_seed)?;
        if scale == 0.0 {
            if let (Some(phi), Some(se)) = (harnack.phi_min, harnack.phi_min_stderr) {
                state.check("jensen_floor_z", phi / se.max(1e-300), 3.0, phi <= 3.0 * se);
            }
        }
        let ratio = if scale > 0.0 {
            harnack.phi_min.map(|m| m / (scale * scale))
        } else {
            None
        };
        points.push(json!({
            "scale": scale,
            "shift": shift,
            "harnack": harnack,
            "log_harnack": log_harnack,
            "phi_min_over_scale_sq": ratio,
        }));
    }
    state.phase("sweep");

    let entropy = match thetas {
        Some(ref ths) => {
            let atoms = InversionAtoms::build(grid, h);
            let ctx = WeightContext::new(&model, &kernels, &atoms)?;
            let bridge = prepare_bridge(&model, &ztilde, &grid, BridgeMode::Moment)?;
            let run = GradientRun {
                model: &model,
                kernels: &kernels,
                atoms: &atoms,
                bridge: &bridge,
                ctx: &ctx,
                x0: z[..model.d1].to_vec(),
                y0: z[model.d1..].to_vec(),
                f,
            };
            let rep = gradient_entropy_check(
                &model, &kernels, &atoms, &ctx, &run, ths, n_paths, seed,
            )?;
            state.phase("entropy");
            Some(serde_json::to_value(&rep).unwrap())
        }
        None => None,
    };

    let report = json!({
        "p": p, "f": f.name(), "z": z, "ztilde_direction": unit,
        "points": points, "entropy": entropy,
    });
    write_artifact(&r.out(&args.common), &serde_json::to_string_pretty(&report).unwrap())
}
