//! The `fmlab` command line: one subcommand per forward or inverse procedure.
//!
//! Every command computes all of its outputs in memory first and writes them
//! only on success, so a failing run leaves no partial files behind. Exit
//! codes: 0 success, 2 validation, 3 Gaussian inverse failure, 4 ill-posed
//! 1D inverse, 5 internal numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::gaussian::{
    counterexample_pair, field_discrepancy, initial_velocity_field, marginal_at,
    recover_plan_from_v0, GaussianFlow, MarginalCurveGaussian,
};
use crate::io::{fmt_f64, read_json};
use crate::onedim::{default_snapshot_times, forward_snapshot, invert_from_snapshots_detailed, SnapshotSet};
use crate::random::{random_discrete_plan, random_gaussian_plan};
use crate::transport::{integrate_with_snapshots, marginal_moment_check, sample_plan, write_particle_csv};
use crate::types::{serde_matrix, serde_vector, validate_gaussian_plan, AffineVelocityField, DiscretePlan1D, GaussianPlan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_GAUSSIAN_INVERSE: i32 = 3;
pub const EXIT_ILL_POSED: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

pub const DEFAULT_ROUND_TRIP_TOL: f64 = 1e-10;
pub const DEFAULT_RECOVERY_TOL: f64 = 1e-8;
pub const DEFAULT_AGREEMENT_TOL: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(name = "fmlab", version, about = "Forward and inverse flow matching for Gaussian and discrete 1D plans")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: RunOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Marginals p_t of a Gaussian or discrete plan on a time grid.
    Forward,
    /// Recover a Gaussian plan from its endpoints and initial velocity.
    InvertGaussian,
    /// Recover a discrete 1D plan from marginal snapshots.
    #[command(name = "invert-1d")]
    Invert1d,
    /// Two Gaussian plans with equal marginal curves and different cross-covariance.
    Counterexample,
    /// Transport particles along the velocity field and compare moments.
    TransportCheck,
}

/// Shared flags. Defaults: seed 0, tolerances from the library constants.
#[derive(Debug, Clone, Args)]
pub struct RunOptions {
    /// Input JSON file.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the command's pass/fail threshold (round-trip residual,
    /// snapshot residual or curve agreement).
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Comma-separated time grid.
    #[arg(long, global = true, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    #[arg(long, global = true, default_value_t = 100_000)]
    pub particles: usize,
    #[arg(long, global = true, default_value_t = 100)]
    pub steps: usize,
    /// Dimension (or support size for invert-1d) of generated instances
    /// when no input is given.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Also write the transported particle clouds (transport-check).
    #[arg(long, global = true)]
    pub export_particles: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            input: None,
            out: PathBuf::from("out"),
            seed: 0,
            tol: None,
            times: None,
            particles: 100_000,
            steps: 100,
            dim: None,
            export_particles: false,
        }
    }
}

/// A command and its options.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub options: RunOptions,
}

/// A failed run: exit code plus the machine-readable report for stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub report: Value,
}

impl Failure {
    fn new(code: i32, err: &Error) -> Self {
        Self {
            code,
            report: json!({ "error": err.kind(), "message": err.to_string() }),
        }
    }

    fn message(code: i32, kind: &str, message: impl Into<String>) -> Self {
        Self {
            code,
            report: json!({ "error": kind, "message": message.into() }),
        }
    }
}

/// Output files of a successful run, in write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outputs {
    pub files: Vec<(String, String)>,
}

impl Outputs {
    fn push(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    fn push_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.push(name, text);
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        self.files
            .iter()
            .map(|(name, contents)| {
                let path = dir.join(name);
                fs::write(&path, contents)?;
                Ok(path)
            })
            .collect()
    }
}

/// Entry point for the binary: parses `std::env::args`, runs, reports.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let config = RunConfig {
        command: cli.command,
        options: cli.options,
    };
    execute(&config)
}

/// Runs and writes outputs; failures go to stderr as JSON.
pub fn execute(config: &RunConfig) -> i32 {
    match run(config) {
        Ok(outputs) => match outputs.write_to(&config.options.out) {
            Ok(paths) => {
                for p in paths {
                    println!("{}", p.display());
                }
                EXIT_OK
            }
            Err(e) => {
                eprintln!("{}", json!({ "error": "Io", "message": e.to_string() }));
                EXIT_NUMERICAL
            }
        },
        Err(failure) => {
            eprintln!("{}", serde_json::to_string_pretty(&failure.report).expect("reports serialize"));
            failure.code
        }
    }
}

/// Computes a command's outputs without touching the filesystem (other than
/// reading the input).
pub fn run(config: &RunConfig) -> Result<Outputs, Failure> {
    match config.command {
        Command::Forward => cmd_forward(&config.options),
        Command::InvertGaussian => cmd_invert_gaussian(&config.options),
        Command::Invert1d => cmd_invert_1d(&config.options),
        Command::Counterexample => cmd_counterexample(&config.options),
        Command::TransportCheck => cmd_transport_check(&config.options),
    }
}

fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    read_json(path).map_err(|m| Failure::message(EXIT_VALIDATION, "InvalidInput", m))
}

fn numerical(err: Error) -> Failure {
    Failure::new(EXIT_NUMERICAL, &err)
}

fn validation(err: Error) -> Failure {
    Failure::new(EXIT_VALIDATION, &err)
}

fn csv_row(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_f64).collect::<Vec<_>>().join(",")
}

fn gaussian_plan_checked(plan: &GaussianPlan) -> Result<Value, Failure> {
    let report = validate_gaussian_plan(plan).map_err(validation)?;
    if !report.accepted {
        return Err(Failure {
            code: EXIT_VALIDATION,
            report: json!({ "error": "ValidationFailed", "validation": report }),
        });
    }
    Ok(serde_json::to_value(report).expect("reports serialize"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanInput {
    Gaussian(GaussianPlan),
    Discrete(DiscretePlan1D),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForwardInput {
    pub plan: PlanInput,
    #[serde(default)]
    pub times: Vec<f64>,
}

/// Writes `marginals.csv` (Gaussian: t, μ_t, row-major Σ_t; discrete: t,
/// atom, mass) and `summary.json`.
pub fn cmd_forward(opts: &RunOptions) -> Result<Outputs, Failure> {
    let path = opts
        .input
        .as_ref()
        .ok_or_else(|| Failure::message(EXIT_VALIDATION, "InvalidInput", "forward needs --input"))?;
    let input: ForwardInput = load(path)?;
    let times = opts.times.clone().unwrap_or(input.times);
    if times.is_empty() {
        return Err(Failure::message(EXIT_VALIDATION, "InvalidInput", "no times given"));
    }
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Failure::message(EXIT_VALIDATION, "InvalidInput", format!("time {t} is outside [0, 1]")));
    }

    let mut out = Outputs::default();
    let mut csv = String::new();
    let summary = match &input.plan {
        PlanInput::Gaussian(plan) => {
            let report = gaussian_plan_checked(plan)?;
            let d = plan.dim();
            csv.push('t');
            for i in 1..=d {
                write!(csv, ",mean_{i}").unwrap();
            }
            for i in 1..=d {
                for j in 1..=d {
                    write!(csv, ",cov_{i}_{j}").unwrap();
                }
            }
            csv.push('\n');
            for &t in &times {
                let m = marginal_at(plan, t).map_err(validation)?;
                let cov_row_major = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| m.cov[(i, j)]);
                let row = std::iter::once(t).chain(m.mean.iter().copied()).chain(cov_row_major);
                csv.push_str(&csv_row(row));
                csv.push('\n');
            }
            json!({ "kind": "gaussian", "dim": d, "times": times, "validation": report })
        }
        PlanInput::Discrete(plan) => {
            csv.push_str("t,atom,mass\n");
            let mut counts = Vec::with_capacity(times.len());
            for &t in &times {
                let snap = forward_snapshot(plan, t).map_err(validation)?;
                counts.push(snap.len());
                for (&a, &m) in snap.atoms().iter().zip(snap.masses()) {
                    csv.push_str(&csv_row([t, a, m]));
                    csv.push('\n');
                }
            }
            json!({ "kind": "discrete", "times": times, "atoms_per_time": counts })
        }
    };
    out.push("marginals.csv", csv);
    out.push_json("summary.json", &summary);
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertGaussianInput {
    #[serde(with = "serde_vector")]
    pub mu0: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub sigma0: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub mu1: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub sigma1: DMatrix<f64>,
    pub v0: AffineVelocityField,
}

/// Writes `recovered_plan.json` and `roundtrip.json`. Without `--input`, a
/// random plan of dimension `--dim` (default 3) is generated from the seed,
/// its initial field is inverted, and `true_plan.json` is written as well.
pub fn cmd_invert_gaussian(opts: &RunOptions) -> Result<Outputs, Failure> {
    let mut out = Outputs::default();
    let (input, truth) = match &opts.input {
        Some(path) => (load::<InvertGaussianInput>(path)?, None),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let plan = random_gaussian_plan(&mut rng, opts.dim.unwrap_or(3).max(1), 0.05);
            let v0 = initial_velocity_field(&plan).map_err(numerical)?;
            let input = InvertGaussianInput {
                mu0: plan.mu0.clone(),
                sigma0: plan.sigma0.clone(),
                mu1: plan.mu1.clone(),
                sigma1: plan.sigma1.clone(),
                v0,
            };
            (input, Some(plan))
        }
    };
    let recovered = recover_plan_from_v0(&input.mu0, &input.sigma0, &input.mu1, &input.sigma1, &input.v0)
        .map_err(|e| match e {
            Error::DimensionMismatch(_) | Error::InvalidInput(_) => validation(e),
            _ => Failure::new(EXIT_GAUSSIAN_INVERSE, &e),
        })?;
    let field = initial_velocity_field(&recovered).map_err(numerical)?;
    let a_residual = (&field.a - &input.v0.a).amax();
    let b_residual = (&field.b - &input.v0.b).amax();
    let tolerance = opts.tol.unwrap_or(DEFAULT_ROUND_TRIP_TOL);
    let residual = a_residual.max(b_residual);
    let mut report = json!({
        "a_residual": a_residual,
        "b_residual": b_residual,
        "residual": residual,
        "tolerance": tolerance,
        "passed": residual <= tolerance,
        "validation": validate_gaussian_plan(&recovered).map_err(numerical)?,
    });
    if let Some(truth) = &truth {
        report["cross_error"] = json!((&recovered.cross - &truth.cross).amax());
        out.push_json("true_plan.json", truth);
    }
    if residual > tolerance {
        return Err(Failure {
            code: EXIT_GAUSSIAN_INVERSE,
            report: json!({ "error": "RoundTripResidual", "report": report }),
        });
    }
    out.push_json("recovered_plan.json", &recovered);
    out.push_json("roundtrip.json", &report);
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Invert1dInput {
    pub x_atoms: Vec<f64>,
    pub y_atoms: Vec<f64>,
    pub source_masses: Vec<f64>,
    pub target_masses: Vec<f64>,
    #[serde(flatten)]
    pub snapshots: SnapshotSet,
}

/// Writes `recovered_plan.json`, `certificate.json` and `residuals.csv`.
/// Without `--input`, a random plan with `--dim` atoms per side (default 3)
/// is observed at `--times` (default: the certified default grid).
pub fn cmd_invert_1d(opts: &RunOptions) -> Result<Outputs, Failure> {
    let mut out = Outputs::default();
    let input = match &opts.input {
        Some(path) => load::<Invert1dInput>(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let size = opts.dim.unwrap_or(3).max(1);
            let plan = random_discrete_plan(&mut rng, size, size);
            let times = opts
                .times
                .clone()
                .unwrap_or_else(|| default_snapshot_times(plan.x_atoms(), plan.y_atoms(), 64));
            let snapshots = SnapshotSet::from_plan(&plan, &times).map_err(validation)?;
            out.push_json("true_plan.json", &plan);
            Invert1dInput {
                x_atoms: plan.x_atoms().to_vec(),
                y_atoms: plan.y_atoms().to_vec(),
                source_masses: plan.source_masses(),
                target_masses: plan.target_masses(),
                snapshots,
            }
        }
    };
    let inversion = invert_from_snapshots_detailed(
        &input.x_atoms,
        &input.y_atoms,
        &input.source_masses,
        &input.target_masses,
        &input.snapshots,
    )
    .map_err(|e| match e {
        Error::IllPosed { .. } => Failure::new(EXIT_ILL_POSED, &e),
        _ => validation(e),
    })?;
    let tolerance = opts.tol.unwrap_or(DEFAULT_RECOVERY_TOL);
    let mut csv = String::from("t,max_abs_mass_error\n");
    for &(t, r) in &inversion.snapshot_residuals {
        csv.push_str(&csv_row([t, r]));
        csv.push('\n');
    }
    let worst = inversion.snapshot_residuals.iter().map(|r| r.1).fold(0.0, f64::max);
    if worst > tolerance {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            report: json!({ "error": "SnapshotResidual", "residual": worst, "tolerance": tolerance }),
        });
    }
    out.push_json("recovered_plan.json", &inversion.plan);
    out.push_json(
        "certificate.json",
        &json!({
            "certificate": inversion.certificate,
            "data_residual": inversion.data_residual,
            "marginal_residual": inversion.marginal_residual,
            "max_snapshot_residual": worst,
            "tolerance": tolerance,
        }),
    );
    out.push("residuals.csv", csv);
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterexampleInput {
    #[serde(with = "serde_matrix")]
    pub sigma0: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub sigma1: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub sym_part: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub antisym_part: DMatrix<f64>,
}

impl CounterexampleInput {
    /// Σ₀ = Σ₁ = I, zero symmetric part, antisymmetric entry 0.5 at (1, 2).
    pub fn standard(dim: usize) -> Self {
        let mut antisym = DMatrix::zeros(dim, dim);
        if dim >= 2 {
            antisym[(0, 1)] = 0.5;
            antisym[(1, 0)] = -0.5;
        }
        Self {
            sigma0: DMatrix::identity(dim, dim),
            sigma1: DMatrix::identity(dim, dim),
            sym_part: DMatrix::zeros(dim, dim),
            antisym_part: antisym,
        }
    }
}

/// Writes `pair.json` and `agreement.csv` (101-point grid with mean and
/// covariance deviations, plus the velocity-field discrepancy, which is
/// reported but not checked).
pub fn cmd_counterexample(opts: &RunOptions) -> Result<Outputs, Failure> {
    let input = match &opts.input {
        Some(path) => load::<CounterexampleInput>(path)?,
        None => CounterexampleInput::standard(opts.dim.unwrap_or(2)),
    };
    let (p, q) = counterexample_pair(&input.sigma0, &input.sigma1, &input.sym_part, &input.antisym_part)
        .map_err(validation)?;
    let curve = MarginalCurveGaussian::uniform(p.clone(), 101).map_err(numerical)?;
    let mut csv = String::from("t,mean_deviation,cov_deviation,field_discrepancy\n");
    let (mut max_mean, mut max_cov) = (0.0f64, 0.0f64);
    for &t in &curve.times {
        let a = marginal_at(&p, t).map_err(numerical)?;
        let b = marginal_at(&q, t).map_err(numerical)?;
        let dm = (&a.mean - &b.mean).amax();
        let dc = (&a.cov - &b.cov).amax();
        max_mean = max_mean.max(dm);
        max_cov = max_cov.max(dc);
        let field = field_discrepancy(&p, &q, t).unwrap_or(f64::NAN);
        csv.push_str(&csv_row([t, dm, dc, field]));
        csv.push('\n');
    }
    let diff = &p.cross - &q.cross;
    let tolerance = opts.tol.unwrap_or(DEFAULT_AGREEMENT_TOL);
    let passed = max_mean <= tolerance && max_cov <= tolerance;
    let report = json!({
        "plan": p,
        "plan_prime": q,
        "cross_difference_frobenius": diff.norm(),
        "cross_difference_spectral": diff.singular_values().max(),
        "max_mean_deviation": max_mean,
        "max_cov_deviation": max_cov,
        "tolerance": tolerance,
        "passed": passed,
    });
    if !passed {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            report: json!({ "error": "CurveDisagreement", "report": report }),
        });
    }
    let mut out = Outputs::default();
    out.push_json("pair.json", &report);
    out.push("agreement.csv", csv);
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportInput {
    pub plan: GaussianPlan,
    #[serde(default)]
    pub times: Vec<f64>,
}

/// Writes `moment_check.json`, and `particles.csv` with
/// `--export-particles`. Without `--input`, a random plan of dimension
/// `--dim` (default 2) is generated from the seed.
pub fn cmd_transport_check(opts: &RunOptions) -> Result<Outputs, Failure> {
    let (plan, file_times) = match &opts.input {
        Some(path) => {
            let input: TransportInput = load(path)?;
            (input.plan, input.times)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            (random_gaussian_plan(&mut rng, opts.dim.unwrap_or(2).max(1), 0.05), Vec::new())
        }
    };
    gaussian_plan_checked(&plan)?;
    let times = match (&opts.times, file_times.is_empty()) {
        (Some(t), _) => t.clone(),
        (None, false) => file_times,
        (None, true) => vec![0.25, 0.5, 0.75, 1.0],
    };
    if opts.particles == 0 || opts.steps == 0 {
        return Err(Failure::message(EXIT_VALIDATION, "InvalidInput", "particles and steps must be positive"));
    }
    let flow = GaussianFlow::new(plan.clone());
    let report = marginal_moment_check(&plan, &flow, &times, opts.particles, opts.steps, opts.seed)
        .map_err(|e| match e {
            Error::InvalidInput(_) | Error::DimensionMismatch(_) => validation(e),
            _ => numerical(e),
        })?;
    if !report.passed {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            report: json!({ "error": "MomentMismatch", "report": report }),
        });
    }
    let mut out = Outputs::default();
    out.push_json("moment_check.json", &json!({ "plan": plan, "report": report }));
    if opts.export_particles {
        let samples = sample_plan(&plan, opts.particles, opts.seed).map_err(numerical)?;
        let mut clouds = vec![(0.0, samples.x0.clone())];
        clouds.extend(integrate_with_snapshots(&flow, &samples.x0, &times, opts.steps).map_err(numerical)?);
        let mut buf = Vec::new();
        write_particle_csv(&mut buf, &clouds, plan.dim()).expect("writing to memory");
        out.push("particles.csv", String::from_utf8(buf).expect("ascii csv"));
    }
    Ok(out)
}
