//! `imu-array`: simulate, fuse and analyze accelerometer/gyroscope array data.
//!
//! Angular quantities in flags and JSON outputs use `--units` (degrees by
//! default). Measurement CSVs are always SI and sweep CSVs always deg/s,
//! as their column names say.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imu_array::crb::{crb_sweep, write_crb_csv};
use imu_array::estimator::{Estimator, SolverOptions};
use imu_array::geometry::{check_identifiability, ArrayGeometry, GeometryFile};
use imu_array::montecarlo::{default_sweep_dps, preset_geometry, run_scenario, McScenario, NoiseParams};
use imu_array::signal::{simulate_keyed, Measurement, MotionState, NoiseModel, StreamKey};
use imu_array::tensor::tensor_estimate;
use imu_array::units::AngleUnit;
use imu_array::Error;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "imu-array", version, about = "Maximum-likelihood fusion for inertial sensor arrays")]
struct Cli {
    /// Unit for angular quantities in flags and JSON output.
    #[arg(long, global = true, default_value = "deg")]
    units: AngleUnit,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one array reading and write it as a measurement CSV.
    Simulate(SimulateArgs),
    /// Fuse a measurement CSV into ω, ω̇ and s estimates (JSON).
    Estimate(EstimateArgs),
    /// Sweep the Cramér-Rao bound of ω over speeds along a direction (CSV).
    Crb(CrbArgs),
    /// Run a Monte Carlo scenario (CSV report).
    Montecarlo(MonteCarloArgs),
    /// Angular-acceleration-tensor estimate from a measurement CSV (JSON).
    Tensor(TensorArgs),
    /// Report identifiability of a geometry (JSON).
    Check(CheckArgs),
}

#[derive(Args)]
struct GeometryArgs {
    /// Geometry JSON file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    geometry: Option<PathBuf>,
    /// Built-in geometry: planar_square, cube or dual_side_board.
    #[arg(long)]
    preset: Option<String>,
}

impl GeometryArgs {
    fn load(&self) -> Result<ArrayGeometry, CliError> {
        match (&self.geometry, &self.preset) {
            (Some(path), _) => Ok(GeometryFile::load(path)?),
            (None, Some(name)) => Ok(preset_geometry(name)?),
            (None, None) => Err(CliError::usage("either --geometry or --preset is required")),
        }
    }
}

#[derive(Args)]
struct NoiseArgs {
    /// Noise JSON file with accel_noise_variance and gyro_noise_std_dps.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Accelerometer noise variance, (m/s²)². Overrides the file.
    #[arg(long)]
    accel_var: Option<f64>,
    /// Gyroscope noise std in --units per second. Overrides the file.
    #[arg(long)]
    gyro_std: Option<f64>,
}

impl NoiseArgs {
    fn load(&self, geom: &ArrayGeometry, units: AngleUnit) -> Result<NoiseModel, CliError> {
        let mut params = match &self.noise {
            Some(path) => read_json::<NoiseParams>(path)?,
            None => NoiseParams {
                accel_noise_variance: 0.01,
                gyro_noise_std_dps: 1.0,
            },
        };
        if let Some(v) = self.accel_var {
            params.accel_noise_variance = v;
        }
        if let Some(s) = self.gyro_std {
            params.gyro_noise_std_dps = units.to_si(s).to_degrees();
        }
        Ok(params.model_for(geom)?)
    }
}

/// State file contents; angular fields in `--units`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    omega: [f64; 3],
    #[serde(default)]
    omega_dot: [f64; 3],
    #[serde(default)]
    specific_force: [f64; 3],
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// State JSON: omega, omega_dot ([units]/s, [units]/s²) and specific_force (m/s²).
    #[arg(long, conflicts_with = "omega")]
    state: Option<PathBuf>,
    /// Angular velocity "x,y,z" in --units per second.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    omega: Option<Vector3<f64>>,
    /// Angular acceleration "x,y,z" in --units per second squared.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    omega_dot: Option<Vector3<f64>>,
    /// Specific force "x,y,z" in m/s².
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    specific_force: Option<Vector3<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run index selecting the noise stream for this seed.
    #[arg(long, default_value_t = 0)]
    run: u64,
    /// Skip the noise draw.
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolverArgs {
    /// Solver options JSON (any subset of the fields).
    #[arg(long)]
    solver: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Step-norm convergence threshold in rad/s.
    #[arg(long)]
    step_tolerance: Option<f64>,
}

impl SolverArgs {
    fn load(&self) -> Result<SolverOptions, CliError> {
        let mut opts = match &self.solver {
            Some(path) => read_json::<SolverOptions>(path)?,
            None => SolverOptions::default(),
        };
        if let Some(n) = self.max_iterations {
            opts.max_iterations = n;
        }
        if let Some(t) = self.step_tolerance {
            opts.step_tolerance = t;
        }
        opts.validate()?;
        Ok(opts)
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    measurement: PathBuf,
    /// Prior angular velocity "x,y,z" in --units per second, used as an extra seed
    /// when gyros are saturated.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    prior: Option<Vector3<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrbArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Rotation axis "x,y,z".
    #[arg(long, value_parser = parse_vec3, default_value = "1,0,0", allow_hyphen_values = true)]
    direction: Vector3<f64>,
    /// Comma-separated speeds in --units per second. Defaults to 20 per decade over 10..10⁴ deg/s.
    #[arg(long, value_delimiter = ',')]
    speeds: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MonteCarloArgs {
    /// Scenario JSON.
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario's run count.
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TensorArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long)]
    measurement: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::Csv(c) if c.is_io_error() => EXIT_IO,
            Error::Json(j) if j.is_io() => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(format!("expected three comma-separated numbers, got '{s}'")),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn open_measurement(path: &Path) -> Result<Measurement, CliError> {
    let file = File::open(path).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(Measurement::read_csv(BufReader::new(file))?)
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| CliError {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        })?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: Serialize>(value: &T, out: &Option<PathBuf>) -> Result<(), CliError> {
    let mut w = output(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn vec_in(v: &Vector3<f64>, units: AngleUnit) -> [f64; 3] {
    [units.from_si(v.x), units.from_si(v.y), units.from_si(v.z)]
}

fn vec_si(v: &Vector3<f64>, units: AngleUnit) -> Vector3<f64> {
    v.map(|c| units.to_si(c))
}

fn cmd_simulate(args: &SimulateArgs, units: AngleUnit) -> Result<(), CliError> {
    let geom = args.geometry.load()?;
    let noise = args.noise.load(&geom, units)?;
    let state = match (&args.state, &args.omega) {
        (Some(path), _) => {
            let f: StateFile = read_json(path)?;
            MotionState::new(
                vec_si(&Vector3::from(f.omega), units),
                vec_si(&Vector3::from(f.omega_dot), units),
                Vector3::from(f.specific_force),
            )
        }
        (None, Some(omega)) => MotionState::new(
            vec_si(omega, units),
            vec_si(&args.omega_dot.unwrap_or_else(Vector3::zeros), units),
            args.specific_force.unwrap_or_else(Vector3::zeros),
        ),
        (None, None) => return Err(CliError::usage("either --state or --omega is required")),
    };
    if !state.is_finite() {
        return Err(CliError::usage("state must be finite"));
    }
    let m = if args.noiseless {
        Measurement::noiseless(&state, &geom)
    } else {
        simulate_keyed(&state, &geom, &noise, StreamKey::new(args.seed, args.run))?
    };
    let mut w = output(&args.out)?;
    m.write_csv(&mut w)?;
    w.flush()?;
    let per_axis = m.saturated_per_axis();
    eprintln!(
        "{} accel + {} gyro channels; {} saturated (x: {}, y: {}, z: {})",
        m.accel.len(),
        m.gyro.len(),
        m.n_saturated(),
        per_axis[0],
        per_axis[1],
        per_axis[2]
    );
    Ok(())
}

#[derive(Serialize)]
struct EstimateOutput {
    units: AngleUnit,
    omega: [f64; 3],
    omega_dot: [f64; 3],
    specific_force_m_s2: [f64; 3],
    iterations: usize,
    converged: bool,
    neg_loglik: f64,
    used_channels: Vec<usize>,
    pruned_channels: Vec<usize>,
}

fn cmd_estimate(args: &EstimateArgs, units: AngleUnit) -> Result<(), CliError> {
    let geom = args.geometry.load()?;
    let verdict = check_identifiability(&geom);
    if !verdict.identifiable {
        return Err(CliError::usage(format!(
            "geometry is not identifiable: {} (rank of H = {}, position span = {})",
            verdict.reason, verdict.h_rank, verdict.position_span_dim
        )));
    }
    let noise = args.noise.load(&geom, units)?;
    let opts = args.solver.load()?;
    let y = open_measurement(&args.measurement)?;
    let estimator = Estimator::new(geom, noise, opts)?;
    let res = estimator.estimate(&y, args.prior.map(|p| vec_si(&p, units)))?;
    let (used, pruned): (Vec<usize>, Vec<usize>) = (0..res.used_channels.len()).partition(|&i| res.used_channels[i]);
    write_json(
        &EstimateOutput {
            units,
            omega: vec_in(&res.omega, units),
            omega_dot: vec_in(&res.omega_dot, units),
            specific_force_m_s2: res.specific_force.into(),
            iterations: res.iterations,
            converged: res.converged,
            neg_loglik: res.neg_loglik,
            used_channels: used,
            pruned_channels: pruned,
        },
        &args.out,
    )?;
    if !res.converged {
        return Err(CliError {
            code: EXIT_NOT_CONVERGED,
            message: format!("Gauss-Newton did not converge in {} iterations", res.iterations),
        });
    }
    Ok(())
}

fn cmd_crb(args: &CrbArgs, units: AngleUnit) -> Result<(), CliError> {
    let geom = args.geometry.load()?;
    let noise = args.noise.load(&geom, units)?;
    let speeds: Vec<f64> = match &args.speeds {
        Some(s) => s.iter().map(|&v| units.to_si(v)).collect(),
        None => default_sweep_dps().into_iter().map(f64::to_radians).collect(),
    };
    if speeds.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(CliError::usage("speeds must be finite and non-negative"));
    }
    let rows = crb_sweep(&geom, &noise, &args.direction, &speeds)?;
    let mut w = output(&args.out)?;
    write_crb_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_montecarlo(args: &MonteCarloArgs) -> Result<(), CliError> {
    let mut sc = McScenario::load(&args.scenario)?;
    if let Some(seed) = args.seed {
        sc.master_seed = seed;
    }
    if let Some(runs) = args.runs {
        sc.n_runs = runs;
    }
    let report = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::usage(e.to_string()))?
            .install(|| run_scenario(&sc))?,
        None => run_scenario(&sc)?,
    };
    let mut w = output(&args.out)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    eprintln!(
        "{} measurements, seed {}, {:.2} s",
        report.n_measurements, report.master_seed, report.wall_time_s
    );
    Ok(())
}

#[derive(Serialize)]
struct TensorOutput {
    units: AngleUnit,
    specific_force_m_s2: [f64; 3],
    omega_dot: [f64; 3],
    omega_abs: [f64; 3],
    omega_signed: [f64; 3],
    low_confidence: bool,
}

fn cmd_tensor(args: &TensorArgs, units: AngleUnit) -> Result<(), CliError> {
    let geom = args.geometry.load()?;
    let y = open_measurement(&args.measurement)?;
    y.check_dims(&geom)?;
    let t = tensor_estimate(&y.accel, &geom, y.gyro_signs())?;
    write_json(
        &TensorOutput {
            units,
            specific_force_m_s2: t.specific_force.into(),
            omega_dot: vec_in(&t.omega_dot, units),
            omega_abs: vec_in(&t.omega_abs, units),
            omega_signed: vec_in(&t.omega_signed, units),
            low_confidence: t.low_confidence,
        },
        &args.out,
    )
}

fn cmd_check(args: &CheckArgs) -> Result<(), CliError> {
    let geom = args.geometry.load()?;
    write_json(&check_identifiability(&geom), &args.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let units = cli.units;
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, units),
        Command::Estimate(a) => cmd_estimate(a, units),
        Command::Crb(a) => cmd_crb(a, units),
        Command::Montecarlo(a) => cmd_montecarlo(a),
        Command::Tensor(a) => cmd_tensor(a, units),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
