//! Monte Carlo harness: RMSE of angular-velocity estimates against the CRB.
//!
//! Every run `i` draws its noise from the stream `(master_seed, i)` and its
//! position perturbation from the matching auxiliary stream, so the same run
//! index sees the same random numbers at every speed and the report does not
//! depend on thread scheduling.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crb::omega_bounds;
use crate::error::{Error, Result};
use crate::estimator::{init_omega, Estimator, SolverOptions};
use crate::geometry::{check_identifiability, presets, ArrayGeometry, GeometryFile};
use crate::signal::{simulate_measurement, Measurement, MotionState, NoiseModel, StreamKey};
use crate::tensor::tensor_estimate;
use crate::units::{deg_to_rad, rad_to_deg};

pub const DEFAULT_RUNS: usize = 10_000;

/// Where a scenario's array comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeometrySource {
    Preset { preset: String },
    File { file: PathBuf },
    Inline(GeometryFile),
}

impl GeometrySource {
    pub fn resolve(&self) -> Result<ArrayGeometry> {
        match self {
            GeometrySource::Preset { preset } => preset_geometry(preset),
            GeometrySource::File { file } => GeometryFile::load(file),
            GeometrySource::Inline(g) => g.clone().into_geometry(),
        }
    }
}

pub fn preset_geometry(name: &str) -> Result<ArrayGeometry> {
    match name {
        "planar_square" => Ok(presets::planar_square()),
        "cube" => Ok(presets::cube()),
        "dual_side_board" => Ok(presets::dual_side_board()),
        other => Err(Error::InvalidParameter(format!("unknown geometry preset '{other}'"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// Accelerometer noise variance per axis, (m/s²)².
    pub accel_noise_variance: f64,
    /// Gyroscope noise standard deviation per axis, deg/s.
    pub gyro_noise_std_dps: f64,
}

impl NoiseParams {
    pub fn model_for(&self, geom: &ArrayGeometry) -> Result<NoiseModel> {
        NoiseModel::iid_for(
            geom,
            self.accel_noise_variance,
            deg_to_rad(self.gyro_noise_std_dps).powi(2),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ml,
    Tensor,
    GyroAverage,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ml => "ml",
            Method::Tensor => "tensor",
            Method::GyroAverage => "gyro_average",
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Ml, Method::GyroAverage]
}

fn default_runs() -> usize {
    DEFAULT_RUNS
}

fn default_specific_force() -> [f64; 3] {
    [0.0, 0.0, 9.81]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McScenario {
    #[serde(default)]
    pub name: Option<String>,
    pub geometry: GeometrySource,
    pub noise: NoiseParams,
    /// Rotation axis; normalized before use.
    pub direction: [f64; 3],
    /// Speeds in deg/s. Absent means the default log sweep.
    #[serde(default)]
    pub speeds_dps: Option<Vec<f64>>,
    #[serde(default)]
    pub omega_dot_rad_s2: [f64; 3],
    #[serde(default = "default_specific_force")]
    pub specific_force_m_s2: [f64; 3],
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    pub master_seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Std of i.i.d. Gaussian errors added to the simulated positions, meters.
    #[serde(default)]
    pub position_perturbation_std_m: f64,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl McScenario {
    /// Reads a scenario; a relative geometry file path is taken relative to the scenario file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut sc: McScenario = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let GeometrySource::File { file } = &mut sc.geometry {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    *file = dir.join(&*file);
                }
            }
        }
        Ok(sc)
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.speeds_dps.clone().unwrap_or_else(default_sweep_dps)
    }

    pub fn unit_direction(&self) -> Result<Vector3<f64>> {
        Vector3::from(self.direction)
            .try_normalize(0.0)
            .filter(|d| d.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::InvalidParameter("direction must be a nonzero finite vector".into()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::InvalidParameter("n_runs must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("at least one method is required".into()));
        }
        if !(self.position_perturbation_std_m >= 0.0) || !self.position_perturbation_std_m.is_finite() {
            return Err(Error::InvalidParameter("position perturbation std must be ≥ 0".into()));
        }
        if self.speeds().iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidParameter("speeds must be finite and ≥ 0".into()));
        }
        self.unit_direction()?;
        self.solver.validate()
    }
}

/// 20 log-spaced speeds per decade over [10, 10⁴] deg/s.
pub fn default_sweep_dps() -> Vec<f64> {
    (0..=60).map(|k| 10f64.powf(1.0 + k as f64 / 20.0)).collect()
}

/// Gyro-only angular velocity, the "average the gyros" reference method.
pub fn gyro_average_baseline(y: &Measurement, geom: &ArrayGeometry, noise: &NoiseModel) -> Result<Vector3<f64>> {
    init_omega(y, geom, noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub speed_dps: f64,
    pub method: Method,
    pub axis: char,
    /// NaN when every run failed.
    pub rmse_dps: f64,
    pub sqrt_crb_dps: f64,
    pub sqrt_crb_sat_dps: f64,
    pub n_runs: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub rows: Vec<McRow>,
    pub master_seed: u64,
    pub n_runs: usize,
    pub n_measurements: usize,
    /// Excluded from the CSV so reports stay bit-identical across reruns.
    pub wall_time_s: f64,
}

impl McReport {
    pub fn row(&self, speed_dps: f64, method: Method, axis: char) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.speed_dps == speed_dps && r.method == method && r.axis == axis)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "speed_dps",
            "method",
            "axis",
            "rmse_dps",
            "sqrt_crb_dps",
            "sqrt_crb_sat_dps",
            "n_runs",
            "failures",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.speed_dps.to_string(),
                r.method.name().to_string(),
                r.axis.to_string(),
                r.rmse_dps.to_string(),
                r.sqrt_crb_dps.to_string(),
                r.sqrt_crb_sat_dps.to_string(),
                r.n_runs.to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn perturbed<R: Rng>(geom: &ArrayGeometry, std: f64, rng: &mut R) -> Result<ArrayGeometry> {
    let positions = geom
        .accel_positions()
        .iter()
        .map(|r| r + Vector3::from_fn(|_, _| std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    geom.with_positions(positions)
}

/// One run at one speed: per-method error vector, `None` when the method failed.
fn single_run(
    sc: &McScenario,
    estimator: &Estimator,
    state: &MotionState,
    run: usize,
) -> Result<Vec<Option<Vector3<f64>>>> {
    let geom = estimator.geometry();
    let noise = estimator.noise();
    let key = StreamKey::new(sc.master_seed, run as u64);
    let sim_geom = if sc.position_perturbation_std_m > 0.0 {
        perturbed(geom, sc.position_perturbation_std_m, &mut key.aux_rng())?
    } else {
        geom.clone()
    };
    let y = simulate_measurement(state, &sim_geom, noise, &mut key.rng())?;
    Ok(sc
        .methods
        .iter()
        .map(|m| {
            let omega = match m {
                Method::Ml => estimator.estimate(&y, None).map(|r| r.omega),
                Method::Tensor => tensor_estimate(&y.accel, geom, y.gyro_signs()).map(|t| t.omega_signed),
                Method::GyroAverage => estimator.gyro_average(&y),
            };
            omega.ok().map(|w| w - state.omega)
        })
        .collect())
}

/// Runs every (speed, run) pair in parallel and reduces in run order.
pub fn run_scenario(sc: &McScenario) -> Result<McReport> {
    let start = Instant::now();
    sc.validate()?;
    let geom = sc.geometry.resolve()?;
    let noise = sc.noise.model_for(&geom)?;
    let verdict = check_identifiability(&geom);
    if !verdict.identifiable {
        return Err(Error::Unidentifiable(verdict.reason));
    }
    if sc.methods.contains(&Method::Tensor) && !verdict.tensor_capable {
        return Err(Error::TensorRankDeficient(verdict.h_rank.min(3)));
    }
    let direction = sc.unit_direction()?;
    let estimator = Estimator::new(geom.clone(), noise.clone(), sc.solver)?;
    let speeds = sc.speeds();

    let mut rows = Vec::with_capacity(speeds.len() * sc.methods.len() * 3);
    let mut n_measurements = 0;
    for &speed_dps in &speeds {
        let state = MotionState::new(
            direction * deg_to_rad(speed_dps),
            Vector3::from(sc.omega_dot_rad_s2),
            Vector3::from(sc.specific_force_m_s2),
        );
        let errors: Vec<Vec<Option<Vector3<f64>>>> = (0..sc.n_runs)
            .into_par_iter()
            .map(|run| single_run(sc, &estimator, &state, run))
            .collect::<Result<_>>()?;
        n_measurements += errors.len();

        let (full, sat) = omega_bounds(&state.omega, &geom, &noise)?;
        for (mi, &method) in sc.methods.iter().enumerate() {
            let mut sum = Vector3::zeros();
            let mut ok = 0usize;
            for e in errors.iter().filter_map(|run| run[mi]) {
                sum += e.component_mul(&e);
                ok += 1;
            }
            for (a, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
                rows.push(McRow {
                    speed_dps,
                    method,
                    axis,
                    rmse_dps: if ok == 0 { f64::NAN } else { rad_to_deg((sum[a] / ok as f64).sqrt()) },
                    sqrt_crb_dps: rad_to_deg(full[a].sqrt()),
                    sqrt_crb_sat_dps: rad_to_deg(sat[a].sqrt()),
                    n_runs: sc.n_runs,
                    failures: sc.n_runs - ok,
                });
            }
        }
    }
    assert_eq!(n_measurements, sc.n_runs * speeds.len(), "every grid point simulated once per run");

    Ok(McReport {
        rows,
        master_seed: sc.master_seed,
        n_runs: sc.n_runs,
        n_measurements,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
