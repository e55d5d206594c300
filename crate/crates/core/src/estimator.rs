//! Concentrated maximum-likelihood fusion.
//!
//! The linear parameters `φ = [ω̇; s]` are profiled out by weighted least
//! squares, leaving a three-dimensional nonlinear least-squares problem in ω
//! that is solved by Gauss-Newton. Saturated gyro channels are removed before
//! solving; their signs seed the search when an axis has no usable gyro.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_h, check_identifiability, numerical_rank, ArrayGeometry};
use crate::signal::{h_full, jacobian_h, Measurement, NoiseModel};
use crate::tensor;

/// Number of log-spaced magnitude seeds used when an axis has no usable gyro.
pub const SATURATED_GRID_SEEDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Step-norm convergence threshold, rad/s.
    pub step_tolerance: f64,
    /// Relative cost-change convergence threshold.
    pub cost_tolerance: f64,
    pub line_search_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-10,
            cost_tolerance: 1e-12,
            line_search_halvings: 20,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || self.line_search_halvings == 0
            || !(self.step_tolerance > 0.0)
            || !(self.cost_tolerance > 0.0)
        {
            return Err(Error::InvalidParameter(
                "solver options must all be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub omega: Vector3<f64>,
    pub omega_dot: Vector3<f64>,
    pub specific_force: Vector3<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Concentrated negative log-likelihood at the solution, constant dropped.
    pub neg_loglik: f64,
    /// One flag per channel of the full array, accelerometers first.
    pub used_channels: Vec<bool>,
}

/// The model restricted to a set of active channels, with every quantity
/// that does not depend on ω precomputed.
#[derive(Debug, Clone)]
pub struct FusionModel {
    geom: ArrayGeometry,
    active: Vec<usize>,
    h: DMatrix<f64>,
    /// `(HᵀQ⁻¹H)⁻¹ HᵀQ⁻¹`
    wls_gain: DMatrix<f64>,
    p: DMatrix<f64>,
    /// Active gyro channels as `(row in the active vector, axis)`.
    gyro_rows: Vec<(usize, usize)>,
    gyro_weight: DMatrix<f64>,
}

impl FusionModel {
    /// Model over every channel of the array.
    pub fn new(geom: &ArrayGeometry, noise: &NoiseModel) -> Result<Self> {
        Self::with_mask(geom, noise, &vec![false; geom.n_gyro_channels()])
    }

    /// Model with the gyro channels flagged in `saturated` removed.
    pub fn with_mask(geom: &ArrayGeometry, noise: &NoiseModel, saturated: &[bool]) -> Result<Self> {
        noise.check_dims(geom)?;
        if saturated.len() != geom.n_gyro_channels() {
            return Err(Error::DimensionMismatch {
                what: "saturation mask",
                expected: geom.n_gyro_channels(),
                found: saturated.len(),
            });
        }
        let na = geom.n_accel_channels();
        let active: Vec<usize> = (0..na)
            .chain(
                saturated
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| !s)
                    .map(|(j, _)| na + j),
            )
            .collect();

        let h_all = build_h(geom);
        let h = h_all.select_rows(active.iter());
        if numerical_rank(&h) < 6 {
            return Err(Error::Unidentifiable(check_identifiability(geom).reason));
        }
        let q = noise.select(&active)?;
        let q_inv = q.inverse();
        let qh = &q_inv * &h;
        let normal = h.transpose() * &qh;
        let normal_chol = Cholesky::new(normal)
            .ok_or(Error::Unidentifiable(check_identifiability(geom).reason))?;
        let wls_gain = normal_chol.solve(&qh.transpose());
        let p = &q_inv - &qh * &wls_gain;
        let p = (&p + p.transpose()) * 0.5;

        let gyro_rows: Vec<(usize, usize)> = active
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= na)
            .map(|(row, &c)| (row, (c - na) % 3))
            .collect();
        let gyro_weight = if gyro_rows.is_empty() {
            DMatrix::zeros(0, 0)
        } else {
            let na_active = active.len() - gyro_rows.len();
            let cov = q.covariance();
            let ng = gyro_rows.len();
            let block = cov.view((na_active, na_active), (ng, ng)).into_owned();
            Cholesky::new(block)
                .ok_or(Error::NotPositiveDefinite("gyro noise block"))?
                .inverse()
        };

        Ok(Self {
            geom: geom.clone(),
            active,
            h,
            wls_gain,
            p,
            gyro_rows,
            gyro_weight,
        })
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geom
    }

    /// Indices of active channels in the full stacked vector.
    pub fn active_channels(&self) -> &[usize] {
        &self.active
    }

    pub fn used_channel_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.geom.n_channels()];
        for &c in &self.active {
            mask[c] = true;
        }
        mask
    }

    pub fn h_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// `P = Q⁻¹ − Q⁻¹H(HᵀQ⁻¹H)⁻¹HᵀQ⁻¹` over the active channels.
    pub fn projection(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Picks the active entries out of a full-length vector.
    pub fn select(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.active.len(), self.active.iter().map(|&c| full[c]))
    }

    pub fn h(&self, omega: &Vector3<f64>) -> DVector<f64> {
        self.select(&h_full(omega, &self.geom))
    }

    pub fn jacobian(&self, omega: &Vector3<f64>) -> DMatrix<f64> {
        jacobian_h(omega, &self.geom).select_rows(self.active.iter())
    }

    /// Weighted least-squares `φ̂(ω)` for active-channel data `y`.
    pub fn wls_phi(&self, omega: &Vector3<f64>, y: &DVector<f64>) -> Vector6<f64> {
        let phi = &self.wls_gain * (y - self.h(omega));
        Vector6::from_column_slice(phi.as_slice())
    }

    /// `½‖y − h(ω)‖²_P`.
    pub fn cost(&self, omega: &Vector3<f64>, y: &DVector<f64>) -> f64 {
        let r = y - self.h(omega);
        0.5 * r.dot(&(&self.p * &r))
    }

    /// Weighted least-squares angular velocity from the active gyro rows.
    ///
    /// Returns the estimate and which axes had at least one active channel;
    /// components of axes without data are zero.
    pub fn gyro_wls(&self, y: &DVector<f64>) -> (Vector3<f64>, [bool; 3]) {
        let mut available = [false; 3];
        for &(_, axis) in &self.gyro_rows {
            available[axis] = true;
        }
        let axes: Vec<usize> = (0..3).filter(|&a| available[a]).collect();
        let mut omega = Vector3::zeros();
        if axes.is_empty() {
            return (omega, available);
        }
        let ng = self.gyro_rows.len();
        let c = DMatrix::from_fn(ng, axes.len(), |r, k| {
            if self.gyro_rows[r].1 == axes[k] {
                1.0
            } else {
                0.0
            }
        });
        let yg = DVector::from_iterator(ng, self.gyro_rows.iter().map(|&(row, _)| y[row]));
        let wc = &self.gyro_weight * &c;
        let normal = c.transpose() * &wc;
        let rhs = wc.transpose() * yg;
        let sol = Cholesky::new(normal)
            .expect("gyro normal matrix is diagonal-dominant for available axes")
            .solve(&rhs);
        for (k, &a) in axes.iter().enumerate() {
            omega[a] = sol[k];
        }
        (omega, available)
    }

    /// Gauss-Newton on the concentrated cost with a step-halving safeguard.
    pub fn gauss_newton(
        &self,
        y: &DVector<f64>,
        init: Vector3<f64>,
        opts: &SolverOptions,
    ) -> Result<FusionResult> {
        let mut omega = init;
        let mut cost = self.cost(&omega, y);
        let mut converged = false;
        let mut iterations = 0;

        while iterations < opts.max_iterations {
            iterations += 1;
            let r = y - self.h(&omega);
            let j = self.jacobian(&omega);
            let pj = &self.p * &j;
            let normal: Matrix3<f64> = Matrix3::from_iterator((j.transpose() * &pj).iter().cloned());
            let grad: Vector3<f64> = Vector3::from_iterator((pj.transpose() * &r).iter().cloned());
            let step = Cholesky::new(normal)
                .ok_or(Error::SingularNormalMatrix)?
                .solve(&grad);
            if !step.iter().all(|v| v.is_finite()) {
                return Err(Error::SingularNormalMatrix);
            }

            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.line_search_halvings {
                let candidate = omega + step * scale;
                let c = self.cost(&candidate, y);
                if c <= cost {
                    accepted = Some((candidate, c));
                    break;
                }
                scale *= 0.5;
            }
            let Some((candidate, new_cost)) = accepted else {
                // No decrease representable along a descent direction: stationary.
                converged = true;
                break;
            };
            let step_norm = (step * scale).norm();
            let rel_change = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            omega = candidate;
            cost = new_cost;
            if step_norm <= opts.step_tolerance || (scale == 1.0 && rel_change <= opts.cost_tolerance)
            {
                converged = true;
                break;
            }
        }

        let phi = self.wls_phi(&omega, y);
        Ok(FusionResult {
            omega,
            omega_dot: phi.fixed_rows::<3>(0).into_owned(),
            specific_force: phi.fixed_rows::<3>(3).into_owned(),
            iterations,
            converged,
            neg_loglik: cost,
            used_channels: self.used_channel_mask(),
        })
    }
}

/// Weighted least-squares `φ̂(ω)` using the unsaturated channels of `y`.
pub fn wls_phi(
    omega: &Vector3<f64>,
    y: &Measurement,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
) -> Result<Vector6<f64>> {
    y.check_dims(geom)?;
    let model = FusionModel::with_mask(geom, noise, &y.saturated)?;
    Ok(model.wls_phi(omega, &model.select(&y.stacked())))
}

/// Projection matrix `P` over all channels.
pub fn projection_p(geom: &ArrayGeometry, noise: &NoiseModel) -> Result<DMatrix<f64>> {
    Ok(FusionModel::new(geom, noise)?.p)
}

/// `½‖y − h(ω)‖²_P` for a full-length stacked measurement.
pub fn concentrated_neg_loglik(
    omega: &Vector3<f64>,
    y: &DVector<f64>,
    p: &DMatrix<f64>,
    geom: &ArrayGeometry,
) -> Result<f64> {
    if y.len() != geom.n_channels() || p.nrows() != y.len() || p.ncols() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "concentrated likelihood inputs",
            expected: geom.n_channels(),
            found: y.len(),
        });
    }
    let r = y - h_full(omega, geom);
    Ok(0.5 * r.dot(&(p * &r)))
}

/// Gyro-only weighted least-squares initial angular velocity.
///
/// Fails with [`Error::AxisFullySaturated`] when some axis has no
/// unsaturated gyro channel.
pub fn init_omega(y: &Measurement, geom: &ArrayGeometry, noise: &NoiseModel) -> Result<Vector3<f64>> {
    y.check_dims(geom)?;
    if geom.n_gyro_triads() == 0 {
        return Err(Error::AxisFullySaturated([true; 3]));
    }
    let model = FusionModel::with_mask(geom, noise, &y.saturated)?;
    let (omega, available) = model.gyro_wls(&model.select(&y.stacked()));
    if available.iter().all(|&a| a) {
        Ok(omega)
    } else {
        Err(Error::AxisFullySaturated(available.map(|a| !a)))
    }
}

/// Gauss-Newton from `init` on the unsaturated channels of `y`.
pub fn gauss_newton_solve(
    y: &Measurement,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
    init: Vector3<f64>,
    opts: &SolverOptions,
) -> Result<FusionResult> {
    y.check_dims(geom)?;
    opts.validate()?;
    let model = FusionModel::with_mask(geom, noise, &y.saturated)?;
    model.gauss_newton(&model.select(&y.stacked()), init, opts)
}

/// Full fusion driver: prunes saturated gyro channels, initializes, and solves.
pub fn estimate(
    y: &Measurement,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
    opts: &SolverOptions,
    prior_omega: Option<Vector3<f64>>,
) -> Result<FusionResult> {
    Estimator::new(geom.clone(), noise.clone(), *opts)?.estimate(y, prior_omega)
}

/// Reusable estimator that caches one [`FusionModel`] per saturation pattern.
///
/// The cache is behind a read-write lock, so a shared estimator can be used
/// from several threads.
#[derive(Debug)]
pub struct Estimator {
    geom: ArrayGeometry,
    noise: NoiseModel,
    opts: SolverOptions,
    models: RwLock<HashMap<Vec<bool>, Arc<FusionModel>>>,
}

impl Estimator {
    pub fn new(geom: ArrayGeometry, noise: NoiseModel, opts: SolverOptions) -> Result<Self> {
        noise.check_dims(&geom)?;
        opts.validate()?;
        Ok(Self {
            geom,
            noise,
            opts,
            models: RwLock::new(HashMap::new()),
        })
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geom
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn model_for(&self, saturated: &[bool]) -> Result<Arc<FusionModel>> {
        if let Some(m) = self.models.read().expect("cache lock").get(saturated) {
            return Ok(Arc::clone(m));
        }
        let model = Arc::new(FusionModel::with_mask(&self.geom, &self.noise, saturated)?);
        self.models
            .write()
            .expect("cache lock")
            .insert(saturated.to_vec(), Arc::clone(&model));
        Ok(model)
    }

    /// Same result as [`init_omega`], using the cached model.
    pub fn gyro_average(&self, y: &Measurement) -> Result<Vector3<f64>> {
        y.check_dims(&self.geom)?;
        if self.geom.n_gyro_triads() == 0 {
            return Err(Error::AxisFullySaturated([true; 3]));
        }
        let model = self.model_for(&y.saturated)?;
        let (omega, available) = model.gyro_wls(&model.select(&y.stacked()));
        if available.iter().all(|&a| a) {
            Ok(omega)
        } else {
            Err(Error::AxisFullySaturated(available.map(|a| !a)))
        }
    }

    pub fn estimate(&self, y: &Measurement, prior_omega: Option<Vector3<f64>>) -> Result<FusionResult> {
        y.check_dims(&self.geom)?;
        if self.geom.n_gyro_triads() == 0 {
            return Err(Error::Unidentifiable(check_identifiability(&self.geom).reason));
        }
        let model = self.model_for(&y.saturated)?;
        let ya = model.select(&y.stacked());
        let (gyro_omega, available) = model.gyro_wls(&ya);
        if available.iter().all(|&a| a) {
            return model.gauss_newton(&ya, gyro_omega, &self.opts);
        }
        self.estimate_saturated(y, &model, &ya, gyro_omega, available, prior_omega)
    }

    /// Multi-start search used when at least one axis has only clipped gyro readings.
    fn estimate_saturated(
        &self,
        y: &Measurement,
        model: &FusionModel,
        ya: &DVector<f64>,
        gyro_omega: Vector3<f64>,
        available: [bool; 3],
        prior_omega: Option<Vector3<f64>>,
    ) -> Result<FusionResult> {
        let signs = y.gyro_signs();
        let gamma = self.geom.gyro_saturation();

        let mut seeds = Vec::with_capacity(SATURATED_GRID_SEEDS + 2);
        if let Some(prior) = prior_omega {
            seeds.push(prior);
        }
        if check_identifiability(&self.geom).tensor_capable {
            if let Ok(t) = tensor::tensor_estimate(&y.accel, &self.geom, signs) {
                let mut seed = t.omega_signed;
                for a in 0..3 {
                    if available[a] {
                        seed[a] = gyro_omega[a];
                    }
                }
                seeds.push(seed);
            }
        }
        for k in 0..SATURATED_GRID_SEEDS {
            let speed = gamma * 10f64.powf(k as f64 / (SATURATED_GRID_SEEDS - 1) as f64);
            let mut seed = gyro_omega;
            for a in 0..3 {
                if !available[a] {
                    seed[a] = if signs[a] < 0 { -speed } else { speed };
                }
            }
            seeds.push(seed);
        }

        let sign_ok = |w: &Vector3<f64>| {
            (0..3).all(|a| available[a] || signs[a] == 0 || w[a] * f64::from(signs[a]) > 0.0)
        };
        let mut best: Option<FusionResult> = None;
        let mut best_any: Option<FusionResult> = None;
        for seed in seeds {
            let Ok(res) = model.gauss_newton(ya, seed, &self.opts) else {
                continue;
            };
            let better = |cur: &Option<FusionResult>| {
                cur.as_ref().map_or(true, |b| res.neg_loglik < b.neg_loglik)
            };
            if sign_ok(&res.omega) && better(&best) {
                best = Some(res.clone());
            }
            if better(&best_any) {
                best_any = Some(res);
            }
        }
        match (best, best_any) {
            (Some(res), _) => Ok(res),
            (None, Some(mut res)) => {
                res.converged = false;
                Ok(res)
            }
            (None, None) => Err(Error::SingularNormalMatrix),
        }
    }
}
