//! Fisher information and Cramér-Rao bounds for `θ = [ω; ω̇; s]`.
//!
//! The general bound inverts `ΦᵀQ⁻¹Φ` with `Φ = [J_h H]`. Closed forms for
//! centered planar square grids with i.i.d. noise are provided alongside, and
//! the saturated-gyro bound is available both as a model without gyro rows
//! and as the per-axis `σ_ω → ∞` limit.

use std::io::Write;

use nalgebra::{DMatrix, Matrix3, SMatrix, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_g, build_h, ArrayGeometry};
use crate::signal::{jacobian_h, NoiseModel};
use crate::units::rad_to_deg;

pub type Matrix9 = SMatrix<f64, 9, 9>;

/// Relative eigenvalue floor below which an information matrix counts as singular.
const SINGULAR_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrbRegime {
    Full,
    /// Every gyroscope channel removed; equivalent to `σ_ω → ∞`.
    GyroSaturated,
}

/// 9×9 Fisher information over `[ω, ω̇, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub matrix: Matrix9,
}

impl FisherInfo {
    fn block(&self, r: usize, c: usize) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(3 * r, 3 * c).into_owned()
    }

    /// `I_11`, the (ω, ω) block.
    pub fn omega_block(&self) -> Matrix3<f64> {
        self.block(0, 0)
    }

    /// `I_12`, the (ω, ω̇) block.
    pub fn omega_omega_dot_block(&self) -> Matrix3<f64> {
        self.block(0, 1)
    }

    /// `I_22`, the (ω̇, ω̇) block.
    pub fn omega_dot_block(&self) -> Matrix3<f64> {
        self.block(1, 1)
    }

    pub fn omega_specific_force_block(&self) -> Matrix3<f64> {
        self.block(0, 2)
    }

    pub fn omega_dot_specific_force_block(&self) -> Matrix3<f64> {
        self.block(1, 2)
    }

    pub fn specific_force_block(&self) -> Matrix3<f64> {
        self.block(2, 2)
    }

    /// Information on ω after eliminating `φ = [ω̇; s]`:
    /// `I_ωω − I_ωφ I_φφ⁻¹ I_φω`.
    pub fn omega_schur(&self) -> Result<Matrix3<f64>> {
        let i11 = self.omega_block();
        let i1p = self.matrix.fixed_view::<3, 6>(0, 3).into_owned();
        let ipp = self.matrix.fixed_view::<6, 6>(3, 3).into_owned();
        let chol = ipp.cholesky().ok_or(Error::UnboundedCrb)?;
        let s = i11 - i1p * chol.solve(&i1p.transpose());
        Ok((s + s.transpose()) * 0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrbReport {
    pub crb_omega: Matrix3<f64>,
    pub crb_omega_dot: Matrix3<f64>,
    pub crb_s: Matrix3<f64>,
    pub regime: CrbRegime,
    pub inverse: Matrix9,
}

fn fisher_from(phi: &DMatrix<f64>, noise: &NoiseModel) -> FisherInfo {
    let qinv_phi = noise.solve(phi);
    let fim = phi.transpose() * qinv_phi;
    let fim = (&fim + fim.transpose()) * 0.5;
    FisherInfo {
        matrix: Matrix9::from_iterator(fim.iter().cloned()),
    }
}

fn design(omega: &Vector3<f64>, geom: &ArrayGeometry) -> DMatrix<f64> {
    let j = jacobian_h(omega, geom);
    let h = build_h(geom);
    let mut phi = DMatrix::zeros(geom.n_channels(), 9);
    phi.view_mut((0, 0), (geom.n_channels(), 3)).copy_from(&j);
    phi.view_mut((0, 3), (geom.n_channels(), 6)).copy_from(&h);
    phi
}

/// `ΦᵀQ⁻¹Φ` over all channels.
pub fn fisher_info(omega: &Vector3<f64>, geom: &ArrayGeometry, noise: &NoiseModel) -> Result<FisherInfo> {
    noise.check_dims(geom)?;
    Ok(fisher_from(&design(omega, geom), noise))
}

/// Fisher information for the given regime; the saturated regime keeps only
/// the accelerometer rows of `Φ` and `Q`.
pub fn fisher_info_regime(
    omega: &Vector3<f64>,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
    regime: CrbRegime,
) -> Result<FisherInfo> {
    match regime {
        CrbRegime::Full => fisher_info(omega, geom, noise),
        CrbRegime::GyroSaturated => {
            noise.check_dims(geom)?;
            let na = geom.n_accel_channels();
            let rows: Vec<usize> = (0..na).collect();
            let phi = design(omega, geom).select_rows(rows.iter());
            Ok(fisher_from(&phi, &noise.select(&rows)?))
        }
    }
}

fn is_singular(m: &Matrix9) -> bool {
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let max = eig.amax();
    max == 0.0 || eig.min() <= SINGULAR_TOLERANCE * max
}

pub fn crb_full(
    omega: &Vector3<f64>,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
    regime: CrbRegime,
) -> Result<CrbReport> {
    let fim = fisher_info_regime(omega, geom, noise, regime)?;
    if is_singular(&fim.matrix) {
        return Err(Error::UnboundedCrb);
    }
    let inv = fim.matrix.cholesky().ok_or(Error::UnboundedCrb)?.inverse();
    let inv = (inv + inv.transpose()) * 0.5;
    Ok(CrbReport {
        crb_omega: inv.fixed_view::<3, 3>(0, 0).into_owned(),
        crb_omega_dot: inv.fixed_view::<3, 3>(3, 3).into_owned(),
        crb_s: inv.fixed_view::<3, 3>(6, 6).into_owned(),
        regime,
        inverse: inv,
    })
}

/// Per-axis ω variance bound in the limit `σ_ω → ∞`.
///
/// Gyro information enters as `S + εI` with `S` the accelerometer-only
/// Schur complement; as `ε → 0` axis `j` stays finite iff `e_j` is
/// orthogonal to the null space of `S`. Unbounded axes are `+∞`.
pub fn saturated_omega_variances(
    omega: &Vector3<f64>,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
) -> Result<Vector3<f64>> {
    let s = fisher_info_regime(omega, geom, noise, CrbRegime::GyroSaturated)?.omega_schur()?;
    let eig = SymmetricEigen::new(s);
    let max = eig.eigenvalues.amax();
    let mut out = Vector3::zeros();
    for j in 0..3 {
        let mut finite = 0.0;
        let mut null_weight = 0.0;
        for k in 0..3 {
            let w = eig.eigenvectors[(j, k)].powi(2);
            let lambda = eig.eigenvalues[k];
            if max == 0.0 || lambda <= 1e-12 * max {
                null_weight += w;
            } else {
                finite += w / lambda;
            }
        }
        out[j] = if null_weight > 1e-9 { f64::INFINITY } else { finite };
    }
    Ok(out)
}

fn check_square_params(alpha: f64, n_accel: usize) -> Result<()> {
    let side = (n_accel as f64).sqrt().round() as usize;
    if side < 2 || side * side != n_accel {
        return Err(Error::InvalidParameter(format!(
            "square-grid closed form needs N_s in {{4, 9, 16, ...}}, got {n_accel}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter("grid spacing must be positive".into()));
    }
    Ok(())
}

/// The rotation-dependent matrix of the square-grid angular-velocity information.
pub fn square_grid_rate_matrix(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (x, y, z) = (omega.x, omega.y, omega.z);
    Matrix3::new(
        2.0 * x * x + y * y, x * y, 2.0 * x * z, //
        x * y, 2.0 * y * y + x * x, 2.0 * y * z, //
        2.0 * x * z, 2.0 * y * z, 4.0 * z * z,
    )
}

/// `α²(N_s² − N_s) / (6σ_s²)`.
fn square_grid_gain(alpha: f64, n_accel: usize, accel_variance: f64) -> f64 {
    let n = n_accel as f64;
    alpha * alpha * (n * n - n) / (6.0 * accel_variance)
}

/// Closed-form angular-velocity information `I_ω` for a centered planar
/// square grid with spacing `alpha` and i.i.d. noise.
pub fn square_grid_omega_information(
    omega: &Vector3<f64>,
    alpha: f64,
    n_accel: usize,
    n_gyro: usize,
    accel_variance: f64,
    gyro_variance: f64,
) -> Result<Matrix3<f64>> {
    check_square_params(alpha, n_accel)?;
    if !(accel_variance > 0.0) || !(gyro_variance > 0.0) {
        return Err(Error::InvalidParameter("variances must be positive".into()));
    }
    Ok(Matrix3::identity() * (n_gyro as f64 / gyro_variance)
        + square_grid_rate_matrix(omega) * square_grid_gain(alpha, n_accel, accel_variance))
}

/// Closed-form `I_ω⁻¹` for a square grid whose gyros are all saturated.
///
/// The diagonal is the exact closed form; off-diagonal entries come from
/// numerically inverting the rate matrix.
pub fn square_grid_saturated_omega_crb(
    omega: &Vector3<f64>,
    alpha: f64,
    n_accel: usize,
    accel_variance: f64,
) -> Result<Matrix3<f64>> {
    check_square_params(alpha, n_accel)?;
    if !(accel_variance > 0.0) {
        return Err(Error::InvalidParameter("variance must be positive".into()));
    }
    let planar = omega.x * omega.x + omega.y * omega.y;
    if !(planar > 0.0) || omega.z == 0.0 || !omega.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(
            "saturated closed form needs ω_x² + ω_y² > 0 and ω_z ≠ 0".into(),
        ));
    }
    let scale = 1.0 / square_grid_gain(alpha, n_accel, accel_variance);
    let mut inv = square_grid_rate_matrix(omega)
        .try_inverse()
        .ok_or(Error::UnboundedCrb)?
        * scale;
    inv[(0, 0)] = scale / planar;
    inv[(1, 1)] = scale / planar;
    inv[(2, 2)] = scale / (2.0 * omega.z * omega.z);
    Ok(inv)
}

/// Angular-acceleration bound in linear motion, `12σ_s²/(α²(N_s²−N_s)) diag(1, 1, ½)`.
pub fn square_grid_linear_motion_omega_dot_crb(
    alpha: f64,
    n_accel: usize,
    accel_variance: f64,
) -> Result<Matrix3<f64>> {
    check_square_params(alpha, n_accel)?;
    let n = n_accel as f64;
    let scale = 12.0 * accel_variance / (alpha * alpha * (n * n - n));
    Ok(Matrix3::from_diagonal(&Vector3::new(scale, scale, 0.5 * scale)))
}

fn require_symmetric_iid(geom: &ArrayGeometry, noise: &NoiseModel) -> Result<(f64, f64)> {
    noise.check_dims(geom)?;
    let (vs, vw) = noise.iid_variances().ok_or_else(|| {
        Error::InvalidParameter("closed form needs i.i.d. block noise".into())
    })?;
    let scale = geom
        .accel_positions()
        .iter()
        .map(|r| r.amax())
        .fold(0.0, f64::max);
    if geom.position_sum().amax() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidParameter(
            "closed form needs positions summing to zero".into(),
        ));
    }
    Ok((vs, vw))
}

/// Square-grid closed form evaluated on an explicit geometry, after checking
/// that it is a centered grid and the noise is i.i.d.
pub fn square_grid_omega_information_for(
    omega: &Vector3<f64>,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
) -> Result<Matrix3<f64>> {
    let (vs, vw) = require_symmetric_iid(geom, noise)?;
    let (side, spacing) = geom.square_grid_params().ok_or_else(|| {
        Error::InvalidParameter("geometry is not a centered planar square grid".into())
    })?;
    square_grid_omega_information(omega, spacing, side * side, geom.n_gyro_triads(), vs, vw)
}

/// `Γ_11 = J_hsᵀJ_hs`, `Γ_12 = J_hsᵀG`, `Γ_22 = GᵀG`.
pub fn gamma_blocks(
    omega: &Vector3<f64>,
    geom: &ArrayGeometry,
) -> Result<(Matrix3<f64>, Matrix3<f64>, Matrix3<f64>)> {
    let g = build_g(geom)?;
    let na = geom.n_accel_channels();
    let jhs = jacobian_h(omega, geom).rows(0, na).into_owned();
    let to3 = |m: DMatrix<f64>| Matrix3::from_iterator(m.iter().cloned());
    Ok((
        to3(jhs.transpose() * &jhs),
        to3(jhs.transpose() * &g),
        to3(g.transpose() * &g),
    ))
}

/// Angular-acceleration bound `I_ω̇⁻¹` for a centered array with i.i.d. noise, with
/// `I_ω̇ = Γ_22/σ_s² − Γ_12ᵀ (N_ω/σ_ω² I + Γ_11/σ_s²)⁻¹ Γ_12 / σ_s⁴`.
pub fn crb_omega_dot(omega: &Vector3<f64>, geom: &ArrayGeometry, noise: &NoiseModel) -> Result<Matrix3<f64>> {
    let (vs, vw) = require_symmetric_iid(geom, noise)?;
    let (g11, g12, g22) = gamma_blocks(omega, geom)?;
    let inner = Matrix3::identity() * (geom.n_gyro_triads() as f64 / vw) + g11 / vs;
    let inner_inv = inner.cholesky().ok_or(Error::UnboundedCrb)?.inverse();
    let info = g22 / vs - g12.transpose() * inner_inv * g12 / (vs * vs);
    let info = (info + info.transpose()) * 0.5;
    let inv = info.cholesky().ok_or(Error::UnboundedCrb)?.inverse();
    Ok((inv + inv.transpose()) * 0.5)
}

/// One row of a CRB sweep, in deg/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrbSweepRow {
    pub speed_dps: f64,
    pub axis: char,
    pub sqrt_crb_full: f64,
    pub sqrt_crb_saturated: f64,
}

/// Per-axis `√CRB` of ω along `direction` for each speed (rad/s).
pub fn crb_sweep(
    geom: &ArrayGeometry,
    noise: &NoiseModel,
    direction: &Vector3<f64>,
    speeds: &[f64],
) -> Result<Vec<CrbSweepRow>> {
    let dir = direction
        .try_normalize(0.0)
        .ok_or_else(|| Error::InvalidParameter("direction must be nonzero".into()))?;
    let mut rows = Vec::with_capacity(3 * speeds.len());
    for &speed in speeds {
        let (full, sat) = omega_bounds(&(dir * speed), geom, noise)?;
        for (a, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
            rows.push(CrbSweepRow {
                speed_dps: rad_to_deg(speed),
                axis,
                sqrt_crb_full: rad_to_deg(full[a].sqrt()),
                sqrt_crb_saturated: rad_to_deg(sat[a].sqrt()),
            });
        }
    }
    Ok(rows)
}

/// Diagonal ω variances, full model and saturated limit. Unbounded entries are `+∞`.
pub fn omega_bounds(
    omega: &Vector3<f64>,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let full = match crb_full(omega, geom, noise, CrbRegime::Full) {
        Ok(r) => r.crb_omega.diagonal(),
        Err(Error::UnboundedCrb) => Vector3::repeat(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let sat = match saturated_omega_variances(omega, geom, noise) {
        Ok(v) => v,
        Err(Error::UnboundedCrb) => Vector3::repeat(f64::INFINITY),
        Err(e) => return Err(e),
    };
    Ok((full, sat))
}

pub fn write_crb_csv<W: Write>(rows: &[CrbSweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["speed_dps", "axis", "sqrt_crb_full", "sqrt_crb_saturated"])?;
    for r in rows {
        w.write_record([
            r.speed_dps.to_string(),
            r.axis.to_string(),
            r.sqrt_crb_full.to_string(),
            r.sqrt_crb_saturated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
