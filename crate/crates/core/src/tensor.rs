//! Angular-acceleration tensor baseline.
//!
//! Every accelerometer triad satisfies `s_i = s + W r_i` with
//! `W = Ω_ω² + Ω_ω̇`. Ignoring that `W` has only six degrees of freedom,
//! `X = [s W]` is found by ordinary least squares; ω̇ comes from the
//! antisymmetric part of `W` and ω (up to sign) from the symmetric part.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{numerical_rank, ArrayGeometry};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFit {
    pub specific_force: Vector3<f64>,
    pub w: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngularVelocityFromTensor {
    /// Estimated `ω ωᵀ`.
    pub outer_product: Matrix3<f64>,
    /// Per-axis magnitudes, from the clamped diagonal of `outer_product`.
    pub omega_abs: Vector3<f64>,
    pub omega_signed: Vector3<f64>,
    /// Set when the anchoring gyro sign was zero and `+` was assumed.
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEstimate {
    pub specific_force: Vector3<f64>,
    pub w: Matrix3<f64>,
    pub omega_dot: Vector3<f64>,
    pub omega_abs: Vector3<f64>,
    pub omega_signed: Vector3<f64>,
    pub outer_product: Matrix3<f64>,
    pub low_confidence: bool,
}

/// Least-squares `X̂ = Y Rᵀ (R Rᵀ)⁻¹` with `R = [1 … 1; r_1 … r_N]`.
pub fn tensor_ls(accel: &DVector<f64>, geom: &ArrayGeometry) -> Result<TensorFit> {
    let n = geom.n_accel_triads();
    if accel.len() != 3 * n {
        return Err(Error::DimensionMismatch {
            what: "accelerometer readings",
            expected: 3 * n,
            found: accel.len(),
        });
    }
    let r = DMatrix::from_fn(4, n, |row, col| {
        if row == 0 {
            1.0
        } else {
            geom.accel_positions()[col][row - 1]
        }
    });
    let rank = numerical_rank(&r);
    if rank < 4 {
        return Err(Error::TensorRankDeficient(rank));
    }
    let y = DMatrix::from_column_slice(3, n, accel.as_slice());
    let rrt: Matrix4<f64> = Matrix4::from_iterator((&r * r.transpose()).iter().cloned());
    let yrt: Matrix3x4<f64> = Matrix3x4::from_iterator((&y * r.transpose()).iter().cloned());
    let rrt_inv = rrt
        .cholesky()
        .ok_or(Error::TensorRankDeficient(rank))?
        .inverse();
    let x = yrt * rrt_inv;
    Ok(TensorFit {
        specific_force: x.column(0).into_owned(),
        w: x.fixed_view::<3, 3>(0, 1).into_owned(),
    })
}

/// Angular acceleration from the antisymmetric part of `W`.
///
/// The differences `w32 − w23`, `w13 − w31`, `w21 − w12` equal `2ω̇`
/// because `Ω_ω̇` enters both entries, so the result is halved.
pub fn extract_angular_acceleration(w: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(
        w[(2, 1)] - w[(1, 2)],
        w[(0, 2)] - w[(2, 0)],
        w[(1, 0)] - w[(0, 1)],
    )
}

/// Angular velocity from `ωωᵀ = ½(W + Wᵀ) − ¼ tr(W + Wᵀ) I`.
///
/// The sign of the largest-magnitude component comes from `gyro_signs`
/// (ties prefer x, then y, then z); the remaining signs follow from the
/// off-diagonal entries of `ωωᵀ` in that component's row.
pub fn extract_angular_velocity(w: &Matrix3<f64>, gyro_signs: [i8; 3]) -> AngularVelocityFromTensor {
    let sym = w + w.transpose();
    let outer = sym * 0.5 - Matrix3::identity() * (0.25 * sym.trace());
    let omega_abs = outer.diagonal().map(|d| d.max(0.0).sqrt());

    let mut anchor = 0;
    for a in 1..3 {
        if omega_abs[a] > omega_abs[anchor] {
            anchor = a;
        }
    }
    let low_confidence = gyro_signs[anchor] == 0;
    let anchor_sign = if gyro_signs[anchor] < 0 { -1.0 } else { 1.0 };
    let mut omega_signed = Vector3::zeros();
    for a in 0..3 {
        let relative = if a == anchor || outer[(anchor, a)] >= 0.0 {
            1.0
        } else {
            -1.0
        };
        omega_signed[a] = anchor_sign * relative * omega_abs[a];
    }
    AngularVelocityFromTensor {
        outer_product: outer,
        omega_abs,
        omega_signed,
        low_confidence,
    }
}

/// Full tensor pipeline on one set of accelerometer readings.
pub fn tensor_estimate(
    accel: &DVector<f64>,
    geom: &ArrayGeometry,
    gyro_signs: [i8; 3],
) -> Result<TensorEstimate> {
    let fit = tensor_ls(accel, geom)?;
    let omega_dot = extract_angular_acceleration(&fit.w);
    let vel = extract_angular_velocity(&fit.w, gyro_signs);
    Ok(TensorEstimate {
        specific_force: fit.specific_force,
        w: fit.w,
        omega_dot,
        omega_abs: vel.omega_abs,
        omega_signed: vel.omega_signed,
        outer_product: vel.outer_product,
        low_confidence: vel.low_confidence,
    })
}

/// Signs of a vector's components, for feeding true or gyro-derived signs.
pub fn signs_of(v: &Vector3<f64>) -> [i8; 3] {
    [0, 1, 2].map(|a| {
        if v[a] > 0.0 {
            1
        } else if v[a] < 0.0 {
            -1
        } else {
            0
        }
    })
}
