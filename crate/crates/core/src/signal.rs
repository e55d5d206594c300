//! Array signal model: `y = h(ω) + Hφ + n`, its Jacobian, and synthetic data.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Rotation3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_h, skew, ArrayGeometry};

/// Angular velocity, angular acceleration and specific force at the array origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionState {
    pub omega: Vector3<f64>,
    pub omega_dot: Vector3<f64>,
    pub specific_force: Vector3<f64>,
}

impl MotionState {
    pub fn new(omega: Vector3<f64>, omega_dot: Vector3<f64>, specific_force: Vector3<f64>) -> Self {
        Self {
            omega,
            omega_dot,
            specific_force,
        }
    }

    /// Linear parameters `φ = [ω̇; s]`.
    pub fn phi(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega_dot.x,
            self.omega_dot.y,
            self.omega_dot.z,
            self.specific_force.x,
            self.specific_force.y,
            self.specific_force.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.omega
            .iter()
            .chain(self.omega_dot.iter())
            .chain(self.specific_force.iter())
            .all(|v| v.is_finite())
    }

    pub fn rotated(&self, rotation: &Rotation3<f64>) -> Self {
        Self {
            omega: rotation * self.omega,
            omega_dot: rotation * self.omega_dot,
            specific_force: rotation * self.specific_force,
        }
    }
}

/// Measurement-error covariance over all `3(N_s + N_ω)` channels,
/// accelerometer channels first.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    n_accel_channels: usize,
    iid: Option<(f64, f64)>,
}

impl NoiseModel {
    /// `Q = σ_s² I ⊕ σ_ω² I`.
    pub fn iid(
        n_accel_triads: usize,
        n_gyro_triads: usize,
        accel_variance: f64,
        gyro_variance: f64,
    ) -> Result<Self> {
        if !(accel_variance > 0.0) || !(gyro_variance > 0.0) {
            return Err(Error::InvalidParameter(
                "noise variances must be positive".into(),
            ));
        }
        let na = 3 * n_accel_triads;
        let n = na + 3 * n_gyro_triads;
        let diag = DVector::from_fn(n, |i, _| {
            if i < na {
                accel_variance
            } else {
                gyro_variance
            }
        });
        let mut model = Self::full(DMatrix::from_diagonal(&diag), na)?;
        model.iid = Some((accel_variance, gyro_variance));
        Ok(model)
    }

    pub fn iid_for(geom: &ArrayGeometry, accel_variance: f64, gyro_variance: f64) -> Result<Self> {
        Self::iid(
            geom.n_accel_triads(),
            geom.n_gyro_triads(),
            accel_variance,
            gyro_variance,
        )
    }

    /// Arbitrary covariance; the first `n_accel_channels` rows belong to accelerometers.
    pub fn full(covariance: DMatrix<f64>, n_accel_channels: usize) -> Result<Self> {
        if !covariance.is_square() {
            return Err(Error::NotPositiveDefinite("noise covariance"));
        }
        if n_accel_channels > covariance.nrows() {
            return Err(Error::DimensionMismatch {
                what: "accelerometer channel count",
                expected: covariance.nrows(),
                found: n_accel_channels,
            });
        }
        let scale = covariance.amax().max(f64::MIN_POSITIVE);
        if (&covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite("noise covariance"));
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or(Error::NotPositiveDefinite("noise covariance"))?;
        Ok(Self {
            covariance,
            chol,
            n_accel_channels,
            iid: None,
        })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn n_accel_channels(&self) -> usize {
        self.n_accel_channels
    }

    /// Lower Cholesky factor `L` with `Q = L Lᵀ`.
    pub fn cholesky_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `(σ_s², σ_ω²)` when the model was built with [`NoiseModel::iid`].
    pub fn iid_variances(&self) -> Option<(f64, f64)> {
        self.iid
    }

    /// Gyroscope block `Q_ω`.
    pub fn gyro_block(&self) -> DMatrix<f64> {
        let na = self.n_accel_channels;
        let ng = self.dim() - na;
        self.covariance.view((na, na), (ng, ng)).into_owned()
    }

    /// Keeps only the listed channels (rows and columns), in the order given.
    pub fn select(&self, channels: &[usize]) -> Result<Self> {
        let n = channels.len();
        let sub = DMatrix::from_fn(n, n, |r, c| self.covariance[(channels[r], channels[c])]);
        let na = channels
            .iter()
            .filter(|&&c| c < self.n_accel_channels)
            .count();
        let mut model = Self::full(sub, na)?;
        model.iid = self.iid;
        Ok(model)
    }

    pub fn check_dims(&self, geom: &ArrayGeometry) -> Result<()> {
        if self.dim() != geom.n_channels() {
            return Err(Error::DimensionMismatch {
                what: "noise covariance",
                expected: geom.n_channels(),
                found: self.dim(),
            });
        }
        if self.n_accel_channels != geom.n_accel_channels() {
            return Err(Error::DimensionMismatch {
                what: "accelerometer block of noise covariance",
                expected: geom.n_accel_channels(),
                found: self.n_accel_channels,
            });
        }
        Ok(())
    }
}

/// Stacked accelerometer and gyroscope readings with per-axis saturation flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub accel: DVector<f64>,
    pub gyro: DVector<f64>,
    pub saturated: Vec<bool>,
}

impl Measurement {
    pub fn new(accel: DVector<f64>, gyro: DVector<f64>, saturated: Vec<bool>) -> Result<Self> {
        if accel.len() % 3 != 0 || gyro.len() % 3 != 0 {
            return Err(Error::Parse(
                "channel counts must be multiples of three".into(),
            ));
        }
        if saturated.len() != gyro.len() {
            return Err(Error::DimensionMismatch {
                what: "saturation mask",
                expected: gyro.len(),
                found: saturated.len(),
            });
        }
        Ok(Self {
            accel,
            gyro,
            saturated,
        })
    }

    /// Noise-free forward model, with gyro clipping applied.
    pub fn noiseless(state: &MotionState, geom: &ArrayGeometry) -> Self {
        let y = h_full(&state.omega, geom) + build_h(geom) * DVector::from_column_slice(state.phi().as_slice());
        let mut m = Self::split(&y, geom);
        m.clip(geom.gyro_saturation());
        m
    }

    fn split(y: &DVector<f64>, geom: &ArrayGeometry) -> Self {
        let na = geom.n_accel_channels();
        let ng = geom.n_gyro_channels();
        Self {
            accel: y.rows(0, na).into_owned(),
            gyro: y.rows(na, ng).into_owned(),
            saturated: vec![false; ng],
        }
    }

    fn clip(&mut self, limit: f64) {
        for (v, flag) in self.gyro.iter_mut().zip(self.saturated.iter_mut()) {
            if v.abs() >= limit {
                *v = limit.copysign(*v);
                *flag = true;
            }
        }
    }

    pub fn n_accel_triads(&self) -> usize {
        self.accel.len() / 3
    }

    pub fn n_gyro_triads(&self) -> usize {
        self.gyro.len() / 3
    }

    /// Full stacked vector `[y_s; y_ω]`.
    pub fn stacked(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.accel.len() + self.gyro.len());
        y.rows_mut(0, self.accel.len()).copy_from(&self.accel);
        y.rows_mut(self.accel.len(), self.gyro.len())
            .copy_from(&self.gyro);
        y
    }

    pub fn n_saturated(&self) -> usize {
        self.saturated.iter().filter(|&&s| s).count()
    }

    /// Per-axis saturated-channel counts.
    pub fn saturated_per_axis(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for (j, &s) in self.saturated.iter().enumerate() {
            if s {
                counts[j % 3] += 1;
            }
        }
        counts
    }

    /// Sign of the summed gyro readings on each axis: -1, 0 or +1.
    pub fn gyro_signs(&self) -> [i8; 3] {
        let mut sums = [0.0; 3];
        for (j, v) in self.gyro.iter().enumerate() {
            sums[j % 3] += v;
        }
        sums.map(|s| {
            if s > 0.0 {
                1
            } else if s < 0.0 {
                -1
            } else {
                0
            }
        })
    }

    pub fn check_dims(&self, geom: &ArrayGeometry) -> Result<()> {
        if self.accel.len() != geom.n_accel_channels() {
            return Err(Error::DimensionMismatch {
                what: "accelerometer readings",
                expected: geom.n_accel_channels(),
                found: self.accel.len(),
            });
        }
        if self.gyro.len() != geom.n_gyro_channels() {
            return Err(Error::DimensionMismatch {
                what: "gyroscope readings",
                expected: geom.n_gyro_channels(),
                found: self.gyro.len(),
            });
        }
        Ok(())
    }

    /// Writes the one-row-per-channel CSV format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["channel_id", "kind", "triad_index", "axis", "value_SI", "saturated"])?;
        let axes = ["x", "y", "z"];
        let mut id = 0usize;
        for (j, v) in self.accel.iter().enumerate() {
            w.write_record([
                id.to_string(),
                "accel".into(),
                (j / 3).to_string(),
                axes[j % 3].into(),
                v.to_string(),
                "0".into(),
            ])?;
            id += 1;
        }
        for (j, v) in self.gyro.iter().enumerate() {
            w.write_record([
                id.to_string(),
                "gyro".into(),
                (j / 3).to_string(),
                axes[j % 3].into(),
                v.to_string(),
                if self.saturated[j] { "1" } else { "0" }.into(),
            ])?;
            id += 1;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            #[allow(dead_code)]
            channel_id: usize,
            kind: String,
            triad_index: usize,
            axis: String,
            #[serde(rename = "value_SI")]
            value: f64,
            saturated: u8,
        }
        let mut accel: Vec<Option<f64>> = Vec::new();
        let mut gyro: Vec<Option<(f64, bool)>> = Vec::new();
        let mut rdr = csv::Reader::from_reader(reader);
        for row in rdr.deserialize() {
            let row: Row = row?;
            let axis = match row.axis.as_str() {
                "x" | "0" => 0,
                "y" | "1" => 1,
                "z" | "2" => 2,
                other => return Err(Error::Parse(format!("unknown axis `{other}`"))),
            };
            let idx = 3 * row.triad_index + axis;
            match row.kind.as_str() {
                "accel" => {
                    if accel.len() <= idx {
                        accel.resize(idx + 1, None);
                    }
                    if accel[idx].replace(row.value).is_some() {
                        return Err(Error::Parse(format!("duplicate accel channel {idx}")));
                    }
                }
                "gyro" => {
                    if gyro.len() <= idx {
                        gyro.resize(idx + 1, None);
                    }
                    if gyro[idx].replace((row.value, row.saturated != 0)).is_some() {
                        return Err(Error::Parse(format!("duplicate gyro channel {idx}")));
                    }
                }
                other => return Err(Error::Parse(format!("unknown channel kind `{other}`"))),
            }
        }
        let missing = || Error::Parse("measurement file has missing channels".into());
        let accel: Vec<f64> = accel.into_iter().collect::<Option<_>>().ok_or_else(missing)?;
        let gyro: Vec<(f64, bool)> = gyro.into_iter().collect::<Option<_>>().ok_or_else(missing)?;
        Measurement::new(
            DVector::from_vec(accel),
            DVector::from_iterator(gyro.len(), gyro.iter().map(|g| g.0)),
            gyro.iter().map(|g| g.1).collect(),
        )
    }
}

/// Centrifugal part of the accelerometer model: block `i` is `Ω_ω² r_i`.
pub fn h_s(omega: &Vector3<f64>, geom: &ArrayGeometry) -> DVector<f64> {
    let w2 = skew(omega) * skew(omega);
    let mut out = DVector::zeros(geom.n_accel_channels());
    for (i, r) in geom.accel_positions().iter().enumerate() {
        out.fixed_rows_mut::<3>(3 * i).copy_from(&(w2 * r));
    }
    out
}

/// Nonlinear part `h(ω) = [h_s(ω); 1_{N_ω} ⊗ ω]`.
pub fn h_full(omega: &Vector3<f64>, geom: &ArrayGeometry) -> DVector<f64> {
    let na = geom.n_accel_channels();
    let mut out = DVector::zeros(geom.n_channels());
    out.rows_mut(0, na).copy_from(&h_s(omega, geom));
    for k in 0..geom.n_gyro_triads() {
        out.fixed_rows_mut::<3>(na + 3 * k).copy_from(omega);
    }
    out
}

/// `A(u, v) = Ω_uᵀ Ω_v + Ω_{v×u}`, the derivative of `Ω_ω² v` with respect to ω at `ω = u`.
pub fn jacobian_a(u: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    skew(u).transpose() * skew(v) + skew(&v.cross(u))
}

/// Jacobian of `h(ω)`: stacked `A(ω, r_i)` blocks, then `1_{N_ω} ⊗ I_3`.
pub fn jacobian_h(omega: &Vector3<f64>, geom: &ArrayGeometry) -> DMatrix<f64> {
    let na = geom.n_accel_channels();
    let mut j = DMatrix::zeros(geom.n_channels(), 3);
    for (i, r) in geom.accel_positions().iter().enumerate() {
        j.fixed_view_mut::<3, 3>(3 * i, 0)
            .copy_from(&jacobian_a(omega, r));
    }
    for k in 0..geom.n_gyro_triads() {
        j.fixed_view_mut::<3, 3>(na + 3 * k, 0)
            .copy_from(&Matrix3::identity());
    }
    j
}

/// Key of an independent random stream: `(master_seed, run_index)`.
///
/// Each key maps to its own ChaCha8 stream, so run `i` draws the same numbers
/// whatever order runs are executed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub master_seed: u64,
    pub run_index: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, run_index: u64) -> Self {
        Self {
            master_seed,
            run_index,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.run_index);
        rng
    }

    /// A second stream for the same run, independent of [`StreamKey::rng`].
    pub fn aux_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed ^ 0x9E37_79B9_7F4A_7C15);
        rng.set_stream(self.run_index);
        rng
    }
}

/// Draws `n ~ N(0, Q)` as `L z` with `z` standard normal.
pub fn sample_noise<R: Rng + ?Sized>(noise: &NoiseModel, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(noise.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    noise.cholesky_l() * z
}

/// Simulates one array reading: forward model plus Gaussian noise, then
/// clips every gyro axis at `±γ` and flags it saturated.
pub fn simulate_measurement<R: Rng + ?Sized>(
    state: &MotionState,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<Measurement> {
    noise.check_dims(geom)?;
    let phi = DVector::from_column_slice(state.phi().as_slice());
    let y = h_full(&state.omega, geom) + build_h(geom) * phi + sample_noise(noise, rng);
    let mut m = Measurement::split(&y, geom);
    m.clip(geom.gyro_saturation());
    Ok(m)
}

/// [`simulate_measurement`] driven by the stream for `key`.
pub fn simulate_keyed(
    state: &MotionState,
    geom: &ArrayGeometry,
    noise: &NoiseModel,
    key: StreamKey,
) -> Result<Measurement> {
    simulate_measurement(state, geom, noise, &mut key.rng())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::presets;
    use rand::Rng;
    use proptest::prelude::*;

    fn v3(scale: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-scale..scale, -scale..scale, -scale..scale).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    fn random_geometry(seed: u64) -> ArrayGeometry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..7);
        let positions = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                )
            })
            .collect();
        ArrayGeometry::new(positions, rng.random_range(0..4), 30.0).unwrap()
    }

    #[test]
    fn h_s_zero_rate_is_zero() {
        let geom = presets::cube();
        assert_eq!(h_s(&Vector3::zeros(), &geom), DVector::zeros(18));
    }

    #[test]
    fn h_s_about_z_axis() {
        let (w, x, y) = (3.0, 0.2, -0.7);
        let geom = ArrayGeometry::new(vec![Vector3::new(x, y, 0.0)], 0, 1.0).unwrap();
        let omega = Vector3::new(0.0, 0.0, w);
        let out = h_s(&omega, &geom);
        // ω × (ω × r) by explicit cross products.
        let r = Vector3::new(x, y, 0.0);
        let brute = omega.cross(&omega.cross(&r));
        assert!((out[0] - brute.x).abs() < 1e-14);
        assert!((out[1] - brute.y).abs() < 1e-14);
        assert!((out[2] - brute.z).abs() < 1e-14);
        assert!((out[0] + w * w * x).abs() < 1e-14);
        assert!((out[1] + w * w * y).abs() < 1e-14);
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn h_full_gyro_replication() {
        let geom = ArrayGeometry::new(vec![], 2, 10.0).unwrap();
        let out = h_full(&Vector3::new(1.0, 2.0, 3.0), &geom);
        assert_eq!(out.as_slice(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(
            h_full(&Vector3::zeros(), &presets::planar_square()),
            DVector::zeros(24)
        );
    }

    #[test]
    fn jacobian_a_examples() {
        assert_eq!(jacobian_a(&Vector3::zeros(), &Vector3::x()), Matrix3::zeros());
        // d/dω [ω(ω·v) − v|ω|²] = (ω·v)I + ωvᵀ − 2vωᵀ, at ω = e_z, v = e_x.
        let expected = Matrix3::new(0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        assert_eq!(jacobian_a(&Vector3::z(), &Vector3::x()), expected);
    }

    fn fd_jacobian(f: impl Fn(&Vector3<f64>) -> DVector<f64>, at: &Vector3<f64>, n: usize) -> DMatrix<f64> {
        let step = 1e-6;
        let mut j = DMatrix::zeros(n, 3);
        for k in 0..3 {
            let mut plus = *at;
            let mut minus = *at;
            plus[k] += step;
            minus[k] -= step;
            let d = (f(&plus) - f(&minus)) / (2.0 * step);
            j.set_column(k, &d);
        }
        j
    }

    proptest! {
        #[test]
        fn jacobian_a_matches_finite_differences(u in v3(5.0), v in v3(1.0)) {
            let f = |w: &Vector3<f64>| {
                let s = skew(w);
                DVector::from_column_slice((s * s * v).as_slice())
            };
            let fd = fd_jacobian(f, &u, 3);
            let a = jacobian_a(&u, &v);
            let err = (DMatrix::from_column_slice(3, 3, a.as_slice()) - fd).amax();
            prop_assert!(err <= 1e-6, "err {err}");
        }

        #[test]
        fn centrifugal_term_is_even(w in v3(50.0)) {
            let geom = presets::planar_square();
            prop_assert_eq!(h_s(&w, &geom), h_s(&(-w), &geom));
        }

        #[test]
        fn model_matches_termwise_rigid_body_equation(
            w in v3(20.0), wd in v3(100.0), s in v3(30.0), r in v3(0.1)
        ) {
            let geom = ArrayGeometry::new(vec![r, -r * 0.5], 1, 1e6).unwrap();
            let state = MotionState::new(w, wd, s);
            let y = h_full(&w, &geom)
                + build_h(&geom) * DVector::from_column_slice(state.phi().as_slice());
            for (i, ri) in geom.accel_positions().iter().enumerate() {
                let brute = s + w.cross(&w.cross(ri)) + wd.cross(ri);
                for k in 0..3 {
                    prop_assert!((y[3 * i + k] - brute[k]).abs() <= 1e-10 * (1.0 + brute.amax()));
                }
            }
            let gyro = y.rows(6, 3);
            prop_assert_eq!(gyro.into_owned(), DVector::from_column_slice(w.as_slice()));
        }
    }

    #[test]
    fn jacobian_h_at_zero_rate() {
        let geom = presets::planar_square();
        let j = jacobian_h(&Vector3::zeros(), &geom);
        assert_eq!(j.rows(0, 12).into_owned(), DMatrix::zeros(12, 3));
        for k in 0..4 {
            assert_eq!(
                j.fixed_view::<3, 3>(12 + 3 * k, 0).into_owned(),
                Matrix3::identity()
            );
        }
    }

    #[test]
    fn jacobian_h_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..100 {
            let geom = random_geometry(seed);
            let w = Vector3::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
            );
            let fd = fd_jacobian(|x| h_full(x, &geom), &w, geom.n_channels());
            let j = jacobian_h(&w, &geom);
            let err = (&j - fd).amax();
            assert!(err <= 1e-6 * (1.0 + j.amax()), "seed {seed}: {err}");
        }
    }

    #[test]
    fn jacobian_h_full_rank_off_plane() {
        let geom = ArrayGeometry::square_grid(2, 0.01, 0, 1.0).unwrap();
        let j = jacobian_h(&Vector3::new(1.0, 2.0, 3.0), &geom);
        assert_eq!(crate::geometry::numerical_rank(&j), 3);
    }

    #[test]
    fn tiny_noise_reproduces_forward_model() {
        let geom = presets::planar_square();
        let noise = NoiseModel::iid_for(&geom, 1e-60, 1e-60).unwrap();
        let state = MotionState::new(
            Vector3::new(1.0, -2.0, 0.5),
            Vector3::new(10.0, 0.0, -3.0),
            Vector3::new(0.1, 0.2, 9.81),
        );
        let m = simulate_keyed(&state, &geom, &noise, StreamKey::new(1, 0)).unwrap();
        let clean = Measurement::noiseless(&state, &geom);
        assert!((m.stacked() - clean.stacked()).amax() <= 1e-9);
    }

    #[test]
    fn seeded_simulation_is_deterministic() {
        let geom = presets::cube();
        let noise = NoiseModel::iid_for(&geom, 0.01, 1e-4).unwrap();
        let state = MotionState::new(Vector3::new(3.0, 1.0, 0.0), Vector3::zeros(), Vector3::z());
        let key = StreamKey::new(42, 17);
        let a = simulate_keyed(&state, &geom, &noise, key).unwrap();
        let b = simulate_keyed(&state, &geom, &noise, key).unwrap();
        assert_eq!(a, b);
        let c = simulate_keyed(&state, &geom, &noise, StreamKey::new(42, 18)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gyro_clipping_flags_x_axis() {
        let geom = presets::planar_square();
        let noise = NoiseModel::iid_for(&geom, 0.01, 1f64.to_radians().powi(2)).unwrap();
        let state = MotionState::new(
            Vector3::new(2100f64.to_radians(), 0.0, 0.0),
            Vector3::zeros(),
            Vector3::zeros(),
        );
        let m = simulate_keyed(&state, &geom, &noise, StreamKey::new(3, 0)).unwrap();
        let gamma = geom.gyro_saturation();
        for k in 0..4 {
            assert!(m.saturated[3 * k]);
            assert_eq!(m.gyro[3 * k], gamma);
            assert!(!m.saturated[3 * k + 1]);
            assert!(!m.saturated[3 * k + 2]);
        }
        assert_eq!(m.saturated_per_axis(), [4, 0, 0]);
        assert_eq!(m.gyro_signs()[0], 1);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let geom = presets::planar_square();
        let noise = NoiseModel::iid(3, 4, 0.01, 0.01).unwrap();
        let state = MotionState::new(Vector3::zeros(), Vector3::zeros(), Vector3::zeros());
        assert!(matches!(
            simulate_keyed(&state, &geom, &noise, StreamKey::new(0, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn noise_sample_covariance_matches_q() {
        let q = DMatrix::from_row_slice(
            6,
            6,
            &[
                0.04, 0.01, 0.0, 0.0, 0.005, 0.0, //
                0.01, 0.03, 0.002, 0.0, 0.0, 0.0, //
                0.0, 0.002, 0.02, 0.0, 0.0, 0.001, //
                0.0, 0.0, 0.0, 0.01, 0.0, 0.0, //
                0.005, 0.0, 0.0, 0.0, 0.02, 0.0, //
                0.0, 0.0, 0.001, 0.0, 0.0, 0.015,
            ],
        );
        let noise = NoiseModel::full(q.clone(), 3).unwrap();
        let mut rng = StreamKey::new(11, 0).rng();
        let n = 100_000;
        let mut acc = DMatrix::zeros(6, 6);
        for _ in 0..n {
            let e = sample_noise(&noise, &mut rng);
            acc += &e * e.transpose();
        }
        acc /= n as f64;
        let rel = (acc - &q).norm() / q.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn noise_model_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(NoiseModel::full(bad, 1).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(NoiseModel::full(asym, 1).is_err());
        assert!(NoiseModel::iid(1, 1, 0.0, 1.0).is_err());
        let iid = NoiseModel::iid(2, 1, 0.5, 2.0).unwrap();
        assert_eq!(iid.iid_variances(), Some((0.5, 2.0)));
        assert_eq!(iid.gyro_block(), DMatrix::identity(3, 3) * 2.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let geom = presets::planar_square();
        let noise = NoiseModel::iid_for(&geom, 0.01, 1f64.to_radians().powi(2)).unwrap();
        let state = MotionState::new(
            Vector3::new(2100f64.to_radians(), -0.3, 1.0),
            Vector3::new(5.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 9.81),
        );
        let m = simulate_keyed(&state, &geom, &noise, StreamKey::new(9, 2)).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("channel_id,kind,triad_index,axis,value_SI,saturated\n"));
        assert_eq!(text.lines().count(), 1 + 24);
        let back = Measurement::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn csv_rejects_missing_channels() {
        let text = "channel_id,kind,triad_index,axis,value_SI,saturated\n0,accel,0,x,1.0,0\n1,accel,0,z,1.0,0\n";
        assert!(Measurement::read_csv(text.as_bytes()).is_err());
    }
}
