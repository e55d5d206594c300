//! Array configuration, the constant model matrices and identifiability.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{deg_to_rad, rad_to_deg};

/// Relative singular-value threshold used for every numerical rank decision.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Skew-symmetric matrix with `skew(v) * b == v.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Numerical rank: number of singular values above `RANK_TOLERANCE` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * max).count()
}

/// Accelerometer triad positions, gyroscope triad count and gyro dynamic range.
///
/// Positions are in meters in the array frame and are used exactly as given;
/// no re-centering happens. The saturation limit is in rad/s.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    accel_positions: Vec<Vector3<f64>>,
    n_gyro_triads: usize,
    gyro_saturation: f64,
}

impl ArrayGeometry {
    pub fn new(
        accel_positions: Vec<Vector3<f64>>,
        n_gyro_triads: usize,
        gyro_saturation: f64,
    ) -> Result<Self> {
        if accel_positions.is_empty() && n_gyro_triads == 0 {
            return Err(Error::InvalidGeometry("array has no sensors".into()));
        }
        if let Some(i) = accel_positions
            .iter()
            .position(|r| r.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::InvalidGeometry(format!(
                "accelerometer triad {i} has a non-finite position"
            )));
        }
        if !(gyro_saturation > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "gyro saturation must be positive, got {gyro_saturation}"
            )));
        }
        Ok(Self {
            accel_positions,
            n_gyro_triads,
            gyro_saturation,
        })
    }

    /// Planar `side x side` grid in the xy-plane with the given spacing,
    /// centered on the origin.
    pub fn square_grid(
        side: usize,
        spacing: f64,
        n_gyro_triads: usize,
        gyro_saturation: f64,
    ) -> Result<Self> {
        if side == 0 || !(spacing > 0.0) {
            return Err(Error::InvalidGeometry(
                "square grid needs side >= 1 and positive spacing".into(),
            ));
        }
        let offset = 0.5 * (side as f64 - 1.0);
        let mut positions = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                positions.push(Vector3::new(
                    (col as f64 - offset) * spacing,
                    (row as f64 - offset) * spacing,
                    0.0,
                ));
            }
        }
        Self::new(positions, n_gyro_triads, gyro_saturation)
    }

    pub fn accel_positions(&self) -> &[Vector3<f64>] {
        &self.accel_positions
    }

    pub fn n_accel_triads(&self) -> usize {
        self.accel_positions.len()
    }

    pub fn n_gyro_triads(&self) -> usize {
        self.n_gyro_triads
    }

    /// Gyro dynamic range in rad/s.
    pub fn gyro_saturation(&self) -> f64 {
        self.gyro_saturation
    }

    pub fn n_accel_channels(&self) -> usize {
        3 * self.accel_positions.len()
    }

    pub fn n_gyro_channels(&self) -> usize {
        3 * self.n_gyro_triads
    }

    /// Total number of scalar channels, 3(N_s + N_ω).
    pub fn n_channels(&self) -> usize {
        self.n_accel_channels() + self.n_gyro_channels()
    }

    /// Same sensor counts with different accelerometer positions.
    pub fn with_positions(&self, accel_positions: Vec<Vector3<f64>>) -> Result<Self> {
        if accel_positions.len() != self.accel_positions.len() {
            return Err(Error::DimensionMismatch {
                what: "accelerometer positions",
                expected: self.accel_positions.len(),
                found: accel_positions.len(),
            });
        }
        Self::new(accel_positions, self.n_gyro_triads, self.gyro_saturation)
    }

    /// Geometry expressed in a frame rotated by `rotation`.
    pub fn rotated(&self, rotation: &Rotation3<f64>) -> Self {
        Self {
            accel_positions: self.accel_positions.iter().map(|r| rotation * r).collect(),
            n_gyro_triads: self.n_gyro_triads,
            gyro_saturation: self.gyro_saturation,
        }
    }

    /// Dimension of the affine span of the accelerometer positions.
    pub fn position_span_dim(&self) -> usize {
        let Some(first) = self.accel_positions.first() else {
            return 0;
        };
        let diffs = DMatrix::from_fn(3, self.accel_positions.len(), |r, c| {
            self.accel_positions[c][r] - first[r]
        });
        numerical_rank(&diffs)
    }

    /// Sum of accelerometer positions; zero for arrays centered on the origin.
    pub fn position_sum(&self) -> Vector3<f64> {
        self.accel_positions
            .iter()
            .fold(Vector3::zeros(), |acc, r| acc + r)
    }

    /// Detects a planar square grid centered on the origin and returns
    /// `(side, spacing)` if the positions form one (in any order).
    pub fn square_grid_params(&self) -> Option<(usize, f64)> {
        let n = self.accel_positions.len();
        let side = (n as f64).sqrt().round() as usize;
        if side < 2 || side * side != n {
            return None;
        }
        let xs: Vec<f64> = self.accel_positions.iter().map(|r| r.x).collect();
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let spacing = (max - min) / (side as f64 - 1.0);
        if !(spacing > 0.0) {
            return None;
        }
        let reference = Self::square_grid(side, spacing, 0, 1.0).ok()?;
        let tol = 1e-9 * spacing;
        let mut used = vec![false; n];
        for r in reference.accel_positions() {
            let hit = self
                .accel_positions
                .iter()
                .enumerate()
                .find(|(i, p)| !used[*i] && (*p - r).amax() <= tol)?;
            used[hit.0] = true;
        }
        Some((side, spacing))
    }
}

/// Euler-force design matrix: block `i` is `-skew(r_i)`.
pub fn build_g(geom: &ArrayGeometry) -> Result<DMatrix<f64>> {
    if geom.n_accel_triads() == 0 {
        return Err(Error::InvalidGeometry(
            "G needs at least one accelerometer triad".into(),
        ));
    }
    let mut g = DMatrix::zeros(geom.n_accel_channels(), 3);
    for (i, r) in geom.accel_positions().iter().enumerate() {
        g.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&(-skew(r)));
    }
    Ok(g)
}

/// Linear-parameter design matrix for `φ = [ω̇; s]`:
/// accelerometer rows `[G | 1 ⊗ I_3]`, gyroscope rows zero.
pub fn build_h(geom: &ArrayGeometry) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(geom.n_channels(), 6);
    for (i, r) in geom.accel_positions().iter().enumerate() {
        h.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&(-skew(r)));
        h.fixed_view_mut::<3, 3>(3 * i, 3)
            .copy_from(&Matrix3::identity());
    }
    h
}

/// Diagnostic attached to an identifiability verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifiabilityReason {
    Identifiable,
    /// No gyroscopes: the centrifugal term is even in ω, so ±ω are indistinguishable.
    SignAmbiguity,
    TooFewAccelerometers,
    CollinearAccelerometers,
}

impl fmt::Display for IdentifiabilityReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            IdentifiabilityReason::Identifiable => "identifiable",
            IdentifiabilityReason::SignAmbiguity => {
                "no gyroscope triads; angular velocity sign is ambiguous"
            }
            IdentifiabilityReason::TooFewAccelerometers => {
                "fewer than three accelerometer triads"
            }
            IdentifiabilityReason::CollinearAccelerometers => {
                "accelerometer positions are collinear and do not span a plane"
            }
        };
        f.write_str(msg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityVerdict {
    pub identifiable: bool,
    pub h_rank: usize,
    pub position_span_dim: usize,
    pub reason: IdentifiabilityReason,
    /// Whether the positions support the angular-acceleration tensor method
    /// (at least four triads spanning 3D).
    pub tensor_capable: bool,
}

pub fn check_identifiability(geom: &ArrayGeometry) -> IdentifiabilityVerdict {
    let h_rank = numerical_rank(&build_h(geom));
    let span = geom.position_span_dim();
    let reason = if geom.n_gyro_triads() == 0 {
        IdentifiabilityReason::SignAmbiguity
    } else if geom.n_accel_triads() < 3 {
        IdentifiabilityReason::TooFewAccelerometers
    } else if span < 2 {
        IdentifiabilityReason::CollinearAccelerometers
    } else {
        IdentifiabilityReason::Identifiable
    };
    IdentifiabilityVerdict {
        identifiable: reason == IdentifiabilityReason::Identifiable,
        h_rank,
        position_span_dim: span,
        reason,
        tensor_capable: geom.n_accel_triads() >= 4 && span == 3,
    }
}

/// On-disk geometry description. Saturation is stored in deg/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryFile {
    pub accel_positions_m: Vec<[f64; 3]>,
    pub n_gyro_triads: usize,
    pub gyro_saturation_dps: f64,
}

impl GeometryFile {
    pub fn into_geometry(self) -> Result<ArrayGeometry> {
        ArrayGeometry::try_from(&self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ArrayGeometry> {
        let text = std::fs::read_to_string(path)?;
        let file: GeometryFile = serde_json::from_str(&text)?;
        file.into_geometry()
    }
}

impl TryFrom<&GeometryFile> for ArrayGeometry {
    type Error = Error;

    fn try_from(file: &GeometryFile) -> Result<Self> {
        ArrayGeometry::new(
            file.accel_positions_m
                .iter()
                .map(|p| Vector3::new(p[0], p[1], p[2]))
                .collect(),
            file.n_gyro_triads,
            deg_to_rad(file.gyro_saturation_dps),
        )
    }
}

impl From<&ArrayGeometry> for GeometryFile {
    fn from(geom: &ArrayGeometry) -> Self {
        GeometryFile {
            accel_positions_m: geom
                .accel_positions()
                .iter()
                .map(|r| [r.x, r.y, r.z])
                .collect(),
            n_gyro_triads: geom.n_gyro_triads(),
            gyro_saturation_dps: rad_to_deg(geom.gyro_saturation()),
        }
    }
}

/// Reference arrays used by the bundled simulation scenarios.
pub mod presets {
    use super::*;

    /// Gyro dynamic range of the reference arrays, deg/s.
    pub const SATURATION_DPS: f64 = 2000.0;

    /// Four IMUs on the corners of a 1 cm square centered on the origin.
    pub fn planar_square() -> ArrayGeometry {
        ArrayGeometry::square_grid(2, 0.01, 4, deg_to_rad(SATURATION_DPS))
            .expect("valid preset")
    }

    /// Six IMUs on the face centers of a 1 cm cube centered on the origin.
    pub fn cube() -> ArrayGeometry {
        let h = 0.005;
        let positions = vec![
            Vector3::new(h, 0.0, 0.0),
            Vector3::new(-h, 0.0, 0.0),
            Vector3::new(0.0, h, 0.0),
            Vector3::new(0.0, -h, 0.0),
            Vector3::new(0.0, 0.0, h),
            Vector3::new(0.0, 0.0, -h),
        ];
        ArrayGeometry::new(positions, 6, deg_to_rad(SATURATION_DPS)).expect("valid preset")
    }

    /// 32 IMUs: a 4x4 grid with 7 mm pitch on each side of a 1.6 mm board.
    pub fn dual_side_board() -> ArrayGeometry {
        let pitch = 0.007;
        let half_thickness = 0.0008;
        let mut positions = Vec::with_capacity(32);
        for z in [half_thickness, -half_thickness] {
            for row in 0..4 {
                for col in 0..4 {
                    positions.push(Vector3::new(
                        (col as f64 - 1.5) * pitch,
                        (row as f64 - 1.5) * pitch,
                        z,
                    ));
                }
            }
        }
        ArrayGeometry::new(positions, 32, deg_to_rad(SATURATION_DPS)).expect("valid preset")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v3() -> impl Strategy<Value = Vector3<f64>> {
        (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        let s = skew(&Vector3::new(1.0, 2.0, 3.0));
        let expected = Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0);
        assert_eq!(s, expected);
        assert_eq!(skew(&Vector3::x()) * Vector3::y(), Vector3::z());
    }

    proptest! {
        #[test]
        fn skew_is_antisymmetric(v in v3()) {
            let s = skew(&v);
            prop_assert_eq!(s.transpose(), -s);
            prop_assert_eq!(s.diagonal(), Vector3::zeros());
        }

        #[test]
        fn skew_matches_cross_product(a in v3(), b in v3()) {
            prop_assert!((skew(&a) * b - a.cross(&b)).amax() <= 1e-12);
            prop_assert!((skew(&a) * b + skew(&b) * a).amax() <= 1e-12);
        }
    }

    #[test]
    fn g_for_single_triad_at_origin_is_zero() {
        let geom = ArrayGeometry::new(vec![Vector3::zeros()], 1, 1.0).unwrap();
        assert_eq!(build_g(&geom).unwrap(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn g_stacks_negative_skews() {
        let a = 0.02;
        let geom =
            ArrayGeometry::new(vec![Vector3::zeros(), Vector3::new(a, 0.0, 0.0)], 1, 1.0).unwrap();
        let g = build_g(&geom).unwrap();
        assert_eq!(g.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::zeros());
        assert_eq!(
            g.fixed_view::<3, 3>(3, 0).into_owned(),
            -skew(&Vector3::new(a, 0.0, 0.0))
        );
    }

    #[test]
    fn g_times_angular_acceleration_is_euler_term() {
        let r = Vector3::new(0.01, 0.0, 0.0);
        let wdot = Vector3::new(0.0, 0.0, 1.0);
        let geom = ArrayGeometry::new(vec![r], 1, 1.0).unwrap();
        let g = build_g(&geom).unwrap();
        let out = &g * nalgebra::DVector::from_column_slice(wdot.as_slice());
        // Euler term ω̇ × r computed directly.
        let euler = wdot.cross(&r);
        assert!((out[0] - euler.x).abs() < 1e-15);
        assert!((out[1] - euler.y).abs() < 1e-15);
        assert!((out[2] - euler.z).abs() < 1e-15);
        assert!((out[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn g_requires_accelerometers() {
        let geom = ArrayGeometry::new(vec![], 2, 1.0).unwrap();
        assert!(matches!(build_g(&geom), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn h_blocks_for_single_imu_at_origin() {
        let geom = ArrayGeometry::new(vec![Vector3::zeros()], 1, 1.0).unwrap();
        let h = build_h(&geom);
        assert_eq!(h.shape(), (6, 6));
        let mut expected = DMatrix::zeros(6, 6);
        expected
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&Matrix3::identity());
        assert_eq!(h, expected);
    }

    #[test]
    fn h_rank_examples() {
        assert_eq!(numerical_rank(&build_h(&presets::planar_square())), 6);
        let collinear = ArrayGeometry::new(
            vec![
                Vector3::new(-0.01, 0.0, 0.0),
                Vector3::zeros(),
                Vector3::new(0.01, 0.0, 0.0),
            ],
            1,
            1.0,
        )
        .unwrap();
        assert_eq!(numerical_rank(&build_h(&collinear)), 5);
    }

    #[test]
    fn single_off_origin_triad_g_has_rank_two_with_position_null_vector() {
        let r = Vector3::new(0.3, -0.2, 0.5);
        let geom = ArrayGeometry::new(vec![r], 1, 1.0).unwrap();
        let g = build_g(&geom).unwrap();
        assert_eq!(numerical_rank(&g), 2);
        let null = &g * nalgebra::DVector::from_column_slice(r.as_slice());
        assert!(null.amax() < 1e-15);
    }

    #[test]
    fn identifiability_examples() {
        let no_gyro = ArrayGeometry::square_grid(2, 0.01, 0, 1.0).unwrap();
        let v = check_identifiability(&no_gyro);
        assert!(!v.identifiable);
        assert_eq!(v.reason, IdentifiabilityReason::SignAmbiguity);

        let collinear = ArrayGeometry::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.01, 0.01, 0.0),
                Vector3::new(0.03, 0.03, 0.0),
            ],
            1,
            1.0,
        )
        .unwrap();
        let v = check_identifiability(&collinear);
        assert!(!v.identifiable);
        assert_eq!(v.reason, IdentifiabilityReason::CollinearAccelerometers);
        assert_eq!(v.position_span_dim, 1);

        let v = check_identifiability(&presets::planar_square());
        assert!(v.identifiable);
        assert_eq!(v.h_rank, 6);
        assert_eq!(v.position_span_dim, 2);
        assert!(!v.tensor_capable);

        let v = check_identifiability(&presets::cube());
        assert!(v.identifiable);
        assert!(v.tensor_capable);

        let two = ArrayGeometry::new(vec![Vector3::zeros(), Vector3::x()], 1, 1.0).unwrap();
        assert_eq!(
            check_identifiability(&two).reason,
            IdentifiabilityReason::TooFewAccelerometers
        );
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(ArrayGeometry::new(vec![], 0, 1.0).is_err());
        assert!(ArrayGeometry::new(vec![Vector3::new(f64::NAN, 0.0, 0.0)], 1, 1.0).is_err());
        assert!(ArrayGeometry::new(vec![Vector3::zeros()], 1, 0.0).is_err());
        // Co-located triads are fine.
        assert!(ArrayGeometry::new(vec![Vector3::zeros(), Vector3::zeros()], 1, 1.0).is_ok());
    }

    #[test]
    fn square_grid_detection() {
        let g = ArrayGeometry::square_grid(3, 0.02, 1, 1.0).unwrap();
        let (side, spacing) = g.square_grid_params().unwrap();
        assert_eq!(side, 3);
        assert!((spacing - 0.02).abs() < 1e-15);
        assert!(presets::cube().square_grid_params().is_none());
        let shifted = g
            .with_positions(
                g.accel_positions()
                    .iter()
                    .map(|r| r + Vector3::new(0.001, 0.0, 0.0))
                    .collect(),
            )
            .unwrap();
        assert!(shifted.square_grid_params().is_none());
    }

    #[test]
    fn geometry_file_converts_saturation_units() {
        let json = r#"{"accel_positions_m": [[0.005,0.005,0],[-0.005,0.005,0],[0.005,-0.005,0]],
                       "n_gyro_triads": 2, "gyro_saturation_dps": 2000}"#;
        let file: GeometryFile = serde_json::from_str(json).unwrap();
        let geom = file.clone().into_geometry().unwrap();
        assert!((geom.gyro_saturation() - 2000f64.to_radians()).abs() < 1e-12);
        let back = GeometryFile::from(&geom);
        assert!((back.gyro_saturation_dps - 2000.0).abs() < 1e-9);
        assert_eq!(back.accel_positions_m, file.accel_positions_m);
    }

    fn random_geometry(span: usize, n: usize, seed: u64) -> ArrayGeometry {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let base = Vector3::new(rng.random_range(-0.05..0.05), 0.0, 0.01);
        let dirs = [
            Vector3::new(rng.random_range(-1.0..1.0), 1.0, 0.3),
            Vector3::new(1.0, rng.random_range(-1.0..1.0), -0.2),
            Vector3::new(0.1, 0.4, 1.0),
        ];
        let positions = (0..n)
            .map(|_| {
                let mut p = base;
                for d in dirs.iter().take(span) {
                    p += d * rng.random_range(-0.05..0.05);
                }
                p
            })
            .collect();
        ArrayGeometry::new(positions, 1, 1.0).unwrap()
    }

    #[test]
    fn h_rank_tracks_accelerometer_conditions_on_random_geometries() {
        for seed in 0..30 {
            for span in 1..=3 {
                let geom = random_geometry(span, 5, seed);
                let verdict = check_identifiability(&geom);
                assert_eq!(verdict.position_span_dim, span);
                let rank6 = numerical_rank(&build_h(&geom)) == 6;
                assert_eq!(rank6, verdict.identifiable, "seed {seed} span {span}");
            }
        }
    }
}
