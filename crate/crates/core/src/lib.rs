//! Maximum-likelihood fusion for arrays of accelerometer and gyroscope triads.
//!
//! The crate covers array geometry and identifiability, the rigid-body signal
//! model, the Gauss-Newton estimator with gyro-saturation handling, Cramér-Rao
//! bounds, an angular-acceleration-tensor baseline, and a Monte Carlo harness.

pub mod crb;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod montecarlo;
pub mod signal;
pub mod tensor;
pub mod units;

pub use crb::{crb_full, fisher_info, CrbRegime, CrbReport, FisherInfo};
pub use error::{Error, Result};
pub use estimator::{Estimator, FusionResult, SolverOptions};
pub use geometry::{check_identifiability, ArrayGeometry, GeometryFile, IdentifiabilityVerdict};
pub use signal::{Measurement, MotionState, NoiseModel, StreamKey};
pub use tensor::{tensor_estimate, TensorEstimate};
