//! Angle unit handling at file and command-line boundaries.
//!
//! Everything inside the library is SI (rad, rad/s, rad/s²). Degrees only
//! appear when reading or writing user-facing files.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[inline]
pub fn deg_to_rad(deg: f64) -> f64 {
    deg.to_radians()
}

#[inline]
pub fn rad_to_deg(rad: f64) -> f64 {
    rad.to_degrees()
}

/// Unit used for angular quantities in external files and flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    #[default]
    Deg,
    Rad,
}

impl AngleUnit {
    /// Converts a value expressed in this unit to radians.
    pub fn to_si(self, value: f64) -> f64 {
        match self {
            AngleUnit::Deg => deg_to_rad(value),
            AngleUnit::Rad => value,
        }
    }

    /// Converts a value in radians to this unit.
    pub fn from_si(self, value: f64) -> f64 {
        match self {
            AngleUnit::Deg => rad_to_deg(value),
            AngleUnit::Rad => value,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            AngleUnit::Deg => "deg",
            AngleUnit::Rad => "rad",
        }
    }
}

impl fmt::Display for AngleUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.suffix())
    }
}

impl FromStr for AngleUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "deg" | "degree" | "degrees" => Ok(AngleUnit::Deg),
            "rad" | "radian" | "radians" => Ok(AngleUnit::Rad),
            other => Err(Error::Parse(format!("unknown angle unit `{other}`"))),
        }
    }
}
