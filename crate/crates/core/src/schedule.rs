//! Noise schedules σ(t) on the unit interval.
//!
//! Each schedule exposes its value, the rate d[σ²]/dt that drives the
//! variance-exploding SDE, and the running integral ∫₀ᵗ σ² ds that enters the
//! variance-preserving marginal.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// σ² grows linearly from σ_min² to σ_max².
    Linear,
    /// σ grows geometrically from σ_min to σ_max.
    Exponential,
    /// σ follows a half cosine between σ_min and σ_max.
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [
        ScheduleKind::Linear,
        ScheduleKind::Exponential,
        ScheduleKind::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Exponential => "exponential",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "exponential" | "exp" => Ok(ScheduleKind::Exponential),
            "cosine" | "cos" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_SIGMA_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    sigma_min: f64,
    sigma_max: f64,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min.is_finite() && sigma_max.is_finite()) || sigma_min <= 0.0 {
            return Err(Error::Config(format!(
                "sigma bounds must be finite and positive, got ({sigma_min}, {sigma_max})"
            )));
        }
        if sigma_min >= sigma_max {
            return Err(Error::Config(format!(
                "sigma_min ({sigma_min}) must be below sigma_max ({sigma_max})"
            )));
        }
        Ok(Self {
            kind,
            sigma_min,
            sigma_max,
        })
    }

    /// Schedule with the default bounds σ_min = 0.01, σ_max = 1.0.
    pub fn with_defaults(kind: ScheduleKind) -> Self {
        Self {
            kind,
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    fn check(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!("schedule time {t} outside [0, 1]")))
        }
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        let (lo, hi) = (self.sigma_min, self.sigma_max);
        match self.kind {
            ScheduleKind::Linear => (lo * lo + t * (hi * hi - lo * lo)).sqrt(),
            ScheduleKind::Exponential => lo * (hi / lo).powf(t),
            ScheduleKind::Cosine => lo + (hi - lo) * (1.0 - (PI * t).cos()) / 2.0,
        }
    }

    /// d[σ(t)²]/dt.
    pub fn sigma_sq_rate(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        let (lo, hi) = (self.sigma_min, self.sigma_max);
        let rate = match self.kind {
            ScheduleKind::Linear => hi * hi - lo * lo,
            ScheduleKind::Exponential => {
                let s = self.sigma_unchecked(t);
                2.0 * self.log_ratio() * s * s
            }
            ScheduleKind::Cosine => {
                2.0 * self.sigma_unchecked(t) * (hi - lo) * (PI / 2.0) * (PI * t).sin()
            }
        };
        // sin(πt) dips a hair below zero at t = 1 in floating point.
        Ok(rate.max(0.0))
    }

    /// ∫₀ᵗ σ(s)² ds.
    pub fn sigma_sq_integral(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        let (lo, hi) = (self.sigma_min, self.sigma_max);
        let value = match self.kind {
            ScheduleKind::Linear => lo * lo * t + (hi * hi - lo * lo) * t * t / 2.0,
            ScheduleKind::Exponential => {
                let c = self.log_ratio();
                lo * lo * ((2.0 * c * t).exp() - 1.0) / (2.0 * c)
            }
            ScheduleKind::Cosine => {
                // σ = a − (b/2)·cos(πt) with a = lo + b/2, b = hi − lo.
                let b = hi - lo;
                let a = lo + b / 2.0;
                a * a * t - a * b * (PI * t).sin() / PI
                    + b * b / 4.0 * (t / 2.0 + (2.0 * PI * t).sin() / (4.0 * PI))
            }
        };
        Ok(value.max(0.0))
    }
}
