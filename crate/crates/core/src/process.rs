//! Forward diffusion processes and their reverse-time discretisation.
//!
//! `Gbm` is geometric Brownian motion on prices with drift μ_t = σ_t²/2; in
//! log-price space it is exactly the variance-exploding SDE, so the two kinds
//! share one code path here. The price-space view of a GBM state is available
//! through [`to_price_space`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Smallest diffusion time used by training and sampling.
pub const T_EPS: f64 = 1e-3;

/// Slack allowed when a reverse step lands exactly on `T_EPS`.
const STEP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Ve,
    Vp,
    Gbm,
}

impl ProcessKind {
    pub const ALL: [ProcessKind; 3] = [ProcessKind::Ve, ProcessKind::Vp, ProcessKind::Gbm];

    pub fn name(self) -> &'static str {
        match self {
            ProcessKind::Ve => "ve",
            ProcessKind::Vp => "vp",
            ProcessKind::Gbm => "gbm",
        }
    }
}

impl fmt::Display for ProcessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProcessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ve" => Ok(ProcessKind::Ve),
            "vp" => Ok(ProcessKind::Vp),
            "gbm" => Ok(ProcessKind::Gbm),
            other => Err(Error::Config(format!("unknown process `{other}`"))),
        }
    }
}

/// Isotropic Gaussian `N(mean, std² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianKernel {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let var = self.std * self.std;
        let sq: f64 = x
            .iter()
            .zip(&self.mean)
            .map(|(a, m)| (a - m) * (a - m))
            .sum();
        -0.5 * sq / var - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionProcess {
    kind: ProcessKind,
    schedule: NoiseSchedule,
    horizon: f64,
}

impl DiffusionProcess {
    pub fn new(kind: ProcessKind, schedule: NoiseSchedule, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            kind,
            schedule,
            horizon,
        })
    }

    /// Process on the unit horizon.
    pub fn unit(kind: ProcessKind, schedule: NoiseSchedule) -> Self {
        Self {
            kind,
            schedule,
            horizon: 1.0,
        }
    }

    pub fn kind(&self) -> ProcessKind {
        self.kind
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Map diffusion time onto the schedule's unit interval.
    fn unit_time(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok((t / self.horizon).min(1.0))
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.schedule.sigma(self.unit_time(t)?)
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        match self.kind {
            ProcessKind::Ve | ProcessKind::Gbm => {
                self.unit_time(t)?;
                Ok(vec![0.0; x.len()])
            }
            ProcessKind::Vp => {
                let s = self.sigma(t)?;
                let k = -0.5 * s * s;
                Ok(x.iter().map(|v| k * v).collect())
            }
        }
    }

    /// Scalar `g(t)` in `dx = f dt + g dW`.
    pub fn diffusion_coeff(&self, t: f64) -> Result<f64> {
        let u = self.unit_time(t)?;
        match self.kind {
            ProcessKind::Ve | ProcessKind::Gbm => {
                Ok((self.schedule.sigma_sq_rate(u)? / self.horizon).sqrt())
            }
            ProcessKind::Vp => self.schedule.sigma(u),
        }
    }

    /// `(a, s)` such that `x_t | x_0 ~ N(a·x_0, s² I)`.
    pub fn marginal_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        let u = self.unit_time(t)?;
        let (scale, std) = match self.kind {
            ProcessKind::Ve | ProcessKind::Gbm => (1.0, self.schedule.sigma(u)?),
            ProcessKind::Vp => {
                let integral = self.horizon * self.schedule.sigma_sq_integral(u)?;
                let alpha = (-integral).exp();
                (alpha.sqrt(), (-(-integral).exp_m1()).sqrt())
            }
        };
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Numeric(format!(
                "transition std {std} at t = {t} is not positive"
            )));
        }
        Ok((scale, std))
    }

    pub fn transition(&self, x0: &[f64], t: f64) -> Result<GaussianKernel> {
        let (scale, std) = self.marginal_coeffs(t)?;
        Ok(GaussianKernel {
            mean: x0.iter().map(|v| scale * v).collect(),
            std,
        })
    }

    pub fn forward_sample(&self, x0: &[f64], t: f64, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != x0.len() {
            return Err(Error::shape(x0.len(), noise.len()));
        }
        let (scale, std) = self.marginal_coeffs(t)?;
        Ok(x0
            .iter()
            .zip(noise)
            .map(|(x, z)| scale * x + std * z)
            .collect())
    }

    /// ∇ log p_{t|0}(x_t | x_0).
    pub fn score_target(&self, x0: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
        if xt.len() != x0.len() {
            return Err(Error::shape(x0.len(), xt.len()));
        }
        let (scale, std) = self.marginal_coeffs(t)?;
        let var = std * std;
        Ok(x0
            .iter()
            .zip(xt)
            .map(|(a, b)| -(b - scale * a) / var)
            .collect())
    }

    /// Euler–Maruyama integration of the forward SDE over `[0, T]`.
    ///
    /// Returns `n_steps + 1` states including the starting one. For the
    /// variance-exploding kinds the start carries the σ_min noise floor so that
    /// the state at time t has exactly the kernel variance σ(t)². Coefficients
    /// are evaluated at the midpoint of each step.
    pub fn em_forward_path<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        n_steps: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        self.em_forward_path_with(x0, n_steps, || rng.sample(StandardNormal))
    }

    /// [`Self::em_forward_path`] with an explicit standard-normal source.
    pub fn em_forward_path_with(
        &self,
        x0: &[f64],
        n_steps: usize,
        mut noise: impl FnMut() -> f64,
    ) -> Result<Vec<Vec<f64>>> {
        if n_steps == 0 {
            return Err(Error::Domain("n_steps must be at least 1".into()));
        }
        let dt = self.horizon / n_steps as f64;
        let sqrt_dt = dt.sqrt();
        let mut x: Vec<f64> = match self.kind {
            ProcessKind::Ve | ProcessKind::Gbm => {
                let floor = self.schedule.sigma_min();
                x0.iter().map(|v| v + floor * noise()).collect()
            }
            ProcessKind::Vp => x0.to_vec(),
        };
        let mut path = Vec::with_capacity(n_steps + 1);
        path.push(x.clone());
        for i in 0..n_steps {
            let t = (i as f64 + 0.5) * dt;
            let g = self.diffusion_coeff(t)?;
            let drift = self.drift(&x, t)?;
            for (v, f) in x.iter_mut().zip(drift) {
                *v += f * dt + g * sqrt_dt * noise();
            }
            path.push(x.clone());
        }
        Ok(path)
    }

    /// One Euler–Maruyama step of the reverse-time SDE from `t` to `t − dt`.
    pub fn reverse_step(
        &self,
        x: &[f64],
        t: f64,
        dt: f64,
        score: &[f64],
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.reverse_step_in_place(&mut out, t, dt, score, noise)?;
        Ok(out)
    }

    pub fn reverse_step_in_place(
        &self,
        x: &mut [f64],
        t: f64,
        dt: f64,
        score: &[f64],
        noise: &[f64],
    ) -> Result<()> {
        if score.len() != x.len() {
            return Err(Error::shape(x.len(), score.len()));
        }
        if noise.len() != x.len() {
            return Err(Error::shape(x.len(), noise.len()));
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("reverse step size {dt} must be positive")));
        }
        if t - dt < T_EPS - STEP_SLACK {
            return Err(Error::Domain(format!(
                "reverse step from {t} by {dt} passes below {T_EPS}"
            )));
        }
        let g = self.diffusion_coeff(t)?;
        let g2 = g * g;
        let sqrt_dt = dt.sqrt();
        let drift_scale = match self.kind {
            ProcessKind::Ve | ProcessKind::Gbm => 0.0,
            ProcessKind::Vp => {
                let s = self.sigma(t)?;
                -0.5 * s * s
            }
        };
        for ((v, s), z) in x.iter_mut().zip(score).zip(noise) {
            let f = drift_scale * *v;
            *v = *v - (f - g2 * s) * dt + g * sqrt_dt * z;
        }
        Ok(())
    }
}

/// Elementwise natural log of strictly positive prices.
pub fn to_log_space(prices: &[f64]) -> Result<Vec<f64>> {
    prices
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 && p.is_finite() {
                Ok(p.ln())
            } else {
                Err(Error::Data(format!("price {p} at index {i} is not positive")))
            }
        })
        .collect()
}

/// Inverse of [`to_log_space`], rescaled so the first element equals `anchor`.
pub fn to_price_space(log_prices: &[f64], anchor: f64) -> Result<Vec<f64>> {
    if !(anchor > 0.0 && anchor.is_finite()) {
        return Err(Error::Data(format!("anchor price {anchor} is not positive")));
    }
    let Some(&first) = log_prices.first() else {
        return Ok(Vec::new());
    };
    Ok(log_prices
        .iter()
        .map(|&x| anchor * (x - first).exp())
        .collect())
}
