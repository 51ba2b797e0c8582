//! Score-based generation of financial time series with a geometric Brownian
//! motion forward process.

pub mod container;
pub mod data;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod process;
pub mod sample;
pub mod schedule;
pub mod scorenet;
pub mod train;

pub use error::{Error, Result};
pub use process::{DiffusionProcess, GaussianKernel, ProcessKind};
pub use schedule::{NoiseSchedule, ScheduleKind};
