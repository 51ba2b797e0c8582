//! Reverse-time generation of synthetic log-price windows.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{DiffusionProcess, ProcessKind, T_EPS};
use crate::scorenet::{time_to_step, ScoreNetParams};

/// Anything that can evaluate the score of a batch of states at time `t`.
///
/// `x` is row-major `(batch, length)`; the result has the same layout.
pub trait ScoreModel {
    fn score(&self, x: &[f64], batch: usize, length: usize, t: f64) -> Result<Vec<f64>>;
}

/// A score network driven over the discrete step grid it was trained on.
pub struct NetworkScore<'a> {
    pub params: &'a ScoreNetParams,
    pub horizon: f64,
}

impl ScoreModel for NetworkScore<'_> {
    fn score(&self, x: &[f64], batch: usize, length: usize, t: f64) -> Result<Vec<f64>> {
        let step = time_to_step(t, self.horizon, self.params.config().n_diffusion_steps);
        let input = Tensor::from_slice(x, (batch, 1, length), &Device::Cpu)?
            .to_dtype(self.params.dtype())?;
        let out = self.params.forward(&input, &vec![step; batch])?;
        Ok(out.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }
}

/// Exact score of zero-mean Gaussian data with per-coordinate variance
/// `data_var` pushed through the forward kernel of `process`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianScore {
    pub process: DiffusionProcess,
    pub data_var: f64,
}

impl GaussianScore {
    /// Marginal variance of `x_t`.
    pub fn marginal_var(&self, t: f64) -> Result<f64> {
        let (scale, std) = self.process.marginal_coeffs(t)?;
        Ok(scale * scale * self.data_var + std * std)
    }
}

impl ScoreModel for GaussianScore {
    fn score(&self, x: &[f64], _batch: usize, _length: usize, t: f64) -> Result<Vec<f64>> {
        let var = self.marginal_var(t)?;
        Ok(x.iter().map(|v| -v / var).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub n_series: usize,
    pub length: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub process: DiffusionProcess,
    /// Normalisation factor applied to the generated states.
    pub scale: f64,
    /// Series integrated together per network call.
    pub batch_size: usize,
    /// Std of the terminal prior; `None` uses σ_max (stationary 1 for VP).
    pub prior_std: Option<f64>,
}

impl GenerationSpec {
    pub fn new(process: DiffusionProcess) -> Self {
        Self {
            n_series: 120,
            length: 2048,
            n_steps: 2000,
            seed: 0,
            process,
            scale: 1.0,
            batch_size: 8,
            prior_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_series == 0 || self.length == 0 || self.n_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_series, length, n_steps and batch_size must be at least 1".into(),
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if let Some(s) = self.prior_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("prior_std must be positive, got {s}")));
            }
        }
        if self.process.horizon() <= T_EPS {
            return Err(Error::Config("horizon must exceed the integration floor".into()));
        }
        Ok(())
    }

    pub fn effective_prior_std(&self) -> f64 {
        self.prior_std.unwrap_or(match self.process.kind() {
            ProcessKind::Vp => 1.0,
            ProcessKind::Ve | ProcessKind::Gbm => self.process.schedule().sigma_max(),
        })
    }

    fn series_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Integrate the reverse SDE from the prior at `T` down to `T_EPS`.
///
/// Each series owns a random stream keyed by its index, so results do not
/// depend on `batch_size`.
pub fn generate(model: &dyn ScoreModel, spec: &GenerationSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let len = spec.length;
    let horizon = spec.process.horizon();
    let dt = (horizon - T_EPS) / spec.n_steps as f64;
    let prior = spec.effective_prior_std();
    let mut out = Vec::with_capacity(spec.n_series);
    let mut noise = vec![0.0; len];
    for start in (0..spec.n_series).step_by(spec.batch_size) {
        let end = (start + spec.batch_size).min(spec.n_series);
        let b = end - start;
        let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|i| spec.series_rng(i)).collect();
        let mut x: Vec<f64> = Vec::with_capacity(b * len);
        for rng in &mut rngs {
            x.extend((0..len).map(|_| prior * rng.sample::<f64, _>(StandardNormal)));
        }
        for i in 0..spec.n_steps {
            let t = horizon - i as f64 * dt;
            let score = model.score(&x, b, len, t)?;
            if score.len() != x.len() {
                return Err(Error::shape(x.len(), score.len()));
            }
            for (j, rng) in rngs.iter_mut().enumerate() {
                noise.iter_mut().for_each(|z| *z = rng.sample(StandardNormal));
                let row = j * len..(j + 1) * len;
                spec.process
                    .reverse_step_in_place(&mut x[row.clone()], t, dt, &score[row], &noise)?;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite state at reverse step {} (t = {t})",
                    i + 1
                )));
            }
        }
        out.extend(
            x.chunks(len)
                .map(|row| row.iter().map(|v| v * spec.scale).collect()),
        );
    }
    Ok(out)
}

/// First differences of a log-space series.
pub fn to_returns(series: &[f64]) -> Vec<f64> {
    series.windows(2).map(|w| w[1] - w[0]).collect()
}

/// `s0 · exp(series − series[0])`.
pub fn to_prices(series: &[f64], s0: f64) -> Result<Vec<f64>> {
    crate::process::to_price_space(series, s0)
}

pub fn write_series_csv(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "series_id,t_index,log_value")?;
        for (id, s) in series.iter().enumerate() {
            for (t, v) in s.iter().enumerate() {
                writeln!(w, "{id},{t},{v}")?;
            }
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

/// Read a `series_id,t_index,log_value` file back into rows ordered by id.
pub fn read_series_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: std::collections::BTreeMap<usize, Vec<(usize, f64)>> = Default::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: malformed series row `{line}`", path.display(), n + 1));
        let mut parts = line.split(',');
        let id: usize = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let t: usize = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let v: f64 = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        rows.entry(id).or_default().push((t, v));
    }
    rows.into_values()
        .map(|mut r| {
            r.sort_by_key(|&(t, _)| t);
            if r.iter().enumerate().any(|(i, &(t, _))| i != t) {
                return Err(Error::Data(format!("{}: gaps in t_index", path.display())));
            }
            Ok(r.into_iter().map(|(_, v)| v).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub spec: GenerationSpec,
    pub seed: u64,
    pub checkpoint_sha256: String,
}
