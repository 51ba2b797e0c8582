//! Denoising score matching and the training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, NamedArrays, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::process::DiffusionProcess;
use crate::scorenet::{time_to_step, ScoreNetConfig, ScoreNetParams};

/// Loss above which training is considered diverged.
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// λ(t) = std(t)², turning DSM into noise prediction.
    #[default]
    KernelVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Fractions of `epochs` at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_points: Vec<f64>,
    pub lr_decay_factor: f64,
    pub t_floor: f64,
    pub seed: u64,
    pub weighting: Weighting,
    /// Split each batch into gradient-accumulated chunks of this size.
    pub micro_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 1000,
            learning_rate: 1e-3,
            lr_decay_points: vec![0.75, 0.9],
            lr_decay_factor: 0.1,
            t_floor: crate::process::T_EPS,
            seed: 0,
            weighting: Weighting::KernelVariance,
            micro_batch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(Error::Config(format!("t_floor {} outside (0, 1)", self.t_floor)));
        }
        if self.micro_batch == Some(0) {
            return Err(Error::Config("micro_batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_decay_points
            .iter()
            .filter(|&&p| epoch >= (p * self.epochs as f64) as usize)
            .count();
        self.learning_rate * self.lr_decay_factor.powi(passed as i32)
    }
}

/// First/second moment estimates of adaptive-moment SGD.
#[derive(Clone)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ScoreNetParams) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.vars() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
        })
    }

    pub fn update(
        &mut self,
        params: &ScoreNetParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            *m = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / c1)?;
            let v_hat = (&*v / c2)?;
            let delta = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (var.as_tensor() - (delta * lr)?)?;
            var.set(&next)?;
        }
        Ok(())
    }
}

pub struct Checkpoint {
    pub params: ScoreNetParams,
    pub optimizer: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

impl fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Checkpoint")
            .field("config", self.params.config())
            .field("epoch", &self.epoch)
            .field("optimizer_step", &self.optimizer.step)
            .field("last_loss", &self.loss_history.last())
            .finish()
    }
}

impl Checkpoint {
    pub fn fresh(net_config: &ScoreNetConfig, seed: u64) -> Result<Self> {
        let params = ScoreNetParams::init(net_config, seed)?;
        let optimizer = AdamState::new(&params)?;
        Ok(Self {
            params,
            optimizer,
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn deep_clone(&self) -> Result<Self> {
        let params = self.params.deep_clone()?;
        let copy = |map: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            map.iter()
                .map(|(k, t)| Ok((k.clone(), t.copy()?)))
                .collect()
        };
        Ok(Self {
            params,
            optimizer: AdamState {
                m: copy(&self.optimizer.m)?,
                v: copy(&self.optimizer.v)?,
                ..self.optimizer.clone()
            },
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ScoreNetConfig,
    epoch: usize,
    loss_history: Vec<f64>,
    adam_step: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

fn tensor_array(t: &Tensor) -> Result<(Vec<usize>, Vec<f32>)> {
    Ok((
        t.dims().to_vec(),
        t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
    ))
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: c.params.config().clone(),
        epoch: c.epoch,
        loss_history: c.loss_history.clone(),
        adam_step: c.optimizer.step,
        adam_beta1: c.optimizer.beta1,
        adam_beta2: c.optimizer.beta2,
        adam_eps: c.optimizer.eps,
    };
    let mut arrays: NamedArrays = c.params.to_arrays()?;
    for (name, t) in &c.optimizer.m {
        arrays.insert(format!("{ADAM_M}{name}"), tensor_array(t)?);
    }
    for (name, t) in &c.optimizer.v {
        arrays.insert(format!("{ADAM_V}{name}"), tensor_array(t)?);
    }
    let mut buf = Vec::new();
    container::write_container(
        &mut buf,
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &serde_json::to_string(&header)?,
        &arrays,
    )
    .expect("writing to a Vec cannot fail");
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, mut arrays) = container::read_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let header: CheckpointHeader = serde_json::from_str(&header)
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint header: {e}")))?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let names: Vec<String> = arrays.keys().cloned().collect();
    for name in names {
        let target = if let Some(p) = name.strip_prefix(ADAM_M) {
            Some((&mut m, p.to_string()))
        } else {
            name.strip_prefix(ADAM_V).map(|p| (&mut v, p.to_string()))
        };
        if let Some((map, param)) = target {
            let (shape, values) = arrays.remove(&name).unwrap();
            map.insert(param, Tensor::from_vec(values, shape, &Device::Cpu)?);
        }
    }
    let params = ScoreNetParams::from_arrays(header.config, arrays)?;
    for (name, var) in params.vars() {
        for map in [&m, &v] {
            match map.get(name) {
                Some(t) if t.dims() == var.dims() => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state for `{name}` is missing or misshapen"
                    )))
                }
            }
        }
    }
    Ok(Checkpoint {
        params,
        optimizer: AdamState {
            step: header.adam_step,
            beta1: header.adam_beta1,
            beta2: header.adam_beta2,
            eps: header.adam_eps,
            m,
            v,
        },
        epoch: header.epoch,
        loss_history: header.loss_history,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(c)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&container::read_all(path)?)
}

/// Random draws behind one DSM evaluation: a diffusion time per sample and
/// standard-normal noise of shape `(batch, length)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmDraws {
    pub times: Vec<f64>,
    pub noise: Vec<f64>,
}

impl DsmDraws {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        batch: usize,
        length: usize,
        t_floor: f64,
        horizon: f64,
    ) -> Self {
        let times = (0..batch)
            .map(|_| rng.random_range(t_floor..horizon))
            .collect();
        let noise = (0..batch * length)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self { times, noise }
    }
}

/// Per-sample noisy inputs, discrete steps and kernel stds for a batch.
pub struct NoisedBatch {
    pub inputs: Tensor,
    pub steps: Vec<usize>,
    pub stds: Vec<f64>,
}

pub fn noise_batch(
    params: &ScoreNetParams,
    process: &DiffusionProcess,
    batch: &[Vec<f64>],
    draws: &DsmDraws,
) -> Result<NoisedBatch> {
    let b = batch.len();
    let len = batch.first().map(Vec::len).unwrap_or(0);
    if b == 0 || len == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if batch.iter().any(|w| w.len() != len) {
        return Err(Error::shape(format!("windows of length {len}"), "ragged batch"));
    }
    if draws.times.len() != b || draws.noise.len() != b * len {
        return Err(Error::shape(
            format!("{b} times and {} noise values", b * len),
            format!("{} and {}", draws.times.len(), draws.noise.len()),
        ));
    }
    let n_steps = params.config().n_diffusion_steps;
    let mut xt = Vec::with_capacity(b * len);
    let mut stds = Vec::with_capacity(b);
    let mut steps = Vec::with_capacity(b);
    for (i, window) in batch.iter().enumerate() {
        let t = draws.times[i];
        let noise = &draws.noise[i * len..(i + 1) * len];
        xt.extend(process.forward_sample(window, t, noise)?);
        stds.push(process.marginal_coeffs(t)?.1);
        steps.push(time_to_step(t, process.horizon(), n_steps));
    }
    if xt.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in training batch".into()));
    }
    let inputs = Tensor::from_vec(xt, (b, 1, len), &Device::Cpu)?.to_dtype(params.dtype())?;
    Ok(NoisedBatch {
        inputs,
        steps,
        stds,
    })
}

/// DSM objective `mean_b ‖std_b · s_θ(x_t, t_b) + ε_b‖²` as a differentiable scalar.
pub fn dsm_objective(
    params: &ScoreNetParams,
    process: &DiffusionProcess,
    batch: &[Vec<f64>],
    draws: &DsmDraws,
) -> Result<Tensor> {
    let noised = noise_batch(params, process, batch, draws)?;
    let b = batch.len();
    let len = batch[0].len();
    let dtype = params.dtype();
    let score = params.forward(&noised.inputs, &noised.steps)?;
    let std = Tensor::from_vec(noised.stds, (b, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let eps = Tensor::from_vec(draws.noise.clone(), (b, 1, len), &Device::Cpu)?.to_dtype(dtype)?;
    let residual = score.broadcast_mul(&std)?.add(&eps)?;
    Ok((residual.sqr()?.sum_all()? / b as f64)?)
}

fn collect_grads(params: &ScoreNetParams, store: &GradStore) -> BTreeMap<String, Tensor> {
    params
        .vars()
        .iter()
        .filter_map(|(name, var)| store.get(var.as_tensor()).map(|g| (name.clone(), g.clone())))
        .collect()
}

/// Loss value and gradients for one batch, optionally accumulated over micro-batches.
pub fn dsm_loss_with_draws(
    params: &ScoreNetParams,
    process: &DiffusionProcess,
    batch: &[Vec<f64>],
    draws: &DsmDraws,
    micro_batch: Option<usize>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let b = batch.len();
    let chunk = micro_batch.unwrap_or(b).clamp(1, b.max(1));
    if chunk >= b {
        let loss = dsm_objective(params, process, batch, draws)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = collect_grads(params, &loss.backward()?);
        return Ok((value, grads));
    }
    let len = batch.first().map(Vec::len).unwrap_or(0);
    let mut total = 0.0;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for start in (0..b).step_by(chunk) {
        let end = (start + chunk).min(b);
        let sub = DsmDraws {
            times: draws.times[start..end].to_vec(),
            noise: draws.noise[start * len..end * len].to_vec(),
        };
        let weight = (end - start) as f64 / b as f64;
        let loss = (dsm_objective(params, process, &batch[start..end], &sub)? * weight)?;
        total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        for (name, g) in collect_grads(params, &loss.backward()?) {
            let next = match acc.remove(&name) {
                Some(prev) => (prev + g)?,
                None => g,
            };
            acc.insert(name, next);
        }
    }
    Ok((total, acc))
}

pub fn dsm_loss<R: Rng + ?Sized>(
    params: &ScoreNetParams,
    process: &DiffusionProcess,
    batch: &[Vec<f64>],
    t_floor: f64,
    rng: &mut R,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let len = batch.first().map(Vec::len).unwrap_or(0);
    let draws = DsmDraws::sample(rng, batch.len(), len, t_floor, process.horizon());
    dsm_loss_with_draws(params, process, batch, &draws, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Train a freshly initialised network.
pub fn fit(
    config: &TrainConfig,
    process: &DiffusionProcess,
    dataset: &[Vec<f64>],
    net_config: &ScoreNetConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Checkpoint> {
    config.validate()?;
    let start = Checkpoint::fresh(net_config, config.seed)?;
    resume(start, config, process, dataset, on_epoch)
}

/// Continue training from `checkpoint` until `config.epochs` epochs are done.
///
/// Each epoch draws its shuffle and noise from a stream keyed by
/// `(seed, epoch)`, so a resumed run replays an uninterrupted one exactly.
pub fn resume(
    checkpoint: Checkpoint,
    config: &TrainConfig,
    process: &DiffusionProcess,
    dataset: &[Vec<f64>],
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Checkpoint> {
    train_until(checkpoint, config, process, dataset, config.epochs, on_epoch)
}

/// Like [`resume`] but stops once `until` epochs (capped at `config.epochs`)
/// are complete; the learning-rate schedule still follows `config.epochs`.
pub fn train_until(
    mut checkpoint: Checkpoint,
    config: &TrainConfig,
    process: &DiffusionProcess,
    dataset: &[Vec<f64>],
    until: usize,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let len = dataset[0].len();
    if dataset.iter().any(|w| w.len() != len) {
        return Err(Error::Data("training windows differ in length".into()));
    }
    if len > checkpoint.params.config().length {
        return Err(Error::Config(format!(
            "window length {len} exceeds network length {}",
            checkpoint.params.config().length
        )));
    }
    let clock = Instant::now();
    let mut last_good = checkpoint.deep_clone()?;
    for epoch in checkpoint.epoch..until.min(config.epochs) {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        let mut sum = 0.0;
        let mut n_batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Vec<f64>> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let draws = DsmDraws::sample(&mut rng, batch.len(), len, config.t_floor, process.horizon());
            let (loss, grads) =
                dsm_loss_with_draws(&checkpoint.params, process, &batch, &draws, config.micro_batch)?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    loss,
                    last_good: Box::new(last_good),
                });
            }
            checkpoint.optimizer.update(&checkpoint.params, &grads, lr)?;
            sum += loss;
            n_batches += 1;
        }
        let mean_loss = sum / n_batches as f64;
        checkpoint.epoch = epoch + 1;
        checkpoint.loss_history.push(mean_loss);
        log::info!("epoch {} loss {mean_loss:.6} lr {lr:e}", epoch + 1);
        on_epoch(&EpochStats {
            epoch: epoch + 1,
            mean_loss,
            lr,
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
        last_good = checkpoint.deep_clone()?;
    }
    Ok(checkpoint)
}
