//! Score network s_θ(x_t, t) for univariate windows.
//!
//! Pipeline: width-1 input projection, diffusion-step + time + positional
//! embeddings added to the latent sequence, one self-attention encoder layer
//! over time, a stack of gated residual blocks with skip aggregation, and a
//! two-layer width-1 output head. Activations are kept time-major as
//! `(batch, length, channels)` so every width-1 convolution is one matmul.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreNetConfig {
    pub channels: usize,
    pub diff_embed_dim: usize,
    pub feat_embed_dim: usize,
    pub time_embed_dim: usize,
    pub n_res_blocks: usize,
    pub n_heads: usize,
    /// Maximum window length; shorter inputs use a prefix of the positional table.
    pub length: usize,
    /// Number of discrete diffusion steps the step embedding is indexed by.
    pub n_diffusion_steps: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            diff_embed_dim: 256,
            feat_embed_dim: 64,
            time_embed_dim: 128,
            n_res_blocks: 4,
            n_heads: 8,
            length: 2048,
            n_diffusion_steps: 2000,
        }
    }
}

impl ScoreNetConfig {
    /// The original CSDI capacity (64 channels, 128-d step, 16-d feature).
    pub fn csdi_base(length: usize) -> Self {
        Self {
            channels: 64,
            diff_embed_dim: 128,
            feat_embed_dim: 16,
            length,
            ..Self::default()
        }
    }

    /// 128 channels, 256-d step embedding, 32-d feature embedding.
    pub fn wide(length: usize) -> Self {
        Self {
            feat_embed_dim: 32,
            length,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("diff_embed_dim", self.diff_embed_dim),
            ("feat_embed_dim", self.feat_embed_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("n_res_blocks", self.n_res_blocks),
            ("n_heads", self.n_heads),
            ("length", self.length),
            ("n_diffusion_steps", self.n_diffusion_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by n_heads ({})",
                self.channels, self.n_heads
            )));
        }
        if !self.diff_embed_dim.is_multiple_of(2) || self.diff_embed_dim < 4 {
            return Err(Error::Config(format!(
                "diff_embed_dim must be even and at least 4, got {}",
                self.diff_embed_dim
            )));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    fn ff_width(&self) -> usize {
        4 * self.channels
    }

    fn dilation(block: usize) -> usize {
        1 << (block % 4)
    }

    /// Names and shapes of every parameter array, in initialisation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let d = self.diff_embed_dim;
        let f = self.feat_embed_dim;
        let te = self.time_embed_dim;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: &str, shape: &[usize]| out.push((name.to_string(), shape.to_vec()));
        push("input.weight", &[c, 1]);
        push("input.bias", &[c]);
        push("step.proj1.weight", &[d, d]);
        push("step.proj1.bias", &[d]);
        push("step.proj2.weight", &[d, d]);
        push("step.proj2.bias", &[d]);
        push("step.to_input.weight", &[c, d]);
        push("step.to_input.bias", &[c]);
        push("time.learned", &[te]);
        push("time.proj.weight", &[c, te]);
        push("time.proj.bias", &[c]);
        push("feature.embed", &[f]);
        push("position.table", &[self.length, f]);
        push("position.proj.weight", &[c, f]);
        push("position.proj.bias", &[c]);
        for p in ["q", "k", "v", "o"] {
            push(&format!("encoder.{p}.weight"), &[c, c]);
            push(&format!("encoder.{p}.bias"), &[c]);
        }
        push("encoder.norm1.gain", &[c]);
        push("encoder.norm1.bias", &[c]);
        push("encoder.ff1.weight", &[self.ff_width(), c]);
        push("encoder.ff1.bias", &[self.ff_width()]);
        push("encoder.ff2.weight", &[c, self.ff_width()]);
        push("encoder.ff2.bias", &[c]);
        push("encoder.norm2.gain", &[c]);
        push("encoder.norm2.bias", &[c]);
        for i in 0..self.n_res_blocks {
            push(&format!("block{i}.step.weight"), &[c, d]);
            push(&format!("block{i}.step.bias"), &[c]);
            push(&format!("block{i}.dilated.weight"), &[3, 2 * c, c]);
            push(&format!("block{i}.dilated.bias"), &[2 * c]);
            push(&format!("block{i}.out.weight"), &[2 * c, c]);
            push(&format!("block{i}.out.bias"), &[2 * c]);
        }
        push("output.hidden.weight", &[c, c]);
        push("output.hidden.bias", &[c]);
        push("output.final.weight", &[1, c]);
        push("output.final.bias", &[1]);
        out
    }
}

/// Sinusoidal diffusion-step table: `[sin(angle_j)…, cos(angle_j)…]` with
/// `angle_j = step · 10^(−4j/(dim/2 − 1))`.
pub fn diffusion_step_embedding(step: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) || dim < 4 {
        return Err(Error::Domain(format!(
            "step embedding dimension must be even and at least 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let angle = step as f64 * 10f64.powf(-4.0 * j as f64 / (half - 1) as f64);
        out[j] = angle.sin();
        out[half + j] = angle.cos();
    }
    Ok(out)
}

/// Transformer-style sinusoid over absolute positions `0..length`, row-major.
fn position_sinusoid(length: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            out[pos * dim + 2 * i] = angle.sin();
            out[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    out
}

/// Map a continuous diffusion time to the nearest discrete embedding step.
pub fn time_to_step(t: f64, horizon: f64, n_steps: usize) -> usize {
    let last = n_steps.saturating_sub(1);
    let idx = (t / horizon * last as f64).round();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(last)
    }
}

/// Learnable parameters of the score network together with the config that shaped them.
#[derive(Debug, Clone)]
pub struct ScoreNetParams {
    config: ScoreNetConfig,
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ScoreNetParams {
    /// Fan-in-scaled uniform initialisation; the final projection starts at zero.
    pub fn init(config: &ScoreNetConfig, seed: u64) -> Result<Self> {
        Self::init_with_dtype(config, seed, DType::F32)
    }

    pub fn init_with_dtype(config: &ScoreNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vars = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let numel: usize = shape.iter().product();
            let values: Vec<f64> = if name.starts_with("output.final") {
                vec![0.0; numel]
            } else if name.ends_with(".gain") {
                vec![1.0; numel]
            } else if name.contains(".norm") {
                vec![0.0; numel]
            } else {
                let fan_in = fan_in(&name, &shape, config);
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?;
            vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            config: config.clone(),
            vars,
            dtype,
        })
    }

    /// Assemble from named arrays of f32 values, checking names against the config.
    pub fn from_arrays(
        config: ScoreNetConfig,
        arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut arrays = arrays;
        let mut vars = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let (got_shape, values) = arrays
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got_shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {got_shape:?}, expected {shape:?}"
                )));
            }
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` holds non-finite value {bad}"
                )));
            }
            let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
            vars.insert(name, Var::from_tensor(&t)?);
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config,
            vars,
            dtype: DType::F32,
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named `{name}`")))
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy, optionally changing precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(dtype)?.copy()?;
            vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        Ok(Self {
            config: self.config.clone(),
            vars,
            dtype,
        })
    }

    pub fn deep_clone(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }

    /// Every array flattened to f32, keyed by name.
    pub fn to_arrays(&self) -> Result<crate::container::NamedArrays> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let t = var.as_tensor();
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            out.insert(name.clone(), (t.dims().to_vec(), values));
        }
        Ok(out)
    }

    /// Evaluate the network. `x` is `(batch, 1, length)`; `steps` holds one
    /// diffusion-step index per batch element.
    pub fn forward(&self, x: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let cfg = &self.config;
        let (batch, feat, len) = x.dims3().map_err(|_| {
            Error::shape("(batch, 1, length)", format!("{:?}", x.dims()))
        })?;
        if feat != 1 {
            return Err(Error::shape("(batch, 1, length)", format!("{:?}", x.dims())));
        }
        if len == 0 || len > cfg.length {
            return Err(Error::shape(
                format!("length in 1..={}", cfg.length),
                len,
            ));
        }
        if steps.len() != batch {
            return Err(Error::shape(batch, steps.len()));
        }
        if let Some(&s) = steps.iter().find(|&&s| s >= cfg.n_diffusion_steps) {
            return Err(Error::Domain(format!(
                "diffusion step {s} outside [0, {})",
                cfg.n_diffusion_steps
            )));
        }
        let x = x.to_dtype(self.dtype)?;
        if !all_finite(&x)? {
            return Err(Error::Numeric("score network input is not finite".into()));
        }
        let dev = Device::Cpu;
        let c = cfg.channels;

        // (B, L, 1) -> (B, L, C)
        let h = x.reshape((batch, len, 1))?;
        let mut h = linear(&h, self.get("input.weight")?, self.get("input.bias")?)?.silu()?;

        let mut table = Vec::with_capacity(batch * cfg.diff_embed_dim);
        for &s in steps {
            table.extend(diffusion_step_embedding(s, cfg.diff_embed_dim)?);
        }
        let e = Tensor::from_vec(table, (batch, cfg.diff_embed_dim), &dev)?.to_dtype(self.dtype)?;
        let e = linear(&e, self.get("step.proj1.weight")?, self.get("step.proj1.bias")?)?.silu()?;
        let e = linear(&e, self.get("step.proj2.weight")?, self.get("step.proj2.bias")?)?.silu()?;
        let step_in = linear(
            &e,
            self.get("step.to_input.weight")?,
            self.get("step.to_input.bias")?,
        )?
        .reshape((batch, 1, c))?;

        let sinus = Tensor::from_vec(
            position_sinusoid(len, cfg.time_embed_dim),
            (len, cfg.time_embed_dim),
            &dev,
        )?
        .to_dtype(self.dtype)?;
        let time = sinus.broadcast_add(self.get("time.learned")?)?;
        let time = linear(&time, self.get("time.proj.weight")?, self.get("time.proj.bias")?)?;

        let pos = self
            .get("position.table")?
            .narrow(0, 0, len)?
            .broadcast_add(self.get("feature.embed")?)?;
        let pos = linear(
            &pos,
            self.get("position.proj.weight")?,
            self.get("position.proj.bias")?,
        )?;

        h = h
            .broadcast_add(&step_in)?
            .broadcast_add(&time.unsqueeze(0)?)?
            .broadcast_add(&pos.unsqueeze(0)?)?;

        h = self.encoder(&h)?;

        let mut skip: Option<Tensor> = None;
        for i in 0..cfg.n_res_blocks {
            let (next, s) = self.residual_block(i, &h, &e)?;
            h = next;
            skip = Some(match skip {
                None => s,
                Some(acc) => (acc + s)?,
            });
        }
        let skip = skip.expect("at least one residual block");
        let s = (skip / (cfg.n_res_blocks as f64).sqrt())?;
        let s = linear(
            &s,
            self.get("output.hidden.weight")?,
            self.get("output.hidden.bias")?,
        )?
        .silu()?;
        let out = linear(
            &s,
            self.get("output.final.weight")?,
            self.get("output.final.bias")?,
        )?;
        Ok(out.reshape((batch, 1, len))?)
    }

    /// Post-norm transformer encoder layer over the time axis.
    fn encoder(&self, h: &Tensor) -> Result<Tensor> {
        let (b, l, c) = h.dims3()?;
        let heads = self.config.n_heads;
        let dh = c / heads;
        let proj = |name: &str| -> Result<Tensor> {
            let y = linear(
                h,
                self.get(&format!("encoder.{name}.weight"))?,
                self.get(&format!("encoder.{name}.bias"))?,
            )?;
            Ok(y.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = proj("q")?;
        let k = proj("k")?;
        let v = proj("v")?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let attn = attn.transpose(1, 2)?.contiguous()?.reshape((b, l, c))?;
        let attn = linear(&attn, self.get("encoder.o.weight")?, self.get("encoder.o.bias")?)?;
        let h = layer_norm(
            &(h + attn)?,
            self.get("encoder.norm1.gain")?,
            self.get("encoder.norm1.bias")?,
        )?;
        let ff = linear(&h, self.get("encoder.ff1.weight")?, self.get("encoder.ff1.bias")?)?.gelu()?;
        let ff = linear(&ff, self.get("encoder.ff2.weight")?, self.get("encoder.ff2.bias")?)?;
        layer_norm(
            &(h + ff)?,
            self.get("encoder.norm2.gain")?,
            self.get("encoder.norm2.bias")?,
        )
    }

    /// Gated residual block; returns `(residual output, skip output)`.
    fn residual_block(&self, i: usize, h: &Tensor, e: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, l, c) = h.dims3()?;
        let step = linear(
            e,
            self.get(&format!("block{i}.step.weight"))?,
            self.get(&format!("block{i}.step.bias"))?,
        )?
        .reshape((b, 1, c))?;
        let y = h.broadcast_add(&step)?;

        let d = ScoreNetConfig::dilation(i);
        let padded = y.pad_with_zeros(1, d, d)?;
        let w = self.get(&format!("block{i}.dilated.weight"))?;
        let mut conv: Option<Tensor> = None;
        for tap in 0..3 {
            let shifted = padded.narrow(1, tap * d, l)?;
            let term = matmul_last(&shifted, &w.get(tap)?.t()?)?;
            conv = Some(match conv {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        let conv = conv
            .expect("three taps")
            .broadcast_add(self.get(&format!("block{i}.dilated.bias"))?)?;

        let filter = conv.narrow(2, 0, c)?;
        let gate = conv.narrow(2, c, c)?;
        let gated = (filter.tanh()? * sigmoid(&gate)?)?;
        let out = linear(
            &gated,
            self.get(&format!("block{i}.out.weight"))?,
            self.get(&format!("block{i}.out.bias"))?,
        )?;
        let residual = out.narrow(2, 0, c)?;
        let skip = out.narrow(2, c, c)?;
        let next = ((h + residual)? / std::f64::consts::SQRT_2)?;
        Ok((next, skip))
    }
}

fn fan_in(name: &str, shape: &[usize], config: &ScoreNetConfig) -> usize {
    if name.ends_with(".bias") {
        // Bias shares the bound of its weight.
        let weight = name.replace(".bias", ".weight");
        return config
            .param_shapes()
            .into_iter()
            .find(|(n, _)| *n == weight)
            .map(|(n, s)| fan_in(&n, &s, config))
            .unwrap_or(1);
    }
    match shape {
        [_, inner] => *inner,
        [taps, _, inner] => taps * inner,
        [n] => *n,
        _ => 1,
    }
}

/// `x @ wᵀ + b` over the last axis; `w` is `(out, in)`.
fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    matmul_last(x, &w.t()?)?.broadcast_add(b)
}

/// `x @ m` over the last axis for `x` of any rank; `m` is `(in, out)`.
fn matmul_last(x: &Tensor, m: &Tensor) -> candle_core::Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().expect("rank >= 1");
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, inner))?.matmul(m)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = m.dim(1)?;
    y.reshape(out_dims)
}

fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let ex = x.broadcast_sub(&max)?.exp()?;
    let sum = ex.sum_keepdim(D::Minus1)?;
    ex.broadcast_div(&sum)
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gain)?.broadcast_add(bias)?)
}

fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// Replace the zero-initialised output layer with small random weights so
/// gradients reach the rest of the network.
pub(crate) fn randomize_output(p: &ScoreNetParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["output.final.weight", "output.final.bias"] {
        let var = &p.vars[name];
        let n = var.elem_count();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
        let t = Tensor::from_vec(v, var.dims(), &Device::Cpu)
            .unwrap()
            .to_dtype(p.dtype)
            .unwrap();
        var.set(&t).unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(length: usize) -> ScoreNetConfig {
        ScoreNetConfig {
            channels: 16,
            diff_embed_dim: 32,
            feat_embed_dim: 8,
            time_embed_dim: 16,
            n_res_blocks: 2,
            n_heads: 2,
            length,
            n_diffusion_steps: 2000,
        }
    }

    fn input(batch: usize, len: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..batch * len).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(v, (batch, 1, len), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn step_embedding_table() {
        let e = diffusion_step_embedding(0, 256).unwrap();
        assert_eq!(e.len(), 256);
        assert!(e[..128].iter().all(|&v| v == 0.0));
        assert!(e[128..].iter().all(|&v| v == 1.0));
        assert_eq!(diffusion_step_embedding(1234, 64).unwrap().len(), 64);
        assert!(diffusion_step_embedding(3, 7).is_err());
    }

    #[test]
    fn step_embeddings_are_distinct() {
        let dim = 128;
        let table: Vec<Vec<f64>> = (1..=2000)
            .map(|s| diffusion_step_embedding(s, dim).unwrap())
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..table.len() {
            for j in i + 1..table.len() {
                let d: f64 = table[i]
                    .iter()
                    .zip(&table[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                min = min.min(d);
            }
        }
        assert!(min.sqrt() > 0.0, "min pairwise distance {min}");
    }

    #[test]
    fn time_mapping() {
        assert_eq!(time_to_step(0.0, 1.0, 2000), 0);
        assert_eq!(time_to_step(1.0, 1.0, 2000), 1999);
        assert_eq!(time_to_step(0.5, 1.0, 2000), 1000);
        assert_eq!(time_to_step(2.0, 1.0, 2000), 1999);
    }

    #[test]
    fn config_validation() {
        assert!(ScoreNetConfig::default().validate().is_ok());
        let bad = ScoreNetConfig {
            n_heads: 3,
            ..ScoreNetConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let odd = ScoreNetConfig {
            diff_embed_dim: 31,
            ..ScoreNetConfig::default()
        };
        assert!(odd.validate().is_err());
        assert!(ScoreNetParams::init(&bad, 0).is_err());
    }

    #[test]
    fn capacity_ladder_constructs() {
        for cfg in [
            ScoreNetConfig::csdi_base(16),
            ScoreNetConfig::wide(16),
            ScoreNetConfig {
                length: 16,
                ..ScoreNetConfig::default()
            },
        ] {
            let p = ScoreNetParams::init(&cfg, 1).unwrap();
            let y = p.forward(&input(2, 16, 0), &[0, 1999]).unwrap();
            assert_eq!(y.dims(), &[2, 1, 16]);
        }
    }

    #[test]
    fn default_parameter_count() {
        // Independent layer-by-layer tally for C=128, D=256, F=64, T=128, n=4, L=2048.
        let (c, d, f, te, n, l) = (128usize, 256usize, 64usize, 128usize, 4usize, 2048usize);
        let dense = |i: usize, o: usize| i * o + o;
        let tally = dense(1, c)
            + 2 * dense(d, d)
            + dense(d, c)
            + te
            + dense(te, c)
            + f
            + l * f
            + dense(f, c)
            + 4 * dense(c, c)
            + 2 * 2 * c
            + dense(c, 4 * c)
            + dense(4 * c, c)
            + n * (dense(d, c) + (3 * c * 2 * c + 2 * c) + dense(c, 2 * c))
            + dense(c, c)
            + dense(c, 1);
        assert_eq!(tally, 1_193_665);
        let shapes = ScoreNetConfig::default().param_shapes();
        let counted: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(counted, tally);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small(16);
        let a = ScoreNetParams::init(&cfg, 7).unwrap().to_arrays().unwrap();
        let b = ScoreNetParams::init(&cfg, 7).unwrap().to_arrays().unwrap();
        let c = ScoreNetParams::init(&cfg, 8).unwrap().to_arrays().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.values().all(|(_, v)| v.iter().all(|x| x.is_finite())));
        assert!(a["output.final.weight"].1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_output_at_init() {
        let p = ScoreNetParams::init(&small(32), 3).unwrap();
        let y = p.forward(&input(4, 32, 1), &[0, 10, 500, 1999]).unwrap();
        assert!(values(&y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_and_determinism() {
        let p = ScoreNetParams::init(&small(64), 3).unwrap();
        randomize_output(&p, 9);
        for (batch, len) in [(1, 4), (3, 17), (2, 64)] {
            let x = input(batch, len, 5);
            let steps: Vec<usize> = (0..batch).map(|i| i * 100).collect();
            let y1 = p.forward(&x, &steps).unwrap();
            let y2 = p.forward(&x, &steps).unwrap();
            assert_eq!(y1.dims(), &[batch, 1, len]);
            assert_eq!(values(&y1), values(&y2));
            assert!(values(&y1).iter().all(|v| v.is_finite() && *v != 0.0));
        }
    }

    #[test]
    fn full_length_shape() {
        let cfg = ScoreNetConfig {
            n_heads: 1,
            length: 2048,
            ..small(2048)
        };
        let p = ScoreNetParams::init(&cfg, 0).unwrap();
        let y = p.forward(&input(8, 2048, 2), &[5; 8]).unwrap();
        assert_eq!(y.dims(), &[8, 1, 2048]);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = ScoreNetParams::init(&small(16), 0).unwrap();
        let two_feat = Tensor::zeros((1, 2, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(p.forward(&two_feat, &[0]), Err(Error::Shape { .. })));
        assert!(matches!(p.forward(&input(1, 32, 0), &[0]), Err(Error::Shape { .. })));
        assert!(matches!(p.forward(&input(2, 16, 0), &[0]), Err(Error::Shape { .. })));
        assert!(matches!(p.forward(&input(1, 16, 0), &[2000]), Err(Error::Domain(_))));
        let nan = Tensor::from_vec(vec![f32::NAN; 16], (1, 1, 16), &Device::Cpu).unwrap();
        assert!(matches!(p.forward(&nan, &[0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn outputs_do_not_mix_across_batch() {
        let p = ScoreNetParams::init(&small(16), 3).unwrap();
        randomize_output(&p, 1);
        let x = input(3, 16, 4);
        let all = values(&p.forward(&x, &[1, 2, 3]).unwrap());
        let one = values(&p.forward(&x.narrow(0, 1, 1).unwrap(), &[2]).unwrap());
        for (a, b) in all[16..32].iter().zip(&one) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
