use std::path::{Path, PathBuf};

use gbmd::data::PrepareConfig;
use gbmd::metrics::ReportConfig;
use gbmd::sample::GenerationSpec;
use gbmd::scorenet::ScoreNetConfig;
use gbmd::train::{TrainConfig, Weighting};
use gbmd::{DiffusionProcess, Error, NoiseSchedule, ProcessKind, Result, ScheduleKind};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset `{other}` (expected desk or paper)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub process: ProcessKind,
    pub schedule: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub horizon: f64,
    /// Window length used for preparation, the network and generation.
    pub length: usize,
    pub net: NetSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub prepare: PrepareSection,
    pub report: ReportConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            process: ProcessKind::Gbm,
            schedule: ScheduleKind::Exponential,
            sigma_min: gbmd::schedule::DEFAULT_SIGMA_MIN,
            sigma_max: gbmd::schedule::DEFAULT_SIGMA_MAX,
            horizon: 1.0,
            length: 2048,
            net: NetSection::default(),
            train: TrainSection::default(),
            generate: GenerateSection::default(),
            prepare: PrepareSection::default(),
            report: ReportConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub channels: usize,
    pub diff_embed_dim: usize,
    pub feat_embed_dim: usize,
    pub time_embed_dim: usize,
    pub n_res_blocks: usize,
    pub n_heads: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        let d = ScoreNetConfig::default();
        Self {
            channels: d.channels,
            diff_embed_dim: d.diff_embed_dim,
            feat_embed_dim: d.feat_embed_dim,
            time_embed_dim: d.time_embed_dim,
            n_res_blocks: d.n_res_blocks,
            n_heads: d.n_heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay_points: Vec<f64>,
    pub lr_decay_factor: f64,
    pub t_floor: f64,
    pub micro_batch: Option<usize>,
    /// Continue from an existing checkpoint at `paths.checkpoint`.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            lr_decay_points: d.lr_decay_points,
            lr_decay_factor: d.lr_decay_factor,
            t_floor: d.t_floor,
            micro_batch: d.micro_batch,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub n_series: usize,
    pub n_steps: usize,
    pub batch_size: usize,
    pub prior_std: Option<f64>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            n_series: 120,
            n_steps: 2000,
            batch_size: 8,
            prior_std: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// `date,adj_close` files in `paths.input_dir`.
    Csv,
    /// Simulated GARCH(1,1) returns.
    Garch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    pub source: DataSource,
    pub stride: usize,
    pub min_years: f64,
    pub garch: GarchSection,
}

impl Default for PrepareSection {
    fn default() -> Self {
        let d = PrepareConfig::default();
        Self {
            source: DataSource::Csv,
            stride: d.stride,
            min_years: d.min_years,
            garch: GarchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GarchSection {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_tickers: usize,
    pub n_returns: usize,
    pub burn_in: usize,
}

impl Default for GarchSection {
    fn default() -> Self {
        Self {
            omega: 1e-5,
            alpha: 0.09,
            beta: 0.9,
            n_tickers: 20,
            n_returns: 10_000,
            burn_in: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input_dir: PathBuf,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub training_log: PathBuf,
    pub series: PathBuf,
    pub sidecar: PathBuf,
    pub report_dir: PathBuf,
    /// Dataset whose windows are evaluated alongside the generated series.
    pub reference: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input_dir: "data/prices".into(),
            dataset: "runs/dataset.bin".into(),
            checkpoint: "runs/model.ckpt".into(),
            training_log: "runs/training_log.csv".into(),
            series: "runs/series.csv".into(),
            sidecar: "runs/series.json".into(),
            report_dir: "runs/report".into(),
            reference: None,
        }
    }
}

impl Paths {
    /// Resolve relative paths against `base`.
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.input_dir,
            &mut self.dataset,
            &mut self.checkpoint,
            &mut self.training_log,
            &mut self.series,
            &mut self.sidecar,
            &mut self.report_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut self.reference {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn preset_overrides(preset: Preset) -> Value {
    match preset {
        Preset::Paper => Value::Object(Default::default()),
        Preset::Desk => serde_json::json!({
            "length": 512,
            "net": { "channels": 32 },
            "train": { "epochs": 100 },
            "generate": { "n_series": 20 },
        }),
    }
}

/// Overlay `patch` onto `base`, refusing keys `base` does not have.
fn merge(base: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            if b.is_object() {
                return Err(Error::Config(format!("`{prefix}` is a section, not a value")));
            }
            *b = p.clone();
            Ok(())
        }
    }
}

/// Turn `a.b.c=v` into `{"a":{"b":{"c":v}}}`; `v` is JSON if it parses, else a string.
pub fn parse_override(s: &str) -> Result<Value> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for part in key.rsplit('.') {
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), value);
        value = Value::Object(m);
    }
    Ok(value)
}

/// Defaults, then the preset, then the config file, then `--set` overrides.
///
/// Relative paths in the result are resolved against the config file's directory.
pub fn load(path: Option<&Path>, preset: Preset, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::default())?;
    merge(&mut tree, &preset_overrides(preset), "")?;
    let mut base = PathBuf::from(".");
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut tree, &file, "")?;
        if let Some(dir) = path.parent() {
            base = dir.to_path_buf();
        }
    }
    for o in overrides {
        merge(&mut tree, &parse_override(o)?, "")?;
    }
    let mut config: RunConfig =
        serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    config.paths.rebase(&base);
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.process()?;
        self.net_config().validate()?;
        self.train_config().validate()?;
        if self.length < 2 {
            return Err(Error::Config(format!("length must be at least 2, got {}", self.length)));
        }
        if self.prepare.stride == 0 {
            return Err(Error::Config("prepare.stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn process(&self) -> Result<DiffusionProcess> {
        let schedule = NoiseSchedule::new(self.schedule, self.sigma_min, self.sigma_max)?;
        DiffusionProcess::new(self.process, schedule, self.horizon)
    }

    pub fn net_config(&self) -> ScoreNetConfig {
        ScoreNetConfig {
            channels: self.net.channels,
            diff_embed_dim: self.net.diff_embed_dim,
            feat_embed_dim: self.net.feat_embed_dim,
            time_embed_dim: self.net.time_embed_dim,
            n_res_blocks: self.net.n_res_blocks,
            n_heads: self.net.n_heads,
            length: self.length,
            n_diffusion_steps: self.generate.n_steps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            lr_decay_points: self.train.lr_decay_points.clone(),
            lr_decay_factor: self.train.lr_decay_factor,
            t_floor: self.train.t_floor,
            seed: self.seed,
            weighting: Weighting::KernelVariance,
            micro_batch: self.train.micro_batch,
        }
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        PrepareConfig {
            window_length: self.length,
            stride: self.prepare.stride,
            min_years: self.prepare.min_years,
        }
    }

    pub fn generation_spec(&self, scale: f64) -> Result<GenerationSpec> {
        Ok(GenerationSpec {
            n_series: self.generate.n_series,
            length: self.length,
            n_steps: self.generate.n_steps,
            seed: self.seed,
            process: self.process()?,
            scale,
            batch_size: self.generate.batch_size,
            prior_std: self.generate.prior_std,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = load(None, Preset::Paper, &[]).unwrap();
        assert_eq!(c.length, 2048);
        assert_eq!(c.train.epochs, 1000);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.generate.n_series, 120);
        assert_eq!(c.generate.n_steps, 2000);
        assert_eq!((c.sigma_min, c.sigma_max, c.horizon), (0.01, 1.0, 1.0));
    }

    #[test]
    fn desk_preset_shrinks() {
        let c = load(None, Preset::Desk, &[]).unwrap();
        assert_eq!(c.length, 512);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.generate.n_series, 20);
        assert_eq!(c.net_config().length, 512);
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"train": {"epochs": 7}, "schedule": "cosine"}"#).unwrap();
        let c = load(
            Some(&path),
            Preset::Desk,
            &["train.epochs=9".into(), "process=ve".into(), "paths.series=out.csv".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 9);
        assert_eq!(c.schedule, ScheduleKind::Cosine);
        assert_eq!(c.process, ProcessKind::Ve);
        assert_eq!(c.length, 512);
        assert_eq!(c.paths.series, dir.path().join("out.csv"));
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in ["train.epoch=3", "nope=1", "net=3"] {
            let err = load(None, Preset::Paper, &[bad.into()]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        }
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn null_optionals_accept_values() {
        let c = load(None, Preset::Paper, &["generate.prior_std=1.5".into()]).unwrap();
        assert_eq!(c.generate.prior_std, Some(1.5));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(load(None, Preset::Paper, &["sigma_min=2".into()]).is_err());
        assert!(load(None, Preset::Paper, &["net.n_heads=7".into()]).is_err());
        assert!(load(None, Preset::Paper, &["train.epochs=\"x\"".into()]).is_err());
    }
}
