use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use gbmd::data::{self, DatasetManifest, ReturnWindow, SourceSummary, TickerReport};
use gbmd::metrics::{self, Garch11, StylizedFactsReport};
use gbmd::sample::{self, NetworkScore, SampleSidecar};
use gbmd::train::{self, Checkpoint};
use gbmd::{oracle, Error, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataSource, RunConfig};
use crate::plot::{self, Axes, Curve};

/// Failure of a CLI command; oracle failures are reported separately from
/// errors so they can map to their own exit code.
#[derive(Debug)]
pub enum Failure {
    Error(Error),
    Oracle { failed: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn garch_dataset(
    config: &RunConfig,
) -> Result<(Vec<ReturnWindow>, DatasetManifest, Vec<TickerReport>)> {
    let g = &config.prepare.garch;
    let model = Garch11::new(g.omega, g.alpha, g.beta)?;
    let mut windows = Vec::new();
    let mut sources = Vec::new();
    let mut reports = Vec::new();
    for i in 0..g.n_tickers {
        let ticker = format!("GARCH{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let r = model.simulate(g.n_returns, g.burn_in, &mut rng);
        let w = data::make_windows(&r, config.length, config.prepare.stride, &ticker)?;
        sources.push(SourceSummary {
            ticker: ticker.clone(),
            n_returns: r.len(),
            n_windows: w.len(),
        });
        reports.push(TickerReport {
            ticker,
            n_prices: r.len() + 1,
            n_windows: w.len(),
            skipped: None,
        });
        windows.extend(w);
    }
    let (normalized, scale) = data::normalize(&windows)?;
    let manifest = DatasetManifest {
        length: config.length,
        stride: config.prepare.stride,
        n_windows: normalized.len(),
        global_scale: scale,
        sources,
        origins: Vec::new(),
        payload_sha256: String::new(),
    };
    Ok((normalized, manifest, reports))
}

pub fn prepare(config: &RunConfig) -> Result<()> {
    let (windows, manifest, reports) = match config.prepare.source {
        DataSource::Csv => {
            let files = data::list_csv_files(&config.paths.input_dir)?;
            if files.is_empty() {
                return Err(Error::Data(format!(
                    "no CSV files in {}",
                    config.paths.input_dir.display()
                )));
            }
            let series = files
                .iter()
                .map(|f| data::ingest_csv(f))
                .collect::<Result<Vec<_>>>()?;
            data::build_dataset(&series, &config.prepare_config())?
        }
        DataSource::Garch => garch_dataset(config)?,
    };
    println!("ticker\tprices\twindows\tnote");
    for r in &reports {
        println!(
            "{}\t{}\t{}\t{}",
            r.ticker,
            r.n_prices,
            r.n_windows,
            r.skipped.as_deref().unwrap_or("")
        );
    }
    println!(
        "total\t\t{}\tscale {:.6e}",
        manifest.n_windows, manifest.global_scale
    );
    ensure_parent(&config.paths.dataset)?;
    data::save_dataset(&windows, &manifest, &config.paths.dataset)?;
    info!("wrote {}", config.paths.dataset.display());
    Ok(())
}

fn load_windows(config: &RunConfig) -> Result<(Vec<ReturnWindow>, DatasetManifest)> {
    let (windows, manifest) = data::load_dataset(&config.paths.dataset)?;
    if manifest.length != config.length {
        return Err(Error::Config(format!(
            "dataset windows have length {}, config says {}",
            manifest.length, config.length
        )));
    }
    Ok((windows, manifest))
}

pub fn train(config: &RunConfig) -> Result<()> {
    let (windows, _) = load_windows(config)?;
    let dataset: Vec<Vec<f64>> = windows.iter().map(ReturnWindow::log_price).collect();
    let process = config.process()?;
    let tc = config.train_config();
    let ckpt_path = &config.paths.checkpoint;
    let start = if config.train.resume && ckpt_path.exists() {
        let ck = train::load_checkpoint(ckpt_path)?;
        if ck.params.config() != &config.net_config() {
            return Err(Error::Config(
                "checkpoint network differs from configured network".into(),
            ));
        }
        info!("resuming from epoch {}", ck.epoch);
        ck
    } else {
        Checkpoint::fresh(&config.net_config(), config.seed)?
    };
    info!(
        "training {} parameters on {} windows of length {}",
        start.params.num_parameters(),
        dataset.len(),
        config.length
    );

    let log_path = &config.paths.training_log;
    ensure_parent(log_path)?;
    let append = start.epoch > 0 && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(log_path)
        .map_err(|e| io_err(log_path, e))?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(log, "epoch,mean_loss,lr,wall_seconds").map_err(|e| io_err(log_path, e))?;
    }
    let mut log_error = None;
    let outcome = train::resume(start, &tc, &process, &dataset, |s| {
        if let Err(e) = writeln!(log, "{},{},{},{:.3}", s.epoch, s.mean_loss, s.lr, s.wall_seconds) {
            log_error.get_or_insert(e);
        }
    });
    if let Some(e) = log_error {
        return Err(io_err(log_path, e));
    }
    log.flush().map_err(|e| io_err(log_path, e))?;
    ensure_parent(ckpt_path)?;
    match outcome {
        Ok(ck) => {
            train::save_checkpoint(&ck, ckpt_path)?;
            println!(
                "trained {} epochs, final loss {:.5}; wrote {}",
                ck.epoch,
                ck.loss_history.last().copied().unwrap_or(f64::NAN),
                ckpt_path.display()
            );
            Ok(())
        }
        Err(Error::Diverged {
            epoch,
            loss,
            last_good,
        }) => {
            train::save_checkpoint(&last_good, ckpt_path)?;
            warn!(
                "saved last good checkpoint (epoch {}) to {}",
                last_good.epoch,
                ckpt_path.display()
            );
            Err(Error::Diverged {
                epoch,
                loss,
                last_good,
            })
        }
        Err(e) => Err(e),
    }
}

pub fn sample(config: &RunConfig) -> Result<()> {
    let ckpt_bytes = gbmd::container::read_all(&config.paths.checkpoint)?;
    let ck = train::decode_checkpoint(&ckpt_bytes)?;
    let (_, manifest) = load_windows(config)?;
    if ck.params.config().length < config.length {
        return Err(Error::Config(format!(
            "network length {} is shorter than the requested {}",
            ck.params.config().length,
            config.length
        )));
    }
    let spec = config.generation_spec(manifest.global_scale)?;
    let model = NetworkScore {
        params: &ck.params,
        horizon: spec.process.horizon(),
    };
    info!(
        "generating {} series of length {} with {} reverse steps",
        spec.n_series, spec.length, spec.n_steps
    );
    let series = sample::generate(&model, &spec)?;
    ensure_parent(&config.paths.series)?;
    sample::write_series_csv(&config.paths.series, &series)?;
    let sidecar = SampleSidecar {
        seed: spec.seed,
        spec,
        checkpoint_sha256: data::sha256_hex(&ckpt_bytes),
    };
    write_file(&config.paths.sidecar, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    println!(
        "wrote {} series to {}",
        series.len(),
        config.paths.series.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport<'a> {
    generated: &'a StylizedFactsReport,
    reference: Option<&'a StylizedFactsReport>,
}

fn print_report(name: &str, r: &StylizedFactsReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{name}: {} series, {} returns; alpha {} beta {} L(0) {}",
        r.n_series,
        r.n_obs,
        fmt(r.alpha),
        fmt(r.beta),
        fmt(r.leverage.as_ref().and_then(|l| l.first().copied()))
    );
    for e in &r.errors {
        println!("{name}: {e}");
    }
}

fn curve(values: Option<&Vec<f64>>, first_lag: usize) -> Vec<(f64, f64)> {
    values
        .map(|v| {
            v.iter()
                .enumerate()
                .map(|(i, &y)| ((i + first_lag) as f64, y))
                .collect()
        })
        .unwrap_or_default()
}

fn tail_curve(r: &StylizedFactsReport) -> Vec<(f64, f64)> {
    r.tail
        .as_ref()
        .map(|t| {
            t.density
                .centers
                .iter()
                .copied()
                .zip(t.density.density.iter().copied())
                .collect()
        })
        .unwrap_or_default()
}

pub fn evaluate(config: &RunConfig) -> Result<()> {
    let series = sample::read_series_csv(&config.paths.series)?;
    let returns: Vec<Vec<f64>> = series.iter().map(|s| sample::to_returns(s)).collect();
    let generated = metrics::aggregate_report(&returns, &config.report)?;
    let reference = match &config.paths.reference {
        Some(path) => {
            let (windows, manifest) = data::load_dataset(path)?;
            let raw: Vec<Vec<f64>> = data::denormalize(&windows, manifest.global_scale)
                .into_iter()
                .map(|w| w.values)
                .collect();
            Some(metrics::aggregate_report(&raw, &config.report)?)
        }
        None => None,
    };

    let dir = &config.paths.report_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let combined = EvaluationReport {
        generated: &generated,
        reference: reference.as_ref(),
    };
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&combined)? + "\n")?;
    let mut reports = vec![("generated", &generated)];
    if let Some(r) = &reference {
        reports.push(("reference", r));
    }
    for (name, r) in &reports {
        write_file(&dir.join(format!("{name}_acf.csv")), r.acf_csv())?;
        write_file(&dir.join(format!("{name}_leverage.csv")), r.leverage_csv())?;
        write_file(&dir.join(format!("{name}_tail_density.csv")), r.tail_density_csv())?;
        print_report(name, r);
    }

    let tails: Vec<Curve> = reports
        .iter()
        .map(|(name, r)| Curve {
            label: name,
            points: tail_curve(r),
            markers: true,
        })
        .collect();
    let svg = plot::render(
        "Tail density of normalized returns",
        "|r| / std",
        "density",
        Axes { log_x: true, log_y: true },
        &tails,
    );
    write_file(&dir.join("tail_density.svg"), svg)?;

    let acf_label = match config.report.acf_variant {
        metrics::AcfVariant::Abs => "ACF of |r|",
        metrics::AcfVariant::Squared => "ACF of r²",
    };
    let acfs: Vec<Curve> = reports
        .iter()
        .map(|(name, r)| Curve {
            label: name,
            points: curve(r.acf.as_ref(), 1),
            markers: false,
        })
        .collect();
    let svg = plot::render(
        "Volatility clustering",
        "lag k",
        acf_label,
        Axes { log_x: true, log_y: true },
        &acfs,
    );
    write_file(&dir.join("acf.svg"), svg)?;

    let levs: Vec<Curve> = reports
        .iter()
        .map(|(name, r)| Curve {
            label: name,
            points: curve(r.leverage.as_ref(), 0),
            markers: false,
        })
        .collect();
    let svg = plot::render("Leverage effect", "lag k", "L(k)", Axes::default(), &levs);
    write_file(&dir.join("leverage.svg"), svg)?;
    println!("wrote report to {}", dir.display());
    Ok(())
}

pub fn run_oracles(config: &RunConfig) -> std::result::Result<(), Failure> {
    let reports = oracle::standard_suite(config.seed)?;
    let mut failed = 0;
    for r in &reports {
        let tag = if r.passed() { "PASS" } else { "FAIL" };
        println!("{tag} {}: {}", r.title, r.summary());
        failed += r.failures().len();
    }
    if failed > 0 {
        Err(Failure::Oracle { failed })
    } else {
        Ok(())
    }
}
