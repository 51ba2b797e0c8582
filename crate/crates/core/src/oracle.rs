//! Self-checks against independent references: closed forms, Monte Carlo,
//! finite differences and synthetic generators with known answers.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics;
use crate::process::{DiffusionProcess, ProcessKind};
use crate::sample::{self, GaussianScore, GenerationSpec, NetworkScore, ScoreModel};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::scorenet::{self, ScoreNetConfig, ScoreNetParams};
use crate::train::{self, DsmDraws, TrainConfig};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub title: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn summary(&self) -> String {
        let failed = self.failures();
        if failed.is_empty() {
            format!("{} checks passed in {:.1}s", self.checks.len(), self.seconds)
        } else {
            let names: Vec<String> = failed
                .iter()
                .take(3)
                .map(|c| format!("{} ({})", c.name, c.detail))
                .collect();
            format!(
                "{}/{} checks failed: {}",
                failed.len(),
                self.checks.len(),
                names.join("; ")
            )
        }
    }
}

fn timed(title: &str, f: impl FnOnce(&mut Vec<Check>) -> Result<()>) -> Result<OracleReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    f(&mut checks)?;
    Ok(OracleReport {
        title: title.to_string(),
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn schedules(sigma_min: f64, sigma_max: f64) -> Result<Vec<NoiseSchedule>> {
    ScheduleKind::ALL
        .iter()
        .map(|&k| NoiseSchedule::new(k, sigma_min, sigma_max))
        .collect()
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

/// Endpoints, monotonicity on a 10⁴ grid, and finite-difference agreement of
/// σ² with its rate and of the integral with σ².
pub fn schedule_calculus(sigma_min: f64, sigma_max: f64) -> Result<OracleReport> {
    timed("schedule calculus", |checks| {
        const GRID: usize = 10_000;
        let h = 1e-6;
        for s in schedules(sigma_min, sigma_max)? {
            let k = s.kind();
            let e0 = (s.sigma(0.0)? - sigma_min).abs();
            let e1 = (s.sigma(1.0)? - sigma_max).abs();
            checks.push(Check::new(
                format!("{k}: endpoints"),
                e0 < 1e-12 && e1 < 1e-12,
                format!("|σ(0)−σ_min| = {e0:.1e}, |σ(1)−σ_max| = {e1:.1e}"),
            ));

            let mut prev = s.sigma(0.0)?;
            let mut monotone = true;
            for i in 1..=GRID {
                let v = s.sigma(i as f64 / GRID as f64)?;
                monotone &= v >= prev;
                prev = v;
            }
            checks.push(Check::new(format!("{k}: monotone"), monotone, ""));

            let mut worst_rate: f64 = 0.0;
            let mut worst_int: f64 = 0.0;
            for i in 0..GRID {
                let t = (i as f64 + 0.5) / GRID as f64;
                let sq = |u: f64| s.sigma(u).map(|v| v * v);
                let fd_rate = (sq(t + h)? - sq(t - h)?) / (2.0 * h);
                let rate = s.sigma_sq_rate(t)?;
                worst_rate = worst_rate.max((fd_rate - rate).abs() / rate.abs().max(1e-12));
                let fd_int = (s.sigma_sq_integral(t + h)? - s.sigma_sq_integral(t - h)?) / (2.0 * h);
                worst_int = worst_int.max(rel_err(fd_int, sq(t)?));
            }
            checks.push(Check::new(
                format!("{k}: d/dt σ² matches rate"),
                worst_rate < 1e-4,
                format!("max rel err {worst_rate:.2e}"),
            ));
            checks.push(Check::new(
                format!("{k}: d/dt ∫σ² matches σ²"),
                worst_int < 1e-4,
                format!("max rel err {worst_int:.2e}"),
            ));
        }
        Ok(())
    })
}

/// 10⁴-path Euler–Maruyama runs against the analytic kernel for every
/// process/schedule pair, at the requested times.
pub fn kernel_em_agreement(
    n_paths: usize,
    n_steps: usize,
    times: &[f64],
    seed: u64,
) -> Result<OracleReport> {
    timed("kernel / Euler–Maruyama agreement", |checks| {
        let x0 = [1.0];
        for kind in ProcessKind::ALL {
            for (si, sched) in schedules(0.01, 1.0)?.into_iter().enumerate() {
                let process = DiffusionProcess::unit(kind, sched);
                let idx: Vec<usize> = times
                    .iter()
                    .map(|&t| (t * n_steps as f64).round() as usize)
                    .collect();
                let mut sum = vec![0.0; times.len()];
                let mut sum_sq = vec![0.0; times.len()];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((kind as u64) * 3 + si as u64);
                for _ in 0..n_paths {
                    let path = process.em_forward_path(&x0, n_steps, &mut rng)?;
                    for (j, &i) in idx.iter().enumerate() {
                        let v = path[i][0];
                        sum[j] += v;
                        sum_sq[j] += v * v;
                    }
                }
                let n = n_paths as f64;
                for (j, &t) in times.iter().enumerate() {
                    let kernel = process.transition(&x0, t)?;
                    let var = kernel.std * kernel.std;
                    let mean = sum[j] / n;
                    let emp_var = (sum_sq[j] - n * mean * mean) / (n - 1.0);
                    let se_mean = (var / n).sqrt();
                    let se_var = var * (2.0 / (n - 1.0)).sqrt();
                    let zm = (mean - kernel.mean[0]) / se_mean;
                    let zv = (emp_var - var) / se_var;
                    checks.push(Check::new(
                        format!("{kind}/{}: t={t}", sched.kind()),
                        zm.abs() < 3.0 && zv.abs() < 3.0,
                        format!("mean z = {zm:+.2}, var z = {zv:+.2}"),
                    ));
                }
            }
        }
        Ok(())
    })
}

/// Reverse integration with the exact score of N(0, 1) data.
///
/// The prior is the exact terminal marginal N(0, 1 + σ_max²), so any error is
/// attributable to the discretisation and not to prior mismatch.
pub fn exact_score_reverse(
    n_paths: usize,
    length: usize,
    n_steps: usize,
    seed: u64,
) -> Result<OracleReport> {
    timed("exact-score reverse integration", |checks| {
        for kind in [ProcessKind::Ve, ProcessKind::Gbm] {
            for sched in schedules(0.01, 1.0)? {
                let process = DiffusionProcess::unit(kind, sched);
                let model = GaussianScore {
                    process,
                    data_var: 1.0,
                };
                let spec = GenerationSpec {
                    n_series: n_paths,
                    length,
                    n_steps,
                    seed,
                    batch_size: n_paths,
                    prior_std: Some(model.marginal_var(process.horizon())?.sqrt()),
                    ..GenerationSpec::new(process)
                };
                let out = sample::generate(&model, &spec)?;
                let (mean, var) = moments(out.iter().flatten().copied());
                checks.push(Check::new(
                    format!("{kind}/{}", sched.kind()),
                    (var - 1.0).abs() < 0.05 && mean.abs() < 0.02,
                    format!("mean {mean:+.4}, var {var:.4}"),
                ));
            }
        }
        Ok(())
    })
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn set_element(var: &candle_core::Var, index: usize, value: f64) -> Result<()> {
    let dims = var.dims().to_vec();
    let mut flat = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    flat[index] = value;
    var.set(&Tensor::from_vec(flat, dims, &Device::Cpu)?)?;
    Ok(())
}

/// Backpropagated DSM gradients against central differences on randomly
/// chosen scalar parameters, evaluated in double precision.
pub fn gradient_check(
    net: &ScoreNetConfig,
    n_params: usize,
    h: f64,
    seed: u64,
) -> Result<OracleReport> {
    timed("DSM gradient check", |checks| {
        let params = ScoreNetParams::init_with_dtype(net, seed, DType::F64)?;
        scorenet::randomize_output(&params, seed ^ 0x5eed);
        let process = DiffusionProcess::unit(
            ProcessKind::Gbm,
            NoiseSchedule::with_defaults(ScheduleKind::Exponential),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..net.length).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let draws = DsmDraws::sample(&mut rng, batch.len(), net.length, 0.05, 1.0);
        let loss = train::dsm_objective(&params, &process, &batch, &draws)?;
        let grads = loss.backward()?;
        let eval = || -> Result<f64> {
            Ok(train::dsm_objective(&params, &process, &batch, &draws)?.to_scalar::<f64>()?)
        };

        let names: Vec<&String> = params.vars().keys().collect();
        let sizes: Vec<usize> = params.vars().values().map(|v| v.elem_count()).collect();
        let total: usize = sizes.iter().sum();
        for _ in 0..n_params {
            let mut pick = rng.random_range(0..total);
            let mut which = 0;
            while pick >= sizes[which] {
                pick -= sizes[which];
                which += 1;
            }
            let name = names[which];
            let var = &params.vars()[name];
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all()?.to_vec1::<f64>()?[pick],
                None => 0.0,
            };
            let orig = var.as_tensor().flatten_all()?.to_vec1::<f64>()?[pick];
            set_element(var, pick, orig + h)?;
            let up = eval()?;
            set_element(var, pick, orig - h)?;
            let down = eval()?;
            set_element(var, pick, orig)?;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            checks.push(Check::new(
                format!("{name}[{pick}]"),
                rel < 1e-3,
                format!("backprop {analytic:+.6e}, central {numeric:+.6e}, rel {rel:.1e}"),
            ));
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyConfig {
    pub net: ScoreNetConfig,
    pub train: TrainConfig,
    pub n_windows: usize,
    pub data_std: f64,
    pub process: DiffusionProcess,
    pub eval_times: Vec<f64>,
    pub n_generate: usize,
    pub gen_steps: usize,
}

impl ToyConfig {
    /// Small network on iid Gaussian windows of length 32.
    pub fn desk() -> Self {
        Self {
            net: ScoreNetConfig {
                channels: 16,
                diff_embed_dim: 32,
                feat_embed_dim: 8,
                time_embed_dim: 16,
                n_res_blocks: 4,
                n_heads: 2,
                length: 32,
                n_diffusion_steps: 2000,
            },
            train: TrainConfig {
                batch_size: 64,
                epochs: 400,
                seed: 1,
                ..TrainConfig::default()
            },
            n_windows: 512,
            data_std: 0.3,
            process: DiffusionProcess::unit(
                ProcessKind::Gbm,
                NoiseSchedule::with_defaults(ScheduleKind::Cosine),
            ),
            eval_times: vec![0.2, 0.5, 0.9],
            n_generate: 256,
            gen_steps: 1000,
        }
    }
}

/// Relative L2 error of `model` against the exact Gaussian score at time `t`,
/// on windows that are shuffled ±2-std grids of the marginal at `t`.
pub fn score_error(
    model: &dyn ScoreModel,
    exact: &GaussianScore,
    length: usize,
    t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    let sd = exact.marginal_var(t)?.sqrt();
    let grid: Vec<f64> = (0..length)
        .map(|i| -2.0 * sd + 4.0 * sd * i as f64 / (length - 1) as f64)
        .collect();
    let batch = 16;
    let mut x = Vec::with_capacity(batch * length);
    for _ in 0..batch {
        let mut row = grid.clone();
        row.shuffle(rng);
        x.extend(row);
    }
    let got = model.score(&x, batch, length, t)?;
    let want = exact.score(&x, batch, length, t)?;
    let num: f64 = got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = want.iter().map(|b| b * b).sum();
    Ok((num / den).sqrt())
}

/// Train on iid Gaussian windows, then compare the learned score with the
/// exact one and the generated variance with the data variance.
pub fn dsm_toy(config: &ToyConfig) -> Result<OracleReport> {
    timed("DSM Gaussian toy", |checks| {
        let len = config.net.length;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let draw_windows = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..len)
                        .map(|_| config.data_std * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        };
        let data = draw_windows(config.n_windows, &mut rng);
        let held_out = draw_windows(64, &mut rng);
        let held_draws = DsmDraws::sample(&mut rng, 64, len, config.train.t_floor, 1.0);

        let init = ScoreNetParams::init(&config.net, config.train.seed)?;
        let loss_of = |p: &ScoreNetParams| -> Result<f64> {
            Ok(train::dsm_objective(p, &config.process, &held_out, &held_draws)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?)
        };
        let before = loss_of(&init)?;
        let ck = train::fit(&config.train, &config.process, &data, &config.net, |s| {
            if s.epoch % 20 == 0 {
                log::info!("toy epoch {} loss {:.4}", s.epoch, s.mean_loss);
            }
        })?;
        let after = loss_of(&ck.params)?;
        checks.push(Check::new(
            "held-out loss decreases",
            after < before,
            format!("{before:.4} → {after:.4}"),
        ));

        let exact = GaussianScore {
            process: config.process,
            data_var: config.data_std * config.data_std,
        };
        let net = NetworkScore {
            params: &ck.params,
            horizon: config.process.horizon(),
        };
        for &t in &config.eval_times {
            let err = score_error(&net, &exact, len, t, &mut rng)?;
            checks.push(Check::new(
                format!("score rel L2 at t={t}"),
                err < 0.15,
                format!("{err:.4}"),
            ));
        }

        let spec = GenerationSpec {
            n_series: config.n_generate,
            length: len,
            n_steps: config.gen_steps,
            seed: config.train.seed,
            batch_size: config.n_generate,
            ..GenerationSpec::new(config.process)
        };
        let out = sample::generate(&net, &spec)?;
        let (_, var) = moments(out.iter().flatten().copied());
        let want = config.data_std * config.data_std;
        let rel = (var / want - 1.0).abs();
        checks.push(Check::new(
            "generated variance",
            rel < 0.10,
            format!("{var:.5} vs {want:.5} (rel {rel:.3})"),
        ));
        Ok(())
    })
}

/// Pareto-tailed symmetric returns with density exponent `alpha`.
pub fn pareto_returns<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let index = alpha - 1.0;
    (0..n)
        .map(|_| {
            let u: f64 = 1.0 - rng.random::<f64>();
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s * u.powf(-1.0 / index)
        })
        .collect()
}

/// Tail exponent on Pareto and Student-t samples, leverage on iid noise
/// against bootstrap errors, and β on an exact power law.
pub fn metric_estimators(n_tail: usize, n_leverage: usize, seed: u64) -> Result<OracleReport> {
    timed("metric estimators", |checks| {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        let p = pareto_returns(n_tail, 4.0, &mut stream(0));
        let tp = metrics::tail_exponent(&p)?;
        checks.push(Check::new(
            "tail exponent, Pareto density exponent 4",
            (tp.alpha - 4.0).abs() <= 0.3,
            format!(
                "α = {:.3} ± {:.3} (Hill {:.3})",
                tp.alpha,
                tp.stderr,
                tp.diagnostics.hill_alpha.unwrap_or(f64::NAN)
            ),
        ));
        let t4 = StudentT::new(4.0).map_err(|e| Error::Numeric(e.to_string()))?;
        let mut rng = stream(1);
        let s: Vec<f64> = (0..n_tail).map(|_| t4.sample(&mut rng)).collect();
        let ts = metrics::tail_exponent(&s)?;
        checks.push(Check::new(
            "tail exponent, Student-t(4)",
            (ts.alpha - 5.0).abs() <= 0.4,
            format!(
                "α = {:.3} ± {:.3} (density fit {:.3}, Hill {:.3})",
                ts.alpha,
                ts.stderr,
                ts.diagnostics.density.alpha.unwrap_or(f64::NAN),
                ts.diagnostics.hill_alpha.unwrap_or(f64::NAN)
            ),
        ));

        let mut rng = stream(2);
        let iid: Vec<f64> = (0..n_leverage).map(|_| rng.sample(StandardNormal)).collect();
        let lev = metrics::leverage(&iid, 100)?;
        let se = metrics::leverage_bootstrap_se(&iid, 100, 100, &mut rng)?;
        let inside = lev.iter().zip(&se).filter(|(l, s)| l.abs() <= 3.0 * **s).count();
        checks.push(Check::new(
            "leverage on iid normal within 3 bootstrap SE",
            inside as f64 >= 0.95 * lev.len() as f64,
            format!("{inside}/{} lags inside", lev.len()),
        ));

        let curve: Vec<f64> = (1..=100).map(|k| (k as f64).powf(-0.3)).collect();
        let b = metrics::fit_beta(&curve, 1, 100)?;
        checks.push(Check::new(
            "fit_beta on exact k^-0.3",
            (b.beta - 0.3).abs() <= 1e-6,
            format!("β = {:.9}", b.beta),
        ));
        Ok(())
    })
}

/// The suite behind `gbmd oracle`.
pub fn standard_suite(seed: u64) -> Result<Vec<OracleReport>> {
    Ok(vec![
        schedule_calculus(0.01, 1.0)?,
        kernel_em_agreement(10_000, 1000, &[0.25, 0.5, 1.0], seed)?,
        exact_score_reverse(5000, 8, 2000, seed)?,
        metric_estimators(1_000_000, 100_000, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_calculus_passes() {
        let r = schedule_calculus(0.01, 1.0).unwrap();
        assert!(r.passed(), "{}", r.summary());
        let r = schedule_calculus(0.05, 3.0).unwrap();
        assert!(r.passed(), "{}", r.summary());
    }

    #[test]
    fn gradient_check_small() {
        let net = ScoreNetConfig {
            channels: 8,
            diff_embed_dim: 16,
            feat_embed_dim: 4,
            time_embed_dim: 8,
            n_res_blocks: 2,
            n_heads: 2,
            length: 12,
            n_diffusion_steps: 2000,
        };
        let r = gradient_check(&net, 10, 1e-4, 3).unwrap();
        assert!(r.passed(), "{}", r.summary());
    }

    #[test]
    fn report_summary_lists_failures() {
        let r = OracleReport {
            title: "t".into(),
            checks: vec![Check::new("a", true, ""), Check::new("b", false, "off by 2")],
            seconds: 0.0,
        };
        assert!(!r.passed());
        assert_eq!(r.summary(), "1/2 checks failed: b (off by 2)");
    }
}
