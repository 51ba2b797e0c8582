//! Stylized-fact estimators: tail exponent, volatility clustering, leverage.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower edge of the tail region, in units of the return std.
pub const TAIL_THRESHOLD: f64 = 3.0;
/// Lower edge of the density-histogram tail region.
pub const DENSITY_THRESHOLD: f64 = 2.0;
pub const TAIL_POINTS: usize = 50;
pub const MIN_TAIL_OBS: usize = 100;
pub const MIN_OBS: usize = 10_000;
/// Exceedances left above the last point of the survival-function grid.
const CCDF_MIN_EXCEEDANCES: usize = 20;
const HILL_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub n: usize,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::Numeric(format!("regression needs ≥ 3 paired points, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::Numeric("regression abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    Ok(LineFit {
        slope,
        intercept,
        slope_stderr: (ssr / (nf - 2.0) / sxx).sqrt(),
        n,
    })
}

fn standardized_abs(returns: &[f64]) -> Result<Vec<f64>> {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0 && sd.is_finite()) || returns.iter().all(|&r| r == returns[0]) {
        return Err(Error::Numeric("returns have zero variance; tail exponent undefined".into()));
    }
    let mut a: Vec<f64> = returns.iter().map(|r| ((r - mean) / sd).abs()).collect();
    a.sort_by(f64::total_cmp);
    Ok(a)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect();
    // Pin the ends so grid points that coincide with sample values stay exact.
    g[0] = lo;
    g[n - 1] = hi;
    g
}

/// Histogram of |r| on logarithmic bins, normalised to a density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailDensity {
    /// Geometric bin centres (normalised units).
    pub centers: Vec<f64>,
    pub density: Vec<f64>,
    /// Negative slope of log density against log |r| over non-empty bins.
    pub alpha: Option<f64>,
}

/// Density of |r| ≥ `lo` on `bins` log-spaced bins up to the sample maximum.
/// `sorted_abs` must be ascending.
pub fn tail_density(sorted_abs: &[f64], lo: f64, bins: usize) -> TailDensity {
    let n = sorted_abs.len() as f64;
    let hi = sorted_abs.last().copied().unwrap_or(lo);
    if !(hi > lo) || bins < 2 {
        return TailDensity {
            centers: vec![],
            density: vec![],
            alpha: None,
        };
    }
    let edges = log_grid(lo, hi * (1.0 + 1e-12), bins + 1);
    let mut centers = Vec::new();
    let mut density = Vec::new();
    for e in edges.windows(2) {
        let lo_i = sorted_abs.partition_point(|&v| v < e[0]);
        let hi_i = sorted_abs.partition_point(|&v| v < e[1]);
        let count = hi_i - lo_i;
        centers.push((e[0] * e[1]).sqrt());
        density.push(count as f64 / (n * (e[1] - e[0])));
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = centers
        .iter()
        .zip(&density)
        .filter(|(_, &d)| d > 0.0)
        .map(|(c, d)| (c.ln(), d.ln()))
        .unzip();
    let alpha = ols(&lx, &ly).ok().map(|f| -f.slope);
    TailDensity {
        centers,
        density,
        alpha,
    }
}

/// Hill tail index on the largest `fraction` of |r|, returned as a density
/// exponent (index + 1). `sorted_abs` must be ascending.
pub fn hill_alpha(sorted_abs: &[f64], fraction: f64) -> Option<f64> {
    let n = sorted_abs.len();
    let k = ((n as f64) * fraction).floor() as usize;
    if k < 2 || k >= n {
        return None;
    }
    let threshold = sorted_abs[n - k - 1];
    if threshold <= 0.0 {
        return None;
    }
    let h = sorted_abs[n - k..]
        .iter()
        .map(|v| (v / threshold).ln())
        .sum::<f64>()
        / k as f64;
    (h > 0.0).then(|| 1.0 + 1.0 / h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailDiagnostics {
    pub n_obs: usize,
    /// Observations with |r| ≥ `TAIL_THRESHOLD`.
    pub n_tail: usize,
    /// Upper end of the survival-function grid.
    pub grid_max: f64,
    pub r_squared: f64,
    pub hill_alpha: Option<f64>,
    pub density: TailDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub alpha: f64,
    pub stderr: f64,
    pub diagnostics: TailDiagnostics,
}

/// Density tail exponent α of `P(|r|) ∼ |r|^{-α}`.
///
/// Returns are standardised, the empirical survival function of |r| is
/// evaluated on `TAIL_POINTS` log-spaced points from `TAIL_THRESHOLD` to the
/// level with `CCDF_MIN_EXCEEDANCES` observations left, and α = 1 − slope of
/// log S against log |r|. A log-binned density fit over |r| ≥ 2 and a Hill
/// estimate on the top 5 % are reported alongside.
pub fn tail_exponent(returns: &[f64]) -> Result<TailEstimate> {
    let n = returns.len();
    if n < MIN_OBS {
        return Err(Error::Numeric(format!(
            "tail exponent needs at least {MIN_OBS} observations, got {n}"
        )));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric("non-finite return".into()));
    }
    let a = standardized_abs(returns)?;
    let n_tail = n - a.partition_point(|&v| v < TAIL_THRESHOLD);
    if n_tail < MIN_TAIL_OBS {
        return Err(Error::Numeric(format!(
            "only {n_tail} observations beyond {TAIL_THRESHOLD} std (need {MIN_TAIL_OBS})"
        )));
    }
    let grid_max = a[n - CCDF_MIN_EXCEEDANCES];
    let xs = log_grid(TAIL_THRESHOLD, grid_max, TAIL_POINTS);
    let (lx, ly): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .map(|&x| {
            let above = n - a.partition_point(|&v| v < x);
            (x.ln(), (above as f64 / n as f64).ln())
        })
        .unzip();
    let fit = ols(&lx, &ly)?;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sst: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let ssr: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - fit.intercept - fit.slope * x).powi(2))
        .sum();
    Ok(TailEstimate {
        alpha: 1.0 - fit.slope,
        stderr: fit.slope_stderr,
        diagnostics: TailDiagnostics {
            n_obs: n,
            n_tail,
            grid_max,
            r_squared: if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 },
            hill_alpha: hill_alpha(&a, HILL_FRACTION),
            density: tail_density(&a, DENSITY_THRESHOLD, TAIL_POINTS),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcfVariant {
    /// Autocorrelation of |r_t|.
    #[default]
    Abs,
    /// Autocorrelation of r_t².
    Squared,
}

/// Biased sample autocorrelation of `x` at lags 1..=max_lag.
pub fn acf(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if max_lag == 0 || 2 * max_lag >= n {
        return Err(Error::Domain(format!(
            "max_lag {max_lag} must be positive and below n/2 = {}",
            n / 2
        )));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0: f64 = d.iter().map(|v| v * v).sum();
    if !(c0 > 0.0) || x.iter().all(|&v| v == x[0]) {
        return Err(Error::Numeric("series is constant; autocorrelation undefined".into()));
    }
    Ok((1..=max_lag)
        .map(|k| d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect())
}

pub fn acf_abs(returns: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    acf_variant(returns, max_lag, AcfVariant::Abs)
}

pub fn acf_variant(returns: &[f64], max_lag: usize, variant: AcfVariant) -> Result<Vec<f64>> {
    let x: Vec<f64> = match variant {
        AcfVariant::Abs => returns.iter().map(|r| r.abs()).collect(),
        AcfVariant::Squared => returns.iter().map(|r| r * r).collect(),
    };
    acf(&x, max_lag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaFit {
    pub beta: f64,
    pub stderr: f64,
    pub lags_used: usize,
    /// Lags dropped because the autocorrelation was not positive.
    pub lags_excluded: Vec<usize>,
}

/// β from `acf(k) ∼ k^{-β}` by OLS of log acf on log k over `lag_min..=lag_max`.
/// `acf[i]` holds lag `i + 1`.
pub fn fit_beta(acf: &[f64], lag_min: usize, lag_max: usize) -> Result<BetaFit> {
    let lag_min = lag_min.max(1);
    let lag_max = lag_max.min(acf.len());
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut excluded = Vec::new();
    for k in lag_min..=lag_max {
        let v = acf[k - 1];
        if v > 0.0 && v.is_finite() {
            lx.push((k as f64).ln());
            ly.push(v.ln());
        } else {
            excluded.push(k);
        }
    }
    if lx.len() < 10 {
        return Err(Error::Numeric(format!(
            "only {} positive autocorrelations in lags {lag_min}..={lag_max} (need 10)",
            lx.len()
        )));
    }
    if !excluded.is_empty() {
        log::debug!("fit_beta: excluded {} non-positive lags", excluded.len());
    }
    let fit = ols(&lx, &ly)?;
    Ok(BetaFit {
        beta: -fit.slope,
        stderr: fit.slope_stderr,
        lags_used: lx.len(),
        lags_excluded: excluded,
    })
}

/// `L(k) = mean_t[r_t r_{t+k}² − r_t r_t²] / (mean_t r_t²)²` for k = 0..=max_lag.
pub fn leverage(returns: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = returns.len();
    if n <= max_lag + 1 {
        return Err(Error::Domain(format!(
            "leverage to lag {max_lag} needs more than {} returns, got {n}",
            max_lag + 1
        )));
    }
    let m2 = returns.iter().map(|r| r * r).sum::<f64>() / n as f64;
    if !(m2 > 0.0 && m2.is_finite()) {
        return Err(Error::Numeric("returns are identically zero; leverage undefined".into()));
    }
    let denom = m2 * m2;
    Ok((0..=max_lag)
        .map(|k| {
            let m = n - k;
            let s: f64 = (0..m)
                .map(|t| {
                    let r = returns[t];
                    r * returns[t + k] * returns[t + k] - r * r * r
                })
                .sum();
            s / m as f64 / denom
        })
        .collect())
}

/// Per-lag standard error of [`leverage`] under iid resampling of `returns`.
pub fn leverage_bootstrap_se<R: Rng + ?Sized>(
    returns: &[f64],
    max_lag: usize,
    resamples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if resamples < 2 {
        return Err(Error::Config("bootstrap needs at least 2 resamples".into()));
    }
    let n = returns.len();
    let mut sum = vec![0.0; max_lag + 1];
    let mut sum_sq = vec![0.0; max_lag + 1];
    let mut buf = vec![0.0; n];
    for _ in 0..resamples {
        for v in buf.iter_mut() {
            *v = returns[rng.random_range(0..n)];
        }
        for (k, l) in leverage(&buf, max_lag)?.into_iter().enumerate() {
            sum[k] += l;
            sum_sq[k] += l * l;
        }
    }
    let b = resamples as f64;
    Ok(sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, q)| ((q - s * s / b) / (b - 1.0)).max(0.0).sqrt())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub acf_max_lag: usize,
    pub beta_lag_min: usize,
    pub beta_lag_max: usize,
    pub leverage_max_lag: usize,
    pub acf_variant: AcfVariant,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            acf_max_lag: 100,
            beta_lag_min: 1,
            beta_lag_max: 100,
            leverage_max_lag: 100,
            acf_variant: AcfVariant::Abs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylizedFactsReport {
    pub alpha: Option<f64>,
    pub alpha_stderr: Option<f64>,
    pub beta: Option<f64>,
    /// Averaged autocorrelation at lags 1..=acf_max_lag.
    pub acf: Option<Vec<f64>>,
    /// Averaged leverage L(0..=leverage_max_lag).
    pub leverage: Option<Vec<f64>>,
    pub n_series: usize,
    pub n_obs: usize,
    pub tail: Option<TailDiagnostics>,
    pub beta_fit: Option<BetaFit>,
    pub acf_variant: AcfVariant,
    /// Estimators that could not be evaluated, with the reason.
    pub errors: Vec<String>,
}

impl StylizedFactsReport {
    /// `(lag, value)` rows for the averaged ACF.
    pub fn acf_csv(&self) -> String {
        curve_csv(self.acf.as_deref().unwrap_or(&[]), 1)
    }

    pub fn leverage_csv(&self) -> String {
        curve_csv(self.leverage.as_deref().unwrap_or(&[]), 0)
    }

    pub fn tail_density_csv(&self) -> String {
        let mut out = String::from("abs_return,density\n");
        if let Some(t) = &self.tail {
            for (c, d) in t.density.centers.iter().zip(&t.density.density) {
                out.push_str(&format!("{c},{d}\n"));
            }
        }
        out
    }
}

fn curve_csv(values: &[f64], first_lag: usize) -> String {
    let mut out = String::from("lag,value\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{v}\n", i + first_lag));
    }
    out
}

fn pointwise_mean(curves: &[Vec<f64>]) -> Vec<f64> {
    let n = curves.len() as f64;
    let mut out = vec![0.0; curves[0].len()];
    for c in curves {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    out
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Pool returns for the tail exponent; average ACF and leverage per series.
///
/// Series are put in a canonical order first, so the report does not depend
/// on the order in which they are supplied.
pub fn aggregate_report(series: &[Vec<f64>], config: &ReportConfig) -> Result<StylizedFactsReport> {
    if series.is_empty() {
        return Err(Error::Data("no series to evaluate".into()));
    }
    let mut order: Vec<&Vec<f64>> = series.iter().collect();
    order.sort_by(|a, b| lexicographic(a, b));
    let mut errors = Vec::new();

    let mut pooled: Vec<f64> = order.iter().flat_map(|s| s.iter().copied()).collect();
    pooled.sort_by(f64::total_cmp);
    let tail = match tail_exponent(&pooled) {
        Ok(t) => Some(t),
        Err(e) => {
            errors.push(format!("tail_exponent: {e}"));
            None
        }
    };

    let acfs: Result<Vec<Vec<f64>>> = order
        .iter()
        .map(|s| acf_variant(s, config.acf_max_lag, config.acf_variant))
        .collect();
    let acf = match acfs {
        Ok(a) => Some(pointwise_mean(&a)),
        Err(e) => {
            errors.push(format!("acf: {e}"));
            None
        }
    };
    let beta_fit = match &acf {
        Some(a) => match fit_beta(a, config.beta_lag_min, config.beta_lag_max) {
            Ok(b) => Some(b),
            Err(e) => {
                errors.push(format!("fit_beta: {e}"));
                None
            }
        },
        None => None,
    };

    let levs: Result<Vec<Vec<f64>>> = order
        .iter()
        .map(|s| leverage(s, config.leverage_max_lag))
        .collect();
    let leverage = match levs {
        Ok(l) => Some(pointwise_mean(&l)),
        Err(e) => {
            errors.push(format!("leverage: {e}"));
            None
        }
    };

    Ok(StylizedFactsReport {
        alpha: tail.as_ref().map(|t| t.alpha),
        alpha_stderr: tail.as_ref().map(|t| t.stderr),
        beta: beta_fit.as_ref().map(|b| b.beta),
        acf,
        leverage,
        n_series: series.len(),
        n_obs: pooled.len(),
        tail: tail.map(|t| t.diagnostics),
        beta_fit,
        acf_variant: config.acf_variant,
        errors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Garch11 {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Garch11 {
    pub fn new(omega: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(omega > 0.0 && alpha >= 0.0 && beta >= 0.0 && alpha + beta < 1.0) {
            return Err(Error::Config(format!(
                "GARCH(1,1) needs ω > 0, a, b ≥ 0, a + b < 1; got {omega}, {alpha}, {beta}"
            )));
        }
        Ok(Self { omega, alpha, beta })
    }

    pub fn unconditional_var(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta)
    }

    /// `n` returns with Gaussian innovations after a burn-in of `burn` steps.
    pub fn simulate<R: Rng + ?Sized>(&self, n: usize, burn: usize, rng: &mut R) -> Vec<f64> {
        let mut var = self.unconditional_var();
        let mut out = Vec::with_capacity(n);
        for i in 0..n + burn {
            let r = var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            if i >= burn {
                out.push(r);
            }
            var = self.omega + self.alpha * r * r + self.beta * var;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StudentT};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Symmetric returns with `P(|r| > x) = x^{-3}` for x ≥ 1, density exponent 4.
    fn pareto(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| {
                let u: f64 = 1.0 - r.random::<f64>();
                let s = if r.random::<bool>() { 1.0 } else { -1.0 };
                s * u.powf(-1.0 / 3.0)
            })
            .collect()
    }

    fn student(n: usize, nu: f64, seed: u64) -> Vec<f64> {
        let d = StudentT::new(nu).unwrap();
        let mut r = rng(seed);
        (0..n).map(|_| d.sample(&mut r)).collect()
    }

    #[test]
    fn ols_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = ols(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.intercept - 2.0).abs() < 1e-12);
        assert!(f.slope_stderr < 1e-12);
    }

    #[test]
    fn tail_exponent_pareto() {
        let t = tail_exponent(&pareto(1_000_000, 1)).unwrap();
        assert!((t.alpha - 4.0).abs() < 0.3, "{t:?}");
        let hill = t.diagnostics.hill_alpha.unwrap();
        assert!((t.alpha - hill).abs() < 0.5, "{} vs {hill}", t.alpha);
    }

    #[test]
    fn tail_exponent_student_t() {
        let t = tail_exponent(&student(1_000_000, 4.0, 2)).unwrap();
        assert!((t.alpha - 5.0).abs() < 0.4, "{t:?}");
    }

    #[test]
    fn tail_exponent_errors() {
        assert!(matches!(tail_exponent(&[1.0; 100]), Err(Error::Numeric(_))));
        assert!(matches!(tail_exponent(&vec![0.5; 20_000]), Err(Error::Numeric(_))));
        // Uniform returns have no mass beyond 3 std.
        let mut r = rng(3);
        let u: Vec<f64> = (0..20_000).map(|_| r.random::<f64>() - 0.5).collect();
        let err = tail_exponent(&u).unwrap_err().to_string();
        assert!(err.contains("only 0 observations"), "{err}");
    }

    #[test]
    fn tail_exponent_scale_invariant() {
        let p = pareto(200_000, 4);
        let a = tail_exponent(&p).unwrap().alpha;
        let scaled: Vec<f64> = p.iter().map(|v| v * 37.5).collect();
        assert!((tail_exponent(&scaled).unwrap().alpha - a).abs() < 1e-9);
    }

    #[test]
    fn acf_white_noise_band() {
        let mut r = rng(5);
        let n = 100_000;
        let x: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let a = acf_abs(&x, 100).unwrap();
        let band = 3.0 / (n as f64).sqrt();
        let inside = a.iter().filter(|v| v.abs() < band).count();
        assert!(inside as f64 >= 0.95 * a.len() as f64, "{inside}");
    }

    #[test]
    fn acf_lag_zero_is_one() {
        let mut r = rng(6);
        let x: Vec<f64> = (0..1000).map(|_| r.sample(StandardNormal)).collect();
        let abs: Vec<f64> = x.iter().map(|v: &f64| v.abs()).collect();
        let n = abs.len();
        let mean = abs.iter().sum::<f64>() / n as f64;
        let c0: f64 = abs.iter().map(|v| (v - mean).powi(2)).sum();
        let lag0: f64 = abs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c0;
        assert_eq!(lag0, 1.0);
        assert!(acf_abs(&x, 100).unwrap().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn acf_errors() {
        assert!(matches!(acf_abs(&[0.1; 500], 10), Err(Error::Numeric(_))));
        assert!(matches!(acf_abs(&[0.1, 0.2, 0.3], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn garch_clustering() {
        let g = Garch11::new(1e-5, 0.09, 0.9).unwrap();
        let r = g.simulate(100_000, 1000, &mut rng(7));
        let a = acf_abs(&r, 100).unwrap();
        assert!(a.iter().all(|&v| v > 0.0));
        let b = fit_beta(&a, 1, 100).unwrap();
        assert!((0.05..=0.6).contains(&b.beta), "{b:?}");
        let sq = acf_variant(&r, 100, AcfVariant::Squared).unwrap();
        assert!(sq[0] > 0.0);
    }

    #[test]
    fn fit_beta_exact_power_law() {
        let a: Vec<f64> = (1..=100).map(|k| (k as f64).powf(-0.3)).collect();
        assert!((fit_beta(&a, 1, 100).unwrap().beta - 0.3).abs() < 1e-9);
        let scaled: Vec<f64> = a.iter().map(|v| 0.04 * v).collect();
        assert!((fit_beta(&scaled, 1, 100).unwrap().beta - 0.3).abs() < 1e-9);
    }

    #[test]
    fn fit_beta_excludes_negatives() {
        let mut a: Vec<f64> = (1..=100).map(|k| (k as f64).powf(-0.3)).collect();
        a[4] = -0.01;
        a[50] = 0.0;
        let b = fit_beta(&a, 1, 100).unwrap();
        assert_eq!(b.lags_excluded, vec![5, 51]);
        assert!((b.beta - 0.3).abs() < 1e-9);
        let neg = vec![-0.1; 100];
        assert!(fit_beta(&neg, 1, 100).is_err());
    }

    #[test]
    fn leverage_constant_returns_is_zero() {
        let l = leverage(&[0.02; 500], 100).unwrap();
        assert_eq!(l.len(), 101);
        assert!(l.iter().all(|&v| v == 0.0));
        assert!(leverage(&[0.0; 500], 100).is_err());
        assert!(leverage(&[0.1; 100], 100).is_err());
    }

    #[test]
    fn leverage_iid_within_bootstrap_band() {
        let mut r = rng(8);
        let x: Vec<f64> = (0..100_000).map(|_| r.sample(StandardNormal)).collect();
        let l = leverage(&x, 100).unwrap();
        let se = leverage_bootstrap_se(&x, 100, 60, &mut rng(9)).unwrap();
        let inside = l.iter().zip(&se).filter(|(v, s)| v.abs() < 3.0 * **s).count();
        assert!(inside >= 96, "{inside}");
        // Time reversal of an iid series shows no asymmetry either.
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let lr = leverage(&rev, 100).unwrap();
        let inside = lr.iter().zip(&se).filter(|(v, s)| v.abs() < 3.0 * **s).count();
        assert!(inside >= 96, "{inside}");
    }

    #[test]
    fn leverage_planted_asymmetry() {
        let mut r = rng(10);
        let mut var: f64 = 1.0;
        let x: Vec<f64> = (0..100_000)
            .map(|_| {
                let v = var.sqrt() * r.sample::<f64, _>(StandardNormal);
                var = if v < 0.0 { 2.0 } else { 1.0 };
                v
            })
            .collect();
        let l = leverage(&x, 10).unwrap();
        assert!(l[1] < 0.0, "{}", l[1]);
    }

    #[test]
    fn leverage_scales_inversely() {
        let mut r = rng(11);
        let x: Vec<f64> = (0..5000).map(|_| r.sample(StandardNormal)).collect();
        let c = 3.0;
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let a = leverage(&x, 100).unwrap();
        let b = leverage(&cx, 100).unwrap();
        // Cubic numerator over quartic denominator: L(k; c·r) = L(k; r) / c.
        for (u, v) in a.iter().zip(&b) {
            assert!((v - u / c).abs() < 1e-9 * u.abs().max(1e-3), "{u} {v}");
        }
    }

    fn garch_series(n_series: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let g = Garch11::new(1e-5, 0.09, 0.9).unwrap();
        let mut r = rng(seed);
        (0..n_series).map(|_| g.simulate(len, 500, &mut r)).collect()
    }

    #[test]
    fn report_single_series_matches_direct() {
        let s = garch_series(1, 20_000, 12);
        let rep = aggregate_report(&s, &ReportConfig::default()).unwrap();
        assert_eq!(rep.acf.as_ref().unwrap(), &acf_abs(&s[0], 100).unwrap());
        assert_eq!(rep.leverage.as_ref().unwrap(), &leverage(&s[0], 100).unwrap());
        assert_eq!(rep.leverage.as_ref().unwrap().len(), 101);
        let mut sorted = s[0].clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(rep.alpha.unwrap(), tail_exponent(&sorted).unwrap().alpha);
    }

    #[test]
    fn report_is_order_independent_and_linear() {
        let s = garch_series(6, 4000, 13);
        let cfg = ReportConfig::default();
        let a = aggregate_report(&s, &cfg).unwrap();
        let mut rev = s.clone();
        rev.reverse();
        rev.swap(1, 4);
        let b = aggregate_report(&rev, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

        let h1 = aggregate_report(&s[..3], &cfg).unwrap();
        let h2 = aggregate_report(&s[3..], &cfg).unwrap();
        for (k, v) in a.leverage.unwrap().iter().enumerate() {
            let m = 0.5 * (h1.leverage.as_ref().unwrap()[k] + h2.leverage.as_ref().unwrap()[k]);
            assert!((v - m).abs() < 1e-12);
        }
        for (k, v) in a.acf.unwrap().iter().enumerate() {
            let m = 0.5 * (h1.acf.as_ref().unwrap()[k] + h2.acf.as_ref().unwrap()[k]);
            assert!((v - m).abs() < 1e-12);
        }
    }

    #[test]
    fn report_on_constant_series() {
        let s = vec![vec![0.001; 12_000]];
        let rep = aggregate_report(&s, &ReportConfig::default()).unwrap();
        assert!(rep.leverage.unwrap().iter().all(|&v| v == 0.0));
        assert!(rep.alpha.is_none());
        assert!(rep.errors.iter().any(|e| e.starts_with("tail_exponent")));
    }
}
