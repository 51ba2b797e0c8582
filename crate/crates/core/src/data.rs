//! Price ingestion, log returns, windowing, normalisation and dataset files.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, NamedArrays};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"GBMDDATA";
pub const DATASET_VERSION: u32 = 1;
const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub ticker: String,
    pub dates: Vec<NaiveDate>,
    pub adj_close: Vec<f64>,
}

impl PriceSeries {
    pub fn len(&self) -> usize {
        self.adj_close.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj_close.is_empty()
    }
}

/// A length-L slice of log returns and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnWindow {
    pub values: Vec<f64>,
    pub source_ticker: String,
    pub start_index: usize,
}

impl ReturnWindow {
    /// Cumulative log-price form anchored at 0: `x_0 = 0`, `x_j = x_{j-1} + r_j`.
    pub fn log_price(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        for (j, r) in self.values.iter().enumerate() {
            if j > 0 {
                acc += r;
            }
            out.push(acc);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub ticker: String,
    pub n_returns: usize,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "L")]
    pub length: usize,
    pub stride: usize,
    pub n_windows: usize,
    pub global_scale: f64,
    pub sources: Vec<SourceSummary>,
    /// `(ticker, start_index)` of every stored window, in payload order.
    pub origins: Vec<(String, usize)>,
    /// Hex sha256 of the little-endian f32 payload.
    pub payload_sha256: String,
}

/// Read a `date,adj_close` CSV. The ticker is taken from the file stem.
///
/// Rows whose price is blank, unparseable or non-positive are dropped.
pub fn ingest_csv(path: &Path) -> Result<PriceSeries> {
    let ticker = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let where_ = |line: u64| format!("{}:{line}", path.display());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let cols: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if cols.len() < 2 || cols[0] != "date" || cols[1] != "adj_close" {
        return Err(Error::Data(format!(
            "{}: expected header `date,adj_close`, found `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows: Vec<(NaiveDate, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let date = record.get(0).unwrap_or("");
        if date.is_empty() && record.iter().all(str::is_empty) {
            continue;
        }
        let date = NaiveDate::parse_from_str(date, "%Y-%m-%d")
            .map_err(|e| Error::Data(format!("{}: bad date `{date}`: {e}", where_(line))))?;
        match record.get(1).and_then(|p| p.parse::<f64>().ok()) {
            Some(p) if p > 0.0 && p.is_finite() => rows.push((date, p)),
            _ => log::debug!("{}: dropping row without a usable price", where_(line)),
        }
    }
    rows.sort_by_key(|&(d, _)| d);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("{}: duplicate date {}", path.display(), w[0].0)));
    }
    if rows.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need at least 2 valid rows, found {}",
            path.display(),
            rows.len()
        )));
    }
    let (dates, adj_close) = rows.into_iter().unzip();
    Ok(PriceSeries {
        ticker,
        dates,
        adj_close,
    })
}

pub fn log_returns(s: &PriceSeries) -> Vec<f64> {
    s.adj_close.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
}

/// True iff the series spans strictly more than `min_years` years of 365.25 days.
pub fn filter_by_history(s: &PriceSeries, min_years: f64) -> bool {
    match (s.dates.first(), s.dates.last()) {
        (Some(a), Some(b)) => ((*b - *a).num_days() as f64) > min_years * DAYS_PER_YEAR,
        _ => false,
    }
}

/// Tickers made only of `A–Z` and `0–9`; share-class symbols such as `BRK.B` fail.
pub fn is_plain_ticker(ticker: &str) -> bool {
    !ticker.is_empty()
        && ticker
            .bytes()
            .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit())
}

/// Number of windows of length `len` at stride `stride` that fit in `n` values.
pub fn window_count(n: usize, len: usize, stride: usize) -> usize {
    if len == 0 || stride == 0 || n < len {
        0
    } else {
        (n - len) / stride + 1
    }
}

pub fn make_windows(
    returns: &[f64],
    len: usize,
    stride: usize,
    ticker: &str,
) -> Result<Vec<ReturnWindow>> {
    if len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window length and stride must be positive, got {len} and {stride}"
        )));
    }
    Ok((0..window_count(returns.len(), len, stride))
        .map(|k| {
            let start = k * stride;
            ReturnWindow {
                values: returns[start..start + len].to_vec(),
                source_ticker: ticker.to_string(),
                start_index: start,
            }
        })
        .collect())
}

/// Pooled population std of every value across `windows`.
pub fn pooled_std(windows: &[ReturnWindow]) -> f64 {
    let n: usize = windows.iter().map(|w| w.values.len()).sum();
    if n == 0 {
        return 0.0;
    }
    let mean = windows.iter().flat_map(|w| &w.values).sum::<f64>() / n as f64;
    let ss: f64 = windows
        .iter()
        .flat_map(|w| &w.values)
        .map(|v| (v - mean) * (v - mean))
        .sum();
    (ss / n as f64).sqrt()
}

/// Divide every value by the pooled std; returns the scaled windows and that std.
pub fn normalize(windows: &[ReturnWindow]) -> Result<(Vec<ReturnWindow>, f64)> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to normalise".into()));
    }
    let first = windows[0].values.first().copied().unwrap_or(0.0);
    let constant = windows.iter().flat_map(|w| &w.values).all(|&v| v == first);
    let scale = pooled_std(windows);
    if constant || !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Data(format!("pooled return std is {scale}; cannot normalise")));
    }
    Ok((rescale(windows, |v| v / scale), scale))
}

pub fn denormalize(windows: &[ReturnWindow], scale: f64) -> Vec<ReturnWindow> {
    rescale(windows, |v| v * scale)
}

fn rescale(windows: &[ReturnWindow], f: impl Fn(f64) -> f64) -> Vec<ReturnWindow> {
    windows
        .iter()
        .map(|w| ReturnWindow {
            values: w.values.iter().map(|&v| f(v)).collect(),
            ..w.clone()
        })
        .collect()
}

/// Per-ticker outcome of [`build_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickerReport {
    pub ticker: String,
    pub n_prices: usize,
    pub n_windows: usize,
    /// Why the ticker contributed nothing, if it did not.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub window_length: usize,
    pub stride: usize,
    pub min_years: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            window_length: 2048,
            stride: 400,
            min_years: 40.0,
        }
    }
}

/// Every `*.csv` file directly inside `dir`, sorted by file name.
pub fn list_csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Window and normalise a set of price series, skipping symbols with
/// non-plain tickers and series without enough history.
pub fn build_dataset(
    series: &[PriceSeries],
    config: &PrepareConfig,
) -> Result<(Vec<ReturnWindow>, DatasetManifest, Vec<TickerReport>)> {
    let mut windows = Vec::new();
    let mut sources = Vec::new();
    let mut reports = Vec::new();
    for s in series {
        let skipped = if !is_plain_ticker(&s.ticker) {
            Some("ticker contains characters outside A-Z0-9".to_string())
        } else if !filter_by_history(s, config.min_years) {
            Some(format!("history not longer than {} years", config.min_years))
        } else {
            None
        };
        let mut n_windows = 0;
        if skipped.is_none() {
            let r = log_returns(s);
            let w = make_windows(&r, config.window_length, config.stride, &s.ticker)?;
            n_windows = w.len();
            sources.push(SourceSummary {
                ticker: s.ticker.clone(),
                n_returns: r.len(),
                n_windows,
            });
            windows.extend(w);
        }
        reports.push(TickerReport {
            ticker: s.ticker.clone(),
            n_prices: s.len(),
            n_windows,
            skipped,
        });
    }
    let (normalized, scale) = normalize(&windows)?;
    let manifest = DatasetManifest {
        length: config.window_length,
        stride: config.stride,
        n_windows: normalized.len(),
        global_scale: scale,
        sources,
        origins: normalized
            .iter()
            .map(|w| (w.source_ticker.clone(), w.start_index))
            .collect(),
        payload_sha256: String::new(),
    };
    Ok((normalized, manifest, reports))
}

pub fn payload_bytes(windows: &[ReturnWindow]) -> Vec<u8> {
    windows
        .iter()
        .flat_map(|w| w.values.iter().flat_map(|&v| (v as f32).to_le_bytes()))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_dataset(windows: &[ReturnWindow], manifest: &DatasetManifest) -> Result<Vec<u8>> {
    if windows.len() != manifest.n_windows || windows.iter().any(|w| w.values.len() != manifest.length) {
        return Err(Error::Data(format!(
            "manifest describes {} windows of length {}, payload disagrees",
            manifest.n_windows, manifest.length
        )));
    }
    let mut manifest = manifest.clone();
    manifest.payload_sha256 = sha256_hex(&payload_bytes(windows));
    manifest.origins = windows
        .iter()
        .map(|w| (w.source_ticker.clone(), w.start_index))
        .collect();
    let values: Vec<f32> = windows.iter().flat_map(|w| w.values.iter().map(|&v| v as f32)).collect();
    let mut arrays = NamedArrays::new();
    arrays.insert("windows".into(), (vec![manifest.n_windows, manifest.length], values));
    let mut buf = Vec::new();
    container::write_container(
        &mut buf,
        DATASET_MAGIC,
        DATASET_VERSION,
        &serde_json::to_string(&manifest)?,
        &arrays,
    )
    .expect("writing to a Vec cannot fail");
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Vec<ReturnWindow>, DatasetManifest)> {
    let (header, mut arrays) = container::read_container(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let manifest: DatasetManifest = serde_json::from_str(&header)
        .map_err(|e| Error::Data(format!("malformed dataset manifest: {e}")))?;
    let (shape, values) = arrays
        .remove("windows")
        .ok_or_else(|| Error::Data("dataset has no `windows` array".into()))?;
    if shape != [manifest.n_windows, manifest.length] || manifest.origins.len() != manifest.n_windows {
        return Err(Error::Data(format!(
            "manifest says {}×{}, payload is {shape:?}",
            manifest.n_windows, manifest.length
        )));
    }
    let windows: Vec<ReturnWindow> = values
        .chunks(manifest.length.max(1))
        .zip(&manifest.origins)
        .map(|(row, (ticker, start))| ReturnWindow {
            values: row.iter().map(|&v| v as f64).collect(),
            source_ticker: ticker.clone(),
            start_index: *start,
        })
        .collect();
    let digest = sha256_hex(&payload_bytes(&windows));
    if digest != manifest.payload_sha256 {
        return Err(Error::Data(format!(
            "payload checksum {digest} does not match manifest {}",
            manifest.payload_sha256
        )));
    }
    Ok((windows, manifest))
}

pub fn save_dataset(windows: &[ReturnWindow], manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let bytes = encode_dataset(windows, manifest)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<(Vec<ReturnWindow>, DatasetManifest)> {
    decode_dataset(&container::read_all(path)?)
}

/// Fetch daily prices as JSON `[{"date": "YYYY-MM-DD", "adj_close": x}, ...]`
/// from `{endpoint}/{ticker}`, retrying transient failures.
#[cfg(feature = "fetch")]
pub fn fetch_prices(ticker: &str, endpoint: &str, api_key: Option<&str>) -> Result<PriceSeries> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        adj_close: Option<f64>,
    }
    const RETRIES: usize = 3;
    let url = format!("{}/{}", endpoint.trim_end_matches('/'), ticker);
    let mut last = String::new();
    for attempt in 0..=RETRIES {
        if attempt > 0 {
            std::thread::sleep(std::time::Duration::from_millis(250 << attempt));
        }
        let mut req = ureq::get(&url);
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let rows: Vec<Row> = match req.call().and_then(|mut r| r.body_mut().read_json()) {
            Ok(rows) => rows,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        let mut rows: Vec<(NaiveDate, f64)> = rows
            .into_iter()
            .filter_map(|r| r.adj_close.filter(|p| *p > 0.0 && p.is_finite()).map(|p| (r.date, p)))
            .collect();
        rows.sort_by_key(|&(d, _)| d);
        rows.dedup_by_key(|&mut (d, _)| d);
        if rows.len() < 2 {
            return Err(Error::Data(format!("{ticker}: fewer than 2 usable prices")));
        }
        let (dates, adj_close) = rows.into_iter().unzip();
        return Ok(PriceSeries {
            ticker: ticker.to_string(),
            dates,
            adj_close,
        });
    }
    Err(Error::Fetch {
        retries: RETRIES,
        message: format!("{url}: {last}"),
    })
}
