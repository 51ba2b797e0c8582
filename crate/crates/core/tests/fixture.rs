use std::path::PathBuf;

use gbmd::data::{self, PrepareConfig};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/prices")
}

fn load_all() -> Vec<data::PriceSeries> {
    data::list_csv_files(&fixture_dir())
        .unwrap()
        .iter()
        .map(|p| data::ingest_csv(p).unwrap())
        .collect()
}

#[test]
fn fixture_window_counts() {
    let series = load_all();
    let tickers: Vec<&str> = series.iter().map(|s| s.ticker.as_str()).collect();
    assert_eq!(tickers, ["AAA", "BBB", "BRK.B", "CCC"]);
    let lens: Vec<usize> = series.iter().map(|s| s.len()).collect();
    assert_eq!(lens, [11087, 10575, 11501, 5479]);

    let (windows, manifest, report) = data::build_dataset(&series, &PrepareConfig::default()).unwrap();
    let counts: Vec<(&str, usize, bool)> = report
        .iter()
        .map(|r| (r.ticker.as_str(), r.n_windows, r.skipped.is_some()))
        .collect();
    assert_eq!(
        counts,
        [("AAA", 23, false), ("BBB", 22, false), ("BRK.B", 0, true), ("CCC", 0, true)]
    );
    assert_eq!(windows.len(), 45);
    assert_eq!(manifest.n_windows, 45);
    assert!((manifest.global_scale - 0.010113560815968502).abs() < 1e-15);
}

#[test]
fn fixture_payload_checksum() {
    let (windows, _, _) = data::build_dataset(&load_all(), &PrepareConfig::default()).unwrap();
    assert_eq!(
        data::sha256_hex(&data::payload_bytes(&windows)),
        "0b07b50cd64c926405252c588188e643b53b314ee72d79837dae07b762fdc0ff"
    );
}

#[test]
fn fixture_dataset_file_roundtrip() {
    let (windows, manifest, _) = data::build_dataset(&load_all(), &PrepareConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.gbmd");
    data::save_dataset(&windows, &manifest, &path).unwrap();
    let (back, m2) = data::load_dataset(&path).unwrap();
    assert_eq!(m2.n_windows, 45);
    let again = dir.path().join("again.gbmd");
    data::save_dataset(&back, &m2, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    for (a, b) in windows.iter().zip(&back) {
        assert_eq!(a.source_ticker, b.source_ticker);
        assert_eq!(a.start_index, b.start_index);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
}
