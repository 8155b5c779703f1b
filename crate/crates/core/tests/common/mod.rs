#![allow(dead_code)]

use std::path::PathBuf;

/// Compares `value` with `tests/golden/<name>.json`. Setting `FLOWCOT_BLESS=1`
/// rewrites the file instead.
pub fn golden(name: &str, value: &serde_json::Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"));
    if std::env::var_os("FLOWCOT_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(value).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let frozen: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(&frozen, value, "{} changed", path.display());
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tolerance {tol})");
}
