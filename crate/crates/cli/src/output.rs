//! CSV and JSON writers plus the run manifest written beside each output.
//!
//! CSV carries every float with 17 significant digits so that values
//! round-trip exactly. JSON reports are rounded to 12 significant digits.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::Config;
use crate::error::CliError;

pub fn csv_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

/// A table of floats with named columns.
#[derive(Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let wrap = |e: csv::Error| CliError::io("writing CSV", std::io::Error::other(e));
        w.write_record(&self.header).map_err(wrap)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|x| csv_float(*x))).map_err(wrap)?;
        }
        w.into_inner().map_err(|e| CliError::io("writing CSV", std::io::Error::other(e.to_string())))
    }
}

fn round_significant(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.prec$e}", prec = digits - 1).parse().unwrap_or(x)
}

/// Round every float in `value` to 12 significant digits.
pub fn round_json(value: Value) -> Value {
    match value {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            serde_json::Number::from_f64(round_significant(x, 12)).map_or(Value::Null, Value::Number)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(round_json).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

pub fn json_bytes<T: Serialize>(report: &T) -> Result<Vec<u8>, CliError> {
    let value = serde_json::to_value(report).map_err(|e| CliError::io("serializing report", e.into()))?;
    let mut bytes = serde_json::to_vec_pretty(&round_json(value)).map_err(|e| CliError::io("serializing report", e.into()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Everything needed to reproduce an output file.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config_path: Option<String>,
    /// The configuration after defaults were filled in.
    pub config: &'a Config,
    pub seed: u64,
    pub threads: Option<usize>,
    pub output: String,
    pub started_unix_seconds: f64,
    pub wall_clock_seconds: f64,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Write `bytes` to `out`, or to stdout when no path is given.
pub fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
            }
            std::fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).map_err(|e| CliError::io("writing stdout", e))
        }
    }
}

pub fn write_manifest(out: &Path, manifest: &RunManifest<'_>) -> Result<(), CliError> {
    let path = manifest_path(out);
    let mut bytes = serde_json::to_vec_pretty(manifest).map_err(|e| CliError::io("serializing manifest", e.into()))?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_keeps_full_precision() {
        let x = 0.1 + 0.2;
        let s = csv_float(x);
        assert_eq!(s.parse::<f64>().unwrap(), x);
        assert_eq!(s, "3.0000000000000004e-1");
        assert_eq!(csv_float(f64::NAN), "NaN");
    }

    #[test]
    fn json_rounds_to_twelve_digits() {
        let v = round_json(serde_json::json!({"a": [1.0 / 3.0, 2], "b": {"c": 123456.78901234567}}));
        assert_eq!(v["a"][0].as_f64().unwrap(), 0.333333333333);
        assert_eq!(v["a"][1].as_u64().unwrap(), 2);
        assert_eq!(v["b"]["c"].as_f64().unwrap(), 123456.789012);
    }

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(manifest_path(Path::new("runs/out.csv")), PathBuf::from("runs/out.csv.manifest.json"));
    }

    #[test]
    fn table_csv_layout() {
        let mut t = Table::new(vec!["t".into(), "x".into()]);
        t.push(vec![0.0, 1.5]);
        let text = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(text, "t,x\n0.0000000000000000e0,1.5000000000000000e0\n");
    }
}
