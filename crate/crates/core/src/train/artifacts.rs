//! Run outputs: metrics tables, sampled-sequence CSVs, and the run manifest.
//! All float formatting goes through `Display`, whose shortest round-trip
//! rendering makes repeated runs byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

use super::config::Config;

/// One evaluated number destined for `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl MetricRow {
    pub fn new(metric: impl Into<String>, value: f64, seed: u64) -> MetricRow {
        MetricRow { metric: metric.into(), value, seed }
    }
}

/// Renders `metric,value,seed,config_hash` rows.
pub fn metrics_csv(rows: &[MetricRow], config_hash: &str) -> String {
    let mut out = String::from("metric,value,seed,config_hash\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.metric, r.value, r.seed, config_hash);
    }
    out
}

/// Renders a sampled sequence `[T, c]` as `frame,c0,..` rows.
pub fn samples_csv(seq: &Tensor) -> Result<String> {
    let dims = seq.shape();
    if dims.len() != 2 {
        return Err(crate::error::Error::shape(format!(
            "sample CSV wants a rank-2 sequence, got rank {}",
            dims.len()
        )));
    }
    let (t, c) = (dims[0], dims[1]);
    let mut out = String::from("frame");
    for j in 0..c {
        let _ = write!(out, ",c{j}");
    }
    out.push('\n');
    for i in 0..t {
        let _ = write!(out, "{i}");
        for j in 0..c {
            let _ = write!(out, ",{}", seq.data()[i * c + j]);
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    toolkit_version: &'a str,
    config: &'a Config,
}

/// Renders `manifest.json`: config hash, toolkit version, and the full config.
pub fn manifest_json(cfg: &Config) -> String {
    let hash = cfg.hash();
    let m = Manifest {
        config_hash: &hash,
        toolkit_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    serde_json::to_string_pretty(&m).expect("manifest serializes")
}

/// Writes the manifest next to the other run outputs.
pub fn write_manifest(dir: &Path, cfg: &Config) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), manifest_json(cfg))?;
    Ok(())
}
