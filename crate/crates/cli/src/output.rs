//! Output files. Every file starts with the tool version and the resolved
//! configuration: JSON files carry them as fields, CSV files as `#` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use spincool::analysis::fmt_f64;
use spincool::mc::TrialOutcome;
use spincool::RunSummary;

use crate::config::RunConfig;
use crate::error::CliError;

pub const VERSION: &str = concat!("spincool ", env!("CARGO_PKG_VERSION"));

pub fn config_json(cfg: &RunConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

pub fn csv_header(cfg: &RunConfig) -> String {
    format!("# {VERSION}\n# config {}\n", config_json(cfg))
}

/// Wraps `body` with `version` and `config` fields.
pub fn with_header<T: Serialize>(cfg: &RunConfig, body: &T) -> Value {
    let mut doc = serde_json::json!({
        "version": VERSION,
        "config": cfg,
    });
    let body = serde_json::to_value(body).expect("output serializes");
    if let (Some(d), Value::Object(b)) = (doc.as_object_mut(), body) {
        d.extend(b);
    }
    doc
}

pub fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub struct Writer {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Writer {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("output_dir {} is not writable: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn text(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        log::info!("wrote {}", path.display());
        self.written.push(path);
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).expect("json serializes");
        s.push('\n');
        self.text(name, &s)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

/// Record covariance of each engine as `engine,label,<labels...>` rows.
pub fn record_covariance_csv(cfg: &RunConfig, summaries: &[&RunSummary]) -> String {
    let mut out = csv_header(cfg);
    out.push_str("engine,label");
    if let Some(s) = summaries.first() {
        for l in &s.record_labels {
            let _ = write!(out, ",{l}");
        }
    }
    out.push('\n');
    for s in summaries {
        let engine = engine_name(s);
        for (label, row) in s.record_labels.iter().zip(&s.record_cov) {
            let _ = write!(out, "{engine},{label}");
            for v in row {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
    }
    out
}

pub fn engine_name(s: &RunSummary) -> &'static str {
    match s.engine {
        spincool::EngineKind::Mc => "mc",
        spincool::EngineKind::Moments => "moments",
    }
}

pub fn trials_csv(cfg: &RunConfig, labels: &[String], trials: &[TrialOutcome]) -> String {
    let mut out = csv_header(cfg);
    out.push_str("trial");
    for prefix in ["input", "readout", "final"] {
        for c in ["x", "y", "z"] {
            let _ = write!(out, ",{prefix}_{c}");
        }
    }
    for l in labels {
        let _ = write!(out, ",r_{l}");
    }
    out.push('\n');
    for (i, t) in trials.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in t.input.iter().chain(&t.readout).chain(&t.final_spin).chain(&t.record) {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}
