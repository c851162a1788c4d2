//! Run configuration: a JSON document merged over a named parameter base,
//! with `--set dotted.path=value` overrides applied last.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spincool::{ExperimentParams, McOptions, Preset, Schedule};

use crate::error::CliError;

pub const OUTPUT_DIR_ENV: &str = "SPINCOOL_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "spincool-out";
pub const DEFAULT_TRIALS: usize = 10_000;

const PARAM_SECTIONS: [&str; 5] = ["ensemble", "probe", "field", "noise", "initial_state"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Base {
    #[default]
    PaperDefaults,
    PaperCalibrated,
}

impl Base {
    pub fn params(self) -> ExperimentParams {
        match self {
            Base::PaperDefaults => ExperimentParams::paper_defaults(),
            Base::PaperCalibrated => ExperimentParams::paper_calibrated(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EngineChoice {
    Mc,
    #[default]
    Moments,
    Both,
}

impl EngineChoice {
    pub fn runs_mc(self) -> bool {
        matches!(self, EngineChoice::Mc | EngineChoice::Both)
    }

    pub fn runs_moments(self) -> bool {
        matches!(self, EngineChoice::Moments | EngineChoice::Both)
    }
}

/// How the schedule was given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Preset(Preset),
    PresetWithGains {
        preset: Preset,
        #[serde(default)]
        gains: Vec<f64>,
    },
    Phases(Schedule),
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Preset(Preset::PaperOneRound)
    }
}

impl ScheduleSpec {
    fn preset(&self) -> Option<(Preset, &[f64])> {
        match self {
            ScheduleSpec::Preset(p) => Some((*p, &[])),
            ScheduleSpec::PresetWithGains { preset, gains } => Some((*preset, gains)),
            ScheduleSpec::Phases(_) => None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    base: Base,
    #[serde(default)]
    params: Value,
    #[serde(default)]
    schedule: ScheduleSpec,
    #[serde(default)]
    engine: EngineChoice,
    #[serde(default = "default_trials")]
    n_trials: usize,
    #[serde(default)]
    master_seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    threads: Option<usize>,
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

/// Fully resolved configuration. `threads` and `output_dir` do not affect
/// results and are left out of the serialized form embedded in outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub base: Base,
    pub preset: Option<Preset>,
    pub params: ExperimentParams,
    pub schedule: Schedule,
    pub engine: EngineChoice,
    pub n_trials: usize,
    pub master_seed: u64,
    #[serde(skip)]
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn mc_options(&self) -> McOptions {
        McOptions {
            n_trials: self.n_trials,
            master_seed: self.master_seed,
            threads: self.threads,
        }
    }

    /// Gains of the feedback rounds, when the schedule is a sequence of
    /// whole rounds (every preset is).
    pub fn round_gains(&self) -> Vec<f64> {
        self.schedule
            .phases
            .iter()
            .skip(1)
            .take(self.schedule.phases.len().saturating_sub(2))
            .map(|p| p.normalized_gain)
            .collect()
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Parses `path=value`; the value is read as JSON and falls back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not of the form path=value")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(CliError::Config(format!("override `{s}` has an empty path")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.to_string(), value))
}

/// Sets a dotted path inside `doc`. Paths starting with a parameter section
/// name are taken relative to `params`.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    if PARAM_SECTIONS.contains(&parts[0]) {
        parts.insert(0, "params");
    }
    let mut node = doc;
    for (i, key) in parts.iter().enumerate() {
        if key.is_empty() {
            return Err(CliError::Config(format!("override path `{path}` has an empty segment")));
        }
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override path `{path}` runs through a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("split always yields at least one segment")
}

pub fn read_document(path: Option<&Path>) -> Result<Value, CliError> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}

/// Builds the resolved configuration from a raw document and overrides.
pub fn resolve(mut doc: Value, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    if !doc.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    for (path, value) in overrides {
        set_path(&mut doc, path, value.clone())?;
    }
    let raw: RawConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;

    let mut params_doc = serde_json::to_value(raw.base.params()).expect("params serialize");
    if !raw.params.is_null() {
        if !raw.params.is_object() {
            return Err(CliError::Config("params must be an object".into()));
        }
        merge(&mut params_doc, raw.params);
    }
    let mut params: ExperimentParams =
        serde_json::from_value(params_doc).map_err(|e| CliError::Config(format!("params: {e}")))?;

    let (preset, schedule) = match raw.schedule.preset() {
        Some((preset, gains)) => {
            params = preset.adjust_params(params);
            (Some(preset), preset.schedule(gains)?)
        }
        None => match raw.schedule {
            ScheduleSpec::Phases(s) => {
                s.validate()?;
                (None, s)
            }
            _ => unreachable!(),
        },
    };
    params.validate()?;
    if raw.n_trials < 2 && raw.engine.runs_mc() {
        return Err(CliError::Config(format!("n_trials must be >= 2, got {}", raw.n_trials)));
    }
    if raw.threads == Some(0) {
        return Err(CliError::Config("threads must be >= 1".into()));
    }
    let output_dir = raw
        .output_dir
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    Ok(RunConfig {
        base: raw.base,
        preset,
        params,
        schedule,
        engine: raw.engine,
        n_trials: raw.n_trials,
        master_seed: raw.master_seed,
        output_dir,
        threads: raw.threads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_is_recursive() {
        let mut a = json!({"probe": {"kappa1": 1.0, "n_photons": 2.0}, "x": 1});
        merge(&mut a, json!({"probe": {"n_photons": 3.0}, "x": [1]}));
        assert_eq!(a, json!({"probe": {"kappa1": 1.0, "n_photons": 3.0}, "x": [1]}));
    }

    #[test]
    fn override_values() {
        assert_eq!(parse_override("probe.n_photons=1e7").unwrap().1, json!(1e7));
        assert_eq!(parse_override("schedule=paper-two-round").unwrap().1, json!("paper-two-round"));
        assert_eq!(parse_override("field.t2_transverse=null").unwrap().1, Value::Null);
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn section_paths_land_in_params() {
        let mut doc = json!({});
        set_path(&mut doc, "probe.n_photons", json!(1e7)).unwrap();
        set_path(&mut doc, "n_trials", json!(5)).unwrap();
        assert_eq!(doc, json!({"params": {"probe": {"n_photons": 1e7}}, "n_trials": 5}));
    }

    #[test]
    fn resolves_defaults() {
        let c = resolve(json!({}), &[]).unwrap();
        assert_eq!(c.params, ExperimentParams::paper_defaults());
        assert_eq!(c.schedule, Schedule::paper_characterization(-0.75));
        assert_eq!(c.n_trials, DEFAULT_TRIALS);
        assert_eq!(c.round_gains(), vec![-0.75]);
    }

    #[test]
    fn schedule_forms() {
        let c = resolve(json!({"schedule": {"preset": "paper-two-round", "gains": [-0.7, -0.5]}}), &[]).unwrap();
        assert_eq!(c.round_gains(), vec![-0.7, -0.5]);
        let c = resolve(json!({"schedule": "no-atoms"}), &[]).unwrap();
        assert_eq!(c.params.ensemble.n_atoms, 0.0);
        let phases = json!([
            {"kind": "measure_only"},
            {"kind": "measure_feedback", "normalized_gain": -0.5},
            {"kind": "measure_only"}
        ]);
        let c = resolve(json!({ "schedule": phases }), &[]).unwrap();
        assert_eq!(c.schedule, Schedule::paper_characterization(-0.5));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(resolve(json!({"bogus": 1}), &[]), Err(CliError::Config(_))));
        assert!(matches!(
            resolve(json!({"params": {"probe": {"kapa1": 1.0}}}), &[]),
            Err(CliError::Config(_))
        ));
        let err = resolve(json!({}), &[("probe.kappa1".into(), json!(-1.0))]).unwrap_err();
        assert!(err.to_string().contains("probe.kappa1"), "{err}");
        assert!(resolve(json!({"schedule": "paper-three-round"}), &[]).is_err());
    }

    #[test]
    fn serialized_form_omits_threads_and_dir() {
        let mut c = resolve(json!({}), &[]).unwrap();
        let a = serde_json::to_string(&c).unwrap();
        c.threads = Some(8);
        c.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a, serde_json::to_string(&c).unwrap());
    }
}
