use std::fmt::Write as _;

use serde::Serialize;
use serde_json::json;
use spincool::analysis::fmt_f64;
use spincool::calibration::{calibrate, CalibrationTargets};
use spincool::protocol::{gain_grid, optimize_gains_after, sweep_gain, SweepPoint};
use spincool::{db_reduction, mc, moments, volume_factor, Engine, GainSearch, RunSummary, Schedule};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{self, csv_header, opt, with_header, Writer};

fn engines(cfg: &RunConfig) -> Vec<(&'static str, Engine)> {
    let mut out = Vec::new();
    if cfg.engine.runs_moments() {
        out.push(("moments", Engine::Moments));
    }
    if cfg.engine.runs_mc() {
        out.push(("mc", Engine::MonteCarlo(cfg.mc_options())));
    }
    out
}

#[derive(Serialize)]
struct Agreement {
    /// |MC − moments| / SE(MC) of the total variance.
    total_variance_z: f64,
    /// Largest such ratio over the record covariance entries.
    record_cov_max_z: Option<f64>,
}

fn agreement(mc: &RunSummary, mo: &RunSummary) -> Option<Agreement> {
    let se = mc.total_variance_std_err?;
    let record_cov_max_z = mc.record_cov_std_err_matrix().map(|s| {
        let a = mc.record_cov_matrix();
        let b = mo.record_cov_matrix();
        (0..a.nrows())
            .flat_map(|i| (0..a.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| (a[(i, j)] - b[(i, j)]).abs() / s[(i, j)])
            .fold(0.0, f64::max)
    });
    Some(Agreement {
        total_variance_z: (mc.total_variance - mo.total_variance).abs() / se,
        record_cov_max_z,
    })
}

pub fn simulate(cfg: &RunConfig) -> Result<Writer, CliError> {
    let mut w = Writer::new(&cfg.output_dir)?;
    let mut summaries = serde_json::Map::new();
    let mut moment_summary = None;
    let mut mc_summary = None;
    if cfg.engine.runs_moments() {
        let s = moments::summarize(&cfg.params, &cfg.schedule)?;
        summaries.insert("moments".into(), serde_json::to_value(&s).expect("summary serializes"));
        moment_summary = Some(s);
    }
    if cfg.engine.runs_mc() {
        let run = mc::run_ensemble(&cfg.params, &cfg.schedule, &cfg.mc_options())?;
        w.text("trials.csv", &output::trials_csv(cfg, &cfg.schedule.labels(), &run.trials))?;
        summaries.insert("mc".into(), serde_json::to_value(&run.summary).expect("summary serializes"));
        mc_summary = Some(run.summary);
    }
    let mut body = json!({ "summaries": summaries });
    if let (Some(m), Some(o)) = (&mc_summary, &moment_summary) {
        body["agreement"] = serde_json::to_value(agreement(m, o)).expect("agreement serializes");
    }
    w.json("summary.json", &with_header(cfg, &body))?;
    let all: Vec<&RunSummary> = moment_summary.iter().chain(mc_summary.iter()).collect();
    w.text("record_covariance.csv", &output::record_covariance_csv(cfg, &all))?;
    for s in &all {
        println!(
            "{}: total variance {:.6e}{} (input {:.6e}){}",
            output::engine_name(s),
            s.total_variance,
            s.total_variance_std_err.map(|e| format!(" ± {e:.2e}")).unwrap_or_default(),
            s.input_total_variance,
            s.db_reduction.map(|d| format!(", {d:.2} dB")).unwrap_or_default(),
        );
    }
    Ok(w)
}

pub fn covariance(cfg: &RunConfig) -> Result<Writer, CliError> {
    let mut w = Writer::new(&cfg.output_dir)?;
    let mut all = Vec::new();
    if cfg.engine.runs_moments() {
        all.push(moments::summarize(&cfg.params, &cfg.schedule)?);
    }
    if cfg.engine.runs_mc() {
        all.push(mc::run_ensemble(&cfg.params, &cfg.schedule, &cfg.mc_options())?.summary);
    }
    let refs: Vec<&RunSummary> = all.iter().collect();
    w.text("record_covariance.csv", &output::record_covariance_csv(cfg, &refs))?;
    Ok(w)
}

/// Schedule builder varying the last feedback round; earlier rounds keep
/// their configured gains.
fn round_builder(cfg: &RunConfig) -> Result<impl Fn(f64) -> Schedule + Sync, CliError> {
    let gains = cfg.round_gains();
    if gains.is_empty() || Schedule::rounds(&gains) != cfg.schedule {
        return Err(CliError::Config(
            "sweep needs a schedule of whole rounds between input and output measurements".into(),
        ));
    }
    let fixed = gains[..gains.len() - 1].to_vec();
    Ok(move |g: f64| {
        let mut all = fixed.clone();
        all.push(g);
        Schedule::rounds(&all)
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SweepArgs {
    pub g_min: f64,
    pub g_max: f64,
    pub g_step: f64,
}

pub fn sweep(cfg: &RunConfig, args: SweepArgs) -> Result<Writer, CliError> {
    if args.g_min > args.g_max {
        return Err(CliError::Config(format!("g_min {} exceeds g_max {}", args.g_min, args.g_max)));
    }
    let grid = gain_grid(args.g_min, args.g_max, args.g_step)?;
    let build = round_builder(cfg)?;
    let mut w = Writer::new(&cfg.output_dir)?;
    let mut csv = csv_header(cfg);
    csv.push_str("g,total_variance,std_err,db_vs_input,engine\n");
    let mut argmins = serde_json::Map::new();
    for (name, engine) in engines(cfg) {
        let points = sweep_gain(&cfg.params, &build, &grid, &engine)?;
        for p in &points {
            let db = db_reduction(p.input_total_variance, p.total_variance).ok();
            let _ = writeln!(
                csv,
                "{},{},{},{},{name}",
                fmt_f64(p.g),
                fmt_f64(p.total_variance),
                opt(p.std_err),
                opt(db)
            );
        }
        let best: &SweepPoint = points
            .iter()
            .min_by(|a, b| a.total_variance.total_cmp(&b.total_variance))
            .ok_or(spincool::Error::EmptyGrid)?;
        argmins.insert(
            name.into(),
            json!({
                "g": best.g,
                "total_variance": best.total_variance,
                "std_err": best.std_err,
                "db_vs_input": db_reduction(best.input_total_variance, best.total_variance).ok(),
            }),
        );
        println!("{name}: argmin g = {} ({:.6e})", best.g, best.total_variance);
    }
    w.text("sweep.csv", &csv)?;
    let sidecar = json!({
        "grid": { "g_min": args.g_min, "g_max": args.g_max, "g_step": args.g_step, "points": grid.len() },
        "argmin": argmins,
    });
    w.json("sweep.json", &with_header(cfg, &sidecar))?;
    Ok(w)
}

pub fn optimize(cfg: &RunConfig, n_rounds: usize, fixed: &[f64], search: GainSearch) -> Result<Writer, CliError> {
    if n_rounds == 0 {
        return Err(CliError::Config("rounds must be >= 1".into()));
    }
    let (name, engine) = if cfg.engine == crate::config::EngineChoice::Mc {
        ("mc", Engine::MonteCarlo(cfg.mc_options()))
    } else {
        ("moments", Engine::Moments)
    };
    let mut w = Writer::new(&cfg.output_dir)?;
    let opt = optimize_gains_after(&cfg.params, fixed, n_rounds, &engine, &search)?;
    let input = opt.input_total_variance;
    let rounds: Vec<_> = opt
        .rounds
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.grid_fallback {
                log::warn!("round {}: gain curve not unimodal, grid minimum used", fixed.len() + i + 1);
            }
            json!({
                "round": fixed.len() + i + 1,
                "g": r.g,
                "total_variance": r.total_variance,
                "db_vs_input": db_reduction(input, r.total_variance).ok(),
                "grid_fallback": r.grid_fallback,
            })
        })
        .collect();
    let total = opt.final_total_variance();
    let body = json!({
        "engine": name,
        "search": search,
        "fixed_gains": fixed,
        "input_total_variance": input,
        "rounds": rounds,
        "gains": opt.gains(),
        "final_total_variance": total,
        "total_db": db_reduction(input, total).ok(),
        "volume_factor": volume_factor(input, total).ok(),
    });
    w.json("gains.json", &with_header(cfg, &body))?;
    println!(
        "gains {:?}; total variance {:.6e} -> {:.6e}",
        opt.gains(),
        input,
        total
    );
    Ok(w)
}

pub fn calibrate_cmd(cfg: &RunConfig, targets: CalibrationTargets) -> Result<Writer, CliError> {
    let mut w = Writer::new(&cfg.output_dir)?;
    let c = calibrate(&cfg.params, &targets)?;
    println!(
        "alpha0 = {:.4}, feedback_noise_coeff = {:.2} (loss {:.4})",
        c.alpha0, c.feedback_noise_coeff, c.loss
    );
    w.json("calibration.json", &with_header(cfg, &json!({ "targets": targets, "result": c })))?;
    Ok(w)
}
