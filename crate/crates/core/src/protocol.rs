//! Measurement/feedback schedules, gain sweeps and multi-round gain optimization.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::{self, McOptions};
use crate::moments;
use crate::params::ExperimentParams;

/// Stroboscopic measurement order: F_z, then F_y, then F_x one third of a
/// Larmor period later each.
pub const AXIS_CYCLE: [Axis; 3] = [Axis::Z, Axis::Y, Axis::X];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Z,
    Y,
    X,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Z => "z",
            Axis::Y => "y",
            Axis::X => "x",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    MeasureOnly,
    MeasureFeedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub kind: PhaseKind,
    #[serde(default = "full_cycle")]
    pub axes: Vec<Axis>,
    #[serde(default)]
    pub normalized_gain: f64,
}

fn full_cycle() -> Vec<Axis> {
    AXIS_CYCLE.to_vec()
}

impl Phase {
    pub fn measure_only() -> Self {
        Self {
            kind: PhaseKind::MeasureOnly,
            axes: full_cycle(),
            normalized_gain: 0.0,
        }
    }

    pub fn feedback(g: f64) -> Self {
        Self {
            kind: PhaseKind::MeasureFeedback,
            axes: full_cycle(),
            normalized_gain: g,
        }
    }

    fn gain(&self) -> f64 {
        match self.kind {
            PhaseKind::MeasureOnly => 0.0,
            PhaseKind::MeasureFeedback => self.normalized_gain,
        }
    }
}

/// One stroboscopic measurement (+ optional feedback) step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub index: usize,
    pub axis: Axis,
    pub phase: usize,
    /// Normalized gain g; 0 for measurement-only steps.
    pub normalized_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub phases: Vec<Phase>,
}

impl Schedule {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        let s = Self { phases };
        s.validate()?;
        Ok(s)
    }

    /// Input measurement, one feedback round with gain `g`, output measurement.
    /// With g = 0 the middle phase is measurement only.
    pub fn paper_characterization(g: f64) -> Self {
        Self::rounds(&[g])
    }

    /// Input measurement, two feedback rounds, output measurement (12 steps).
    pub fn paper_two_round(g1: f64, g2: f64) -> Self {
        Self::rounds(&[g1, g2])
    }

    /// Input measurement, one feedback round per gain, output measurement.
    pub fn rounds(gains: &[f64]) -> Self {
        let mut phases = vec![Phase::measure_only()];
        phases.extend(gains.iter().map(|&g| {
            if g == 0.0 {
                Phase::measure_only()
            } else {
                Phase::feedback(g)
            }
        }));
        phases.push(Phase::measure_only());
        Self { phases }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::InvalidSchedule("no phases".into()));
        }
        let mut index = 0;
        for (p, phase) in self.phases.iter().enumerate() {
            if phase.axes.is_empty() {
                return Err(Error::InvalidSchedule(format!("phase {p} has no steps")));
            }
            if !phase.normalized_gain.is_finite() {
                return Err(Error::InvalidSchedule(format!("phase {p} gain is not finite")));
            }
            if phase.kind == PhaseKind::MeasureOnly && phase.normalized_gain != 0.0 {
                return Err(Error::InvalidSchedule(format!(
                    "phase {p} is measure_only but has gain {}",
                    phase.normalized_gain
                )));
            }
            for &axis in &phase.axes {
                let expected = AXIS_CYCLE[index % 3];
                if axis != expected {
                    return Err(Error::InvalidSchedule(format!(
                        "step {index} measures {axis} but precession makes it {expected}"
                    )));
                }
                index += 1;
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> impl Iterator<Item = Step> + '_ {
        self.phases
            .iter()
            .enumerate()
            .flat_map(|(p, phase)| phase.axes.iter().map(move |&axis| (p, axis, phase.gain())))
            .enumerate()
            .map(|(index, (phase, axis, normalized_gain))| Step {
                index,
                axis,
                phase,
                normalized_gain,
            })
    }

    pub fn n_steps(&self) -> usize {
        self.phases.iter().map(|p| p.axes.len()).sum()
    }

    fn phase_start(&self, phase: usize) -> usize {
        self.phases[..phase].iter().map(|p| p.axes.len()).sum()
    }

    /// Steps of the trailing measurement-only phase used to read out the
    /// final state, if the schedule has one after some earlier phase.
    pub fn readout_steps(&self) -> Option<std::ops::Range<usize>> {
        let last = self.phases.len().checked_sub(1)?;
        if last == 0 || self.phases[last].kind != PhaseKind::MeasureOnly {
            return None;
        }
        let start = self.phase_start(last);
        Some(start..start + self.phases[last].axes.len())
    }

    /// Step index at which the spin state is read out: the start of the
    /// trailing measurement phase, or the end of the schedule.
    pub fn readout_step(&self) -> usize {
        self.readout_steps().map_or(self.n_steps(), |r| r.start)
    }

    /// Record labels z1, y1, x1, z2, ...
    pub fn labels(&self) -> Vec<String> {
        self.steps()
            .map(|s| format!("{}{}", s.axis, s.index / 3 + 1))
            .collect()
    }

    pub fn feedback_gains(&self) -> Vec<f64> {
        self.phases
            .iter()
            .filter(|p| p.kind == PhaseKind::MeasureFeedback)
            .map(|p| p.normalized_gain)
            .collect()
    }
}

/// Named schedule presets understood by the config loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperOneRound,
    PaperTwoRound,
    NoAtoms,
}

impl Preset {
    pub const DEFAULT_ONE_ROUND_GAIN: f64 = -0.75;
    pub const DEFAULT_SECOND_ROUND_GAIN: f64 = -0.6;

    pub fn schedule(self, gains: &[f64]) -> Result<Schedule> {
        let pick = |i: usize, default: f64| gains.get(i).copied().unwrap_or(default);
        let s = match self {
            Preset::PaperOneRound => {
                if gains.len() > 1 {
                    return Err(Error::InvalidSchedule("paper-one-round takes one gain".into()));
                }
                Schedule::paper_characterization(pick(0, Self::DEFAULT_ONE_ROUND_GAIN))
            }
            Preset::PaperTwoRound => {
                if gains.len() > 2 {
                    return Err(Error::InvalidSchedule("paper-two-round takes two gains".into()));
                }
                Schedule::paper_two_round(
                    pick(0, Self::DEFAULT_ONE_ROUND_GAIN),
                    pick(1, Self::DEFAULT_SECOND_ROUND_GAIN),
                )
            }
            // The sequence is repeated with the trap emptied.
            Preset::NoAtoms => Schedule::paper_characterization(pick(0, Self::DEFAULT_ONE_ROUND_GAIN)),
        };
        s.validate()?;
        Ok(s)
    }

    /// Parameter adjustments implied by the preset.
    pub fn adjust_params(self, params: ExperimentParams) -> ExperimentParams {
        match self {
            Preset::NoAtoms => params.without_atoms(),
            _ => params,
        }
    }
}

/// Which propagation backend evaluates a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Engine {
    Moments,
    MonteCarlo(McOptions),
}

/// Total variance Δ²F̂ (spin state at the readout point) with its standard
/// error when estimated by sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub total_variance: f64,
    pub std_err: Option<f64>,
    pub input_total_variance: f64,
}

pub fn evaluate(params: &ExperimentParams, schedule: &Schedule, engine: &Engine) -> Result<Evaluation> {
    match engine {
        Engine::Moments => {
            let run = moments::propagate(params, schedule)?;
            Ok(Evaluation {
                total_variance: run.readout.total_variance(),
                std_err: None,
                input_total_variance: run.input.total_variance(),
            })
        }
        Engine::MonteCarlo(opts) => {
            let run = mc::run_ensemble(params, schedule, opts)?;
            Ok(Evaluation {
                total_variance: run.summary.total_variance,
                std_err: run.summary.total_variance_std_err,
                input_total_variance: run.summary.input_total_variance,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub g: f64,
    pub total_variance: f64,
    pub std_err: Option<f64>,
    pub input_total_variance: f64,
}

/// Inclusive grid min, min+step, ..., max (the endpoint is kept when the
/// step divides the interval up to rounding).
pub fn gain_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min.is_finite() && max.is_finite() && step.is_finite()) || step <= 0.0 || min > max {
        return Err(Error::EmptyGrid);
    }
    let n = ((max - min) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| min + i as f64 * step).collect())
}

/// Evaluates Δ²F̂ for the schedule built at each gain of `grid`.
pub fn sweep_gain<F>(params: &ExperimentParams, build: F, grid: &[f64], engine: &Engine) -> Result<Vec<SweepPoint>>
where
    F: Fn(f64) -> Schedule + Sync,
{
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let eval = |&g: &f64| -> Result<SweepPoint> {
        let e = evaluate(params, &build(g), engine)?;
        Ok(SweepPoint {
            g,
            total_variance: e.total_variance,
            std_err: e.std_err,
            input_total_variance: e.input_total_variance,
        })
    };
    match engine {
        Engine::Moments => grid.par_iter().map(eval).collect(),
        // each point is already parallel over trials
        Engine::MonteCarlo(_) => grid.iter().map(eval).collect(),
    }
}

/// Golden-section minimization of `f` on [a, b] until the bracket is narrower
/// than `tol`. Returns (argmin, min, evaluations).
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64, usize) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut evals = 2;
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        evals += 1;
    }
    if fc < fd {
        (c, fc, evals)
    } else {
        (d, fd, evals)
    }
}

/// Search settings: coarse grid over [lo, hi] followed by golden section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainSearch {
    pub lo: f64,
    pub hi: f64,
    pub coarse_step: f64,
    pub tol: f64,
}

impl Default for GainSearch {
    fn default() -> Self {
        Self {
            lo: -2.0,
            hi: 0.0,
            coarse_step: 0.125,
            tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainOptimum {
    pub g: f64,
    pub value: f64,
    /// True when the coarse curve had several local minima and the grid
    /// minimum is reported without refinement.
    pub grid_fallback: bool,
    pub evaluations: usize,
}

/// Minimizes a scalar objective of the gain: coarse grid, then golden
/// section inside the neighbouring grid cells of the grid minimum.
pub fn minimize_gain<F>(mut f: F, search: &GainSearch) -> Result<GainOptimum>
where
    F: FnMut(f64) -> Result<f64>,
{
    let grid = gain_grid(search.lo, search.hi, search.coarse_step)?;
    let mut values = Vec::with_capacity(grid.len());
    for &g in &grid {
        values.push(f(g)?);
    }
    let (best, &best_value) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::EmptyGrid)?;
    let mut evaluations = grid.len();

    let local_minima = (0..values.len())
        .filter(|&i| {
            let left = i == 0 || values[i - 1] > values[i];
            let right = i + 1 == values.len() || values[i + 1] > values[i];
            left && right
        })
        .count();
    if local_minima > 1 {
        log::warn!("gain curve is not unimodal on [{}, {}]; using grid minimum", search.lo, search.hi);
        return Ok(GainOptimum {
            g: grid[best],
            value: best_value,
            grid_fallback: true,
            evaluations,
        });
    }

    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(grid.len() - 1)];
    let mut failure = None;
    let (g, v, n) = golden_section(
        |g| match f(g) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        a,
        b,
        search.tol,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    evaluations += n;
    let (g, value) = if v < best_value { (g, v) } else { (grid[best], best_value) };
    Ok(GainOptimum {
        g,
        value,
        grid_fallback: false,
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundResult {
    pub g: f64,
    /// Predicted Δ²F̂ after this round.
    pub total_variance: f64,
    pub grid_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizedGains {
    pub input_total_variance: f64,
    pub rounds: Vec<RoundResult>,
}

impl OptimizedGains {
    pub fn gains(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.g).collect()
    }

    pub fn final_total_variance(&self) -> f64 {
        self.rounds.last().map_or(self.input_total_variance, |r| r.total_variance)
    }
}

/// Greedy sequential optimization: round k's gain minimizes Δ²F̂ after k
/// rounds with rounds 1..k−1 held at their optimized values.
pub fn optimize_gains(
    params: &ExperimentParams,
    n_rounds: usize,
    engine: &Engine,
    search: &GainSearch,
) -> Result<OptimizedGains> {
    optimize_gains_after(params, &[], n_rounds, engine, search)
}

/// As [`optimize_gains`], with `fixed` gains applied as the leading rounds.
pub fn optimize_gains_after(
    params: &ExperimentParams,
    fixed: &[f64],
    n_rounds: usize,
    engine: &Engine,
    search: &GainSearch,
) -> Result<OptimizedGains> {
    if n_rounds == 0 {
        return Err(Error::Optimizer("need at least one round".into()));
    }
    let input_total_variance = evaluate(params, &Schedule::rounds(&[]), engine)?.input_total_variance;
    let mut gains = fixed.to_vec();
    let mut rounds = Vec::with_capacity(n_rounds);
    for _ in 0..n_rounds {
        let opt = minimize_gain(
            |g| {
                let mut trial = gains.clone();
                trial.push(g);
                Ok(evaluate(params, &Schedule::rounds(&trial), engine)?.total_variance)
            },
            search,
        )?;
        gains.push(opt.g);
        rounds.push(RoundResult {
            g: opt.g,
            total_variance: opt.value,
            grid_fallback: opt.grid_fallback,
        });
    }
    Ok(OptimizedGains {
        input_total_variance,
        rounds,
    })
}
