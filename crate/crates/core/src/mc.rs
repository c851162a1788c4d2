//! Monte Carlo trajectories of the collective spin.
//!
//! Each trial owns a ChaCha8 stream selected by (master seed, trial index),
//! so results do not depend on how trials are spread over threads. Every
//! step draws the same number of normals whether or not a channel is enabled,
//! which keeps streams aligned across configurations (common random numbers
//! for gain sweeps).

use std::f64::consts::TAU;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{matrix_rows, readout_floor, EngineKind, RunSummary, SampleStats};
use crate::dynamics::{
    backaction_rotation, faraday_measure, feedback_displace, precession_map, StepModel,
};
use crate::error::{Error, Result};
use crate::noise::{dephase_noise_var, eta_dephase};
use crate::params::{mixed_state_variance, ExperimentParams, InitialMode};
use crate::protocol::{Axis, Schedule};

/// Ensemble run settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McOptions {
    pub n_trials: usize,
    pub master_seed: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            n_trials: 10_000,
            master_seed: 0,
            threads: None,
        }
    }
}

/// Random stream of one trial.
pub fn trial_rng(master_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn normal3<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(normal(rng), normal(rng), normal(rng))
}

/// Symmetric square root of a PSD matrix; eigenvalues down to
/// −1e-9·max|λ| are clamped to zero.
pub fn psd_sqrt(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let eig = SymmetricEigen::new(*m);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.min() < -1e-9 * scale {
        return Err(Error::Factorization(format!(
            "matrix is not positive semidefinite (eigenvalues {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix3::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Two orthonormal vectors spanning the plane transverse to `axis`.
fn transverse_basis(axis: &Vector3<f64>) -> [Vector3<f64>; 2] {
    let trial = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (trial - axis * axis.dot(&trial)).normalize();
    let e2 = axis.cross(&e1);
    [e1, e2]
}

/// Draws initial spin vectors with the configured mean and covariance.
#[derive(Debug, Clone)]
pub enum InitialSampler {
    Gaussian {
        mean: Vector3<f64>,
        factor: Matrix3<f64>,
    },
    /// Fully mixed state followed by three ẑ pump pulses with jointly normal
    /// signed amplitudes, each followed by a third of a Larmor period.
    Procedural {
        mixed_std: f64,
        amp_mean: Vector3<f64>,
        amp_factor: Matrix3<f64>,
        x_third: Matrix3<f64>,
        dephase_std: f64,
        basis: [Vector3<f64>; 2],
    },
}

impl InitialSampler {
    pub fn new(params: &ExperimentParams) -> Result<Self> {
        let init = &params.initial_state;
        let gamma = init.covariance_matrix();
        match init.mode {
            InitialMode::Gaussian => Ok(Self::Gaussian {
                mean: init.mean_vector(),
                factor: psd_sqrt(&gamma)?,
            }),
            InitialMode::Procedural => {
                let field = &params.field;
                let x = precession_map(TAU / 3.0, field);
                let axis = field.axis_vector();
                let dephase_var = if params.noise.enable_dephasing_noise {
                    let eta = eta_dephase(TAU / 3.0, field, params.noise.dephasing_form);
                    dephase_noise_var(eta, &params.ensemble)
                } else {
                    0.0
                };
                let q = (Matrix3::identity() - axis * axis.transpose()) * dephase_var;
                let mixed = mixed_state_variance(&params.ensemble);
                let x2 = x * x;
                let x3 = x2 * x;
                // F = X³m + X³ẑa₁ + X²ẑa₂ + Xẑa₃ + X²n₁ + Xn₂ + n₃
                let z = Vector3::z();
                let u = Matrix3::from_columns(&[x3 * z, x2 * z, x * z]);
                let u_inv = u
                    .try_inverse()
                    .ok_or_else(|| Error::Factorization("pump directions are degenerate".into()))?;
                let fixed = x3 * x3.transpose() * mixed + x2 * q * x2.transpose() + x * q * x.transpose() + q;
                let amp_cov = u_inv * (gamma - fixed) * u_inv.transpose();
                let amp_cov = (amp_cov + amp_cov.transpose()) * 0.5;
                Ok(Self::Procedural {
                    mixed_std: mixed.sqrt(),
                    amp_mean: u_inv * init.mean_vector(),
                    amp_factor: psd_sqrt(&amp_cov).map_err(|e| {
                        Error::Factorization(format!("covariance not reachable by pumping the mixed state: {e}"))
                    })?,
                    x_third: x,
                    dephase_std: dephase_var.sqrt(),
                    basis: transverse_basis(&axis),
                })
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        match self {
            Self::Gaussian { mean, factor } => mean + factor * normal3(rng),
            Self::Procedural {
                mixed_std,
                amp_mean,
                amp_factor,
                x_third,
                dephase_std,
                basis,
            } => {
                let amps = amp_mean + amp_factor * normal3(rng);
                let mut f = normal3(rng) * *mixed_std;
                for a in amps.iter() {
                    f.z += a;
                    let n = Vector2::new(normal(rng), normal(rng)) * *dephase_std;
                    f = x_third * f + basis[0] * n.x + basis[1] * n.y;
                }
                f
            }
        }
    }
}

pub fn sample_initial_state<R: Rng + ?Sized>(params: &ExperimentParams, rng: &mut R) -> Result<Vector3<f64>> {
    Ok(InitialSampler::new(params)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecordEntry {
    pub step_index: usize,
    pub axis: Axis,
    /// Spin estimate S_y/(κ₁S_x).
    pub outcome: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MeasurementRecord {
    entries: Vec<RecordEntry>,
}

impl MeasurementRecord {
    pub fn push(&mut self, entry: RecordEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.step_index <= last.step_index {
                return Err(Error::InvalidSchedule(format!(
                    "record step {} does not follow {}",
                    entry.step_index, last.step_index
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[RecordEntry] {
        &self.entries
    }

    pub fn outcomes(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.outcome)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One realization: the classical spin vector, its random stream and record.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub spin: Vector3<f64>,
    pub rng: ChaCha8Rng,
    pub record: MeasurementRecord,
    pub input_spin: Vector3<f64>,
    /// Spin at the schedule's readout point.
    pub readout_spin: Vector3<f64>,
}

impl TrajectoryState {
    pub fn new(spin: Vector3<f64>, rng: ChaCha8Rng) -> Self {
        Self {
            spin,
            rng,
            record: MeasurementRecord::default(),
            input_spin: spin,
            readout_spin: spin,
        }
    }

    /// Measure → back-action → spontaneous emission → precess θ → feedback →
    /// precess θ̄. Returns the spin estimate of the measurement.
    pub fn step(&mut self, model: &StepModel, index: usize, axis: Axis, g: f64) -> Result<f64> {
        let rng = &mut self.rng;
        let shot = normal(rng) * model.readout_std();
        let sz = normal(rng) * model.backaction_angle_var.sqrt() / model.params.probe.kappa1;
        let spont_z = normal3(rng);
        let deph1 = Vector2::new(normal(rng), normal(rng));
        let fb_z = normal(rng);
        let deph2 = Vector2::new(normal(rng), normal(rng));

        let out = faraday_measure(&self.spin, &model.coupling, shot);
        self.record.push(RecordEntry {
            step_index: index,
            axis,
            outcome: out.estimate,
        })?;

        let mut f = backaction_rotation(&self.spin, sz, &model.params.probe);
        let spont_var = model.spont_var_at(&f);
        f *= 1.0 - model.eta_spont;
        f += spont_var.map(f64::sqrt).component_mul(&spont_z);

        f = model.x_theta * f + dephase_sample(&model.dephase_cov_theta, &deph1);

        let gain = model.gain(g)?;
        if gain != 0.0 {
            let d = model.quantize(gain * out.sy);
            f = feedback_displace(&f, 1.0, d);
            f.z += model.feedback_noise_var(d).sqrt() * fb_z;
        }

        f = model.x_theta_bar * f + dephase_sample(&model.dephase_cov_theta_bar, &deph2);
        self.spin = f;
        Ok(out.estimate)
    }
}

/// Transverse noise with covariance `cov` (rank two, isotropic in the plane)
/// from two standard normals.
fn dephase_sample(cov: &Matrix3<f64>, n: &Vector2<f64>) -> Vector3<f64> {
    let var = cov.trace() / 2.0;
    if var == 0.0 {
        return Vector3::zeros();
    }
    // cov = var (1 − b bᵀ); recover the axis from the null direction
    let eig = SymmetricEigen::new(*cov);
    let k = eig.eigenvalues.imin();
    let axis: Vector3<f64> = eig.eigenvectors.column(k).into_owned();
    let [e1, e2] = transverse_basis(&axis);
    (e1 * n.x + e2 * n.y) * var.sqrt()
}

/// Runs the schedule from `state`, recording every outcome.
pub fn run_steps(model: &StepModel, schedule: &Schedule, state: &mut TrajectoryState) -> Result<()> {
    let readout_step = schedule.readout_step();
    for step in schedule.steps() {
        if step.index == readout_step {
            state.readout_spin = state.spin;
        }
        state.step(model, step.index, step.axis, step.normalized_gain)?;
    }
    if readout_step == schedule.n_steps() {
        state.readout_spin = state.spin;
    }
    Ok(())
}

/// Samples an initial state and runs one trajectory through the schedule.
pub fn run_trajectory(params: &ExperimentParams, schedule: &Schedule, mut rng: ChaCha8Rng) -> Result<TrajectoryState> {
    params.validate()?;
    schedule.validate()?;
    let model = StepModel::new(params);
    let spin = sample_initial_state(params, &mut rng)?;
    let mut state = TrajectoryState::new(spin, rng);
    run_steps(&model, schedule, &mut state)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub input: [f64; 3],
    pub readout: [f64; 3],
    pub final_spin: [f64; 3],
    pub record: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct McRun {
    pub trials: Vec<TrialOutcome>,
    pub summary: RunSummary,
}

pub fn run_ensemble(params: &ExperimentParams, schedule: &Schedule, opts: &McOptions) -> Result<McRun> {
    if opts.n_trials < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: opts.n_trials,
        });
    }
    params.validate()?;
    schedule.validate()?;
    let model = StepModel::new(params);
    let sampler = InitialSampler::new(params)?;

    let trial = |i: usize| -> Result<TrialOutcome> {
        let mut rng = trial_rng(opts.master_seed, i as u64);
        let spin = sampler.sample(&mut rng);
        let mut state = TrajectoryState::new(spin, rng);
        run_steps(&model, schedule, &mut state)?;
        Ok(TrialOutcome {
            input: state.input_spin.into(),
            readout: state.readout_spin.into(),
            final_spin: state.spin.into(),
            record: state.record.outcomes().collect(),
        })
    };
    let trials: Vec<TrialOutcome> = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| (0..opts.n_trials).into_par_iter().map(trial).collect::<Result<_>>())?,
        None => (0..opts.n_trials).into_par_iter().map(trial).collect::<Result<_>>()?,
    };
    let summary = summarize_trials(params, schedule, &trials)?;
    Ok(McRun { trials, summary })
}

/// Statistics over trials, computed sequentially in trial order.
pub fn summarize_trials(params: &ExperimentParams, schedule: &Schedule, trials: &[TrialOutcome]) -> Result<RunSummary> {
    let n = trials.len();
    let k = schedule.n_steps();
    let input = SampleStats::new(DMatrix::from_fn(n, 3, |i, j| trials[i].input[j]))?;
    let readout = SampleStats::new(DMatrix::from_fn(n, 3, |i, j| trials[i].readout[j]))?;
    let records = SampleStats::new(DMatrix::from_fn(n, k, |i, j| trials[i].record[j]))?;
    let floor = readout_floor(&params.probe);
    let spin_idx = [0, 1, 2];
    let readout_idx: Option<Vec<usize>> = schedule.readout_steps().map(|r| r.collect());
    let measured = readout_idx.as_ref().map(|idx| records.second_moment_sum(idx));
    let mut s = RunSummary {
        engine: EngineKind::Mc,
        n_trials: n,
        readout_step: schedule.readout_step(),
        mean_spin: [readout.mean[0], readout.mean[1], readout.mean[2]],
        component_variances: [readout.cov[(0, 0)], readout.cov[(1, 1)], readout.cov[(2, 2)]],
        total_variance: readout.second_moment_sum(&spin_idx),
        total_variance_std_err: readout.second_moment_sum_std_err(&spin_idx),
        input_total_variance: input.second_moment_sum(&spin_idx),
        input_total_variance_std_err: input.second_moment_sum_std_err(&spin_idx),
        db_reduction: None,
        volume_factor: None,
        measured_total_variance: measured,
        measured_total_variance_std_err: readout_idx
            .as_ref()
            .and_then(|idx| records.second_moment_sum_std_err(idx)),
        floor_subtracted_variance: measured.map(|m| m - floor),
        readout_floor: floor,
        record_labels: schedule.labels(),
        record_mean: records.mean.iter().copied().collect(),
        record_cov: matrix_rows(&records.cov),
        record_cov_std_err: records.cov_std_err().map(|m| matrix_rows(&m)),
    };
    s.fill_reductions();
    Ok(s)
}
