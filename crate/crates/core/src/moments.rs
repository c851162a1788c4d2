//! Exact first- and second-moment propagation of the spin jointly with every
//! recorded measurement outcome.
//!
//! All channels are affine in the spin except the back-action rotation and
//! the state-dependent noise variances; for those the moments are still
//! propagated exactly (random rotation, expected noise variance), so the
//! engine reproduces the Monte Carlo means and covariances without sampling
//! error. The Gaussian form is only used for E|d| of the feedback displacement.

use std::f64::consts::{FRAC_2_PI, SQRT_2};

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::analysis::{matrix_rows, readout_floor, EngineKind, RunSummary};
use crate::dynamics::StepModel;
use crate::error::{Error, Result};
use crate::params::{ExperimentParams, SpinMoments};
use crate::protocol::Schedule;

/// Default cap on the number of recorded outcomes in a joint state.
pub const MAX_RECORDS: usize = 64;

/// Mean and covariance of (F_x, F_y, F_z, r_1, ..., r_k).
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl JointGaussian {
    pub fn from_spin(m: &SpinMoments) -> Self {
        let mut cov = DMatrix::zeros(3, 3);
        cov.copy_from(&m.cov);
        Self {
            mean: DVector::from_column_slice(m.mean.as_slice()),
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_records(&self) -> usize {
        self.dim() - 3
    }

    pub fn spin(&self) -> SpinMoments {
        SpinMoments::new(
            Vector3::from_column_slice(&self.mean.as_slice()[..3]),
            Matrix3::from_fn(|i, j| self.cov[(i, j)]),
        )
    }

    pub fn record_mean(&self) -> DVector<f64> {
        self.mean.rows(3, self.n_records()).into_owned()
    }

    pub fn record_cov(&self) -> DMatrix<f64> {
        let k = self.n_records();
        self.cov.view((3, 3), (k, k)).into_owned()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov.clone()).eigenvalues.min()
    }

    /// Applies F ↦ L F to the spin block.
    fn transform_spin(&mut self, l: &Matrix3<f64>) {
        let d = self.dim();
        let m = l * Vector3::from_column_slice(&self.mean.as_slice()[..3]);
        self.mean.rows_mut(0, 3).copy_from(&m);
        let top = l * self.cov.view((0, 0), (3, d));
        self.cov.view_mut((0, 0), (3, d)).copy_from(&top);
        let left = self.cov.view((0, 0), (d, 3)) * l.transpose();
        self.cov.view_mut((0, 0), (d, 3)).copy_from(&left);
    }

    fn add_spin_noise(&mut self, q: &Matrix3<f64>) {
        let mut block = self.cov.view_mut((0, 0), (3, 3));
        block += q;
    }

    /// Appends r = F_z + e with Var(e) = `noise_var`, independent of everything.
    fn append_readout(&mut self, noise_var: f64) {
        let d = self.dim();
        let mut mean = self.mean.clone().resize_vertically(d + 1, 0.0);
        mean[d] = self.mean[2];
        let mut cov = self.cov.clone().resize(d + 1, d + 1, 0.0);
        for j in 0..d {
            cov[(d, j)] = self.cov[(2, j)];
            cov[(j, d)] = self.cov[(j, 2)];
        }
        cov[(d, d)] = self.cov[(2, 2)] + noise_var;
        self.mean = mean;
        self.cov = cov;
    }

    /// Rotation of (F_x, F_y) about z by an angle ~ N(0, var), independent of
    /// the state. Second moments use E[cos²], E[sin²]; the mean is damped by
    /// E[cos] = exp(−var/2).
    fn random_z_rotation(&mut self, var: f64) {
        if var == 0.0 {
            return;
        }
        let d = self.dim();
        let c1 = (-var / 2.0).exp();
        let c2 = 0.5 * (1.0 + (-2.0 * var).exp());
        let s2 = 0.5 * (1.0 - (-2.0 * var).exp());
        let (mx, my) = (self.mean[0], self.mean[1]);
        // raw transverse second moments
        let mxx = self.cov[(0, 0)] + mx * mx;
        let myy = self.cov[(1, 1)] + my * my;
        let mxy = self.cov[(0, 1)] + mx * my;
        // J M Jᵀ with J = [[0, −1], [1, 0]]
        let nxx = c2 * mxx + s2 * myy;
        let nyy = c2 * myy + s2 * mxx;
        let nxy = c2 * mxy - s2 * mxy;
        let (mx2, my2) = (c1 * mx, c1 * my);
        for j in 2..d {
            self.cov[(0, j)] *= c1;
            self.cov[(1, j)] *= c1;
            self.cov[(j, 0)] = self.cov[(0, j)];
            self.cov[(j, 1)] = self.cov[(1, j)];
        }
        self.cov[(0, 0)] = nxx - mx2 * mx2;
        self.cov[(1, 1)] = nyy - my2 * my2;
        self.cov[(0, 1)] = nxy - mx2 * my2;
        self.cov[(1, 0)] = self.cov[(0, 1)];
        self.mean[0] = mx2;
        self.mean[1] = my2;
    }

    /// Expected per-axis spontaneous-emission variance; the single-atom
    /// polarization enters through E[F_i²].
    fn spont_var(&self, model: &StepModel) -> Vector3<f64> {
        let noise = &model.params.noise;
        let n = model.params.ensemble.n_atoms;
        if !noise.enable_spont || n == 0.0 {
            return Vector3::zeros();
        }
        let second = Vector3::from_fn(|i, _| self.cov[(i, i)] + self.mean[i].powi(2));
        if second.sum().sqrt() / n < noise.unpolarized_threshold {
            return model.spont_var_unpolarized;
        }
        let mixed = model.params.ensemble.single_atom_mixed_variance();
        let eta = model.eta_spont;
        second.map(|s| (mixed - s / (n * n)).max(0.0) * eta * (1.0 - eta) * n + eta * n * mixed)
    }

    /// One measurement + feedback step with normalized gain `g`.
    pub fn apply_step(&self, model: &StepModel, g: f64, max_records: usize) -> Result<Self> {
        if self.n_records() >= max_records {
            return Err(Error::DimensionOverflow { max: max_records });
        }
        let mut next = self.clone();
        let readout_var = model.readout_std().powi(2) * model.coupling.estimator_scale.powi(2);
        next.append_readout(readout_var);
        let r = next.dim() - 1;

        next.random_z_rotation(model.backaction_angle_var);

        let spont = next.spont_var(model);
        next.transform_spin(&(Matrix3::identity() * (1.0 - model.eta_spont)));
        next.add_spin_noise(&Matrix3::from_diagonal(&spont));

        next.transform_spin(&model.x_theta);
        next.add_spin_noise(&model.dephase_cov_theta);

        // displacement d = G·S_y = G κ₁S_x · r
        let k = model.gain(g)? * model.coupling.readout_gain;
        if k != 0.0 {
            let d = next.dim();
            let mut l = DMatrix::identity(d, d);
            l[(2, r)] = k;
            next.mean = &l * &next.mean;
            next.cov = &l * &next.cov * l.transpose();
            let mean_d = k * next.mean[r];
            let sd_d = k.abs() * next.cov[(r, r)].max(0.0).sqrt();
            next.cov[(2, 2)] +=
                model.feedback_noise_var(folded_normal_mean(mean_d, sd_d)) + model.quantization_var();
        }

        next.transform_spin(&model.x_theta_bar);
        next.add_spin_noise(&model.dephase_cov_theta_bar);
        next.symmetrize();
        Ok(next)
    }

    fn symmetrize(&mut self) {
        let t = self.cov.transpose();
        self.cov = (&self.cov + t) * 0.5;
    }
}

/// E|X| for X ~ N(mu, sd²).
pub fn folded_normal_mean(mu: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mu.abs();
    }
    let z = mu / sd;
    sd * FRAC_2_PI.sqrt() * (-0.5 * z * z).exp() + mu * (1.0 - libm::erfc(z / SQRT_2))
}

/// Moments at the key points of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRun {
    pub input: SpinMoments,
    pub readout: SpinMoments,
    pub final_state: SpinMoments,
    pub readout_step: usize,
    pub joint: JointGaussian,
}

pub fn propagate(params: &ExperimentParams, schedule: &Schedule) -> Result<MomentRun> {
    propagate_with_limit(params, schedule, MAX_RECORDS)
}

pub fn propagate_with_limit(params: &ExperimentParams, schedule: &Schedule, max_records: usize) -> Result<MomentRun> {
    params.validate()?;
    schedule.validate()?;
    let model = StepModel::new(params);
    let input = params.initial_state.moments();
    let readout_step = schedule.readout_step();
    let mut joint = JointGaussian::from_spin(&input);
    let mut readout = input;
    for step in schedule.steps() {
        if step.index == readout_step {
            readout = joint.spin();
        }
        joint = joint.apply_step(&model, step.normalized_gain, max_records)?;
    }
    let final_state = joint.spin();
    if readout_step == schedule.n_steps() {
        readout = final_state;
    }
    Ok(MomentRun {
        input,
        readout,
        final_state,
        readout_step,
        joint,
    })
}

/// Δ²F̂ of the spin state at the schedule's readout point.
pub fn predict_total_variance(params: &ExperimentParams, schedule: &Schedule) -> Result<f64> {
    Ok(propagate(params, schedule)?.readout.total_variance())
}

/// Marginal covariance of all recorded outcomes, in spins².
pub fn record_covariance(params: &ExperimentParams, schedule: &Schedule) -> Result<DMatrix<f64>> {
    Ok(propagate(params, schedule)?.joint.record_cov())
}

pub fn summarize(params: &ExperimentParams, schedule: &Schedule) -> Result<RunSummary> {
    let run = propagate(params, schedule)?;
    let rec_mean = run.joint.record_mean();
    let rec_cov = run.joint.record_cov();
    let floor = readout_floor(&params.probe);
    let measured = schedule
        .readout_steps()
        .map(|r| r.map(|i| rec_cov[(i, i)] + rec_mean[i].powi(2)).sum::<f64>());
    let mut s = RunSummary {
        engine: EngineKind::Moments,
        n_trials: 0,
        readout_step: run.readout_step,
        mean_spin: run.readout.mean.into(),
        component_variances: run.readout.cov.diagonal().into(),
        total_variance: run.readout.total_variance(),
        total_variance_std_err: None,
        input_total_variance: run.input.total_variance(),
        input_total_variance_std_err: None,
        db_reduction: None,
        volume_factor: None,
        measured_total_variance: measured,
        measured_total_variance_std_err: None,
        floor_subtracted_variance: measured.map(|m| m - floor),
        readout_floor: floor,
        record_labels: schedule.labels(),
        record_mean: rec_mean.iter().copied().collect(),
        record_cov: matrix_rows(&rec_cov),
        record_cov_std_err: None,
    };
    s.fill_reductions();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{one_step_map, precession_map};
    use crate::params::physical_gain;
    use crate::protocol::Phase;
    use approx::assert_relative_eq;
    use std::f64::consts::TAU;

    fn silent() -> ExperimentParams {
        let mut p = ExperimentParams::default();
        p.noise = p.noise.silent();
        p
    }

    #[test]
    fn no_gain_no_noise_is_linear_map() {
        let p = silent();
        let model = StepModel::new(&p);
        let mut j = JointGaussian::from_spin(&p.initial_state.moments());
        for _ in 0..3 {
            j = j.apply_step(&model, 0.0, MAX_RECORDS).unwrap();
        }
        let x = precession_map(TAU, &p.field);
        let expected = x * p.initial_state.covariance_matrix() * x.transpose();
        assert_relative_eq!(j.spin().cov, expected, max_relative = 1e-12);
    }

    #[test]
    fn naive_gain_writes_readout_noise_into_spin() {
        let mut p = silent();
        p.noise.enable_readout_noise = true;
        p.field.latency = 0.0;
        p.field.t2_transverse = f64::INFINITY;
        let model = StepModel::new(&p);
        let j = JointGaussian::from_spin(&p.initial_state.moments());
        let j = j.apply_step(&model, -1.0, MAX_RECORDS).unwrap();
        // Before the tail precession the fed-back spin is along ẑ; X(2π/3) moves it to ŷ.
        let x = precession_map(TAU / 3.0, &p.field);
        let cov = x.transpose() * j.spin().cov * x;
        assert_relative_eq!(cov[(2, 2)], model.coupling.estimate_variance(), max_relative = 1e-6);
        assert_relative_eq!(cov[(2, 2)], 2.0 / (1.7e-7f64.powi(2) * 5.4e7), max_relative = 1e-6);
    }

    #[test]
    fn agrees_with_affine_composition_without_backaction() {
        let mut p = ExperimentParams::default();
        p.noise.enable_backaction = false;
        p.noise.enable_feedback_noise = false;
        p.initial_state.mean = [2e4, -1e4, 5e3];
        let g = -0.75;
        let gain = physical_gain(g, &p.probe).unwrap();
        let one = one_step_map(&p, gain, 0.0);
        // spont noise is state dependent: force the unpolarized branch in both routes
        let mut p2 = p;
        p2.noise.unpolarized_threshold = f64::INFINITY;
        let model2 = StepModel::new(&p2);
        let m0 = p.initial_state.moments();
        let j = JointGaussian::from_spin(&m0).apply_step(&model2, g, MAX_RECORDS).unwrap();
        assert_relative_eq!(j.spin().mean, one.map.apply_mean(&m0.mean), max_relative = 1e-12);
        assert_relative_eq!(j.spin().cov, one.map.apply_cov(&m0.cov), max_relative = 1e-10);
        let rc = j.record_cov();
        assert_relative_eq!(rc[(0, 0)], m0.cov[(2, 2)] + one.record.noise_var, max_relative = 1e-12);
        // Cov(spin', r) = A Cov(F, F_z) + spin_cross
        let cross = one.map.linear * m0.cov.column(2) + one.record.spin_cross;
        for i in 0..3 {
            assert_relative_eq!(j.cov[(i, 3)], cross[i], max_relative = 1e-10);
        }
    }

    #[test]
    fn zero_gain_feedback_is_inert() {
        let p = ExperimentParams::paper_calibrated();
        let fb = Schedule {
            phases: vec![Phase::measure_only(), Phase::feedback(0.0), Phase::measure_only()],
        };
        let mo = Schedule {
            phases: vec![Phase::measure_only(); 3],
        };
        let a = propagate(&p, &fb).unwrap();
        let b = propagate(&p, &mo).unwrap();
        assert_eq!(a.joint, b.joint);
    }

    #[test]
    fn no_atoms_record_is_white_readout_noise() {
        let p = ExperimentParams::default().without_atoms();
        let s = Schedule::paper_characterization(-0.75);
        let c = record_covariance(&p, &s).unwrap();
        let v = 2.0 / (1.7e-7f64.powi(2) * 5.4e7);
        for i in 0..9 {
            for j in 0..9 {
                if i == j {
                    assert_relative_eq!(c[(i, j)], v, max_relative = 1e-12);
                } else {
                    assert_eq!(c[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn dimension_cap() {
        let p = ExperimentParams::default();
        let s = Schedule::rounds(&[-0.5; 3]);
        assert!(matches!(
            propagate_with_limit(&p, &s, 10),
            Err(Error::DimensionOverflow { max: 10 })
        ));
    }

    #[test]
    fn folded_normal() {
        assert_eq!(folded_normal_mean(-3.0, 0.0), 3.0);
        assert_relative_eq!(folded_normal_mean(0.0, 2.0), 2.0 * (2.0 / std::f64::consts::PI).sqrt(), max_relative = 1e-14);
        // far from zero the sign is irrelevant
        assert_relative_eq!(folded_normal_mean(50.0, 1.0), 50.0, max_relative = 1e-12);
        assert_relative_eq!(folded_normal_mean(-50.0, 1.0), 50.0, max_relative = 1e-12);
    }

    #[test]
    fn random_rotation_matches_quadrature() {
        // E over φ ~ N(0, var) of R(φ) M R(φ)ᵀ by Gauss–Hermite-free brute quadrature.
        let var: f64 = 0.4;
        let m0 = SpinMoments::new(
            Vector3::new(3.0, -1.0, 0.5),
            Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.7),
        );
        let mut j = JointGaussian::from_spin(&m0);
        j.random_z_rotation(var);
        let sd = var.sqrt();
        let (mut wsum, mut mean, mut second) = (0.0, Vector3::zeros(), Matrix3::zeros());
        let raw = m0.cov + m0.mean * m0.mean.transpose();
        let n = 4001;
        for k in 0..n {
            let phi = -8.0 * sd + 16.0 * sd * k as f64 / (n - 1) as f64;
            let w = (-0.5 * phi * phi / var).exp();
            let r = crate::dynamics::rotation_about(&Vector3::z(), phi);
            wsum += w;
            mean += r * m0.mean * w;
            second += r * raw * r.transpose() * w;
        }
        mean /= wsum;
        second /= wsum;
        let cov = second - mean * mean.transpose();
        assert_relative_eq!(j.spin().mean, mean, max_relative = 1e-9);
        assert_relative_eq!(j.spin().cov, cov, max_relative = 1e-9);
    }
}
