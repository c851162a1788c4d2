//! Deterministic maps of one stroboscopic step: Faraday readout, back-action,
//! Larmor precession with dephasing, and feedback displacement along z.

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::noise::{
    dephase_noise_cov, dephase_noise_var, eta_dephase, eta_spont, feedback_noise_var,
    spont_noise_var,
};
use crate::params::{derived_theta, physical_gain, ExperimentParams, FieldParams, ProbeParams};

/// Rotation by `angle` about the unit vector `axis` (right-handed, Rodrigues).
pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    let k = axis.cross_matrix();
    Matrix3::identity() * c + k * s + axis * axis.transpose() * (1.0 - c)
}

/// Coherent Larmor rotation R_B(θ).
///
/// The sense is negative about the field axis so that with B ∥ [1,1,1]
/// a third of a period carries z → y → x.
pub fn larmor_rotation(theta: f64, field: &FieldParams) -> Matrix3<f64> {
    rotation_about(&field.axis_vector(), -theta)
}

/// Transverse amplitude decay exp[−θ/(ω_L T₂)] after precessing by θ.
pub fn transverse_decay(theta: f64, field: &FieldParams) -> f64 {
    (-theta / (field.omega_larmor() * field.t2_transverse)).exp()
}

/// X(θ) = P_B + exp[−θ/(ω_L T₂)] R_B(θ)(1 − P_B).
pub fn precession_map(theta: f64, field: &FieldParams) -> Matrix3<f64> {
    let n = field.axis_vector();
    let proj = n * n.transpose();
    proj + larmor_rotation(theta, field) * (Matrix3::identity() - proj) * transverse_decay(theta, field)
}

/// Faraday readout constants for one probe pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementCoupling {
    /// κ₁ S_x: S_y rotation per spin of F_z.
    pub readout_gain: f64,
    /// Δ²S_y of the input pulse.
    pub readout_noise_var: f64,
    /// 1/(κ₁ S_x): converts S_y back to spins.
    pub estimator_scale: f64,
}

impl MeasurementCoupling {
    pub fn from_probe(probe: &ProbeParams) -> Self {
        let readout_gain = probe.kappa1 * probe.sx();
        Self {
            readout_gain,
            readout_noise_var: probe.stokes_variance(),
            estimator_scale: 1.0 / readout_gain,
        }
    }

    /// Variance of the spin estimate at fixed F_z, Δ²S_y/(κ₁S_x)².
    pub fn estimate_variance(&self) -> f64 {
        self.readout_noise_var * self.estimator_scale * self.estimator_scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaradayOutcome {
    /// S_y after the ensemble.
    pub sy: f64,
    /// Spin estimate S_y/(κ₁S_x).
    pub estimate: f64,
}

pub fn faraday_measure(spin: &Vector3<f64>, coupling: &MeasurementCoupling, shot_noise: f64) -> FaradayOutcome {
    let sy = shot_noise + coupling.readout_gain * spin.z;
    FaradayOutcome {
        sy,
        estimate: sy * coupling.estimator_scale,
    }
}

/// Rotates the spin about z by κ₁·S_z. F_z and |F| are unchanged.
pub fn backaction_rotation(spin: &Vector3<f64>, sz_sample: f64, probe: &ProbeParams) -> Vector3<f64> {
    let (s, c) = (probe.kappa1 * sz_sample).sin_cos();
    Vector3::new(c * spin.x - s * spin.y, s * spin.x + c * spin.y, spin.z)
}

/// Optical-pumping displacement F + G·S_y·ẑ.
pub fn feedback_displace(spin: &Vector3<f64>, outcome_sy: f64, gain: f64) -> Vector3<f64> {
    Vector3::new(spin.x, spin.y, spin.z + gain * outcome_sy)
}

/// x ↦ linear·x + offset + noise, noise ~ (0, noise_cov).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub linear: Matrix3<f64>,
    pub offset: Vector3<f64>,
    pub noise_cov: Matrix3<f64>,
}

impl AffineMap {
    pub fn identity() -> Self {
        Self {
            linear: Matrix3::identity(),
            offset: Vector3::zeros(),
            noise_cov: Matrix3::zeros(),
        }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &AffineMap) -> AffineMap {
        AffineMap {
            linear: next.linear * self.linear,
            offset: next.linear * self.offset + next.offset,
            noise_cov: next.linear * self.noise_cov * next.linear.transpose() + next.noise_cov,
        }
    }

    pub fn apply_mean(&self, mean: &Vector3<f64>) -> Vector3<f64> {
        self.linear * mean + self.offset
    }

    pub fn apply_cov(&self, cov: &Matrix3<f64>) -> Matrix3<f64> {
        self.linear * cov * self.linear.transpose() + self.noise_cov
    }
}

/// The measurement outcome of a step as a function of the pre-step spin:
/// r = spin_functional·F + noise, with Var(noise) = `noise_var` and
/// Cov(post-step spin, noise) = `spin_cross`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordRow {
    pub spin_functional: Vector3<f64>,
    pub noise_var: f64,
    pub spin_cross: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneStepMap {
    pub map: AffineMap,
    pub record: RecordRow,
}

/// Measurement + feedback for one component, composed into a single affine
/// map on the spin:
///
/// F ↦ X(θ̄)[G ẑ κ₁S_x ẑᵀ F + (1−η_S) X(θ) F + noises] + N(θ̄).
///
/// Feedback noise is state dependent; it enters with the supplied expected
/// displacement magnitude. Back-action is a norm-preserving random rotation
/// and has no affine form, so it is not included here.
pub fn one_step_map(params: &ExperimentParams, gain: f64, expected_displacement: f64) -> OneStepMap {
    let model = StepModel::new(params);
    let z = Vector3::z();
    let zz = z * z.transpose();
    let damp = 1.0 - model.eta_spont;
    let gain = if model.atoms_present { gain } else { 0.0 };

    let latency = AffineMap {
        linear: model.x_theta * damp,
        offset: Vector3::zeros(),
        noise_cov: model.x_theta * Matrix3::from_diagonal(&model.spont_var_unpolarized) * model.x_theta.transpose()
            + model.dephase_cov_theta,
    };
    // Measured S_y = κ₁S_x F_z + S_y⁽⁰⁾, fed back along ẑ.
    let readout_noise = if params.noise.enable_readout_noise {
        model.coupling.readout_noise_var
    } else {
        0.0
    };
    let fb_noise = model.feedback_noise_var(expected_displacement) * zz;
    let before_tail = AffineMap {
        linear: zz * (gain * model.coupling.readout_gain) + latency.linear,
        offset: Vector3::zeros(),
        noise_cov: latency.noise_cov + zz * (gain * gain * readout_noise) + fb_noise,
    };
    let tail = AffineMap {
        linear: model.x_theta_bar,
        offset: Vector3::zeros(),
        noise_cov: model.dephase_cov_theta_bar,
    };
    let map = before_tail.then(&tail);
    let scale = model.coupling.estimator_scale;
    OneStepMap {
        map,
        record: RecordRow {
            spin_functional: z,
            noise_var: readout_noise * scale * scale,
            spin_cross: model.x_theta_bar * z * (gain * readout_noise * scale),
        },
    }
}

/// Everything one measurement + feedback step needs, derived once from the
/// parameters. Shared by both propagation engines.
#[derive(Debug, Clone, Copy)]
pub struct StepModel {
    pub params: ExperimentParams,
    pub coupling: MeasurementCoupling,
    pub theta: f64,
    pub theta_bar: f64,
    pub x_theta: Matrix3<f64>,
    pub x_theta_bar: Matrix3<f64>,
    /// η_S if spontaneous emission is enabled, else 0.
    pub eta_spont: f64,
    /// Unpolarized per-axis spontaneous-emission variance (0 when disabled).
    pub spont_var_unpolarized: Vector3<f64>,
    pub dephase_cov_theta: Matrix3<f64>,
    pub dephase_cov_theta_bar: Matrix3<f64>,
    /// Variance of the back-action rotation angle κ₁²Δ²S_z (0 when disabled).
    pub backaction_angle_var: f64,
    /// False when the trap is empty; feedback then displaces nothing.
    pub atoms_present: bool,
}

impl StepModel {
    pub fn new(params: &ExperimentParams) -> Self {
        let field = &params.field;
        let noise = &params.noise;
        let split = derived_theta(field);
        let eta_s = if noise.enable_spont {
            eta_spont(&params.probe, &params.ensemble, noise)
        } else {
            0.0
        };
        let spont_var_unpolarized = if noise.enable_spont {
            spont_noise_var(eta_s, &params.ensemble, &Vector3::zeros(), f64::INFINITY)
        } else {
            Vector3::zeros()
        };
        let axis = field.axis_vector();
        let dephase_cov = |theta: f64| {
            if noise.enable_dephasing_noise {
                let eta = eta_dephase(theta, field, noise.dephasing_form);
                dephase_noise_cov(dephase_noise_var(eta, &params.ensemble), &axis)
            } else {
                Matrix3::zeros()
            }
        };
        let backaction_angle_var = if noise.enable_backaction {
            params.probe.kappa1.powi(2) * params.probe.stokes_variance()
        } else {
            0.0
        };
        Self {
            params: *params,
            coupling: MeasurementCoupling::from_probe(&params.probe),
            theta: split.theta,
            theta_bar: split.theta_bar,
            x_theta: precession_map(split.theta, field),
            x_theta_bar: precession_map(split.theta_bar, field),
            eta_spont: eta_s,
            spont_var_unpolarized,
            dephase_cov_theta: dephase_cov(split.theta),
            dephase_cov_theta_bar: dephase_cov(split.theta_bar),
            backaction_angle_var,
            atoms_present: params.ensemble.n_atoms > 0.0,
        }
    }

    /// Standard deviation of the S_y input (0 when readout noise is disabled).
    pub fn readout_std(&self) -> f64 {
        if self.params.noise.enable_readout_noise {
            self.coupling.readout_noise_var.sqrt()
        } else {
            0.0
        }
    }

    /// Physical gain for normalized gain `g`, zero when there are no atoms.
    pub fn gain(&self, g: f64) -> Result<f64> {
        if self.atoms_present {
            physical_gain(g, &self.params.probe)
        } else {
            Ok(0.0)
        }
    }

    /// Per-axis spontaneous-emission variance for a collective spin `spin`.
    pub fn spont_var_at(&self, spin: &Vector3<f64>) -> Vector3<f64> {
        if !self.params.noise.enable_spont || !self.atoms_present {
            return Vector3::zeros();
        }
        let e = &self.params.ensemble;
        spont_noise_var(
            self.eta_spont,
            e,
            &(spin / e.n_atoms),
            self.params.noise.unpolarized_threshold,
        )
    }

    /// Feedback noise variance for a displacement of magnitude `d`.
    pub fn feedback_noise_var(&self, d: f64) -> f64 {
        let noise = &self.params.noise;
        if noise.enable_feedback_noise {
            feedback_noise_var(d, noise)
        } else {
            0.0
        }
    }

    /// Variance of the rounding error of quantized displacements, q²/12.
    pub fn quantization_var(&self) -> f64 {
        self.params.noise.feedback_quantum.powi(2) / 12.0
    }

    /// Rounds a displacement to the configured feedback granularity.
    pub fn quantize(&self, d: f64) -> f64 {
        let q = self.params.noise.feedback_quantum;
        if q > 0.0 {
            (d / q).round() * q
        } else {
            d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::TAU;

    fn lossless() -> FieldParams {
        FieldParams {
            t2_transverse: f64::INFINITY,
            ..Default::default()
        }
    }

    #[test]
    fn precession_identity_at_zero() {
        let x = precession_map(0.0, &FieldParams::default());
        assert_relative_eq!(x, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn precession_preserves_axis() {
        let f = FieldParams::default();
        let n = f.axis_vector();
        for &t in &[0.3, 1.0, 2.5, 7.0] {
            assert_relative_eq!(precession_map(t, &f) * n, n, epsilon = 1e-14);
        }
    }

    #[test]
    fn third_period_permutes_axes() {
        let x = precession_map(TAU / 3.0, &lossless());
        assert_relative_eq!(x * Vector3::z(), Vector3::y(), epsilon = 1e-14);
        assert_relative_eq!(x * Vector3::y(), Vector3::x(), epsilon = 1e-14);
        assert_relative_eq!(x * Vector3::x(), Vector3::z(), epsilon = 1e-14);
    }

    #[test]
    fn rotation_is_proper_orthogonal() {
        let f = FieldParams::default();
        let r = larmor_rotation(1.234, &f);
        assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-14);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn transverse_block_norm_is_decay() {
        let f = FieldParams::default();
        let t = 2.0;
        let x = precession_map(t, &f);
        let n = f.axis_vector();
        let perp = Matrix3::identity() - n * n.transpose();
        let block = x * perp;
        let norm = block.singular_values().max();
        assert_relative_eq!(norm, transverse_decay(t, &f), max_relative = 1e-12);
        assert!(norm <= 1.0);
    }

    #[test]
    fn faraday_example() {
        let c = MeasurementCoupling::from_probe(&ProbeParams::default());
        let spin = Vector3::new(0.0, 0.0, 1e5);
        let out = faraday_measure(&spin, &c, 0.0);
        assert_relative_eq!(out.sy, 1.7e-7 * 2.7e7 * 1e5, max_relative = 1e-14);
        assert_relative_eq!(out.sy, 4.59e5, max_relative = 1e-12);
        assert_relative_eq!(out.estimate, 1e5, max_relative = 1e-14);
        assert_eq!(faraday_measure(&Vector3::zeros(), &c, 0.0).sy, 0.0);
        // 2 / (κ₁² N_L)
        assert_relative_eq!(c.estimate_variance(), 1.281_558_4e6, max_relative = 1e-7);
    }

    #[test]
    fn backaction_examples() {
        let p = ProbeParams::default();
        let s = Vector3::new(1e5, -3e4, 2e4);
        assert_eq!(backaction_rotation(&s, 0.0, &p), s);
        let phi = 0.3;
        let r = backaction_rotation(&Vector3::new(1e6, 0.0, 0.0), phi / p.kappa1, &p);
        assert_relative_eq!(r, Vector3::new(1e6 * phi.cos(), 1e6 * phi.sin(), 0.0), max_relative = 1e-9);
        let r = backaction_rotation(&s, 1234.0, &p);
        assert_relative_eq!(r.norm(), s.norm(), max_relative = 1e-14);
        assert_eq!(r.z, s.z);
        // RMS angle κ₁√(N_L/2)
        assert_relative_eq!(p.kappa1 * p.stokes_variance().sqrt(), 8.8335e-4, max_relative = 1e-4);
    }

    #[test]
    fn feedback_examples() {
        let p = ProbeParams::default();
        let c = MeasurementCoupling::from_probe(&p);
        let s = Vector3::new(3.0, 4.0, 1e5);
        assert_eq!(feedback_displace(&s, 123.0, 0.0), s);

        let sy = faraday_measure(&s, &c, 0.0).sy;
        let g_full = physical_gain(-1.0, &p).unwrap();
        let out = feedback_displace(&s, sy, g_full);
        assert_relative_eq!(out.z, 0.0, epsilon = 1e-9);
        let g_half = physical_gain(-0.5, &p).unwrap();
        assert_relative_eq!(feedback_displace(&s, sy, g_half).z, 0.5e5, max_relative = 1e-12);
    }

    fn silent(theta0: bool) -> ExperimentParams {
        let mut p = ExperimentParams::default();
        p.noise = p.noise.silent();
        p.field.t2_transverse = f64::INFINITY;
        if theta0 {
            p.field.latency = 0.0;
        }
        p
    }

    #[test]
    fn one_step_without_gain_is_third_rotation() {
        let p = silent(false);
        let m = one_step_map(&p, 0.0, 0.0);
        assert_relative_eq!(m.map.linear, precession_map(TAU / 3.0, &p.field), epsilon = 1e-14);
        assert_eq!(m.map.noise_cov, Matrix3::zeros());

        let mut pd = ExperimentParams::default();
        pd.noise = pd.noise.silent();
        let m = one_step_map(&pd, 0.0, 0.0);
        assert_relative_eq!(m.map.linear, precession_map(TAU / 3.0, &pd.field), epsilon = 1e-14);
    }

    #[test]
    fn one_step_naive_gain_annihilates_z() {
        let p = silent(true);
        let g = physical_gain(-1.0, &p.probe).unwrap();
        let m = one_step_map(&p, g, 0.0);
        let zz = Vector3::z() * Vector3::z().transpose();
        let expected = precession_map(TAU / 3.0, &p.field) * (Matrix3::identity() - zz);
        assert_relative_eq!(m.map.linear, expected, epsilon = 1e-12);
    }

    #[test]
    fn full_round_closed_form() {
        let mut p = ExperimentParams::default();
        p.noise = p.noise.silent();
        let m = one_step_map(&p, 0.0, 0.0).map;
        let round = m.then(&m).then(&m);
        let n = p.field.axis_vector();
        let proj = n * n.transpose();
        let decay = (-TAU / (p.field.omega_larmor() * p.field.t2_transverse)).exp();
        // rotation by 2π is the identity
        let closed = proj + (Matrix3::identity() - proj) * decay;
        assert_relative_eq!(round.linear, closed, epsilon = 1e-12);
        assert_relative_eq!(decay, (-120e-6f64 / 1.3e-3).exp(), max_relative = 1e-12);
    }

    #[test]
    fn dephasing_reduces_transverse_trace_monotonically() {
        let f = FieldParams::default();
        let n = f.axis_vector();
        let perp = Matrix3::identity() - n * n.transpose();
        let cov = Matrix3::new(3.0, 0.5, -1.0, 0.5, 2.0, 0.2, -1.0, 0.2, 2.5);
        let mut last = f64::INFINITY;
        for i in 0..20 {
            let x = precession_map(i as f64 * 0.4, &f);
            let t = (perp * x * cov * x.transpose() * perp).trace();
            assert!(t < last);
            last = t;
        }
    }

    #[test]
    fn quantize_rounds_to_ticks() {
        let mut p = ExperimentParams::default();
        p.noise.feedback_quantum = 100.0;
        let m = StepModel::new(&p);
        assert_eq!(m.quantize(149.0), 100.0);
        assert_eq!(m.quantize(-151.0), -200.0);
        p.noise.feedback_quantum = 0.0;
        assert_eq!(StepModel::new(&p).quantize(149.0), 149.0);
    }
}
