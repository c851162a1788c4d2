//! Stochastic channels acting on the collective spin: probe shot noise,
//! spontaneous emission, field-inhomogeneity dephasing and optical-pumping
//! feedback noise.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::Serialize;

use crate::params::{
    derived_theta, DephasingForm, EnsembleParams, ExperimentParams, FieldParams, NoiseParams,
    ProbeParams,
};

/// Fraction of atoms randomized by spontaneous emission during one probe
/// pulse, η_S ≈ 2κ₁²N_A N_L / (3α₀), clamped to [0, 1].
pub fn eta_spont(probe: &ProbeParams, ensemble: &EnsembleParams, noise: &NoiseParams) -> f64 {
    let raw = 2.0 * probe.kappa1.powi(2) * ensemble.n_atoms * probe.n_photons / (3.0 * noise.alpha0);
    if raw > 0.1 {
        log::warn!("spontaneous emission fraction {raw:.3} per pulse exceeds 0.1");
    }
    if raw.is_nan() {
        return 0.0;
    }
    raw.clamp(0.0, 1.0)
}

/// Per-axis variance added by spontaneous emission.
///
/// `mean_single_spin` is ⟨F⟩/N_A. Below `threshold` in norm the
/// unpolarized form N_A η(2−η) f(f+1)/3 is returned on every axis;
/// otherwise Δ²f_i η(1−η) N_A + η N_A f(f+1)/3 with the single-atom
/// variance Δ²f_i = f(f+1)/3 − ⟨f_i⟩².
pub fn spont_noise_var(
    eta_s: f64,
    ensemble: &EnsembleParams,
    mean_single_spin: &Vector3<f64>,
    threshold: f64,
) -> Vector3<f64> {
    let mixed = ensemble.single_atom_mixed_variance();
    let n = ensemble.n_atoms;
    if mean_single_spin.norm() < threshold {
        return Vector3::repeat(n * eta_s * (2.0 - eta_s) * mixed);
    }
    mean_single_spin.map(|m| {
        let single = (mixed - m * m).max(0.0);
        single * eta_s * (1.0 - eta_s) * n + eta_s * n * mixed
    })
}

/// Fraction of transverse polarization randomized while precessing by `theta`.
pub fn eta_dephase(theta: f64, field: &FieldParams, form: DephasingForm) -> f64 {
    let raw = match form {
        DephasingForm::Decay => -(-theta / (field.omega_larmor() * field.t2_transverse)).exp_m1(),
        DephasingForm::AsPrinted => {
            let v = -(theta / (std::f64::consts::TAU * field.larmor_period)).exp_m1();
            if theta > 0.0 {
                log::warn!("literal dephasing form gives {v:e}; clamped to [0, 1]");
            }
            v
        }
    };
    if raw.is_nan() {
        return 0.0;
    }
    raw.clamp(0.0, 1.0)
}

/// Variance per transverse axis added by dephasing, N_A η_D(2−η_D) f(f+1)/3.
pub fn dephase_noise_var(eta_d: f64, ensemble: &EnsembleParams) -> f64 {
    ensemble.n_atoms * eta_d * (2.0 - eta_d) * ensemble.single_atom_mixed_variance()
}

/// Covariance of dephasing noise: `var_per_axis` on each direction
/// orthogonal to the field axis.
pub fn dephase_noise_cov(var_per_axis: f64, axis: &Vector3<f64>) -> Matrix3<f64> {
    (Matrix3::identity() - axis * axis.transpose()) * var_per_axis
}

/// Variance of the optical-pumping noise for a displacement of the given
/// magnitude: c_FB·|d|, so the RMS noise grows as |d|^{1/2}.
pub fn feedback_noise_var(displacement_magnitude: f64, noise: &NoiseParams) -> f64 {
    noise.feedback_noise_coeff * displacement_magnitude.abs()
}

/// Variance of S_y readout noise in units of S_y², factor·N_L.
pub fn readout_var(probe: &ProbeParams) -> f64 {
    probe.stokes_variance()
}

/// Per-atom optical pumping of `n_atoms` atoms, each flipped with probability
/// `displacement / n_atoms`. Returns the realized number of pumped atoms.
///
/// Brute force; used to check the small-displacement linear-variance model.
pub fn per_atom_pumping_sample<R: Rng + ?Sized>(rng: &mut R, n_atoms: usize, displacement: f64) -> u64 {
    let p = (displacement / n_atoms as f64).clamp(0.0, 1.0);
    (0..n_atoms).filter(|_| rng.random::<f64>() < p).count() as u64
}

/// Noise contributions for one measurement + feedback step with the
/// configured parameters. `feedback_var` is the value for a unit displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseBudget {
    /// S_y readout variance, (S_y units)².
    pub readout_var: f64,
    /// Readout variance referred to the spin estimate, spins².
    pub readout_var_spins: f64,
    pub spont_fraction: f64,
    pub spont_var_per_axis: f64,
    /// η_D for the latency segment θ.
    pub dephasing_fraction: f64,
    /// Dephasing variance summed over the θ and θ̄ segments, per transverse axis.
    pub dephasing_var_per_axis: f64,
    pub feedback_var: f64,
}

impl NoiseBudget {
    /// Budget for an unpolarized ensemble with every channel evaluated,
    /// regardless of the enable flags.
    pub fn evaluate(params: &ExperimentParams) -> Self {
        let probe = &params.probe;
        let readout_var = readout_var(probe);
        let scale = probe.kappa1 * probe.sx();
        let eta_s = eta_spont(probe, &params.ensemble, &params.noise);
        let spont = spont_noise_var(eta_s, &params.ensemble, &Vector3::zeros(), f64::INFINITY)[0];
        let split = derived_theta(&params.field);
        let form = params.noise.dephasing_form;
        let eta_d = eta_dephase(split.theta, &params.field, form);
        let eta_db = eta_dephase(split.theta_bar, &params.field, form);
        let dephase =
            dephase_noise_var(eta_d, &params.ensemble) + dephase_noise_var(eta_db, &params.ensemble);
        Self {
            readout_var,
            readout_var_spins: readout_var / (scale * scale),
            spont_fraction: eta_s,
            spont_var_per_axis: spont,
            dephasing_fraction: eta_d,
            dephasing_var_per_axis: dephase,
            feedback_var: feedback_noise_var(1.0, &params.noise),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lab() -> ExperimentParams {
        ExperimentParams::paper_defaults()
    }

    #[test]
    fn eta_spont_paper_value() {
        let p = lab();
        let eta = eta_spont(&p.probe, &p.ensemble, &p.noise);
        // 2 * (1.7e-7)^2 * 1e6 * 5.4e7 / 150
        assert_relative_eq!(eta, 0.020_808, max_relative = 1e-12);
    }

    #[test]
    fn eta_spont_limits() {
        let p = lab();
        let mut probe = p.probe;
        probe.n_photons = 0.0;
        assert_eq!(eta_spont(&probe, &p.ensemble, &p.noise), 0.0);
        let mut noise = p.noise;
        noise.alpha0 = f64::INFINITY;
        assert_eq!(eta_spont(&p.probe, &p.ensemble, &noise), 0.0);
        noise.alpha0 = 1e-12;
        assert_eq!(eta_spont(&p.probe, &p.ensemble, &noise), 1.0);
    }

    #[test]
    fn spont_var_unpolarized() {
        let e = EnsembleParams::default();
        let v = spont_noise_var(0.0208, &e, &Vector3::zeros(), 1e-3);
        assert_relative_eq!(v[0], 1e6 * 0.0208 * (2.0 - 0.0208) * 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(v[0], 2.744_491e4, max_relative = 1e-6);
        assert_eq!(v[0], v[2]);
        assert_eq!(spont_noise_var(0.0, &e, &Vector3::zeros(), 1e-3), Vector3::zeros());
        let full = spont_noise_var(1.0, &e, &Vector3::zeros(), 1e-3);
        assert_relative_eq!(full[1], 1e6 * 2.0 / 3.0);
    }

    #[test]
    fn spont_var_polarized_branch_reduces_to_unpolarized() {
        let e = EnsembleParams::default();
        let eta = 0.05;
        let tiny = Vector3::new(1e-9, 0.0, 0.0);
        let polarized = spont_noise_var(eta, &e, &tiny, 0.0);
        let unpolarized = spont_noise_var(eta, &e, &Vector3::zeros(), 1e-3);
        assert_relative_eq!(polarized, unpolarized, max_relative = 1e-12);

        // Fully polarized along z: no single-atom variance left on that axis.
        let pol = spont_noise_var(eta, &e, &Vector3::new(0.0, 0.0, (2.0f64 / 3.0).sqrt()), 1e-3);
        assert_relative_eq!(pol[2], eta * 1e6 * 2.0 / 3.0, max_relative = 1e-12);
        assert!(pol[0] > pol[2]);
    }

    #[test]
    fn eta_dephase_paper_value() {
        let f = FieldParams::default();
        let theta = 0.576;
        let eta = eta_dephase(theta, &f, DephasingForm::Decay);
        // exponent θ T_L / (2π T₂)
        let expo = theta * 120e-6 / (std::f64::consts::TAU * 1.3e-3);
        assert_relative_eq!(eta, 1.0 - (-expo).exp(), max_relative = 1e-13);
        assert_relative_eq!(eta, 8.4267e-3, max_relative = 1e-4);
        assert_eq!(eta_dephase(0.0, &f, DephasingForm::Decay), 0.0);
        let inf = FieldParams {
            t2_transverse: f64::INFINITY,
            ..f
        };
        assert_eq!(eta_dephase(theta, &inf, DephasingForm::Decay), 0.0);
    }

    #[test]
    fn literal_dephasing_form_clamps_to_zero() {
        let f = FieldParams::default();
        assert_eq!(eta_dephase(0.576, &f, DephasingForm::AsPrinted), 0.0);
        assert_eq!(eta_dephase(0.0, &f, DephasingForm::AsPrinted), 0.0);
    }

    #[test]
    fn dephase_var_values() {
        let e = EnsembleParams::default();
        assert_eq!(dephase_noise_var(0.0, &e), 0.0);
        assert_relative_eq!(
            dephase_noise_var(8.43e-3, &e),
            1e6 * 8.43e-3 * (2.0 - 8.43e-3) * 2.0 / 3.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(dephase_noise_var(8.43e-3, &e), 1.1193e4, max_relative = 1e-4);
        assert_relative_eq!(dephase_noise_var(1.0, &e), 1e6 * 2.0 / 3.0);
    }

    #[test]
    fn dephase_cov_is_transverse() {
        let axis = FieldParams::default().axis_vector();
        let c = dephase_noise_cov(3.0, &axis);
        assert_relative_eq!(c * axis, Vector3::zeros(), epsilon = 1e-14);
        assert_relative_eq!(c.trace(), 6.0, max_relative = 1e-14);
    }

    #[test]
    fn feedback_var_linear() {
        let n = NoiseParams::default();
        assert_eq!(feedback_noise_var(0.0, &n), 0.0);
        assert_eq!(feedback_noise_var(1e4, &n), 1e4);
        assert_eq!(feedback_noise_var(-1e4, &n), 1e4);
    }

    #[test]
    fn per_atom_pumping_matches_linear_variance() {
        // M = 1000 atoms, small pumping probability: binomial variance ≈ d.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = 1000;
        let reps = 4000;
        let n = NoiseParams::default();
        for &d in &[5.0, 10.0, 20.0, 40.0] {
            let samples: Vec<f64> = (0..reps)
                .map(|_| per_atom_pumping_sample(&mut rng, m, d) as f64)
                .collect();
            let mean = samples.iter().sum::<f64>() / reps as f64;
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
            let model = feedback_noise_var(d, &n);
            assert!(((var - model) / model).abs() < 0.1, "d={d}: var {var} vs {model}");
            assert!(((mean - d) / d).abs() < 0.05);
        }
    }

    #[test]
    fn budget_is_dominated_by_readout() {
        let b = NoiseBudget::evaluate(&lab());
        // Typical displacement: RMS of one component of the prepared state.
        let feedback = b.feedback_var * 2.4e8f64.sqrt();
        // readout-referred: 2/(κ₁²N_L)
        assert_relative_eq!(b.readout_var_spins, 2.0 / (1.7e-7f64.powi(2) * 5.4e7), max_relative = 1e-12);
        assert_relative_eq!(b.readout_var_spins, 1.281_558e6, max_relative = 1e-6);
        assert!(b.readout_var_spins > 10.0 * b.dephasing_var_per_axis);
        assert!(b.readout_var_spins > 10.0 * feedback);
        assert!(b.readout_var_spins > 10.0 * b.spont_var_per_axis);
        assert!(b.spont_fraction < 0.1);
    }
}
