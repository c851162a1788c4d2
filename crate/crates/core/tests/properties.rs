use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use spincool::mc::{run_trajectory, trial_rng};
use spincool::{mc, moments, ExperimentParams, InitialMode, McOptions, Phase, Schedule};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn joint_covariance_stays_psd(g1 in -2.0..0.0f64, g2 in -2.0..0.0f64, calibrated in any::<bool>()) {
        let p = if calibrated { ExperimentParams::paper_calibrated() } else { ExperimentParams::paper_defaults() };
        let run = moments::propagate(&p, &Schedule::paper_two_round(g1, g2)).unwrap();
        let cov = &run.joint.cov;
        let scale = cov.diagonal().max();
        let eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
        prop_assert!(eig > -1e-9 * scale, "min eigenvalue {} (scale {})", eig, scale);
        prop_assert!(run.readout.total_variance() >= 0.0);
        prop_assert!(run.readout.centered_variance() >= 0.0);
    }

    #[test]
    fn trajectories_replay_from_seed(seed in any::<u64>(), trial in 0u64..1000, g in -1.5..0.0f64) {
        let p = ExperimentParams::paper_calibrated();
        let s = Schedule::paper_characterization(g);
        let a = run_trajectory(&p, &s, trial_rng(seed, trial)).unwrap();
        let b = run_trajectory(&p, &s, trial_rng(seed, trial)).unwrap();
        prop_assert_eq!(a.record, b.record);
        prop_assert_eq!(a.spin, b.spin);
    }

    #[test]
    fn zero_gain_trajectory_matches_measure_only(seed in any::<u64>()) {
        let p = ExperimentParams::paper_calibrated();
        let fb = Schedule::new(vec![Phase::measure_only(), Phase::feedback(0.0), Phase::measure_only()]).unwrap();
        let mo = Schedule::new(vec![Phase::measure_only(); 3]).unwrap();
        let a = run_trajectory(&p, &fb, trial_rng(seed, 0)).unwrap();
        let b = run_trajectory(&p, &mo, trial_rng(seed, 0)).unwrap();
        prop_assert_eq!(a.spin, b.spin);
    }
}

#[test]
fn procedural_preparation_matches_gaussian_moments() {
    let mut p = ExperimentParams::paper_calibrated();
    p.initial_state.mode = InitialMode::Procedural;
    let s = Schedule::paper_characterization(-0.75);
    let opts = McOptions {
        n_trials: 8000,
        master_seed: 5,
        threads: None,
    };
    let mc = mc::run_ensemble(&p, &s, &opts).unwrap().summary;
    let mo = moments::summarize(&p, &s).unwrap();
    let z_in = (mc.input_total_variance - mo.input_total_variance).abs() / mc.input_total_variance_std_err.unwrap();
    let z_out = (mc.total_variance - mo.total_variance).abs() / mc.total_variance_std_err.unwrap();
    assert!(z_in < 5.0 && z_out < 5.0, "{z_in} {z_out}");
}

#[test]
fn qnd_records_repeat_without_feedback() {
    let p = ExperimentParams::paper_calibrated();
    let c = moments::record_covariance(&p, &Schedule::paper_characterization(0.0)).unwrap();
    let r = spincool::analysis::correlation_matrix(&c).unwrap();
    for i in 0..3 {
        assert!(r[(i, i + 3)] > 0.9 && r[(i, i + 6)] > 0.9, "{r}");
        // other components are not what this step reads
        assert!(r[(i, (i + 1) % 3)].abs() < r[(i, i + 3)]);
    }
}

#[test]
fn seeds_change_results_but_trial_order_does_not() {
    let p = ExperimentParams::paper_calibrated();
    let s = Schedule::paper_characterization(-0.75);
    let run = |seed, threads| {
        mc::run_ensemble(
            &p,
            &s,
            &McOptions {
                n_trials: 300,
                master_seed: seed,
                threads: Some(threads),
            },
        )
        .unwrap()
    };
    let a = run(1, 1);
    let b = run(1, 3);
    let c = run(2, 1);
    assert_eq!(a.trials, b.trials);
    assert_eq!(a.summary, b.summary);
    assert_ne!(a.trials, c.trials);
    // trial i of a longer run is trial i of a shorter run
    let long = mc::run_ensemble(
        &p,
        &s,
        &McOptions {
            n_trials: 400,
            master_seed: 1,
            threads: Some(2),
        },
    )
    .unwrap();
    assert_eq!(&long.trials[..300], &a.trials[..]);
}
