//! Agreement with oracles computed independently of the SDP.

mod common;

use covsynth::example;
use covsynth::model::SystemModel;
use covsynth::sdp::SolverOptions;
use covsynth::synthesis::{self, Verdict};
use nalgebra::DMatrix;

fn rel(x: f64, target: f64) -> f64 {
    (x - target).abs() / target.abs()
}

fn stationary_objective(model: &SystemModel) -> f64 {
    let r = synthesis::synthesize_stationary(model, &[], &SolverOptions::default()).unwrap();
    assert!(r.is_optimal(), "{:?}", r.status);
    r.objective
}

#[test]
fn scalar_grid_search() {
    for (a1, precomputed) in [(0.0, 1.1327822185817502), (0.5, 1.5351837585558388)] {
        let (grid, _) = common::scalar_grid_oracle(0.5, 1.0, a1);
        assert!(rel(grid, precomputed) < 1e-12);
        let noise: &[f64] = if a1 > 0.0 { &[a1] } else { &[] };
        let obj = stationary_objective(&SystemModel::scalar(0.5, 1.0, noise));
        assert!(rel(obj, grid) <= 1e-3, "a1 = {a1}: {obj} vs {grid}");
    }
}

#[test]
fn scalar_dare() {
    // Positive root of P = 1 + 0.25 P / (1 + P).
    let p = (0.25f64 + (0.0625f64 + 4.0).sqrt()) / 2.0;
    assert!(rel(p, 1.1327822185373184) < 1e-12);
    let obj = stationary_objective(&SystemModel::scalar(0.5, 1.0, &[]));
    assert!(rel(obj, p) <= 1e-5, "{obj} vs {p}");
}

#[test]
fn example_without_multiplicative_noise_is_dare() {
    let mut model = example::problem().model;
    model.multiplicative.clear();
    let obj = stationary_objective(&model);
    assert!(rel(obj, 135.51864526036616) <= 1e-5, "{obj}");
}

#[test]
fn weighted_two_state_dare() {
    let model = SystemModel::new(
        DMatrix::from_row_slice(2, 2, &[0.3, 0.5, -0.2, 0.6]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        vec![],
        DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 2.0]),
    );
    let obj = stationary_objective(&model);
    assert!(rel(obj, 2.8844416793483445) <= 1e-5, "{obj}");
}

#[test]
fn thresholds() {
    let opts = SolverOptions::default();
    let full = synthesis::noise_threshold(&SystemModel::scalar(0.9, 1.0, &[1.0]), 0, 0.5, 1.5, 1e-3, &opts).unwrap();
    assert!((full.critical_scale - 1.0).abs() <= 1e-3, "{full:?}");
    assert!(full.hi - full.lo <= 1e-3);
    let none = synthesis::noise_threshold(&SystemModel::scalar(0.5, 0.0, &[1.0]), 0, 0.1, 1.5, 1e-3, &opts).unwrap();
    assert!((none.critical_scale - 0.75f64.sqrt()).abs() <= 1e-3, "{none:?}");
}

#[test]
fn stabilizability_truth_table() {
    let opts = SolverOptions::default();
    let yes = synthesis::check_stabilizability(&SystemModel::scalar(0.0, 0.0, &[0.5f64.sqrt()]), &opts).unwrap();
    assert_eq!(yes.verdict, Verdict::Yes);
    let x = yes.witness.unwrap().x()[(0, 0)];
    assert!((x - 2.0).abs() <= 1e-4, "{x}");
    let no = synthesis::check_stabilizability(&SystemModel::scalar(0.0, 0.0, &[1.1]), &opts).unwrap();
    assert_eq!(no.verdict, Verdict::No);
    let unstable = synthesis::check_stabilizability(&SystemModel::scalar(2.0, 1.0, &[0.5]), &opts).unwrap();
    assert_eq!(unstable.verdict, Verdict::Yes);
    let p = example::problem();
    assert!(synthesis::check_stabilizability(&p.model, &opts).unwrap().stabilizable());
}

#[test]
fn closed_loop_covariance_matches_fixed_point() {
    for seed in 0..20 {
        let model = common::random_system(seed);
        let mut rng = common::rng(seed ^ 0x1A);
        let k = common::gaussian(model.inputs(), model.states(), &mut rng) * 0.05;
        let g = common::gaussian(model.inputs(), model.inputs(), &mut rng);
        let pi = &g * g.transpose();
        let x = synthesis::closed_loop_covariance(&model, &k, &pi).unwrap();
        let acl = &model.a + &model.b * &k;
        let extra = &model.b * &pi * model.b.transpose();
        let oracle = common::lyapunov_fixed_point(&acl, &model.multiplicative, &extra);
        assert!((&x - &oracle).amax() <= 1e-9 * (1.0 + oracle.amax()), "seed {seed}");
    }
}

#[test]
fn unstable_gain_is_rejected() {
    let model = SystemModel::scalar(2.0, 1.0, &[0.5]);
    let k = DMatrix::zeros(1, 1);
    assert!(synthesis::mean_square_radius(&model, &k) > 1.0);
    assert!(synthesis::closed_loop_covariance(&model, &k, &DMatrix::zeros(1, 1)).is_err());
}
