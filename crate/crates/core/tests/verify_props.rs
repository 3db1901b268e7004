mod common;

use common::random_value;
use mvlq::lqmodel::LqCost;
use mvlq::measure::{AffineMap, EmpiricalMeasure};
use mvlq::riccati::{systemic_risk_model, SystemicRiskParams};
use mvlq::simulator::{
    ControlSpec, DynamicsSpec, InitialLaw, Law, LqParticleModel, NoiseScheme, SimConfig,
};
use mvlq::verify::{chaos_convergence, estimate_cost};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Ornstein–Uhlenbeck particles with no mean-field coupling.
struct Decoupled;

impl DynamicsSpec for Decoupled {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn idio_noise_dim(&self) -> usize {
        1
    }
    fn common_noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], _law: &Law<'_>, a: &[f64], out: &mut [f64]) {
        out[0] = -x[0] + a[0];
    }
    fn idio_vol(&self, _x: &[f64], _law: &Law<'_>, _a: &[f64], out: &mut [f64]) {
        out[0] = 0.5;
    }
    fn common_vol(&self, _x: &[f64], _law: &Law<'_>, _a: &[f64], out: &mut [f64]) {
        out[0] = 0.3;
    }
    fn running_cost(&self, x: &[f64], _law: &Law<'_>, a: &[f64]) -> f64 {
        x[0] * x[0] + a[0] * a[0]
    }
    fn terminal_cost(&self, x: &[f64], _law: &Law<'_>) -> f64 {
        x[0] * x[0]
    }
}

#[test]
fn decoupled_model_cost_does_not_depend_on_particle_count() {
    let cfg = SimConfig {
        noise: NoiseScheme::Independent,
        ..SimConfig::new(0.0, 1.0, 0.01, 14)
    };
    let rows = chaos_convergence(
        &Decoupled,
        &ControlSpec::zero(1, 1),
        &InitialLaw::Point(vec![1.0]),
        &[50, 200, 800],
        &cfg,
        200,
    )
    .unwrap();
    for pair in rows.windows(2) {
        let se = pair[0].stderr.hypot(pair[1].stderr);
        assert!((pair[0].mean - pair[1].mean).abs() <= 4.0 * se, "{pair:?}");
    }
}

#[test]
fn chaos_rejects_unsorted_levels() {
    let cfg = SimConfig::new(0.0, 0.1, 0.01, 1);
    let init = InitialLaw::Point(vec![0.0]);
    let c = ControlSpec::zero(1, 1);
    assert!(chaos_convergence(&Decoupled, &c, &init, &[100], &cfg, 2).is_err());
    assert!(chaos_convergence(&Decoupled, &c, &init, &[100, 100], &cfg, 2).is_err());
}

#[test]
fn quadrupling_paths_halves_the_standard_error() {
    let p = SystemicRiskParams {
        sigma1: 0.3,
        ..SystemicRiskParams::default()
    };
    let (dy, cost) = systemic_risk_model(&p).unwrap();
    let model = LqParticleModel::new(dy, cost).unwrap();
    let mu0 = EmpiricalMeasure::point_mass(&[0.5], 50).unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 0.02, 3);
    let control = ControlSpec::zero(1, 1);
    let small = estimate_cost(&model, &control, &mu0, &cfg, 200).unwrap();
    let large = estimate_cost(&model, &control, &mu0, &cfg, 800).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((1.6..=2.5).contains(&ratio), "ratio {ratio}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn heavier_control_penalty_raises_the_estimate(seed in 0u64..64, extra in 0.0f64..3.0) {
        let qv = random_value(seed, 0, 2, 2, 1.0);
        let (dy, cost) = (qv.dynamics().clone(), qv.cost().clone());
        let heavier = LqCost::new(
            cost.q2.clone(),
            cost.q2_bar.clone(),
            &cost.r2 + DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]) * extra,
            cost.p2.clone(),
            cost.p2_bar.clone(),
            cost.m2.clone(),
        ).unwrap();
        let control = ControlSpec::Constant(
            AffineMap::new(DMatrix::from_element(2, 2, -0.3), DVector::from_vec(vec![0.2, -0.1])).unwrap(),
        );
        let mu0 = EmpiricalMeasure::point_mass(&[0.3, -0.2], 20).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.05, seed);
        let light = estimate_cost(&LqParticleModel::new(dy.clone(), cost).unwrap(), &control, &mu0, &cfg, 8).unwrap();
        let heavy = estimate_cost(&LqParticleModel::new(dy, heavier).unwrap(), &control, &mu0, &cfg, 8).unwrap();
        prop_assert!(heavy.mean >= light.mean);
    }
}
