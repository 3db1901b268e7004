mod common;

use common::{interbank_value, random_value};
use mvlq::measure::EmpiricalMeasure;
use mvlq::policy::recover_original;
use mvlq::riccati::{systemic_risk_model, SystemicRiskParams};
use mvlq::simulator::{
    pathwise_cost, restart_continuation, simulate_cost, simulate_path, ControlSpec, DynamicsSpec,
    InitialLaw, Law, LqParticleModel, SimConfig, sample_initial,
};
use mvlq::verify::{over_paths, sample_stats};
use nalgebra::DVector;
use proptest::prelude::*;

fn interbank(sigma1: f64, rho: f64) -> (SystemicRiskParams, LqParticleModel) {
    let p = SystemicRiskParams {
        sigma1,
        rho,
        x0: 0.3,
        ..SystemicRiskParams::default()
    };
    let (dy, cost) = systemic_risk_model(&p).unwrap();
    (p, LqParticleModel::new(dy, cost).unwrap())
}

/// `dx = (1 + x_mean − x) dt`, no noise, running cost 1.
struct UnitDrift;

impl DynamicsSpec for UnitDrift {
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
    fn drift(&self, x: &[f64], law: &Law<'_>, _a: &[f64], out: &mut [f64]) {
        out[0] = 1.0 + law.mean[0] - x[0];
    }
    fn idio_vol(&self, _x: &[f64], _law: &Law<'_>, _a: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn common_vol(&self, _x: &[f64], _law: &Law<'_>, _a: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost(&self, _x: &[f64], _law: &Law<'_>, _a: &[f64]) -> f64 {
        1.0
    }
    fn terminal_cost(&self, _x: &[f64], _law: &Law<'_>) -> f64 {
        0.0
    }
}

/// Two-dimensional model with cubic drift and state-dependent volatility.
struct Cubic;

impl DynamicsSpec for Cubic {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn idio_noise_dim(&self) -> usize {
        2
    }
    fn common_noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, x: &[f64], law: &Law<'_>, a: &[f64], out: &mut [f64]) {
        out[0] = -x[0].powi(3) + law.mean[1] + a[0];
        out[1] = -x[1] + 0.5 * x[0];
    }
    fn idio_vol(&self, x: &[f64], _law: &Law<'_>, _a: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.3 * x[0].cos(), 0.0, 0.0, 0.2]);
    }
    fn common_vol(&self, _x: &[f64], law: &Law<'_>, _a: &[f64], out: &mut [f64]) {
        out[0] = 0.1 + 0.05 * law.mean[0].tanh();
        out[1] = 0.1;
    }
    fn running_cost(&self, x: &[f64], law: &Law<'_>, a: &[f64]) -> f64 {
        x[0].powi(4) + (x[1] - law.mean[1]).powi(2) + a[0] * a[0]
    }
    fn terminal_cost(&self, x: &[f64], _law: &Law<'_>) -> f64 {
        x[0] * x[0]
    }
}

#[test]
fn unit_running_cost_integrates_to_the_horizon() {
    let mu0 = EmpiricalMeasure::from_scalars(&[0.0, 1.0, 2.0]).unwrap();
    let cfg = SimConfig::new(0.25, 1.0, 0.05, 1);
    let traj = simulate_path(&UnitDrift, &ControlSpec::zero(1, 1), &mu0, &cfg, 0).unwrap();
    assert!((traj.cost - 0.75).abs() <= 1e-12);
    // The mean moves at unit speed; deviations decay by (1 − dt) per step.
    let last = traj.terminal();
    let decay = 0.95f64.powi(15);
    for (i, x) in last.points().enumerate() {
        let want = 1.0 + 0.75 + (i as f64 - 1.0) * decay;
        assert!((x[0] - want).abs() <= 1e-12, "particle {i}: {} vs {want}", x[0]);
    }
}

#[test]
fn nonlinear_model_replays_and_costs_consistently() {
    let mu0 = sample_initial(
        &InitialLaw::Gaussian {
            mean: DVector::from_vec(vec![0.5, -0.2]),
            cov: nalgebra::DMatrix::identity(2, 2) * 0.1,
        },
        64,
        9,
    )
    .unwrap();
    let control = ControlSpec::zero(2, 1).shifted(DVector::from_element(1, 0.1));
    let cfg = SimConfig::new(0.0, 0.5, 0.01, 4);
    let traj = simulate_path(&Cubic, &control, &mu0, &cfg, 3).unwrap();
    let restarted = restart_continuation(&Cubic, &control, &traj, 0.2).unwrap();
    let k0 = traj.node_index(0.2).unwrap();
    for (a, b) in traj.snapshots[k0..].iter().zip(&restarted.snapshots) {
        assert_eq!(a.as_flat(), b.as_flat());
    }
    assert_eq!(pathwise_cost(&traj, &Cubic, &control).unwrap(), traj.cost);
    let outcome = simulate_cost(&Cubic, &control, &mu0, &cfg, 3).unwrap();
    assert_eq!(outcome.cost, traj.cost);
    assert_eq!(outcome.terminal.as_flat(), traj.terminal().as_flat());
}

#[test]
fn restart_at_the_start_reproduces_the_run() {
    let qv = interbank_value(&SystemicRiskParams::default(), 1e-3);
    let model = LqParticleModel::from_value(&qv);
    let control = ControlSpec::optimal(qv);
    let mu0 = EmpiricalMeasure::point_mass(&[0.2], 50).unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 77);
    let traj = simulate_path(&model, &control, &mu0, &cfg, 5).unwrap();
    let again = restart_continuation(&model, &control, &traj, 0.0).unwrap();
    assert_eq!(again.cost, traj.cost);
    for (a, b) in traj.snapshots.iter().zip(&again.snapshots) {
        assert_eq!(a.as_flat(), b.as_flat());
    }
}

#[test]
fn same_seed_same_paths_different_seed_different_paths() {
    let (_, model) = interbank(0.4, 0.5);
    let control = ControlSpec::zero(1, 1);
    let mu0 = EmpiricalMeasure::point_mass(&[0.0], 30).unwrap();
    let cfg = SimConfig::new(0.0, 0.5, 0.01, 12);
    let a = simulate_path(&model, &control, &mu0, &cfg, 2).unwrap();
    let b = simulate_path(&model, &control, &mu0, &cfg, 2).unwrap();
    let c = simulate_path(&model, &control, &mu0, &SimConfig { seed: 13, ..cfg }, 2).unwrap();
    let d = simulate_path(&model, &control, &mu0, &cfg, 3).unwrap();
    assert_eq!(a.terminal().as_flat(), b.terminal().as_flat());
    assert_eq!(a.cost, b.cost);
    assert_ne!(a.terminal().as_flat(), c.terminal().as_flat());
    assert_ne!(a.terminal().as_flat(), d.terminal().as_flat());
}

#[test]
fn refined_runs_share_the_brownian_path() {
    let (_, model) = interbank(0.0, 0.5);
    let control = ControlSpec::zero(1, 1);
    let mu0 = EmpiricalMeasure::point_mass(&[0.0], 10).unwrap();
    let fine = SimConfig::new(0.0, 1.0, 0.01, 21);
    let coarse = SimConfig {
        dt: 0.04,
        ..fine.with_refinement(4)
    };
    let wf = simulate_path(&model, &control, &mu0, &fine, 0).unwrap().common_noise_path();
    let wc = simulate_path(&model, &control, &mu0, &coarse, 0).unwrap().common_noise_path();
    assert_eq!(wc.len(), 26);
    for (k, w) in wc.iter().enumerate() {
        assert!((w[0] - wf[4 * k][0]).abs() <= 1e-12, "node {k}");
    }
}

#[test]
fn mean_follows_the_scalar_equation_without_idiosyncratic_noise() {
    // With rho = 1 every particle sees the same noise, so the cloud stays a
    // point mass and its mean is the Euler scheme of dm = (s0 + s1 m) dW0.
    let (p, model) = interbank(0.4, 1.0);
    let mu0 = EmpiricalMeasure::point_mass(&[p.x0], 8).unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 3);
    let traj = simulate_path(&model, &ControlSpec::zero(1, 1), &mu0, &cfg, 1).unwrap();
    let mut m = p.x0;
    for (k, inc) in traj.common_increments.iter().enumerate() {
        m += (p.sigma0 * p.rho + p.sigma1 * p.rho * m) * inc;
        let got = traj.snapshots[k + 1].mean()[0];
        assert!((got - m).abs() <= 1e-12 * (1.0 + m.abs()), "step {k}: {got} vs {m}");
    }
}

#[test]
fn mean_tracks_the_scalar_equation_with_idiosyncratic_noise() {
    let (p, model) = interbank(0.3, 0.6);
    let mu0 = EmpiricalMeasure::point_mass(&[p.x0], 20_000).unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 8);
    let traj = simulate_path(&model, &ControlSpec::zero(1, 1), &mu0, &cfg, 0).unwrap();
    let mut m = p.x0;
    let mut worst = 0.0f64;
    for (k, inc) in traj.common_increments.iter().enumerate() {
        m += (p.sigma0 * p.rho + p.sigma1 * p.rho * m) * inc;
        worst = worst.max((traj.snapshots[k + 1].mean()[0] - m).abs());
    }
    // Finite-N fluctuation of the mean is about s1 sqrt(1 - rho^2) sd(x) / sqrt(N).
    assert!(worst <= 0.02, "max deviation {worst}");
}

#[test]
fn second_moment_of_the_mean_grows_linearly() {
    let (p, model) = interbank(0.0, 0.5);
    let mu0 = EmpiricalMeasure::point_mass(&[p.x0], 20).unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 31);
    let control = ControlSpec::zero(1, 1);
    let samples = over_paths(2000, |i| {
        let out = simulate_cost(&model, &control, &mu0, &cfg, i)?;
        Ok(out.terminal.mean()[0].powi(2))
    })
    .unwrap();
    let (mean, se) = sample_stats(&samples);
    let exact = p.x0 * p.x0 + (p.sigma0 * p.rho).powi(2) * p.horizon;
    assert!((mean - exact).abs() <= 4.0 * se, "{mean} +/- {se} vs {exact}");
}

#[test]
fn transformed_control_reproduces_original_drift_and_cost() {
    let p = SystemicRiskParams {
        q: 0.7,
        sigma1: 0.2,
        ..SystemicRiskParams::default()
    };
    let qv = interbank_value(&p, 1e-3);
    let model = LqParticleModel::from_value(&qv);
    let original = p.original_dynamics();
    let control = ControlSpec::optimal(qv.clone());
    let mu0 = EmpiricalMeasure::point_mass(&[0.1], 40).unwrap();
    let cfg = SimConfig::new(0.0, 1.0, 0.01, 6);
    let traj = simulate_path(&model, &control, &mu0, &cfg, 0).unwrap();
    for (k, cloud) in traj.snapshots.iter().enumerate().step_by(10) {
        let t = traj.times[k];
        let gains = qv.optimal_feedback(t).unwrap();
        let mean = cloud.mean()[0];
        let (mut f_orig, mut f_trans) = (0.0, 0.0);
        for x in cloud.points() {
            let x = x[0];
            let a_trans = gains.apply(&[x], &[mean])[0];
            let a_orig = recover_original(&gains, &p, x, mean);
            let (mut b1, mut b2) = ([0.0], [0.0]);
            original.drift_into(&[x], &[mean], &[a_orig], &mut b1);
            model.dynamics().drift_into(&[x], &[mean], &[a_trans], &mut b2);
            assert!((b1[0] - b2[0]).abs() <= 1e-12 * (1.0 + b1[0].abs()));
            f_orig += 0.5 * a_orig * a_orig - p.q * a_orig * (mean - x)
                + 0.5 * p.eta * (mean - x).powi(2);
            f_trans += model.cost().running(&[x], &[mean], &[a_trans]);
        }
        let n = cloud.len() as f64;
        assert!((f_orig / n - f_trans / n).abs() <= 1e-12 * (1.0 + f_orig.abs() / n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pathwise_cost_matches_streaming_cost(
        seed in any::<u64>(),
        path in 0usize..1000,
        d in 1usize..=3,
    ) {
        let qv = random_value(seed % 16, 0, d, 2, 1.0);
        let model = LqParticleModel::from_value(&qv);
        let control = ControlSpec::optimal(qv);
        let mu0 = sample_initial(&InitialLaw::Point(vec![0.1; d]), 12, seed).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.05, seed);
        let traj = simulate_path(&model, &control, &mu0, &cfg, path).unwrap();
        prop_assert_eq!(pathwise_cost(&traj, &model, &control).unwrap(), traj.cost);
        let out = simulate_cost(&model, &control, &mu0, &cfg, path).unwrap();
        prop_assert_eq!(out.cost, traj.cost);
    }
}
