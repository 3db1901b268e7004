#![allow(dead_code)]

use mvlq::lqmodel::{LqCost, LqDynamics};
use mvlq::policy::QuadraticValue;
use mvlq::riccati::{solve_riccati, systemic_risk_model, SystemicRiskParams};
use mvlq::rng::{Channel, NoiseKey};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn uniform_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

fn gram<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> DMatrix<f64> {
    let a = uniform_matrix(rng, d, d, scale);
    &a * a.transpose()
}

/// Random model meeting the standing condition: `P2, P2 + P̄2, Q2, Q2 + Q̄2`
/// positive semidefinite and `R2 ≥ I`.
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, d: usize, m: usize) -> (LqDynamics, LqCost) {
    let dy = LqDynamics {
        b0: uniform_vector(rng, d, 0.5),
        b: uniform_matrix(rng, d, d, 0.5),
        b_bar: uniform_matrix(rng, d, d, 0.5),
        c: uniform_matrix(rng, d, m, 0.5),
        theta: uniform_vector(rng, d, 0.5),
        d: uniform_matrix(rng, d, d, 0.3),
        d_bar: uniform_matrix(rng, d, d, 0.3),
        f: uniform_matrix(rng, d, m, 0.3),
        theta0: uniform_vector(rng, d, 0.5),
        d0: uniform_matrix(rng, d, d, 0.3),
        d0_bar: uniform_matrix(rng, d, d, 0.3),
        f0: uniform_matrix(rng, d, m, 0.3),
    };
    let q2 = gram(rng, d, 0.6);
    let q2_bar = gram(rng, d, 0.6) - 0.5 * &q2;
    let p2 = gram(rng, d, 0.6);
    let p2_bar = gram(rng, d, 0.6) - 0.5 * &p2;
    let r2 = DMatrix::identity(m, m) + gram(rng, m, 0.5);
    let cost = LqCost::new(q2, q2_bar, r2, p2, p2_bar, uniform_matrix(rng, d, m, 0.2))
        .expect("valid cost");
    (dy, cost)
}

/// Random model and value function drawn from stream `index` of `seed`.
pub fn random_value(seed: u64, index: u32, d: usize, m: usize, horizon: f64) -> QuadraticValue {
    let mut rng = NoiseKey::new(seed).stream(index, 7, Channel::Initial);
    let (dy, cost) = random_model(&mut rng, d, m);
    QuadraticValue::new(solve_riccati(&dy, &cost, horizon, horizon / 200.0).expect("riccati"))
}

pub fn interbank_value(p: &SystemicRiskParams, h: f64) -> QuadraticValue {
    let (dy, cost) = systemic_risk_model(p).unwrap();
    QuadraticValue::new(solve_riccati(&dy, &cost, p.horizon, h).unwrap())
}

pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(1e-300);
    (a - b).amax() / scale
}
