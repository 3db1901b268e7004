//! Numerical certification of a candidate value function and of the particle
//! simulator: Monte Carlo cost estimates, the Bellman residual, the dynamic
//! programming gap, the Itô generator identity, lifted-gradient checks and
//! propagation of chaos.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, quad_form_slice, symmetrize};
use crate::lqmodel::{lifted_running_cost, GainMatrices};
use crate::measure::{AffineMap, EmpiricalMeasure};
use crate::policy::QuadraticValue;
use crate::riccati::RiccatiState;
use crate::rng::{Channel, NoiseKey};
use crate::simulator::{
    particle_controls, restart_continuation, sample_initial, simulate_cost, ControlSpec,
    DynamicsSpec, InitialLaw, Law, ParticleTrajectory, SimConfig,
};

/// Mean and standard error of a sample.
pub fn sample_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(n, |i| xs[i]) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let ss = pairwise_sum(n, |i| (xs[i] - mean).powi(2));
    let var = ss / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Runs `f` over path indices in parallel; results keep index order and the
/// first error by index wins.
pub fn over_paths<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(paths: usize, f: F) -> Result<Vec<T>> {
    (0..paths).into_par_iter().map(f).collect::<Vec<_>>().into_iter().collect()
}

fn require_paths(paths: usize) -> Result<()> {
    if paths < 2 {
        return Err(Error::Domain(format!("need at least 2 paths, got {paths}")));
    }
    Ok(())
}

/// Monte Carlo estimate of `J(t0, μ0, α)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub paths: usize,
    pub particles: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Averages the pathwise cost over `paths` common-noise paths.
pub fn estimate_cost<M: DynamicsSpec + ?Sized>(
    model: &M,
    control: &ControlSpec,
    mu0: &EmpiricalMeasure,
    cfg: &SimConfig,
    paths: usize,
) -> Result<CostEstimate> {
    require_paths(paths)?;
    let costs = over_paths(paths, |p| Ok(simulate_cost(model, control, mu0, cfg, p)?.cost))?;
    let (mean, stderr) = sample_stats(&costs);
    Ok(CostEstimate {
        mean,
        stderr,
        paths,
        particles: mu0.len(),
        dt: cfg.dt,
        seed: cfg.seed,
    })
}

/// Terms of the Bellman residual at `(t, μ)` for one affine control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BellmanResidual {
    pub residual: f64,
    /// Sum of the absolute values of the four terms.
    pub scale: f64,
    pub time_derivative: f64,
    pub running_cost: f64,
    pub generator: f64,
    pub common_noise_term: f64,
}

impl BellmanResidual {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.residual.abs() / self.scale
        } else {
            self.residual.abs()
        }
    }
}

/// `∂_t w + f̂(μ, a) + μ(L^a w) + μ⊗μ(M^a w)` on a particle cloud, with the
/// double integral taken as a literal double sum.
pub fn bellman_residual(
    qv: &QuadraticValue,
    t: f64,
    mu: &EmpiricalMeasure,
    a: &AffineMap,
) -> Result<BellmanResidual> {
    let horizon = qv.horizon();
    if !(t >= 0.0 && t < horizon) {
        return Err(Error::TimeOutOfRange {
            t,
            lo: 0.0,
            hi: horizon,
        });
    }
    let (dy, cost) = (qv.dynamics(), qv.cost());
    let d = dy.state_dim();
    let state = qv.sol.eval(t)?;
    let d_t = qv.time_derivative(t, mu)?;
    let running = lifted_running_cost(mu, a, cost)?;
    let mean = mu.mean();
    let n = mu.len();
    let img = mu.pushforward(a)?;

    let mut sig = vec![0.0; d];
    let mut sig0_all = vec![0.0; n * d];
    let mut drift = vec![0.0; d];
    let first: Vec<f64> = (0..n)
        .map(|i| {
            let (x, ax) = (mu.point(i), img.point(i));
            dy.drift_into(x, mean.as_slice(), ax, &mut drift);
            dy.idio_vol_into(x, mean.as_slice(), ax, &mut sig);
            let s0 = &mut sig0_all[i * d..(i + 1) * d];
            dy.common_vol_into(x, mean.as_slice(), ax, s0);
            let grad = QuadraticValue::measure_derivative(&state, &mean, x);
            // ½ tr(2Λ(σσᵀ + σ0σ0ᵀ)) = σᵀΛσ + σ0ᵀΛσ0.
            grad.iter().zip(&drift).map(|(g, b)| g * b).sum::<f64>()
                + quad_form_slice(&sig, &state.lam)
                + quad_form_slice(s0, &state.lam)
        })
        .collect();
    let generator = pairwise_sum(n, |i| first[i]) / n as f64;

    // ½ tr(2(Γ − Λ) σ0(x) σ0(x′)ᵀ) = σ0(x′)ᵀ(Γ − Λ)σ0(x).
    let hess = &state.gam - &state.lam;
    let common = pairwise_sum(n, |i| {
        let si = &sig0_all[i * d..(i + 1) * d];
        pairwise_sum(n, |j| {
            let sj = &sig0_all[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for r in 0..d {
                for c in 0..d {
                    acc += sj[r] * hess[(r, c)] * si[c];
                }
            }
            acc
        })
    }) / (n * n) as f64;

    Ok(BellmanResidual {
        residual: d_t + running + generator + common,
        scale: d_t.abs() + running.abs() + generator.abs() + common.abs(),
        time_derivative: d_t,
        running_cost: running,
        generator,
        common_noise_term: common,
    })
}

/// `Var((a − a*)⋆μ)(U) + Δ̄ᵀVΔ̄`, the predicted excess of the Bellman residual
/// at `a` over its value at `a*`.
pub fn perturbation_excess(
    g: &GainMatrices,
    mu: &EmpiricalMeasure,
    a: &AffineMap,
    a_star: &AffineMap,
) -> Result<f64> {
    let diff = mu.pushforward(&a.sub(a_star))?;
    let shift = diff.mean();
    Ok(diff.variance_form(&g.u)? + quad_form_slice(shift.as_slice(), &g.v))
}

/// Dynamic programming gap estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DppGap {
    pub gap: f64,
    pub stderr: f64,
    pub paths: usize,
}

/// Estimates `E⁰[∫_t^θ f̂ ds + w(θ, ρ_θ)] − w(t, μ)` with `t = cfg.t0` and
/// `θ = cfg.horizon`.
pub fn dpp_check<M: DynamicsSpec + ?Sized>(
    qv: &QuadraticValue,
    model: &M,
    control: &ControlSpec,
    mu: &EmpiricalMeasure,
    cfg: &SimConfig,
    paths: usize,
) -> Result<DppGap> {
    require_paths(paths)?;
    if cfg.horizon > qv.horizon() {
        return Err(Error::TimeOutOfRange {
            t: cfg.horizon,
            lo: cfg.t0,
            hi: qv.horizon(),
        });
    }
    let w0 = qv.value(cfg.t0, mu)?;
    let theta = cfg.horizon;
    let gaps = over_paths(paths, |p| {
        let out = simulate_cost(model, control, mu, cfg, p)?;
        Ok(out.running_cost + qv.value(theta, &out.terminal)? - w0)
    })?;
    let (gap, stderr) = sample_stats(&gaps);
    Ok(DppGap { gap, stderr, paths })
}

/// `φ(μ) = Var(μ)(L) + μ̄ᵀGμ̄ + gᵀμ̄ + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFunctional {
    pub var_weight: DMatrix<f64>,
    pub mean_weight: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl QuadraticFunctional {
    pub fn mean_square(d: usize) -> Self {
        Self {
            var_weight: DMatrix::zeros(d, d),
            mean_weight: DMatrix::identity(d, d),
            linear: DVector::zeros(d),
            constant: 0.0,
        }
    }

    pub fn variance(d: usize) -> Self {
        Self {
            var_weight: DMatrix::identity(d, d),
            mean_weight: DMatrix::zeros(d, d),
            linear: DVector::zeros(d),
            constant: 0.0,
        }
    }

    pub fn value(&self, mu: &EmpiricalMeasure) -> Result<f64> {
        let mean = mu.mean();
        Ok(mu.variance_form(&self.var_weight)?
            + quad_form_slice(mean.as_slice(), &self.mean_weight)
            + self.linear.dot(&mean)
            + self.constant)
    }

    /// `∂_μφ(μ)(x) = 2L(x − μ̄) + (G + Gᵀ)μ̄ + g`.
    pub fn measure_derivative(&self, mean: &DVector<f64>, x: &[f64]) -> DVector<f64> {
        let l = symmetrize(&self.var_weight);
        let g = &self.mean_weight + self.mean_weight.transpose();
        2.0 * (l * (DVector::from_column_slice(x) - mean)) + g * mean + &self.linear
    }

    /// `∂²_μφ = (G + Gᵀ) − 2L`.
    pub fn second_measure_derivative(&self) -> DMatrix<f64> {
        &self.mean_weight + self.mean_weight.transpose() - 2.0 * symmetrize(&self.var_weight)
    }

    /// `μ(L^aφ) + μ⊗μ(M^aφ)` for the controls `a(xᵢ)` at time `t`.
    pub fn generator<M: DynamicsSpec + ?Sized>(
        &self,
        model: &M,
        control: &ControlSpec,
        t: f64,
        mu: &EmpiricalMeasure,
    ) -> Result<f64> {
        let (d, m) = (model.state_dim(), model.control_dim());
        let (n_idio, n_common) = (model.idio_noise_dim(), model.common_noise_dim());
        let n = mu.len();
        let mean = mu.mean();
        let law = Law {
            measure: mu,
            mean: mean.as_slice(),
        };
        let controls = particle_controls(&control.resolve(t)?, &law);
        let l = symmetrize(&self.var_weight);
        let hess = self.second_measure_derivative();
        let mut drift = vec![0.0; d];
        let mut sig = vec![0.0; d * n_idio];
        let mut sig0_all = vec![0.0; n * d * n_common];
        let mut first = Vec::with_capacity(n);
        for i in 0..n {
            let x = mu.point(i);
            let a = &controls[i * m..(i + 1) * m];
            model.drift(x, &law, a, &mut drift);
            model.idio_vol(x, &law, a, &mut sig);
            let s0 = &mut sig0_all[i * d * n_common..(i + 1) * d * n_common];
            model.common_vol(x, &law, a, s0);
            let grad = self.measure_derivative(&mean, x);
            let mut v: f64 = grad.iter().zip(&drift).map(|(g, b)| g * b).sum();
            // ½ tr(2L(σσᵀ + σ0σ0ᵀ)).
            for (block, cols) in [(&sig[..], n_idio), (&s0[..], n_common)] {
                for c in 0..cols {
                    for r in 0..d {
                        for s in 0..d {
                            v += block[r * cols + c] * l[(r, s)] * block[s * cols + c];
                        }
                    }
                }
            }
            first.push(v);
        }
        let generator = pairwise_sum(n, |i| first[i]) / n as f64;
        // ½ tr(∂²_μφ σ0(x) σ0(x′)ᵀ).
        let stride = d * n_common;
        let common = pairwise_sum(n, |i| {
            let si = &sig0_all[i * stride..(i + 1) * stride];
            pairwise_sum(n, |j| {
                let sj = &sig0_all[j * stride..(j + 1) * stride];
                let mut acc = 0.0;
                for c in 0..n_common {
                    for r in 0..d {
                        for s in 0..d {
                            acc += hess[(r, s)] * si[s * n_common + c] * sj[r * n_common + c];
                        }
                    }
                }
                0.5 * acc
            })
        }) / (n * n) as f64;
        Ok(generator + common)
    }
}

/// Both sides of the Itô formula along the flow over `[t, t + δ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ItoCheck {
    /// `(E⁰[φ(ρ_{t+δ})] − φ(μ)) / δ`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Generator at the initial cloud.
    pub rhs: f64,
    pub rhs_stderr: f64,
}

impl ItoCheck {
    pub fn combined_stderr(&self) -> f64 {
        self.lhs_stderr.hypot(self.rhs_stderr)
    }
}

/// Itô identity check with `t = cfg.t0` and `δ = cfg.horizon − cfg.t0`.
pub fn ito_generator_check<M: DynamicsSpec + ?Sized>(
    model: &M,
    control: &ControlSpec,
    mu: &EmpiricalMeasure,
    phi: &QuadraticFunctional,
    cfg: &SimConfig,
    paths: usize,
) -> Result<ItoCheck> {
    require_paths(paths)?;
    let delta = cfg.horizon - cfg.t0;
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Domain("Itô check needs delta > 0".into()));
    }
    let phi0 = phi.value(mu)?;
    let samples = over_paths(paths, |p| {
        let out = simulate_cost(model, control, mu, cfg, p)?;
        Ok((phi.value(&out.terminal)? - phi0) / delta)
    })?;
    let (lhs, lhs_stderr) = sample_stats(&samples);
    Ok(ItoCheck {
        lhs,
        lhs_stderr,
        rhs: phi.generator(model, control, cfg.t0, mu)?,
        rhs_stderr: 0.0,
    })
}

/// Max over particles and coordinates of the central-difference error of
/// `w(t, ·)` against `(1/N)∂_μw(t, μ)(xᵢ)`, relative to the largest analytic
/// entry.
pub fn grad_check(qv: &QuadraticValue, t: f64, mu: &EmpiricalMeasure, epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Domain("grad_check needs epsilon > 0".into()));
    }
    let state = qv.sol.eval(t)?;
    Ok(gradient_error(&state, mu, epsilon))
}

/// [`grad_check`] for a given Riccati state.
pub fn gradient_error(state: &RiccatiState, mu: &EmpiricalMeasure, epsilon: f64) -> f64 {
    let (n, d) = (mu.len(), mu.dim());
    let mean = mu.mean();
    let mut data = mu.as_flat().to_vec();
    let mut max_err = 0.0f64;
    let mut max_an = 0.0f64;
    let value = |data: &[f64]| {
        let m = EmpiricalMeasure::from_flat(d, data.to_vec()).expect("finite cloud");
        QuadraticValue::value_with(state, &m).expect("matching dimension")
    };
    for i in 0..n {
        let an = QuadraticValue::measure_derivative(state, &mean, mu.point(i)) / n as f64;
        for j in 0..d {
            let orig = data[i * d + j];
            data[i * d + j] = orig + epsilon;
            let up = value(&data);
            data[i * d + j] = orig - epsilon;
            let down = value(&data);
            data[i * d + j] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            max_err = max_err.max((fd - an[j]).abs());
            max_an = max_an.max(an[j].abs());
        }
    }
    if max_an > 0.0 {
        max_err / max_an
    } else {
        max_err
    }
}

/// Bitwise comparison of a restarted run with the stored suffix.
pub fn flow_check<M: DynamicsSpec + ?Sized>(
    model: &M,
    control: &ControlSpec,
    traj: &ParticleTrajectory,
    theta: f64,
) -> Result<bool> {
    let k0 = traj.node_index(theta)?;
    let cont = restart_continuation(model, control, traj, theta)?;
    let same_times = cont.times.iter().zip(&traj.times[k0..]).all(|(a, b)| a.to_bits() == b.to_bits());
    let same_states = cont.snapshots.len() == traj.snapshots.len() - k0
        && cont.snapshots.iter().zip(&traj.snapshots[k0..]).all(|(a, b)| {
            a.as_flat()
                .iter()
                .zip(b.as_flat())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    Ok(same_times && same_states)
}

/// One level of a propagation-of-chaos study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChaosRow {
    pub particles: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// Cost estimates for each particle count in `ns` (ascending, at least two).
pub fn chaos_convergence<M: DynamicsSpec + ?Sized>(
    model: &M,
    control: &ControlSpec,
    init: &InitialLaw,
    ns: &[usize],
    cfg: &SimConfig,
    paths: usize,
) -> Result<Vec<ChaosRow>> {
    if ns.len() < 2 || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("particle counts must be ascending with at least two entries".into()));
    }
    ns.iter()
        .map(|&n| {
            let mu0 = sample_initial(init, n, cfg.seed)?;
            let est = estimate_cost(model, control, &mu0, cfg, paths)?;
            Ok(ChaosRow {
                particles: n,
                mean: est.mean,
                stderr: est.stderr,
            })
        })
        .collect()
}

/// Outcome of the decreasing-deviation test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosTrend {
    pub deviations: Vec<f64>,
    pub deviation_stderrs: Vec<f64>,
    pub inversions: usize,
    pub pass: bool,
}

/// Deviations `|mean(Nₖ) − referenceₖ|`, or `|mean(Nₖ) − mean(Nₖ₊₁)|` without
/// references, must decrease along the levels; one increase no larger than
/// twice the combined standard error is tolerated.
pub fn chaos_trend(rows: &[ChaosRow], references: Option<&[f64]>) -> ChaosTrend {
    let (deviations, deviation_stderrs): (Vec<f64>, Vec<f64>) = match references {
        Some(r) => rows
            .iter()
            .zip(r)
            .map(|(row, r)| ((row.mean - r).abs(), row.stderr))
            .unzip(),
        None => rows
            .windows(2)
            .map(|w| ((w[0].mean - w[1].mean).abs(), w[0].stderr.hypot(w[1].stderr)))
            .unzip(),
    };
    let mut inversions = 0;
    let mut pass = deviations.len() >= 2;
    for k in 1..deviations.len() {
        let rise = deviations[k] - deviations[k - 1];
        if rise > 0.0 {
            inversions += 1;
            if rise > 2.0 * deviation_stderrs[k].hypot(deviation_stderrs[k - 1]) {
                pass = false;
            }
        }
    }
    ChaosTrend {
        pass: pass && inversions <= 1,
        deviations,
        deviation_stderrs,
        inversions,
    }
}

/// Largest first-order discretization constant `|J(h₁) − J(h₂)| / (h₁ − h₂)`
/// over consecutive levels of `(dt, value)` pairs.
pub fn richardson_constant(levels: &[(f64, f64)]) -> f64 {
    let mut sorted = levels.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    sorted
        .windows(2)
        .filter(|w| w[0].0 > w[1].0)
        .map(|w| (w[0].1 - w[1].1).abs() / (w[0].0 - w[1].0))
        .fold(0.0, f64::max)
}

/// Worst-case figures of a randomized Bellman sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BellmanSweep {
    pub samples: usize,
    /// Largest `|residual(a*)| / scale`.
    pub max_optimal_rel: f64,
    /// Largest deviation of `residual(a) − residual(a*)` from
    /// [`perturbation_excess`], relative to `max(excess, scale at a)`.
    pub max_perturbation_rel: f64,
}

/// Random cloud of `n` points, entries standard normal times `spread`.
pub fn random_cloud<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize, spread: f64) -> EmpiricalMeasure {
    let data = (0..n * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            spread * z
        })
        .collect();
    EmpiricalMeasure::from_flat(d, data).expect("finite samples")
}

/// Random affine map `ℝᵈ → ℝᵐ` with standard normal entries.
pub fn random_affine<R: Rng + ?Sized>(rng: &mut R, d: usize, m: usize) -> AffineMap {
    let mut draw = || -> f64 { StandardNormal.sample(rng) };
    let linear = DMatrix::from_fn(m, d, |_, _| draw());
    let offset = DVector::from_fn(m, |_, _| draw());
    AffineMap { linear, offset }
}

/// Bellman residual at `a*` and at one random affine perturbation of `a*`,
/// over `samples` random `(t, μ)` with `n` particles.
pub fn bellman_sweep(qv: &QuadraticValue, samples: usize, n: usize, seed: u64) -> Result<BellmanSweep> {
    let key = NoiseKey::new(seed);
    let (d, m) = (qv.dynamics().state_dim(), qv.dynamics().control_dim());
    let mut worst = BellmanSweep {
        samples,
        max_optimal_rel: 0.0,
        max_perturbation_rel: 0.0,
    };
    for s in 0..samples {
        let mut rng = key.stream(s as u32, 0, Channel::Initial);
        let t = rng.random::<f64>() * qv.horizon();
        let mu = random_cloud(&mut rng, n, d, 1.0);
        let a_star = qv.optimal_feedback(t)?.to_affine(&mu.mean());
        let pert = random_affine(&mut rng, d, m);
        let a = AffineMap {
            linear: &a_star.linear + &pert.linear,
            offset: &a_star.offset + &pert.offset,
        };
        let r_star = bellman_residual(qv, t, &mu, &a_star)?;
        let r_a = bellman_residual(qv, t, &mu, &a)?;
        let excess = perturbation_excess(&qv.sol.gains_at(t)?, &mu, &a, &a_star)?;
        let rel = ((r_a.residual - r_star.residual) - excess).abs() / excess.abs().max(r_a.scale);
        worst.max_optimal_rel = worst.max_optimal_rel.max(r_star.relative());
        worst.max_perturbation_rel = worst.max_perturbation_rel.max(rel);
    }
    Ok(worst)
}

/// Largest [`grad_check`] error over `samples` random `(t, μ)` with `n`
/// particles.
pub fn grad_sweep(qv: &QuadraticValue, samples: usize, n: usize, epsilon: f64, seed: u64) -> Result<f64> {
    let key = NoiseKey::new(seed);
    let d = qv.dynamics().state_dim();
    let mut worst = 0.0f64;
    for s in 0..samples {
        let mut rng = key.stream(s as u32, 1, Channel::Initial);
        let t = rng.random::<f64>() * qv.horizon();
        let mu = random_cloud(&mut rng, n, d, 1.0);
        worst = worst.max(grad_check(qv, t, &mu, epsilon)?);
    }
    Ok(worst)
}

/// Machine-readable verdict of one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub pass: bool,
    pub statistic: f64,
    pub tolerance: f64,
    pub stderr: f64,
    pub config: serde_json::Value,
}

impl CheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
