//! Euler–Maruyama particle approximation of controlled conditional
//! McKean–Vlasov dynamics.
//!
//! All `N` particles of a path share one common-noise path `W⁰`; each has its
//! own idiosyncratic increments. The conditional law entering the
//! coefficients and the control at step `k` is the particle cloud at step `k`.
//! Gaussian increments come from [`NoiseKey`], addressed by
//! `(seed, path, particle, step, channel)`.
//!
//! Idiosyncratic increments are centered across particles at every step by
//! default ([`NoiseScheme::Centered`]), so they contribute nothing to the
//! particle mean and the mean is driven by `W⁰` alone, as `E[X | F⁰]` is.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::lqmodel::{LqCost, LqDynamics};
use crate::measure::{AffineMap, EmpiricalMeasure};
use crate::policy::QuadraticValue;
use crate::rng::{Channel, NoiseKey};

const BLOWUP: f64 = 1e12;

/// Conditional law at one step: the particle cloud and its mean.
#[derive(Debug, Clone, Copy)]
pub struct Law<'a> {
    pub measure: &'a EmpiricalMeasure,
    pub mean: &'a [f64],
}

/// Coefficients of a controlled McKean–Vlasov model.
///
/// Volatilities are written row-major: `idio_vol` fills a `d × n` block and
/// `common_vol` a `d × m0` block.
pub trait DynamicsSpec: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn idio_noise_dim(&self) -> usize;
    fn common_noise_dim(&self) -> usize;
    fn drift(&self, x: &[f64], law: &Law<'_>, a: &[f64], out: &mut [f64]);
    fn idio_vol(&self, x: &[f64], law: &Law<'_>, a: &[f64], out: &mut [f64]);
    fn common_vol(&self, x: &[f64], law: &Law<'_>, a: &[f64], out: &mut [f64]);
    fn running_cost(&self, x: &[f64], law: &Law<'_>, a: &[f64]) -> f64;
    fn terminal_cost(&self, x: &[f64], law: &Law<'_>) -> f64;
}

/// Row-major copy of `v + A x + Ā μ̄ + G a`.
#[derive(Debug, Clone)]
struct AffineRows {
    v: Vec<f64>,
    a: Vec<f64>,
    a_bar: Vec<f64>,
    g: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

impl AffineRows {
    fn new(v: &DVector<f64>, a: &DMatrix<f64>, a_bar: &DMatrix<f64>, g: &DMatrix<f64>) -> Self {
        Self {
            v: v.as_slice().to_vec(),
            a: row_major(a),
            a_bar: row_major(a_bar),
            g: row_major(g),
        }
    }

    #[inline(always)]
    fn eval(&self, x: &[f64], mean: &[f64], control: &[f64], out: &mut [f64]) {
        if let ([x], [mean], [a], [o]) = (x, mean, control, &mut *out) {
            *o = self.v[0] + self.a[0] * x + self.a_bar[0] * mean + self.g[0] * a;
            return;
        }
        let (d, m) = (x.len(), control.len());
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.v[r]
                + dot(&self.a[r * d..(r + 1) * d], x)
                + dot(&self.a_bar[r * d..(r + 1) * d], mean)
                + dot(&self.g[r * m..(r + 1) * m], control);
        }
    }
}

/// The linear-quadratic model as a particle system.
#[derive(Debug, Clone)]
pub struct LqParticleModel {
    dynamics: LqDynamics,
    cost: LqCost,
    drift_rows: AffineRows,
    idio_rows: AffineRows,
    common_rows: AffineRows,
}

impl LqParticleModel {
    pub fn new(dynamics: LqDynamics, cost: LqCost) -> Result<Self> {
        dynamics.validate()?;
        if cost.state_dim() != dynamics.state_dim() || cost.control_dim() != dynamics.control_dim()
        {
            return Err(Error::InvalidModel(
                "cost and dynamics dimensions disagree".into(),
            ));
        }
        let dy = &dynamics;
        Ok(Self {
            drift_rows: AffineRows::new(&dy.b0, &dy.b, &dy.b_bar, &dy.c),
            idio_rows: AffineRows::new(&dy.theta, &dy.d, &dy.d_bar, &dy.f),
            common_rows: AffineRows::new(&dy.theta0, &dy.d0, &dy.d0_bar, &dy.f0),
            dynamics,
            cost,
        })
    }

    pub fn from_value(qv: &QuadraticValue) -> Self {
        Self::new(qv.dynamics().clone(), qv.cost().clone())
            .expect("a solved value function carries a valid model")
    }

    pub fn dynamics(&self) -> &LqDynamics {
        &self.dynamics
    }

    pub fn cost(&self) -> &LqCost {
        &self.cost
    }
}

impl DynamicsSpec for LqParticleModel {
    #[inline]
    fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }
    #[inline]
    fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }
    #[inline]
    fn idio_noise_dim(&self) -> usize {
        1
    }
    #[inline]
    fn common_noise_dim(&self) -> usize {
        1
    }
    #[inline]
    fn drift(&self, x: &[f64], law: &Law<'_>, a: &[f64], out: &mut [f64]) {
        self.drift_rows.eval(x, law.mean, a, out);
    }
    #[inline]
    fn idio_vol(&self, x: &[f64], law: &Law<'_>, a: &[f64], out: &mut [f64]) {
        self.idio_rows.eval(x, law.mean, a, out);
    }
    #[inline]
    fn common_vol(&self, x: &[f64], law: &Law<'_>, a: &[f64], out: &mut [f64]) {
        self.common_rows.eval(x, law.mean, a, out);
    }
    #[inline]
    fn running_cost(&self, x: &[f64], law: &Law<'_>, a: &[f64]) -> f64 {
        if let ([x], [mean], [a]) = (x, law.mean, a) {
            let c = &self.cost;
            return c.q2[(0, 0)] * x * x
                + c.q2_bar[(0, 0)] * mean * mean
                + c.r2[(0, 0)] * a * a
                + 2.0 * x * c.m2[(0, 0)] * a;
        }
        self.cost.running(x, law.mean, a)
    }
    #[inline]
    fn terminal_cost(&self, x: &[f64], law: &Law<'_>) -> f64 {
        self.cost.terminal(x, law.mean)
    }
}

/// Admissible controls: deterministic functions of `(t, x, μ̄)`.
#[derive(Clone)]
pub enum ControlSpec {
    /// `a(x) = K x + k`, the same map at every time.
    Constant(AffineMap),
    /// The optimal feedback of a quadratic value function.
    Optimal(Arc<QuadraticValue>),
    /// Another control plus a constant shift.
    Shifted {
        base: Box<ControlSpec>,
        shift: DVector<f64>,
    },
}

impl std::fmt::Debug for ControlSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlSpec::Constant(a) => f.debug_tuple("Constant").field(a).finish(),
            ControlSpec::Optimal(_) => f.write_str("Optimal"),
            ControlSpec::Shifted { base, shift } => f
                .debug_struct("Shifted")
                .field("base", base)
                .field("shift", shift)
                .finish(),
        }
    }
}

/// Control at one instant: `a = G_x x + G_μ μ̄ + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedControl {
    pub state_gain: DMatrix<f64>,
    pub mean_gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl ResolvedControl {
    /// The affine map `x ↦ a(x)` for a fixed mean.
    pub fn to_affine(&self, mean: &[f64]) -> AffineMap {
        AffineMap {
            linear: self.state_gain.clone(),
            offset: &self.mean_gain * DVector::from_column_slice(mean) + &self.offset,
        }
    }
}

impl ControlSpec {
    pub fn zero(d: usize, m: usize) -> Self {
        ControlSpec::Constant(AffineMap::zero(d, m))
    }

    pub fn optimal(qv: QuadraticValue) -> Self {
        ControlSpec::Optimal(Arc::new(qv))
    }

    pub fn shifted(self, shift: DVector<f64>) -> Self {
        ControlSpec::Shifted {
            base: Box::new(self),
            shift,
        }
    }

    pub fn resolve(&self, t: f64) -> Result<ResolvedControl> {
        match self {
            ControlSpec::Constant(a) => Ok(ResolvedControl {
                state_gain: a.linear.clone(),
                mean_gain: DMatrix::zeros(a.output_dim(), a.input_dim()),
                offset: a.offset.clone(),
            }),
            ControlSpec::Optimal(qv) => {
                let g = qv.optimal_feedback(t)?;
                Ok(ResolvedControl {
                    mean_gain: &g.k2 - &g.k1,
                    state_gain: g.k1,
                    offset: g.k,
                })
            }
            ControlSpec::Shifted { base, shift } => {
                let mut r = base.resolve(t)?;
                if shift.len() != r.offset.len() {
                    return Err(Error::DimensionMismatch {
                        what: "control shift",
                        expected: r.offset.len(),
                        found: shift.len(),
                    });
                }
                r.offset += shift;
                Ok(r)
            }
        }
    }
}

/// How idiosyncratic increments are drawn within a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub enum NoiseScheme {
    /// Subtract the cross-particle mean of the draws at each step.
    #[default]
    Centered,
    /// Raw independent draws.
    Independent,
}

/// Time grid and randomness of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SimConfig {
    pub t0: f64,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub noise: NoiseScheme,
    /// Each step's Brownian increment is the sum of this many sub-draws, so
    /// runs whose `dt` differ by this factor share one Brownian path.
    pub refinement: u32,
}

impl SimConfig {
    pub fn new(t0: f64, horizon: f64, dt: f64, seed: u64) -> Self {
        Self {
            t0,
            horizon,
            dt,
            seed,
            noise: NoiseScheme::default(),
            refinement: 1,
        }
    }

    /// Same grid but driven by the Brownian path of a run with step
    /// `dt / refinement`.
    pub fn with_refinement(mut self, refinement: u32) -> Self {
        self.refinement = refinement.max(1);
        self
    }

    /// Grid `t0, t0 + dt, …, horizon`.
    pub fn times(&self) -> Result<Vec<f64>> {
        let span = self.horizon - self.t0;
        if !(self.dt > 0.0 && self.dt.is_finite()) || span.is_nan() || span < 0.0 {
            return Err(Error::Domain(format!(
                "need dt > 0 and t0 <= T, got dt = {}, t0 = {}, T = {}",
                self.dt, self.t0, self.horizon
            )));
        }
        let k = (span / self.dt).round();
        if (k * self.dt - span).abs() > 1e-9 * self.dt.max(span) {
            return Err(Error::Domain(format!(
                "dt = {} does not divide [{}, {}]",
                self.dt, self.t0, self.horizon
            )));
        }
        let k = k as usize;
        let mut times: Vec<f64> = (0..=k).map(|i| self.t0 + i as f64 * self.dt).collect();
        times[k] = self.horizon;
        Ok(times)
    }
}

/// One simulated path of the particle system.
#[derive(Debug, Clone)]
pub struct ParticleTrajectory {
    pub path_index: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    /// Particle clouds at each node.
    pub snapshots: Vec<EmpiricalMeasure>,
    /// `K × m0`, row per step.
    pub common_increments: Vec<f64>,
    /// `K × N × n`, block per step.
    pub idio_increments: Vec<f64>,
    pub common_dim: usize,
    pub idio_dim: usize,
    /// Left-endpoint sum of the lifted running cost.
    pub running_cost: f64,
    /// `running_cost` plus the lifted terminal cost.
    pub cost: f64,
}

/// Cost and terminal cloud of a path simulated without recording.
#[derive(Debug, Clone)]
pub struct PathOutcome {
    pub running_cost: f64,
    pub cost: f64,
    pub terminal: EmpiricalMeasure,
}

/// Draws the increments of step `step`: `ΔW⁰` and `ΔB_i` for every particle.
#[allow(clippy::too_many_arguments)]
fn draw_increments(
    key: &NoiseKey,
    scheme: NoiseScheme,
    refinement: u32,
    path: usize,
    step: usize,
    n_particles: usize,
    idio_dim: usize,
    common_dim: usize,
    dt: f64,
) -> (Vec<f64>, Vec<f64>) {
    let r = refinement.max(1);
    let sq = (dt / r as f64).sqrt();
    let first = step as u32 * r;
    let mut dw0 = vec![0.0; common_dim];
    let mut db = vec![0.0; n_particles * idio_dim];
    let mut buf0 = vec![0.0; common_dim];
    let mut buf = if r > 1 { vec![0.0; db.len()] } else { Vec::new() };
    for sub in first..first + r {
        key.fill_normals(path as u32, sub, Channel::Common, &mut buf0);
        for (acc, z) in dw0.iter_mut().zip(&buf0) {
            *acc += z;
        }
        if r == 1 {
            key.fill_normals(path as u32, sub, Channel::Idiosyncratic, &mut db);
        } else {
            key.fill_normals(path as u32, sub, Channel::Idiosyncratic, &mut buf);
            for (acc, z) in db.iter_mut().zip(&buf) {
                *acc += z;
            }
        }
    }
    dw0.iter_mut().for_each(|v| *v *= sq);
    if scheme == NoiseScheme::Centered && idio_dim > 0 {
        for j in 0..idio_dim {
            let m = pairwise_sum(n_particles, |i| db[i * idio_dim + j]) / n_particles as f64;
            for i in 0..n_particles {
                db[i * idio_dim + j] -= m;
            }
        }
    }
    db.iter_mut().for_each(|v| *v *= sq);
    (dw0, db)
}

/// Controls of every particle at one step, row-major `N × m`.
pub(crate) fn particle_controls(control: &ResolvedControl, law: &Law<'_>) -> Vec<f64> {
    let m = control.offset.len();
    let base: Vec<f64> = (0..m)
        .map(|r| {
            let mut acc = control.offset[r];
            for (c, mc) in law.mean.iter().enumerate() {
                acc += control.mean_gain[(r, c)] * mc;
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; law.measure.len() * m];
    for (x, a) in law.measure.points().zip(out.chunks_exact_mut(m)) {
        for r in 0..m {
            let mut acc = base[r];
            for (c, xc) in x.iter().enumerate() {
                acc += control.state_gain[(r, c)] * xc;
            }
            a[r] = acc;
        }
    }
    out
}

/// `f̂(ρ, α) = (1/N) Σ f(xᵢ, ρ, aᵢ)`.
fn lifted_running<M: DynamicsSpec + ?Sized>(model: &M, law: &Law<'_>, controls: &[f64]) -> f64 {
    let m = model.control_dim();
    let n = law.measure.len();
    pairwise_sum(n, |i| {
        model.running_cost(law.measure.point(i), law, &controls[i * m..(i + 1) * m])
    }) / n as f64
}

/// `ĝ(ρ) = (1/N) Σ g(xᵢ, ρ)`.
fn lifted_terminal<M: DynamicsSpec + ?Sized>(model: &M, law: &Law<'_>) -> f64 {
    let n = law.measure.len();
    pairwise_sum(n, |i| model.terminal_cost(law.measure.point(i), law)) / n as f64
}

/// One explicit Euler–Maruyama step with the law frozen at the step start.
#[allow(clippy::too_many_arguments)]
fn euler_step<M: DynamicsSpec + ?Sized>(
    model: &M,
    law: &Law<'_>,
    controls: &[f64],
    dw0: &[f64],
    db: &[f64],
    dt: f64,
    t_next: f64,
    path: usize,
) -> Result<EmpiricalMeasure> {
    let (d, m) = (model.state_dim(), model.control_dim());
    let (n_idio, n_common) = (model.idio_noise_dim(), model.common_noise_dim());
    let mut drift = vec![0.0; d];
    let mut sig = vec![0.0; d * n_idio];
    let mut sig0 = vec![0.0; d * n_common];
    let mut next = Vec::with_capacity(law.measure.len() * d);
    for (i, x) in law.measure.points().enumerate() {
        let a = &controls[i * m..(i + 1) * m];
        let dbi = &db[i * n_idio..(i + 1) * n_idio];
        model.drift(x, law, a, &mut drift);
        model.idio_vol(x, law, a, &mut sig);
        model.common_vol(x, law, a, &mut sig0);
        for r in 0..d {
            let mut v = x[r] + drift[r] * dt;
            for c in 0..n_idio {
                v += sig[r * n_idio + c] * dbi[c];
            }
            for c in 0..n_common {
                v += sig0[r * n_common + c] * dw0[c];
            }
            if !v.is_finite() || v.abs() > BLOWUP {
                return Err(Error::NumericalBlowup {
                    t: t_next,
                    path: Some(path),
                });
            }
            next.push(v);
        }
    }
    EmpiricalMeasure::from_flat(d, next)
}

fn check_model_dims<M: DynamicsSpec + ?Sized>(model: &M, mu0: &EmpiricalMeasure) -> Result<()> {
    if mu0.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "initial cloud dimension",
            expected: model.state_dim(),
            found: mu0.dim(),
        });
    }
    Ok(())
}

enum Increments<'a> {
    Draw {
        key: NoiseKey,
        scheme: NoiseScheme,
        refinement: u32,
        dt: f64,
    },
    Replay {
        common: &'a [f64],
        idio: &'a [f64],
        dt: f64,
    },
}

/// Shared stepping loop. Returns the trajectory; snapshots and increments are
/// retained only when `record` is set, otherwise just the final cloud is kept.
fn propagate<M: DynamicsSpec + ?Sized>(
    model: &M,
    control: &ControlSpec,
    mu0: EmpiricalMeasure,
    times: &[f64],
    path: usize,
    increments: Increments<'_>,
    record: bool,
) -> Result<ParticleTrajectory> {
    check_model_dims(model, &mu0)?;
    let n = mu0.len();
    let (n_idio, n_common) = (model.idio_noise_dim(), model.common_noise_dim());
    let steps = times.len() - 1;
    let mut snapshots = Vec::with_capacity(if record { steps + 1 } else { 1 });
    let mut common_all = Vec::new();
    let mut idio_all = Vec::new();
    let mut running = 0.0;
    let mut current = mu0;
    for k in 0..steps {
        let (dw0, db) = match &increments {
            Increments::Draw {
                key,
                scheme,
                refinement,
                dt: h,
            } => draw_increments(key, *scheme, *refinement, path, k, n, n_idio, n_common, *h),
            Increments::Replay { common, idio, .. } => (
                common[k * n_common..(k + 1) * n_common].to_vec(),
                idio[k * n * n_idio..(k + 1) * n * n_idio].to_vec(),
            ),
        };
        let h = match &increments {
            Increments::Draw { dt: h, .. } | Increments::Replay { dt: h, .. } => *h,
        };
        let mean = current.mean();
        let law = Law {
            measure: &current,
            mean: mean.as_slice(),
        };
        let resolved = control.resolve(times[k])?;
        let controls = particle_controls(&resolved, &law);
        running += lifted_running(model, &law, &controls) * h;
        let next = euler_step(model, &law, &controls, &dw0, &db, h, times[k + 1], path)?;
        if record {
            common_all.extend_from_slice(&dw0);
            idio_all.extend_from_slice(&db);
            snapshots.push(current);
        }
        current = next;
    }
    let mean = current.mean();
    let law = Law {
        measure: &current,
        mean: mean.as_slice(),
    };
    let cost = running + lifted_terminal(model, &law);
    snapshots.push(current);
    let dt = match &increments {
        Increments::Draw { dt, .. } | Increments::Replay { dt, .. } => *dt,
    };
    Ok(ParticleTrajectory {
        path_index: path,
        dt,
        times: if record {
            times.to_vec()
        } else {
            vec![times[0], times[steps]]
        },
        snapshots,
        common_increments: common_all,
        idio_increments: idio_all,
        common_dim: n_common,
        idio_dim: n_idio,
        running_cost: running,
        cost,
    })
}

/// Simulates one common-noise path and records the full trajectory.
pub fn simulate_path<M: DynamicsSpec + ?Sized>(
    model: &M,
    control: &ControlSpec,
    mu0: &EmpiricalMeasure,
    cfg: &SimConfig,
    path_index: usize,
) -> Result<ParticleTrajectory> {
    let times = cfg.times()?;
    propagate(
        model,
        control,
        mu0.clone(),
        &times,
        path_index,
        Increments::Draw {
            key: NoiseKey::new(cfg.seed),
            scheme: cfg.noise,
            refinement: cfg.refinement,
            dt: cfg.dt,
        },
        true,
    )
}

/// Same stepping as [`simulate_path`] without storing the trajectory.
pub fn simulate_cost<M: DynamicsSpec + ?Sized>(
    model: &M,
    control: &ControlSpec,
    mu0: &EmpiricalMeasure,
    cfg: &SimConfig,
    path_index: usize,
) -> Result<PathOutcome> {
    let times = cfg.times()?;
    let mut traj = propagate(
        model,
        control,
        mu0.clone(),
        &times,
        path_index,
        Increments::Draw {
            key: NoiseKey::new(cfg.seed),
            scheme: cfg.noise,
            refinement: cfg.refinement,
            dt: cfg.dt,
        },
        false,
    )?;
    Ok(PathOutcome {
        running_cost: traj.running_cost,
        cost: traj.cost,
        terminal: traj.snapshots.pop().expect("terminal snapshot"),
    })
}

/// Re-runs the simulation from the stored cloud at node `theta`, replaying
/// the stored increments. The result covers `[theta, T]`.
pub fn restart_continuation<M: DynamicsSpec + ?Sized>(
    model: &M,
    control: &ControlSpec,
    traj: &ParticleTrajectory,
    theta: f64,
) -> Result<ParticleTrajectory> {
    let k0 = traj.node_index(theta)?;
    let n = traj.snapshots[k0].len();
    let per_step_idio = n * traj.idio_dim;
    propagate(
        model,
        control,
        traj.snapshots[k0].clone(),
        &traj.times[k0..],
        traj.path_index,
        Increments::Replay {
            common: &traj.common_increments[k0 * traj.common_dim..],
            idio: &traj.idio_increments[k0 * per_step_idio..],
            dt: traj.dt,
        },
        true,
    )
}

/// `Σ_k f̂(ρ_{t_k}, α_{t_k}) Δt + ĝ(ρ_T)` recomputed from the stored clouds.
pub fn pathwise_cost<M: DynamicsSpec + ?Sized>(
    traj: &ParticleTrajectory,
    model: &M,
    control: &ControlSpec,
) -> Result<f64> {
    let steps = traj.times.len() - 1;
    let mut running = 0.0;
    for k in 0..steps {
        let h = traj.dt;
        let cloud = &traj.snapshots[k];
        let mean = cloud.mean();
        let law = Law {
            measure: cloud,
            mean: mean.as_slice(),
        };
        let controls = particle_controls(&control.resolve(traj.times[k])?, &law);
        running += lifted_running(model, &law, &controls) * h;
    }
    let last = &traj.snapshots[steps];
    let mean = last.mean();
    Ok(running
        + lifted_terminal(
            model,
            &Law {
                measure: last,
                mean: mean.as_slice(),
            },
        ))
}

impl ParticleTrajectory {
    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.snapshots.last().expect("trajectory has a terminal cloud")
    }

    /// Index of the grid node equal to `theta` (up to rounding of the grid).
    pub fn node_index(&self, theta: f64) -> Result<usize> {
        let tol = 1e-9 * (self.times[self.times.len() - 1] - self.times[0]).abs().max(1.0);
        self.times
            .iter()
            .position(|t| (t - theta).abs() <= tol)
            .ok_or(Error::NotOnGrid(theta))
    }

    /// Particle means at every node.
    pub fn conditional_means(&self) -> Vec<DVector<f64>> {
        self.snapshots.iter().map(EmpiricalMeasure::mean).collect()
    }

    /// Cumulative common noise `W⁰_{t_k} − W⁰_{t_0}` at every node.
    pub fn common_noise_path(&self) -> Vec<Vec<f64>> {
        let mut acc = vec![0.0; self.common_dim];
        let mut out = vec![acc.clone()];
        for inc in self.common_increments.chunks_exact(self.common_dim.max(1)) {
            for (a, v) in acc.iter_mut().zip(inc) {
                *a += v;
            }
            out.push(acc.clone());
        }
        out
    }

    /// Rows `path, t, mean_0.., W0_cum` (first common-noise component).
    pub fn write_mean_csv<W: Write>(&self, mut w: W, header: bool) -> Result<()> {
        let d = self.snapshots[0].dim();
        if header {
            let mut h = vec!["path".to_string(), "t".to_string()];
            h.extend((0..d).map(|j| format!("mean_{j}")));
            h.push("W0_cum".into());
            writeln!(w, "{}", h.join(","))?;
        }
        let w0 = self.common_noise_path();
        for ((t, m), w0k) in self.times.iter().zip(self.conditional_means()).zip(w0) {
            let mut row = vec![self.path_index.to_string(), format!("{t:?}")];
            row.extend(m.iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", w0k.first().copied().unwrap_or(0.0)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Rows `path, t, particle, x0..`, every `stride`-th node and the first
    /// `max_particles` particles.
    pub fn write_trajectory_csv<W: Write>(
        &self,
        mut w: W,
        header: bool,
        stride: usize,
        max_particles: usize,
    ) -> Result<()> {
        let d = self.snapshots[0].dim();
        if header {
            let mut h = vec!["path".to_string(), "t".to_string(), "particle".to_string()];
            h.extend((0..d).map(|j| format!("x{j}")));
            writeln!(w, "{}", h.join(","))?;
        }
        let stride = stride.max(1);
        let last = self.times.len() - 1;
        for (k, (t, cloud)) in self.times.iter().zip(&self.snapshots).enumerate() {
            if k % stride != 0 && k != last {
                continue;
            }
            for (i, x) in cloud.points().take(max_particles).enumerate() {
                let mut row = vec![self.path_index.to_string(), format!("{t:?}"), i.to_string()];
                row.extend(x.iter().map(|v| format!("{v:?}")));
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Source of the initial cloud.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    Gaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    },
    Csv(PathBuf),
}

/// Draws `n` particles from `spec`, deterministically in `seed`.
///
/// A CSV source fixes `N` itself; `n` must then match the file.
pub fn sample_initial(spec: &InitialLaw, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::InvalidMeasure("need at least one particle".into()));
    }
    match spec {
        InitialLaw::Point(x) => EmpiricalMeasure::point_mass(x, n),
        InitialLaw::Gaussian { mean, cov } => {
            let d = mean.len();
            if cov.nrows() != d || cov.ncols() != d {
                return Err(Error::DimensionMismatch {
                    what: "covariance",
                    expected: d,
                    found: cov.nrows(),
                });
            }
            let eig = SymmetricEigen::new(crate::linalg::symmetrize(cov));
            let scale = eig.eigenvalues.amax().max(1.0);
            if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
                return Err(Error::InvalidModel("covariance is not positive semidefinite".into()));
            }
            let root = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
            let mut z = vec![0.0; n * d];
            NoiseKey::new(seed).fill_normals(0, 0, Channel::Initial, &mut z);
            let mut data = Vec::with_capacity(n * d);
            for zi in z.chunks_exact(d) {
                data.extend((mean + &root * DVector::from_column_slice(zi)).iter());
            }
            EmpiricalMeasure::from_flat(d, data)
        }
        InitialLaw::Csv(path) => {
            let mu = EmpiricalMeasure::load_csv(path)?;
            if mu.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "particle count of initial CSV",
                    expected: n,
                    found: mu.len(),
                });
            }
            Ok(mu)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frozen_model() -> LqParticleModel {
        let mut cost = LqCost::zeros(2, 1);
        cost.r2 = DMatrix::from_element(1, 1, 1.0);
        LqParticleModel::new(LqDynamics::zeros(2, 1), cost).unwrap()
    }

    #[test]
    fn frozen_dynamics_keep_the_cloud() {
        let model = frozen_model();
        let mu0 = EmpiricalMeasure::new(&[vec![1.0, 2.0], vec![-0.5, 0.3]]).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.1, 9);
        let traj = simulate_path(&model, &ControlSpec::zero(2, 1), &mu0, &cfg, 0).unwrap();
        assert_eq!(traj.snapshots.len(), 11);
        assert!(traj.snapshots.iter().all(|s| *s == mu0));
    }

    #[test]
    fn grid_must_divide_interval() {
        assert!(SimConfig::new(0.0, 1.0, 0.3, 0).times().is_err());
        assert!(SimConfig::new(0.0, 1.0, -0.1, 0).times().is_err());
        let t = SimConfig::new(0.25, 1.0, 0.25, 0).times().unwrap();
        assert_eq!(t, vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn sample_initial_point_and_determinism() {
        let mu = sample_initial(&InitialLaw::Point(vec![1.5, -2.0]), 4, 0).unwrap();
        assert_eq!(mu.len(), 4);
        assert!(mu.points().all(|p| p == [1.5, -2.0]));
        let g = InitialLaw::Gaussian {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
        };
        let a = sample_initial(&g, 100, 5).unwrap();
        let b = sample_initial(&g, 100, 5).unwrap();
        assert_eq!(a.as_flat(), b.as_flat());
        assert_ne!(a.as_flat(), sample_initial(&g, 100, 6).unwrap().as_flat());
    }

    #[test]
    fn sample_initial_gaussian_mean_within_clt_bound() {
        let n = 10_000;
        let g = InitialLaw::Gaussian {
            mean: DVector::zeros(3),
            cov: DMatrix::identity(3, 3),
        };
        let mu = sample_initial(&g, n, 2024).unwrap();
        let bound = 4.0 / (n as f64).sqrt();
        assert!(mu.mean().iter().all(|m| m.abs() < bound), "{}", mu.mean());
    }

    #[test]
    fn sample_initial_errors() {
        let bad = InitialLaw::Gaussian {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
        };
        assert!(sample_initial(&bad, 10, 0).is_err());
        assert!(sample_initial(&InitialLaw::Csv("/nonexistent/x.csv".into()), 10, 0).is_err());
        assert!(sample_initial(&InitialLaw::Point(vec![0.0]), 0, 0).is_err());
    }

    #[test]
    fn centered_noise_leaves_the_mean_to_common_noise() {
        let mut dy = LqDynamics::zeros(1, 1);
        dy.theta = DVector::from_element(1, 0.8);
        dy.theta0 = DVector::from_element(1, 0.6);
        let mut cost = LqCost::zeros(1, 1);
        cost.r2 = DMatrix::from_element(1, 1, 1.0);
        let model = LqParticleModel::new(dy, cost).unwrap();
        let mu0 = EmpiricalMeasure::point_mass(&[0.0], 64).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.01, 3);
        let traj = simulate_path(&model, &ControlSpec::zero(1, 1), &mu0, &cfg, 2).unwrap();
        for (m, w0) in traj.conditional_means().iter().zip(traj.common_noise_path()) {
            assert!((m[0] - 0.6 * w0[0]).abs() < 1e-12);
        }
        assert!(traj.terminal().variance_form(&DMatrix::identity(1, 1)).unwrap() > 0.0);
    }

    #[test]
    fn blowup_is_reported_with_path() {
        let mut dy = LqDynamics::zeros(1, 1);
        dy.b = DMatrix::from_element(1, 1, 2000.0);
        let mut cost = LqCost::zeros(1, 1);
        cost.r2 = DMatrix::from_element(1, 1, 1.0);
        let model = LqParticleModel::new(dy, cost).unwrap();
        let mu0 = EmpiricalMeasure::point_mass(&[1.0], 2).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.1, 0);
        let err = simulate_path(&model, &ControlSpec::zero(1, 1), &mu0, &cfg, 7).unwrap_err();
        assert!(matches!(err, Error::NumericalBlowup { path: Some(7), .. }), "{err}");
    }

    #[test]
    fn restart_edge_cases() {
        let model = frozen_model();
        let mu0 = EmpiricalMeasure::new(&[vec![1.0, 2.0]]).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.25, 1);
        let traj = simulate_path(&model, &ControlSpec::zero(2, 1), &mu0, &cfg, 0).unwrap();
        let end = restart_continuation(&model, &ControlSpec::zero(2, 1), &traj, 1.0).unwrap();
        assert_eq!(end.snapshots.len(), 1);
        assert_eq!(end.terminal(), traj.terminal());
        assert!(matches!(
            restart_continuation(&model, &ControlSpec::zero(2, 1), &traj, 0.3),
            Err(Error::NotOnGrid(_))
        ));
    }

    #[test]
    fn csv_layouts() {
        let model = frozen_model();
        let mu0 = EmpiricalMeasure::new(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.25, 1);
        let traj = simulate_path(&model, &ControlSpec::zero(2, 1), &mu0, &cfg, 3).unwrap();
        let mut buf = Vec::new();
        traj.write_mean_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "path,t,mean_0,mean_1,W0_cum");
        assert_eq!(text.lines().count(), 6);
        let mut buf = Vec::new();
        traj.write_trajectory_csv(&mut buf, true, 2, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "path,t,particle,x0,x1");
        // Nodes 0, 2, 4 with one particle each.
        assert_eq!(text.lines().count(), 4);
    }
}
