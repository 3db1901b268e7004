//! Command-line front end: option parsing, config files and artifact output.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::parse_matrix;
use crate::lqmodel::{parse_key_values, ModelFile};
use crate::measure::EmpiricalMeasure;
use crate::policy::QuadraticValue;
use crate::riccati::{closed_form_lambda, solve_riccati, systemic_risk_model, SystemicRiskParams};
use crate::simulator::{sample_initial, simulate_path, ControlSpec, InitialLaw, LqParticleModel, SimConfig};
use crate::verify::{
    bellman_sweep, chaos_convergence, chaos_trend, dpp_check, estimate_cost, flow_check,
    grad_sweep, ito_generator_check, richardson_constant, CheckReport, QuadraticFunctional,
};

/// Exit status of a completed run.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mvlq",
    version,
    about = "Linear-quadratic control of conditional McKean-Vlasov dynamics with common noise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Riccati system; writes riccati.csv and policy.csv.
    Solve(Knobs),
    /// Simulate particle paths; writes trajectory.csv and mean.csv.
    Simulate(Knobs),
    /// Monte Carlo cost estimate; writes cost.json.
    Cost(Knobs),
    /// Run one verification check; writes verify_<check>.json.
    Verify {
        #[arg(value_enum)]
        check: Check,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// End-to-end run of the interbank lending model.
    SystemicRisk {
        #[command(flatten)]
        params: InterbankArgs,
        #[command(flatten)]
        knobs: Knobs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Check {
    Bellman,
    Dpp,
    Ito,
    Grad,
    Chaos,
    Flow,
}

impl Check {
    fn name(self) -> &'static str {
        match self {
            Check::Bellman => "bellman",
            Check::Dpp => "dpp",
            Check::Ito => "ito",
            Check::Grad => "grad",
            Check::Chaos => "chaos",
            Check::Flow => "flow",
        }
    }
}

/// Knobs shared by all commands. Every flag can also be given in the
/// `--config` file as `name = value`; flags take precedence.
#[derive(Debug, Clone, Default, Args)]
pub struct Knobs {
    /// Model file (`key = value` lines).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Config file with defaults for any of these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Particles per path (N).
    #[arg(long)]
    pub particles: Option<usize>,
    /// Common-noise paths (M).
    #[arg(long)]
    pub paths: Option<usize>,
    /// Euler–Maruyama step.
    #[arg(long)]
    pub dt: Option<f64>,
    /// RK4 step for the Riccati system.
    #[arg(long = "riccati-step")]
    pub riccati_step: Option<f64>,
    /// Start time.
    #[arg(long)]
    pub t0: Option<f64>,
    /// Intermediate time for dpp/flow, end of the interval for ito.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Finite-difference step for grad.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Constant added to every control component.
    #[arg(long, allow_hyphen_values = true)]
    pub shift: Option<f64>,
    /// Initial law: `point:<x>`, `gaussian:<mean>:<cov>` or `csv:<path>`.
    #[arg(long)]
    pub init: Option<String>,
    /// `optimal` or `zero`.
    #[arg(long)]
    pub control: Option<String>,
    /// Random draws for bellman/grad.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated particle counts for chaos.
    #[arg(long)]
    pub levels: Option<String>,
    /// Test functional for ito: `mean-square` or `variance`.
    #[arg(long)]
    pub phi: Option<String>,
}

/// Interbank model parameters.
#[derive(Debug, Clone, Default, Args)]
pub struct InterbankArgs {
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    #[arg(long)]
    pub sigma1: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub x0: Option<f64>,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Parse(format!("config key `{key}`: {e}")))
}

fn fill<T: std::str::FromStr>(slot: &mut Option<T>, key: &str, v: &str) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if slot.is_none() {
        *slot = Some(parse_value(key, v)?);
    }
    Ok(())
}

/// Fills unset flags from the config file named by `--config`.
pub fn merge_config(knobs: &mut Knobs, params: Option<&mut InterbankArgs>) -> Result<()> {
    let Some(path) = knobs.config.clone() else {
        return Ok(());
    };
    let text = fs::read_to_string(&path)?;
    let mut params = params;
    for (key, v) in parse_key_values(&text)? {
        let k = key.replace('_', "-");
        let v = v.as_str();
        match k.as_str() {
            "model" => fill(&mut knobs.model, &k, v)?,
            "out" => fill(&mut knobs.out, &k, v)?,
            "seed" => fill(&mut knobs.seed, &k, v)?,
            "particles" => fill(&mut knobs.particles, &k, v)?,
            "paths" => fill(&mut knobs.paths, &k, v)?,
            "dt" => fill(&mut knobs.dt, &k, v)?,
            "riccati-step" => fill(&mut knobs.riccati_step, &k, v)?,
            "t0" => fill(&mut knobs.t0, &k, v)?,
            "theta" => fill(&mut knobs.theta, &k, v)?,
            "epsilon" => fill(&mut knobs.epsilon, &k, v)?,
            "shift" => fill(&mut knobs.shift, &k, v)?,
            "init" => fill(&mut knobs.init, &k, v)?,
            "control" => fill(&mut knobs.control, &k, v)?,
            "samples" => fill(&mut knobs.samples, &k, v)?,
            "levels" => fill(&mut knobs.levels, &k, v)?,
            "phi" => fill(&mut knobs.phi, &k, v)?,
            other => {
                let Some(p) = params.as_deref_mut() else {
                    return Err(Error::Parse(format!("unknown config key `{key}`")));
                };
                match other {
                    "kappa" => fill(&mut p.kappa, &k, v)?,
                    "q" => fill(&mut p.q, &k, v)?,
                    "eta" => fill(&mut p.eta, &k, v)?,
                    "c" => fill(&mut p.c, &k, v)?,
                    "sigma0" => fill(&mut p.sigma0, &k, v)?,
                    "sigma1" => fill(&mut p.sigma1, &k, v)?,
                    "rho" => fill(&mut p.rho, &k, v)?,
                    "horizon" => fill(&mut p.horizon, &k, v)?,
                    "x0" => fill(&mut p.x0, &k, v)?,
                    _ => return Err(Error::Parse(format!("unknown config key `{key}`"))),
                }
            }
        }
    }
    Ok(())
}

fn positive_f(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => {
            Err(Error::Parse(format!("--{name} must be positive, got {x}")))
        }
        _ => Ok(()),
    }
}

fn positive_u(name: &str, v: Option<usize>) -> Result<()> {
    match v {
        Some(0) => Err(Error::Parse(format!("--{name} must be positive"))),
        _ => Ok(()),
    }
}

impl Knobs {
    pub fn validate(&self) -> Result<()> {
        positive_u("particles", self.particles)?;
        positive_u("paths", self.paths)?;
        positive_u("samples", self.samples)?;
        positive_f("dt", self.dt)?;
        positive_f("riccati-step", self.riccati_step)?;
        positive_f("theta", self.theta)?;
        positive_f("epsilon", self.epsilon)?;
        if let Some(t0) = self.t0 {
            if !(t0 >= 0.0 && t0.is_finite()) {
                return Err(Error::Parse(format!("--t0 must be non-negative, got {t0}")));
            }
        }
        if let Some(s) = self.shift {
            if !s.is_finite() {
                return Err(Error::Parse("--shift must be finite".into()));
            }
        }
        Ok(())
    }

    fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Parse("--seed is required for stochastic commands".into()))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn t0(&self) -> f64 {
        self.t0.unwrap_or(0.0)
    }

    fn levels(&self) -> Result<Vec<usize>> {
        match &self.levels {
            None => Ok(vec![250, 1000, 4000]),
            Some(s) => s
                .split(',')
                .map(|v| parse_value::<usize>("levels", v.trim()))
                .collect(),
        }
    }

    /// Resolved settings recorded in every JSON artifact.
    fn to_json(&self) -> Value {
        json!({
            "model": self.model.as_ref().map(|p| p.display().to_string()),
            "seed": self.seed,
            "particles": self.particles,
            "paths": self.paths,
            "dt": self.dt,
            "riccati_step": self.riccati_step,
            "t0": self.t0,
            "theta": self.theta,
            "epsilon": self.epsilon,
            "shift": self.shift,
            "init": self.init,
            "control": self.control,
            "samples": self.samples,
            "levels": self.levels,
            "phi": self.phi,
        })
    }
}

impl InterbankArgs {
    pub fn params(&self) -> SystemicRiskParams {
        let d = SystemicRiskParams::default();
        SystemicRiskParams {
            kappa: self.kappa.unwrap_or(d.kappa),
            q: self.q.unwrap_or(d.q),
            eta: self.eta.unwrap_or(d.eta),
            c: self.c.unwrap_or(d.c),
            sigma0: self.sigma0.unwrap_or(d.sigma0),
            sigma1: self.sigma1.unwrap_or(d.sigma1),
            rho: self.rho.unwrap_or(d.rho),
            horizon: self.horizon.unwrap_or(d.horizon),
            x0: self.x0.unwrap_or(d.x0),
        }
    }
}

/// Parses `point:<x>`, `gaussian:<mean>:<cov>` or `csv:<path>`.
pub fn parse_init(spec: &str, d: usize) -> Result<InitialLaw> {
    let bad = |msg: &str| Error::Parse(format!("--init `{spec}`: {msg}"));
    let (kind, rest) = spec.split_once(':').ok_or_else(|| bad("expected kind:value"))?;
    let vector = |text: &str| -> Result<Vec<f64>> {
        let v: Vec<f64> = text
            .split(',')
            .map(|x| parse_value::<f64>("init", x.trim()))
            .collect::<Result<_>>()?;
        if v.len() != d {
            return Err(bad(&format!("expected {d} coordinates")));
        }
        Ok(v)
    };
    match kind {
        "point" => Ok(InitialLaw::Point(vector(rest)?)),
        "gaussian" => {
            let (mean, cov) = rest.split_once(':').ok_or_else(|| bad("expected mean:cov"))?;
            let cov = parse_matrix(cov).map_err(|e| bad(&e))?;
            if cov.nrows() != d || cov.ncols() != d {
                return Err(bad(&format!("covariance must be {d}x{d}")));
            }
            Ok(InitialLaw::Gaussian {
                mean: DVector::from_vec(vector(mean)?),
                cov,
            })
        }
        "csv" => Ok(InitialLaw::Csv(PathBuf::from(rest))),
        _ => Err(bad("unknown kind")),
    }
}

/// A loaded LQ model with its solved value function.
struct Problem {
    qv: QuadraticValue,
    model: LqParticleModel,
}

impl Problem {
    fn from_parts(
        dy: crate::lqmodel::LqDynamics,
        cost: crate::lqmodel::LqCost,
        horizon: f64,
        knobs: &Knobs,
    ) -> Result<Self> {
        let h = knobs.riccati_step.unwrap_or(horizon / 1000.0);
        let qv = QuadraticValue::new(solve_riccati(&dy, &cost, horizon, h)?);
        let model = LqParticleModel::new(dy, cost)?;
        Ok(Self { qv, model })
    }

    fn load(knobs: &Knobs) -> Result<Self> {
        let path = knobs
            .model
            .as_ref()
            .ok_or_else(|| Error::Parse("--model is required".into()))?;
        let mf = ModelFile::load(path)?;
        Self::from_parts(mf.dynamics, mf.cost, mf.horizon, knobs)
    }

    fn dims(&self) -> (usize, usize) {
        let dy = self.model.dynamics();
        (dy.state_dim(), dy.control_dim())
    }

    fn horizon(&self) -> f64 {
        self.qv.horizon()
    }

    fn control(&self, knobs: &Knobs, default: &str) -> Result<ControlSpec> {
        let (d, m) = self.dims();
        let base = match knobs.control.as_deref().unwrap_or(default) {
            "optimal" => ControlSpec::optimal(self.qv.clone()),
            "zero" => ControlSpec::zero(d, m),
            other => return Err(Error::Parse(format!("unknown control `{other}`"))),
        };
        Ok(match knobs.shift {
            Some(s) if s != 0.0 => base.shifted(DVector::from_element(m, s)),
            _ => base,
        })
    }

    fn is_optimal(&self, knobs: &Knobs) -> bool {
        knobs.control.as_deref().unwrap_or("optimal") == "optimal"
            && knobs.shift.unwrap_or(0.0) == 0.0
    }

    fn init(&self, knobs: &Knobs) -> Result<InitialLaw> {
        let d = self.dims().0;
        match &knobs.init {
            Some(s) => parse_init(s, d),
            None => Ok(InitialLaw::Point(vec![0.0; d])),
        }
    }

    fn initial_cloud(&self, knobs: &Knobs, default_n: usize) -> Result<EmpiricalMeasure> {
        let init = self.init(knobs)?;
        let n = match (&init, knobs.particles) {
            (InitialLaw::Csv(p), None) => EmpiricalMeasure::load_csv(p)?.len(),
            (_, n) => n.unwrap_or(default_n),
        };
        sample_initial(&init, n, knobs.seed()?)
    }

    fn sim_config(&self, knobs: &Knobs, t0: f64, end: f64) -> Result<SimConfig> {
        Ok(SimConfig::new(t0, end, knobs.dt.unwrap_or(1e-3), knobs.seed()?))
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, v: &impl serde::Serialize) -> Result<String> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))? + "\n";
    fs::write(dir.join(name), &text)?;
    Ok(text)
}

fn write_solution(p: &Problem, dir: &Path) -> Result<()> {
    let mut w = create(dir, "riccati.csv")?;
    p.qv.sol.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(dir, "policy.csv")?;
    p.qv.write_policy_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_solve(knobs: &Knobs) -> Result<i32> {
    let p = Problem::load(knobs)?;
    let dir = knobs.out_dir()?;
    write_solution(&p, &dir)?;
    let s0 = p.qv.sol.eval(0.0)?;
    println!("Lambda(0) = {}", crate::linalg::format_matrix(&s0.lam));
    println!("Gamma(0) = {}", crate::linalg::format_matrix(&s0.gam));
    println!("wrote {}", dir.join("riccati.csv").display());
    Ok(EXIT_OK)
}

fn write_paths(
    p: &Problem,
    control: &ControlSpec,
    mu0: &EmpiricalMeasure,
    cfg: &SimConfig,
    paths: usize,
    dir: &Path,
    with_trajectories: bool,
) -> Result<()> {
    let mut means = create(dir, "mean.csv")?;
    let mut traj_out = if with_trajectories {
        Some(create(dir, "trajectory.csv")?)
    } else {
        None
    };
    let steps = cfg.times()?.len() - 1;
    let stride = steps.div_ceil(200).max(1);
    for path in 0..paths {
        let traj = simulate_path(&p.model, control, mu0, cfg, path)?;
        traj.write_mean_csv(&mut means, path == 0)?;
        if let Some(w) = traj_out.as_mut() {
            traj.write_trajectory_csv(w, path == 0, stride, 50)?;
        }
    }
    means.flush()?;
    if let Some(mut w) = traj_out {
        w.flush()?;
    }
    Ok(())
}

fn cmd_simulate(knobs: &Knobs) -> Result<i32> {
    let p = Problem::load(knobs)?;
    let control = p.control(knobs, "optimal")?;
    let mu0 = p.initial_cloud(knobs, 2000)?;
    let cfg = p.sim_config(knobs, knobs.t0(), p.horizon())?;
    let dir = knobs.out_dir()?;
    let paths = knobs.paths.unwrap_or(1);
    write_paths(&p, &control, &mu0, &cfg, paths, &dir, true)?;
    println!(
        "simulated {paths} path(s) of {} particles; wrote {}",
        mu0.len(),
        dir.join("mean.csv").display()
    );
    Ok(EXIT_OK)
}

fn cmd_cost(knobs: &Knobs) -> Result<i32> {
    let p = Problem::load(knobs)?;
    let control = p.control(knobs, "optimal")?;
    let mu0 = p.initial_cloud(knobs, 2000)?;
    let t0 = knobs.t0();
    let cfg = p.sim_config(knobs, t0, p.horizon())?;
    let est = estimate_cost(&p.model, &control, &mu0, &cfg, knobs.paths.unwrap_or(100))?;
    let value = p.qv.value(t0, &mu0)?;
    let doc = json!({
        "estimate": est,
        "value": value,
        "gap": est.mean - value,
        "config": knobs.to_json(),
    });
    let dir = knobs.out_dir()?;
    print!("{}", write_json(&dir, "cost.json", &doc)?);
    Ok(EXIT_OK)
}

fn report(dir: &Path, r: &CheckReport) -> Result<i32> {
    print!("{}", write_json(dir, &format!("verify_{}.json", r.check), r)?);
    Ok(if r.pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Couples runs at `dt`, `2dt`, `4dt` on one Brownian path and returns the
/// first-order constant of `f`.
fn richardson<F: Fn(&SimConfig) -> Result<f64>>(cfg: &SimConfig, f: F) -> Result<f64> {
    let mut levels = Vec::new();
    for r in [1u32, 2, 4] {
        let c = SimConfig {
            dt: cfg.dt * r as f64,
            ..cfg.with_refinement(r)
        };
        levels.push((c.dt, f(&c)?));
    }
    Ok(richardson_constant(&levels))
}

fn cmd_verify(check: Check, knobs: &Knobs) -> Result<i32> {
    let p = Problem::load(knobs)?;
    let dir = knobs.out_dir()?;
    let config = knobs.to_json();
    let horizon = p.horizon();
    let r = match check {
        Check::Bellman => {
            let sweep = bellman_sweep(
                &p.qv,
                knobs.samples.unwrap_or(100),
                knobs.particles.unwrap_or(50),
                knobs.seed()?,
            )?;
            let pass = sweep.max_optimal_rel <= 1e-8 && sweep.max_perturbation_rel <= 1e-10;
            CheckReport {
                check: check.name().into(),
                pass,
                statistic: sweep.max_optimal_rel,
                tolerance: 1e-8,
                stderr: 0.0,
                config: json!({ "run": config, "sweep": sweep, "perturbation_tolerance": 1e-10 }),
            }
        }
        Check::Grad => {
            let err = grad_sweep(
                &p.qv,
                knobs.samples.unwrap_or(100),
                knobs.particles.unwrap_or(50),
                knobs.epsilon.unwrap_or(1e-5),
                knobs.seed()?,
            )?;
            CheckReport {
                check: check.name().into(),
                pass: err <= 1e-6,
                statistic: err,
                tolerance: 1e-6,
                stderr: 0.0,
                config,
            }
        }
        Check::Dpp => {
            let control = p.control(knobs, "optimal")?;
            let mu0 = p.initial_cloud(knobs, 500)?;
            let t0 = knobs.t0();
            let theta = knobs.theta.unwrap_or(0.5 * (t0 + horizon));
            let cfg = p.sim_config(knobs, t0, theta)?;
            let paths = knobs.paths.unwrap_or(100);
            let gap = dpp_check(&p.qv, &p.model, &control, &mu0, &cfg, paths)?;
            let c = richardson(&cfg, |c| Ok(dpp_check(&p.qv, &p.model, &control, &mu0, c, paths)?.gap))?;
            let tol = 3.0 * gap.stderr + c * cfg.dt;
            let pass = if p.is_optimal(knobs) {
                gap.gap.abs() <= tol
            } else {
                gap.gap >= -tol
            };
            CheckReport {
                check: check.name().into(),
                pass,
                statistic: gap.gap,
                tolerance: tol,
                stderr: gap.stderr,
                config: json!({ "run": config, "richardson_constant": c }),
            }
        }
        Check::Ito => {
            let control = p.control(knobs, "zero")?;
            let mu0 = p.initial_cloud(knobs, 500)?;
            let t0 = knobs.t0();
            let end = knobs.theta.unwrap_or(t0 + 0.01);
            let phi = match knobs.phi.as_deref().unwrap_or("mean-square") {
                "mean-square" => QuadraticFunctional::mean_square(p.dims().0),
                "variance" => QuadraticFunctional::variance(p.dims().0),
                other => return Err(Error::Parse(format!("unknown --phi `{other}`"))),
            };
            let paths = knobs.paths.unwrap_or(400);
            let cfg = p.sim_config(knobs, t0, end)?;
            let chk = ito_generator_check(&p.model, &control, &mu0, &phi, &cfg, paths)?;
            let delta = end - t0;
            let wide = SimConfig {
                horizon: t0 + 2.0 * delta,
                ..cfg
            };
            let chk2 = ito_generator_check(&p.model, &control, &mu0, &phi, &wide, paths)?;
            let c = (chk2.lhs - chk.lhs).abs() / delta;
            let se = chk.combined_stderr();
            let tol = 3.0 * se + c * (delta + cfg.dt);
            CheckReport {
                check: check.name().into(),
                pass: (chk.lhs - chk.rhs).abs() <= tol,
                statistic: chk.lhs - chk.rhs,
                tolerance: tol,
                stderr: se,
                config: json!({ "run": config, "lhs": chk.lhs, "rhs": chk.rhs, "constant": c }),
            }
        }
        Check::Chaos => {
            let control = p.control(knobs, "optimal")?;
            let init = p.init(knobs)?;
            let levels = knobs.levels()?;
            let t0 = knobs.t0();
            let cfg = p.sim_config(knobs, t0, horizon)?;
            let rows = chaos_convergence(&p.model, &control, &init, &levels, &cfg, knobs.paths.unwrap_or(100))?;
            let refs = levels
                .iter()
                .map(|&n| p.qv.value(t0, &sample_initial(&init, n, cfg.seed)?))
                .collect::<Result<Vec<_>>>()?;
            let trend = chaos_trend(&rows, Some(&refs));
            let last = rows.last().expect("at least two levels");
            CheckReport {
                check: check.name().into(),
                pass: trend.pass,
                statistic: trend.inversions as f64,
                tolerance: 1.0,
                stderr: last.stderr,
                config: json!({ "run": config, "rows": rows, "references": refs, "trend": trend }),
            }
        }
        Check::Flow => {
            let control = p.control(knobs, "optimal")?;
            let mu0 = p.initial_cloud(knobs, 200)?;
            let t0 = knobs.t0();
            let cfg = p.sim_config(knobs, t0, horizon)?;
            let traj = simulate_path(&p.model, &control, &mu0, &cfg, 0)?;
            let theta = match knobs.theta {
                Some(t) => t,
                None => traj.times[traj.times.len() / 2],
            };
            let mut pass = true;
            for th in [t0, theta, horizon] {
                pass &= flow_check(&p.model, &control, &traj, th)?;
            }
            CheckReport {
                check: check.name().into(),
                pass,
                statistic: if pass { 0.0 } else { 1.0 },
                tolerance: 0.0,
                stderr: 0.0,
                config,
            }
        }
    };
    report(&dir, &r)
}

fn cmd_systemic_risk(params: &InterbankArgs, knobs: &Knobs) -> Result<i32> {
    let prm = params.params();
    prm.validate()?;
    let seed = knobs.seed()?;
    let (dy, cost) = systemic_risk_model(&prm)?;
    let p = Problem::from_parts(dy, cost, prm.horizon, knobs)?;
    let dir = knobs.out_dir()?;
    let (dp, dm) = prm.deltas();
    println!("delta+ = {dp:?}");
    println!("delta- = {dm:?}");

    write_solution(&p, &dir)?;
    let mut w = create(&dir, "lambda.csv")?;
    writeln!(w, "t,Lambda_numeric,Lambda_closed,abs_err")?;
    let mut max_err = 0.0f64;
    for (t, s) in p.qv.sol.grid.iter().zip(&p.qv.sol.states) {
        let exact = closed_form_lambda(&prm, *t)?;
        let num = s.lam[(0, 0)];
        max_err = max_err.max((num - exact).abs());
        writeln!(w, "{t:?},{num:?},{exact:?},{:?}", (num - exact).abs())?;
    }
    w.flush()?;
    let lam0 = p.qv.sol.states[0].lam[(0, 0)];
    let lam0_exact = closed_form_lambda(&prm, 0.0)?;
    println!("Lambda(0) = {lam0:?} (closed form {lam0_exact:?})");

    let control = ControlSpec::optimal(p.qv.clone());
    let n = knobs.particles.unwrap_or(2000);
    let mu0 = sample_initial(&InitialLaw::Point(vec![prm.x0]), n, seed)?;
    let cfg = SimConfig::new(0.0, prm.horizon, knobs.dt.unwrap_or(1e-3), seed);
    let paths = knobs.paths.unwrap_or(100);
    write_paths(&p, &control, &mu0, &cfg, paths.min(10), &dir, false)?;
    let est = estimate_cost(&p.model, &control, &mu0, &cfg, paths)?;
    let value = p.qv.value(0.0, &mu0)?;
    let doc = json!({
        "estimate": est,
        "value": value,
        "gap": est.mean - value,
        "config": knobs.to_json(),
    });
    write_json(&dir, "cost.json", &doc)?;
    let summary = json!({
        "params": prm,
        "delta_plus": dp,
        "delta_minus": dm,
        "lambda0_numeric": lam0,
        "lambda0_closed_form": lam0_exact,
        "lambda_max_abs_err": max_err,
        "value": value,
        "cost_estimate": est,
    });
    write_json(&dir, "report.json", &summary)?;
    println!(
        "cost estimate {:?} +/- {:?} vs value {value:?}",
        est.mean, est.stderr
    );
    Ok(EXIT_OK)
}

/// Runs a parsed command and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Solve(mut k) => merge_config(&mut k, None)
            .and_then(|_| k.validate())
            .and_then(|_| cmd_solve(&k)),
        Command::Simulate(mut k) => merge_config(&mut k, None)
            .and_then(|_| k.validate())
            .and_then(|_| cmd_simulate(&k)),
        Command::Cost(mut k) => merge_config(&mut k, None)
            .and_then(|_| k.validate())
            .and_then(|_| cmd_cost(&k)),
        Command::Verify { check, mut knobs } => merge_config(&mut knobs, None)
            .and_then(|_| knobs.validate())
            .and_then(|_| cmd_verify(check, &knobs)),
        Command::SystemicRisk {
            mut params,
            mut knobs,
        } => merge_config(&mut knobs, Some(&mut params))
            .and_then(|_| knobs.validate())
            .and_then(|_| cmd_systemic_risk(&params, &knobs)),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_CONFIG
            }
        }
    }
}
