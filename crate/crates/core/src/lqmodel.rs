//! The linear-quadratic problem: affine coefficients, quadratic costs, the
//! lifted costs on particle clouds and the gain matrices `U, V, S, Z, Y`.
//!
//! Coefficients, for a control map `a` evaluated at `x`:
//!
//! ```text
//! b(x, μ, a)  = b0 + B x + B̄ μ̄ + C a(x)
//! σ(x, μ, a)  = ϑ  + D x + D̄ μ̄ + F a(x)       (one idiosyncratic Brownian motion)
//! σ0(x, μ, a) = ϑ0 + D0 x + D̄0 μ̄ + F0 a(x)    (one common Brownian motion)
//! f(x, μ, a)  = xᵀQ2x + μ̄ᵀQ̄2μ̄ + aᵀR2a + 2xᵀM2a
//! g(x, μ)     = xᵀP2x + μ̄ᵀP̄2μ̄
//! ```

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    all_finite, format_matrix, is_psd, min_eigenvalue, parse_matrix, pairwise_sum, quad_form_slice,
    symmetrize,
};
use crate::measure::{AffineMap, EmpiricalMeasure};

/// Below this, `U_t` and `V_t` are treated as singular.
pub const PD_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LqDynamics {
    pub b0: DVector<f64>,
    pub b: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub theta: DVector<f64>,
    pub d: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub theta0: DVector<f64>,
    pub d0: DMatrix<f64>,
    pub d0_bar: DMatrix<f64>,
    pub f0: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqCost {
    pub q2: DMatrix<f64>,
    pub q2_bar: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub p2_bar: DMatrix<f64>,
    pub m2: DMatrix<f64>,
}

/// `U, V, S, Z, Y` at one time, with the positivity diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrices {
    pub t: f64,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub min_eig_u: f64,
    pub min_eig_v: f64,
    pub pd_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct StandingConditionReport {
    pub p2_psd: bool,
    pub p2_total_psd: bool,
    pub q2_psd: bool,
    pub q2_total_psd: bool,
    pub r2_coercive: bool,
    pub pass: bool,
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: &'static str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::InvalidModel(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !all_finite(m.iter()) {
        return Err(Error::InvalidModel(format!("{what} has non-finite entries")));
    }
    Ok(())
}

fn check_len(v: &DVector<f64>, len: usize, what: &'static str) -> Result<()> {
    if v.len() != len {
        return Err(Error::InvalidModel(format!(
            "{what} has length {}, expected {len}",
            v.len()
        )));
    }
    if !all_finite(v.iter()) {
        return Err(Error::InvalidModel(format!("{what} has non-finite entries")));
    }
    Ok(())
}

impl LqDynamics {
    /// All coefficients zero.
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            b0: DVector::zeros(d),
            b: DMatrix::zeros(d, d),
            b_bar: DMatrix::zeros(d, d),
            c: DMatrix::zeros(d, m),
            theta: DVector::zeros(d),
            d: DMatrix::zeros(d, d),
            d_bar: DMatrix::zeros(d, d),
            f: DMatrix::zeros(d, m),
            theta0: DVector::zeros(d),
            d0: DMatrix::zeros(d, d),
            d0_bar: DMatrix::zeros(d, d),
            f0: DMatrix::zeros(d, m),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.b0.len()
    }

    pub fn control_dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = (self.state_dim(), self.control_dim());
        if d == 0 || m == 0 {
            return Err(Error::InvalidModel("d and m must be at least 1".into()));
        }
        check_len(&self.b0, d, "b0")?;
        check_len(&self.theta, d, "theta")?;
        check_len(&self.theta0, d, "theta0")?;
        for (mat, what) in [
            (&self.b, "B"),
            (&self.b_bar, "Bbar"),
            (&self.d, "D"),
            (&self.d_bar, "Dbar"),
            (&self.d0, "D0"),
            (&self.d0_bar, "D0bar"),
        ] {
            check_shape(mat, d, d, what)?;
        }
        for (mat, what) in [(&self.c, "C"), (&self.f, "F"), (&self.f0, "F0")] {
            check_shape(mat, d, m, what)?;
        }
        Ok(())
    }

    /// Row-wise evaluation of `v + A x + Ā μ̄ + G a`, the common shape of all
    /// three coefficients.
    #[allow(clippy::too_many_arguments)]
    fn affine_eval(
        v: &DVector<f64>,
        a: &DMatrix<f64>,
        a_bar: &DMatrix<f64>,
        g: &DMatrix<f64>,
        x: &[f64],
        mean: &[f64],
        control: &[f64],
        out: &mut [f64],
    ) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = v[r];
            for (c, (xc, mc)) in x.iter().zip(mean).enumerate() {
                acc += a[(r, c)] * xc + a_bar[(r, c)] * mc;
            }
            for (c, ac) in control.iter().enumerate() {
                acc += g[(r, c)] * ac;
            }
            *o = acc;
        }
    }

    pub fn drift_into(&self, x: &[f64], mean: &[f64], control: &[f64], out: &mut [f64]) {
        Self::affine_eval(&self.b0, &self.b, &self.b_bar, &self.c, x, mean, control, out);
    }

    pub fn idio_vol_into(&self, x: &[f64], mean: &[f64], control: &[f64], out: &mut [f64]) {
        Self::affine_eval(&self.theta, &self.d, &self.d_bar, &self.f, x, mean, control, out);
    }

    pub fn common_vol_into(&self, x: &[f64], mean: &[f64], control: &[f64], out: &mut [f64]) {
        Self::affine_eval(
            &self.theta0,
            &self.d0,
            &self.d0_bar,
            &self.f0,
            x,
            mean,
            control,
            out,
        );
    }
}

impl LqCost {
    /// Symmetrizes `Q2, Q̄2, R2, P2, P̄2` and checks shapes.
    pub fn new(
        q2: DMatrix<f64>,
        q2_bar: DMatrix<f64>,
        r2: DMatrix<f64>,
        p2: DMatrix<f64>,
        p2_bar: DMatrix<f64>,
        m2: DMatrix<f64>,
    ) -> Result<Self> {
        let (d, m) = (q2.nrows(), r2.nrows());
        check_shape(&q2, d, d, "Q2")?;
        check_shape(&q2_bar, d, d, "Q2bar")?;
        check_shape(&r2, m, m, "R2")?;
        check_shape(&p2, d, d, "P2")?;
        check_shape(&p2_bar, d, d, "P2bar")?;
        check_shape(&m2, d, m, "M2")?;
        Ok(Self {
            q2: symmetrize(&q2),
            q2_bar: symmetrize(&q2_bar),
            r2: symmetrize(&r2),
            p2: symmetrize(&p2),
            p2_bar: symmetrize(&p2_bar),
            m2,
        })
    }

    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            q2: DMatrix::zeros(d, d),
            q2_bar: DMatrix::zeros(d, d),
            r2: DMatrix::zeros(m, m),
            p2: DMatrix::zeros(d, d),
            p2_bar: DMatrix::zeros(d, d),
            m2: DMatrix::zeros(d, m),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.q2.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.r2.nrows()
    }

    /// Pointwise running cost `f(x, μ, a)`.
    pub fn running(&self, x: &[f64], mean: &[f64], control: &[f64]) -> f64 {
        let mut cross = 0.0;
        for (i, xi) in x.iter().enumerate() {
            for (j, aj) in control.iter().enumerate() {
                cross += xi * self.m2[(i, j)] * aj;
            }
        }
        quad_form_slice(x, &self.q2)
            + quad_form_slice(mean, &self.q2_bar)
            + quad_form_slice(control, &self.r2)
            + 2.0 * cross
    }

    /// Pointwise terminal cost `g(x, μ)`.
    pub fn terminal(&self, x: &[f64], mean: &[f64]) -> f64 {
        quad_form_slice(x, &self.p2) + quad_form_slice(mean, &self.p2_bar)
    }
}

/// `f̂(μ, a) = Var(μ)(Q2) + μ̄ᵀ(Q2 + Q̄2)μ̄ + (a⋆μ)₂(R2) + 2∫xᵀM2 a(x) μ(dx)`.
///
/// The cross term is assembled as `2 Cov_μ(x, a)(M2) + 2 μ̄ᵀM2 ā`, the split
/// that places `M2` in both `S` and `Z`.
pub fn lifted_running_cost(mu: &EmpiricalMeasure, a: &AffineMap, cost: &LqCost) -> Result<f64> {
    let d = mu.dim();
    if cost.state_dim() != d {
        return Err(Error::DimensionMismatch {
            what: "cost state dimension",
            expected: d,
            found: cost.state_dim(),
        });
    }
    if a.output_dim() != cost.control_dim() {
        return Err(Error::DimensionMismatch {
            what: "control dimension",
            expected: cost.control_dim(),
            found: a.output_dim(),
        });
    }
    let img = mu.pushforward(a)?;
    let mean = mu.mean();
    let a_mean = img.mean();
    let m = img.dim();
    let n = mu.len();
    let cov = pairwise_sum(n, |i| {
        let (x, ax) = (mu.point(i), img.point(i));
        let mut acc = 0.0;
        for r in 0..d {
            for c in 0..m {
                acc += (x[r] - mean[r]) * cost.m2[(r, c)] * (ax[c] - a_mean[c]);
            }
        }
        acc
    }) / n as f64;
    let total = &cost.q2 + &cost.q2_bar;
    Ok(mu.variance_form(&cost.q2)?
        + quad_form_slice(mean.as_slice(), &total)
        + img.quad_moment(&cost.r2)?
        + 2.0 * (cov + mean.dot(&(&cost.m2 * &a_mean))))
}

/// `ĝ(μ) = Var(μ)(P2) + μ̄ᵀ(P2 + P̄2)μ̄`.
pub fn lifted_terminal_cost(mu: &EmpiricalMeasure, cost: &LqCost) -> Result<f64> {
    let mean = mu.mean();
    let total = &cost.p2 + &cost.p2_bar;
    Ok(mu.variance_form(&cost.p2)? + quad_form_slice(mean.as_slice(), &total))
}

/// Gain matrices for the Riccati state `(Λ, Γ, γ)`.
///
/// `Z` pairs the common-noise loading `(D0 + D̄0)ᵀΓ` with `F0`, the
/// coefficient of the control in `σ0`; this is what the square completion of
/// the Bellman Hamiltonian produces.
pub fn gains(
    t: f64,
    lam: &DMatrix<f64>,
    gam: &DMatrix<f64>,
    gamma: &DVector<f64>,
    dyn_: &LqDynamics,
    cost: &LqCost,
) -> GainMatrices {
    let f_t = dyn_.f.transpose();
    let f0_t = dyn_.f0.transpose();
    let u = symmetrize(&(&f_t * lam * &dyn_.f + &f0_t * lam * &dyn_.f0 + &cost.r2));
    let v = symmetrize(&(&f_t * lam * &dyn_.f + &f0_t * gam * &dyn_.f0 + &cost.r2));
    let s = dyn_.d.transpose() * lam * &dyn_.f
        + dyn_.d0.transpose() * lam * &dyn_.f0
        + lam * &dyn_.c
        + &cost.m2;
    let z = (&dyn_.d + &dyn_.d_bar).transpose() * lam * &dyn_.f
        + (&dyn_.d0 + &dyn_.d0_bar).transpose() * gam * &dyn_.f0
        + gam * &dyn_.c
        + &cost.m2;
    let y = dyn_.c.transpose() * gamma
        + 2.0 * (&f_t * lam * &dyn_.theta)
        + 2.0 * (&f0_t * gam * &dyn_.theta0);
    let min_eig_u = min_eigenvalue(&u);
    let min_eig_v = min_eigenvalue(&v);
    GainMatrices {
        t,
        u,
        v,
        s,
        z,
        y,
        min_eig_u,
        min_eig_v,
        pd_ok: min_eig_u > PD_THRESHOLD && min_eig_v > PD_THRESHOLD,
    }
}

/// Eigenvalue test of `P2 ≥ 0, P2 + P̄2 ≥ 0, Q2 ≥ 0, Q2 + Q̄2 ≥ 0, R2 ≥ δ I`.
pub fn check_standing_condition(cost: &LqCost, delta: f64) -> StandingConditionReport {
    const TOL: f64 = 1e-12;
    let p2_psd = is_psd(&cost.p2, TOL);
    let p2_total_psd = is_psd(&(&cost.p2 + &cost.p2_bar), TOL);
    let q2_psd = is_psd(&cost.q2, TOL);
    let q2_total_psd = is_psd(&(&cost.q2 + &cost.q2_bar), TOL);
    let r2_coercive = delta > 0.0 && min_eigenvalue(&cost.r2) >= delta - TOL;
    StandingConditionReport {
        p2_psd,
        p2_total_psd,
        q2_psd,
        q2_total_psd,
        r2_coercive,
        pass: p2_psd && p2_total_psd && q2_psd && q2_total_psd && r2_coercive,
    }
}

/// A parsed model file: the problem plus its horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub dynamics: LqDynamics,
    pub cost: LqCost,
    pub horizon: f64,
}

const MODEL_KEYS: [&str; 21] = [
    "d", "m", "T", "b0", "B", "Bbar", "C", "theta", "D", "Dbar", "F", "theta0", "D0", "D0bar",
    "F0", "Q2", "Q2bar", "R2", "P2", "P2bar", "M2",
];

/// Parses `key = value` lines, ignoring blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: HashMap<String, String> = HashMap::new();
        for (k, v) in parse_key_values(text)? {
            if !MODEL_KEYS.contains(&k.as_str()) {
                return Err(Error::Parse(format!("unknown model key `{k}`")));
            }
            if kv.insert(k.clone(), v).is_some() {
                return Err(Error::Parse(format!("duplicate model key `{k}`")));
            }
        }
        let int = |key: &str| -> Result<usize> {
            kv.get(key)
                .ok_or_else(|| Error::Parse(format!("missing required key `{key}`")))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("`{key}`: {e}")))
        };
        let d = int("d")?;
        let m = int("m")?;
        let horizon: f64 = kv
            .get("T")
            .ok_or_else(|| Error::Parse("missing required key `T`".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("`T`: {e}")))?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Parse("`T` must be positive".into()));
        }
        let mat = |key: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            match kv.get(key) {
                None => Ok(DMatrix::zeros(rows, cols)),
                Some(v) => {
                    let parsed = parse_matrix(v).map_err(|e| Error::Parse(format!("`{key}`: {e}")))?;
                    if parsed.nrows() != rows || parsed.ncols() != cols {
                        return Err(Error::Parse(format!(
                            "`{key}` is {}x{}, expected {rows}x{cols}",
                            parsed.nrows(),
                            parsed.ncols()
                        )));
                    }
                    Ok(parsed)
                }
            }
        };
        // Vectors may be written as one row or one column.
        let vec = |key: &str| -> Result<DVector<f64>> {
            match kv.get(key) {
                None => Ok(DVector::zeros(d)),
                Some(v) => {
                    let parsed = parse_matrix(v).map_err(|e| Error::Parse(format!("`{key}`: {e}")))?;
                    if parsed.len() != d || (parsed.nrows() != 1 && parsed.ncols() != 1) {
                        return Err(Error::Parse(format!("`{key}` must hold {d} entries")));
                    }
                    Ok(DVector::from_iterator(d, parsed.iter().copied()))
                }
            }
        };
        let dynamics = LqDynamics {
            b0: vec("b0")?,
            b: mat("B", d, d)?,
            b_bar: mat("Bbar", d, d)?,
            c: mat("C", d, m)?,
            theta: vec("theta")?,
            d: mat("D", d, d)?,
            d_bar: mat("Dbar", d, d)?,
            f: mat("F", d, m)?,
            theta0: vec("theta0")?,
            d0: mat("D0", d, d)?,
            d0_bar: mat("D0bar", d, d)?,
            f0: mat("F0", d, m)?,
        };
        dynamics.validate()?;
        let cost = LqCost::new(
            mat("Q2", d, d)?,
            mat("Q2bar", d, d)?,
            mat("R2", m, m)?,
            mat("P2", d, d)?,
            mat("P2bar", d, d)?,
            mat("M2", d, m)?,
        )?;
        Ok(Self {
            dynamics,
            cost,
            horizon,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes in the model-file syntax.
    pub fn to_text(&self) -> String {
        let dy = &self.dynamics;
        let c = &self.cost;
        let row = |v: &DVector<f64>| format_matrix(&DMatrix::from_row_slice(1, v.len(), v.as_slice()));
        let mut lines = vec![
            format!("d = {}", dy.state_dim()),
            format!("m = {}", dy.control_dim()),
            format!("T = {:?}", self.horizon),
            format!("b0 = {}", row(&dy.b0)),
        ];
        for (k, mtx) in [("B", &dy.b), ("Bbar", &dy.b_bar), ("C", &dy.c)] {
            lines.push(format!("{k} = {}", format_matrix(mtx)));
        }
        lines.push(format!("theta = {}", row(&dy.theta)));
        for (k, mtx) in [("D", &dy.d), ("Dbar", &dy.d_bar), ("F", &dy.f)] {
            lines.push(format!("{k} = {}", format_matrix(mtx)));
        }
        lines.push(format!("theta0 = {}", row(&dy.theta0)));
        for (k, mtx) in [
            ("D0", &dy.d0),
            ("D0bar", &dy.d0_bar),
            ("F0", &dy.f0),
            ("Q2", &c.q2),
            ("Q2bar", &c.q2_bar),
            ("R2", &c.r2),
            ("P2", &c.p2),
            ("P2bar", &c.p2_bar),
            ("M2", &c.m2),
        ] {
            lines.push(format!("{k} = {}", format_matrix(mtx)));
        }
        lines.join("\n") + "\n"
    }
}
