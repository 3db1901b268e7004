//! The quadratic value function, its derivatives in the measure argument and
//! the optimal affine feedback.
//!
//! ```text
//! w(t, μ)          = Var(μ)(Λ) + μ̄ᵀΓμ̄ + μ̄ᵀγ + χ
//! ∂_μ w(t, μ)(x)   = 2Λ(x − μ̄) + 2Γμ̄ + γ
//! ∂_x∂_μ w         = 2Λ
//! ∂²_μ w(x, x′)    = 2(Γ − Λ)
//! a*(t, x, μ)      = −U⁻¹Sᵀ(x − μ̄) − V⁻¹Zᵀμ̄ − ½V⁻¹Y
//! ```

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, pairwise_sum, quad_form_slice};
use crate::lqmodel::{lifted_terminal_cost, GainMatrices, LqCost, LqDynamics};
use crate::measure::{AffineMap, EmpiricalMeasure};
use crate::riccati::{RiccatiSolution, RiccatiState, SystemicRiskParams};

/// Candidate value function built from a Riccati solution.
#[derive(Debug, Clone)]
pub struct QuadraticValue {
    pub sol: RiccatiSolution,
}

/// The four derivatives of `w` at `(t, μ)`, with `∂_μ w` taken at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueDerivatives {
    pub d_t: f64,
    pub d_mu: DVector<f64>,
    pub dx_dmu: DMatrix<f64>,
    pub d2_mu: DMatrix<f64>,
}

/// Snapshot of the optimal feedback `a*(t, x, μ) = K1(x − μ̄) + K2 μ̄ + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGains {
    pub t: f64,
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
    pub k: DVector<f64>,
}

impl FeedbackGains {
    pub fn zeros(t: f64, d: usize, m: usize) -> Self {
        Self {
            t,
            k1: DMatrix::zeros(m, d),
            k2: DMatrix::zeros(m, d),
            k: DVector::zeros(m),
        }
    }

    pub fn apply(&self, x: &[f64], mean: &[f64]) -> DVector<f64> {
        let x = DVector::from_column_slice(x);
        let mean = DVector::from_column_slice(mean);
        &self.k1 * (&x - &mean) + &self.k2 * &mean + &self.k
    }

    /// The control map `x ↦ a*(t, x, μ)` for a fixed mean.
    pub fn to_affine(&self, mean: &DVector<f64>) -> AffineMap {
        AffineMap {
            linear: self.k1.clone(),
            offset: (&self.k2 - &self.k1) * mean + &self.k,
        }
    }

    /// Operator 2-norm of `K1`, the Lipschitz constant of `a*` in `x`.
    pub fn lipschitz_x(&self) -> f64 {
        self.k1.clone().svd(false, false).singular_values.max()
    }
}

/// Solves `M X = B` for symmetric positive definite `M`.
fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>, t: f64, which: &'static str) -> Result<DMatrix<f64>> {
    let chol = cholesky(m).ok_or_else(|| Error::NonPositiveGain {
        t,
        which,
        min_eig: crate::linalg::min_eigenvalue(m),
    })?;
    Ok(chol.solve(rhs))
}

/// Optimal feedback from gain matrices, by Cholesky solves with `U` and `V`.
pub fn feedback_from_gains(g: &GainMatrices) -> Result<FeedbackGains> {
    if !g.pd_ok {
        let (which, min_eig) = if g.min_eig_u <= g.min_eig_v {
            ("U", g.min_eig_u)
        } else {
            ("V", g.min_eig_v)
        };
        return Err(Error::NonPositiveGain { t: g.t, which, min_eig });
    }
    let k1 = -spd_solve(&g.u, &g.s.transpose(), g.t, "U")?;
    let k2 = -spd_solve(&g.v, &g.z.transpose(), g.t, "V")?;
    let y = DMatrix::from_column_slice(g.y.len(), 1, g.y.as_slice());
    let k = -0.5 * spd_solve(&g.v, &y, g.t, "V")?.column(0).into_owned();
    Ok(FeedbackGains { t: g.t, k1, k2, k })
}

/// `G_t^μ(a) = Var(a⋆μ)(U) + āᵀVā + 2∫(x − μ̄)ᵀS a(x) μ(dx) + 2μ̄ᵀZā + Yᵀā`,
/// the control-dependent part of the Bellman Hamiltonian.
pub fn control_objective(g: &GainMatrices, mu: &EmpiricalMeasure, a: &AffineMap) -> Result<f64> {
    let img = mu.pushforward(a)?;
    let mean = mu.mean();
    let a_mean = img.mean();
    let (d, n) = (mu.dim(), mu.len());
    let cross = pairwise_sum(n, |i| {
        let (x, ax) = (mu.point(i), img.point(i));
        let mut acc = 0.0;
        for r in 0..d {
            for (c, a) in ax.iter().enumerate() {
                acc += (x[r] - mean[r]) * g.s[(r, c)] * a;
            }
        }
        acc
    }) / n as f64;
    Ok(img.variance_form(&g.u)?
        + quad_form_slice(a_mean.as_slice(), &g.v)
        + 2.0 * cross
        + 2.0 * mean.dot(&(&g.z * &a_mean))
        + g.y.dot(&a_mean))
}

impl QuadraticValue {
    pub fn new(sol: RiccatiSolution) -> Self {
        Self { sol }
    }

    pub fn dynamics(&self) -> &LqDynamics {
        &self.sol.dynamics
    }

    pub fn cost(&self) -> &LqCost {
        &self.sol.cost
    }

    pub fn horizon(&self) -> f64 {
        self.sol.horizon()
    }

    fn check_dim(&self, mu: &EmpiricalMeasure) -> Result<()> {
        if mu.dim() != self.sol.state_dim() {
            return Err(Error::DimensionMismatch {
                what: "measure dimension",
                expected: self.sol.state_dim(),
                found: mu.dim(),
            });
        }
        Ok(())
    }

    /// Evaluates the ansatz with the given Riccati state.
    pub fn value_with(state: &RiccatiState, mu: &EmpiricalMeasure) -> Result<f64> {
        let mean = mu.mean();
        Ok(mu.variance_form(&state.lam)?
            + quad_form_slice(mean.as_slice(), &state.gam)
            + mean.dot(&state.gamma)
            + state.chi)
    }

    /// `w(t, μ)`.
    pub fn value(&self, t: f64, mu: &EmpiricalMeasure) -> Result<f64> {
        self.check_dim(mu)?;
        if t == self.horizon() {
            // Terminal data hold exactly at the last node.
            return lifted_terminal_cost(mu, self.cost()).and_then(|g| {
                let s = self.sol.eval(t)?;
                let w = Self::value_with(&s, mu)?;
                debug_assert!((w - g).abs() <= 1e-12 * (1.0 + g.abs()));
                Ok(w)
            });
        }
        Self::value_with(&self.sol.eval(t)?, mu)
    }

    /// `∂_t w(t, μ)` from the Riccati right-hand sides.
    pub fn time_derivative(&self, t: f64, mu: &EmpiricalMeasure) -> Result<f64> {
        self.check_dim(mu)?;
        let ds = self.sol.derivative(t)?;
        Self::value_with(&ds, mu)
    }

    /// `∂_μ w(t, μ)(x)` given the mean of `μ`.
    pub fn measure_derivative(
        state: &RiccatiState,
        mean: &DVector<f64>,
        x: &[f64],
    ) -> DVector<f64> {
        let x = DVector::from_column_slice(x);
        2.0 * (&state.lam * (x - mean)) + 2.0 * (&state.gam * mean) + &state.gamma
    }

    pub fn value_derivatives(
        &self,
        t: f64,
        mu: &EmpiricalMeasure,
        x: &[f64],
        _xp: &[f64],
    ) -> Result<ValueDerivatives> {
        self.check_dim(mu)?;
        let state = self.sol.eval(t)?;
        let mean = mu.mean();
        Ok(ValueDerivatives {
            d_t: self.time_derivative(t, mu)?,
            d_mu: Self::measure_derivative(&state, &mean, x),
            dx_dmu: 2.0 * &state.lam,
            d2_mu: 2.0 * (&state.gam - &state.lam),
        })
    }

    /// Optimal feedback gains at time `t`.
    pub fn optimal_feedback(&self, t: f64) -> Result<FeedbackGains> {
        feedback_from_gains(&self.sol.gains_at(t)?)
    }

    /// Constant `C` with `|w(t, μ)| ≤ C(1 + ‖μ‖₂²)` on `[0, T]`, built from the
    /// node-wise norms of the Riccati state.
    pub fn growth_constant(&self) -> f64 {
        self.sol
            .states
            .iter()
            .map(|s| {
                let lam = s.lam.clone().svd(false, false).singular_values.max();
                let gam = s.gam.clone().svd(false, false).singular_values.max();
                // Var(μ)(Λ) ≤ ‖Λ‖‖μ‖₂², |μ̄ᵀΓμ̄| ≤ ‖Γ‖‖μ‖₂², |μ̄ᵀγ| ≤ |γ|(1 + ‖μ‖₂²)/2.
                lam + gam + s.gamma.norm() + s.chi.abs()
            })
            .fold(0.0, f64::max)
            * 1.0001
    }

    /// `2‖Λ‖ + 2‖Γ‖ + |γ|` at the interpolated state, the constant of the
    /// linear growth bound on `∂_μ w`.
    pub fn gradient_growth_constant(&self, t: f64) -> Result<f64> {
        let s = self.sol.eval(t)?;
        let lam = s.lam.clone().svd(false, false).singular_values.max();
        let gam = s.gam.clone().svd(false, false).singular_values.max();
        Ok(2.0 * lam + 2.0 * gam + s.gamma.norm())
    }

    /// Writes the feedback on the Riccati grid: `t, K1_*, K2_*, k_*`.
    pub fn write_policy_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (d, m) = (self.sol.state_dim(), self.dynamics().control_dim());
        let mut header = vec!["t".to_string()];
        for name in ["K1", "K2"] {
            for i in 0..m {
                for j in 0..d {
                    header.push(format!("{name}_{i}{j}"));
                }
            }
        }
        header.extend((0..m).map(|i| format!("k_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for &t in &self.sol.grid {
            let g = self.optimal_feedback(t)?;
            let mut row = vec![format!("{t:?}")];
            for mat in [&g.k1, &g.k2] {
                for i in 0..m {
                    for j in 0..d {
                        row.push(format!("{:?}", mat[(i, j)]));
                    }
                }
            }
            row.extend(g.k.iter().map(|v| format!("{v:?}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Original interbank control `α = α̃ − q(x − μ̄)` from the transformed
/// feedback `α̃`.
pub fn recover_original(
    gains: &FeedbackGains,
    p: &SystemicRiskParams,
    x: f64,
    mean: f64,
) -> f64 {
    let transformed = gains.apply(&[x], &[mean])[0];
    transformed - p.q * (x - mean)
}
