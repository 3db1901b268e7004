//! Backward integration of the coupled Riccati system for `(Λ, Γ, γ, χ)` and
//! the closed-form interbank solution.
//!
//! With `U, V, S, Z, Y` from [`gains`], the right-hand sides are
//!
//! ```text
//! Λ' = −[Q2 + DᵀΛD + D0ᵀΛD0 + ΛB + BᵀΛ − S U⁻¹ Sᵀ],                     Λ(T) = P2
//! Γ' = −[Q2 + Q̄2 + (D+D̄)ᵀΛ(D+D̄) + (D0+D̄0)ᵀΓ(D0+D̄0)
//!        + Γ(B+B̄) + (B+B̄)ᵀΓ − Z V⁻¹ Zᵀ],                                Γ(T) = P2 + P̄2
//! γ' = −[(B+B̄)ᵀγ − Z V⁻¹ Y + 2(D+D̄)ᵀΛϑ + 2(D0+D̄0)ᵀΓϑ0 + 2Γb0],        γ(T) = 0
//! χ' = −[−¼ Yᵀ V⁻¹ Y + γᵀb0 + ϑᵀΛϑ + ϑ0ᵀΓϑ0],                           χ(T) = 0
//! ```

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, max_abs, symmetrize_in_place};
use crate::lqmodel::{gains, GainMatrices, LqCost, LqDynamics, PD_THRESHOLD};

const BLOWUP: f64 = 1e12;

/// One node of the Riccati system (or its time derivative).
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiState {
    pub lam: DMatrix<f64>,
    pub gam: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub chi: f64,
}

impl RiccatiState {
    pub fn zeros(d: usize) -> Self {
        Self {
            lam: DMatrix::zeros(d, d),
            gam: DMatrix::zeros(d, d),
            gamma: DVector::zeros(d),
            chi: 0.0,
        }
    }

    /// `Λ = P2, Γ = P2 + P̄2, γ = 0, χ = 0`.
    pub fn terminal(cost: &LqCost) -> Self {
        Self {
            lam: cost.p2.clone(),
            gam: &cost.p2 + &cost.p2_bar,
            gamma: DVector::zeros(cost.state_dim()),
            chi: 0.0,
        }
    }

    /// `self + h · other`.
    fn axpy(&self, h: f64, other: &RiccatiState) -> RiccatiState {
        RiccatiState {
            lam: &self.lam + &other.lam * h,
            gam: &self.gam + &other.gam * h,
            gamma: &self.gamma + &other.gamma * h,
            chi: self.chi + h * other.chi,
        }
    }

    fn symmetrize(&mut self) {
        symmetrize_in_place(&mut self.lam);
        symmetrize_in_place(&mut self.gam);
    }

    fn max_abs(&self) -> f64 {
        max_abs(&self.lam)
            .max(max_abs(&self.gam))
            .max(self.gamma.amax())
            .max(self.chi.abs())
    }

    fn is_finite(&self) -> bool {
        self.lam.iter().all(|v| v.is_finite())
            && self.gam.iter().all(|v| v.is_finite())
            && self.gamma.iter().all(|v| v.is_finite())
            && self.chi.is_finite()
    }

    /// Convex combination `(1 − w)·self + w·other`.
    fn lerp(&self, other: &RiccatiState, w: f64) -> RiccatiState {
        RiccatiState {
            lam: &self.lam * (1.0 - w) + &other.lam * w,
            gam: &self.gam * (1.0 - w) + &other.gam * w,
            gamma: &self.gamma * (1.0 - w) + &other.gamma * w,
            chi: self.chi * (1.0 - w) + other.chi * w,
        }
    }
}

fn check_gain(g: &GainMatrices) -> Result<()> {
    if g.min_eig_u <= PD_THRESHOLD || !g.min_eig_u.is_finite() {
        return Err(Error::NonPositiveGain {
            t: g.t,
            which: "U",
            min_eig: g.min_eig_u,
        });
    }
    if g.min_eig_v <= PD_THRESHOLD || !g.min_eig_v.is_finite() {
        return Err(Error::NonPositiveGain {
            t: g.t,
            which: "V",
            min_eig: g.min_eig_v,
        });
    }
    Ok(())
}

/// Solves `M X = B` with `M` symmetric positive definite.
fn spd_solve(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    t: f64,
    which: &'static str,
) -> Result<DMatrix<f64>> {
    let chol = cholesky(m).ok_or_else(|| Error::NonPositiveGain {
        t,
        which,
        min_eig: crate::linalg::min_eigenvalue(m),
    })?;
    Ok(chol.solve(rhs))
}

/// Time derivative of the Riccati state at `(t, state)`.
pub fn riccati_rhs(
    t: f64,
    state: &RiccatiState,
    dyn_: &LqDynamics,
    cost: &LqCost,
) -> Result<RiccatiState> {
    let g = gains(t, &state.lam, &state.gam, &state.gamma, dyn_, cost);
    check_gain(&g)?;
    let (lam, gam, gamma) = (&state.lam, &state.gam, &state.gamma);
    let b_tot = &dyn_.b + &dyn_.b_bar;
    let d_tot = &dyn_.d + &dyn_.d_bar;
    let d0_tot = &dyn_.d0 + &dyn_.d0_bar;

    let u_inv_st = spd_solve(&g.u, &g.s.transpose(), t, "U")?;
    let v_inv_zt = spd_solve(&g.v, &g.z.transpose(), t, "V")?;
    let y_mat = DMatrix::from_column_slice(g.y.len(), 1, g.y.as_slice());
    let v_inv_y = spd_solve(&g.v, &y_mat, t, "V")?.column(0).into_owned();

    let mut lam_dot = -(&cost.q2
        + dyn_.d.transpose() * lam * &dyn_.d
        + dyn_.d0.transpose() * lam * &dyn_.d0
        + lam * &dyn_.b
        + dyn_.b.transpose() * lam
        - &g.s * &u_inv_st);
    let mut gam_dot = -(&cost.q2
        + &cost.q2_bar
        + d_tot.transpose() * lam * &d_tot
        + d0_tot.transpose() * gam * &d0_tot
        + gam.transpose() * &b_tot
        + b_tot.transpose() * gam
        - &g.z * &v_inv_zt);
    let gamma_dot = -(b_tot.transpose() * gamma - &g.z * &v_inv_y
        + 2.0 * (d_tot.transpose() * lam * &dyn_.theta)
        + 2.0 * (d0_tot.transpose() * gam * &dyn_.theta0)
        + 2.0 * (gam * &dyn_.b0));
    let chi_dot = -(-0.25 * g.y.dot(&v_inv_y)
        + gamma.dot(&dyn_.b0)
        + dyn_.theta.dot(&(lam * &dyn_.theta))
        + dyn_.theta0.dot(&(gam * &dyn_.theta0)));
    symmetrize_in_place(&mut lam_dot);
    symmetrize_in_place(&mut gam_dot);
    Ok(RiccatiState {
        lam: lam_dot,
        gam: gam_dot,
        gamma: gamma_dot,
        chi: chi_dot,
    })
}

/// Riccati trajectory on a uniform grid `0 = t₀ < … < t_K = T`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: Vec<f64>,
    pub states: Vec<RiccatiState>,
    /// `(min eig U, min eig V)` per node.
    pub pd_history: Vec<(f64, f64)>,
    pub dynamics: LqDynamics,
    pub cost: LqCost,
}

/// Number of uniform steps of size `h` covering `[0, horizon]`.
pub fn grid_steps(horizon: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite() && horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!(
            "need positive step and horizon, got h = {h}, T = {horizon}"
        )));
    }
    let k = (horizon / h).round();
    if (k * h - horizon).abs() > 1e-9 * horizon {
        return Err(Error::Domain(format!("step {h} does not divide horizon {horizon}")));
    }
    Ok(k as usize)
}

/// Classical RK4, backward from `T`, with `Λ, Γ` symmetrized after each stage.
pub fn solve_riccati(
    dyn_: &LqDynamics,
    cost: &LqCost,
    horizon: f64,
    h: f64,
) -> Result<RiccatiSolution> {
    dyn_.validate()?;
    if cost.state_dim() != dyn_.state_dim() || cost.control_dim() != dyn_.control_dim() {
        return Err(Error::InvalidModel(
            "cost and dynamics dimensions disagree".into(),
        ));
    }
    let k = grid_steps(horizon, h)?;
    if k < 2 {
        return Err(Error::Domain("the Riccati grid needs at least two steps".into()));
    }
    let step = horizon / k as f64;
    let mut grid: Vec<f64> = (0..=k).map(|i| i as f64 * step).collect();
    grid[k] = horizon;

    let mut states = vec![RiccatiState::zeros(dyn_.state_dim()); k + 1];
    let mut pd_history = vec![(0.0, 0.0); k + 1];
    let mut y = RiccatiState::terminal(cost);
    y.symmetrize();

    let record = |i: usize, y: &RiccatiState, pd: &mut Vec<(f64, f64)>| -> Result<()> {
        let g = gains(grid[i], &y.lam, &y.gam, &y.gamma, dyn_, cost);
        check_gain(&g)?;
        pd[i] = (g.min_eig_u, g.min_eig_v);
        Ok(())
    };
    record(k, &y, &mut pd_history)?;
    states[k] = y.clone();

    // Stepping in τ = T − t: dy/dτ = −rhs(t).
    let neg = -step;
    for i in (0..k).rev() {
        let t = grid[i + 1];
        let t_mid = t - 0.5 * step;
        let t_next = grid[i];
        let k1 = riccati_rhs(t, &y, dyn_, cost)?;
        let mut y2 = y.axpy(0.5 * neg, &k1);
        y2.symmetrize();
        let k2 = riccati_rhs(t_mid, &y2, dyn_, cost)?;
        let mut y3 = y.axpy(0.5 * neg, &k2);
        y3.symmetrize();
        let k3 = riccati_rhs(t_mid, &y3, dyn_, cost)?;
        let mut y4 = y.axpy(neg, &k3);
        y4.symmetrize();
        let k4 = riccati_rhs(t_next, &y4, dyn_, cost)?;

        let mut next = y
            .axpy(neg / 6.0, &k1)
            .axpy(neg / 3.0, &k2)
            .axpy(neg / 3.0, &k3)
            .axpy(neg / 6.0, &k4);
        next.symmetrize();
        if !next.is_finite() || next.max_abs() > BLOWUP {
            return Err(Error::NumericalBlowup {
                t: t_next,
                path: None,
            });
        }
        record(i, &next, &mut pd_history)?;
        states[i] = next.clone();
        y = next;
    }
    Ok(RiccatiSolution {
        grid,
        states,
        pd_history,
        dynamics: dyn_.clone(),
        cost: cost.clone(),
    })
}

impl RiccatiSolution {
    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("grid is non-empty")
    }

    pub fn step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let horizon = self.horizon();
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                lo: 0.0,
                hi: horizon,
            });
        }
        Ok(())
    }

    /// Linear interpolation between bracketing nodes; exact at nodes.
    pub fn eval(&self, t: f64) -> Result<RiccatiState> {
        self.check_time(t)?;
        let k = self.grid.len() - 1;
        let mut i = ((t / self.step()).floor() as usize).min(k);
        while i > 0 && self.grid[i] > t {
            i -= 1;
        }
        while i < k && self.grid[i + 1] <= t {
            i += 1;
        }
        if self.grid[i] == t || i == k {
            return Ok(self.states[i].clone());
        }
        let w = (t - self.grid[i]) / (self.grid[i + 1] - self.grid[i]);
        Ok(self.states[i].lerp(&self.states[i + 1], w))
    }

    /// Exact right-hand side evaluated at the interpolated state.
    pub fn derivative(&self, t: f64) -> Result<RiccatiState> {
        let s = self.eval(t)?;
        riccati_rhs(t, &s, &self.dynamics, &self.cost)
    }

    /// Gain matrices at the interpolated state.
    pub fn gains_at(&self, t: f64) -> Result<GainMatrices> {
        let s = self.eval(t)?;
        Ok(gains(t, &s.lam, &s.gam, &s.gamma, &self.dynamics, &self.cost))
    }

    /// Writes `riccati.csv`: `t, Lam_ij…, Gam_ij…, gam_i…, chi, minEigU, minEigV`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.state_dim();
        let mut header = vec!["t".to_string()];
        for name in ["Lam", "Gam"] {
            for i in 0..d {
                for j in 0..d {
                    header.push(format!("{name}_{i}{j}"));
                }
            }
        }
        header.extend((0..d).map(|i| format!("gam_{i}")));
        header.extend(["chi", "minEigU", "minEigV"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for ((t, s), (eu, ev)) in self.grid.iter().zip(&self.states).zip(&self.pd_history) {
            let mut row = vec![format!("{t:?}")];
            for m in [&s.lam, &s.gam] {
                for i in 0..d {
                    for j in 0..d {
                        row.push(format!("{:?}", m[(i, j)]));
                    }
                }
            }
            row.extend(s.gamma.iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", s.chi));
            row.push(format!("{eu:?}"));
            row.push(format!("{ev:?}"));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Parameters of the interbank lending model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SystemicRiskParams {
    pub kappa: f64,
    pub q: f64,
    pub eta: f64,
    pub c: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub rho: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl Default for SystemicRiskParams {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            q: 0.5,
            eta: 1.0,
            c: 1.0,
            sigma0: 1.0,
            sigma1: 0.0,
            rho: 0.5,
            horizon: 1.0,
            x0: 0.0,
        }
    }
}

impl SystemicRiskParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.kappa,
            self.q,
            self.eta,
            self.c,
            self.sigma0,
            self.sigma1,
            self.rho,
            self.horizon,
            self.x0,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite interbank parameter".into()));
        }
        let checks = [
            (self.kappa >= 0.0, "kappa >= 0"),
            (self.q >= 0.0, "q >= 0"),
            (self.eta > 0.0, "eta > 0"),
            (self.c > 0.0, "c > 0"),
            (self.sigma0 > 0.0, "sigma0 > 0"),
            ((-1.0..=1.0).contains(&self.rho), "rho in [-1, 1]"),
            (self.horizon > 0.0, "T > 0"),
            (self.q * self.q <= self.eta, "q^2 <= eta"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(Error::Domain(format!("interbank parameters violate {what}")));
            }
        }
        Ok(())
    }

    /// `κ + q − σ1²/2`.
    fn reversion(&self) -> f64 {
        self.kappa + self.q - 0.5 * self.sigma1 * self.sigma1
    }

    /// Roots `δ⁺, δ⁻` of `δ² + 2(κ + q − σ1²/2)δ − (η − q²) = 0`.
    pub fn deltas(&self) -> (f64, f64) {
        let a = self.reversion();
        let disc = (a * a + self.eta - self.q * self.q).sqrt();
        (-a + disc, -a - disc)
    }

    /// Dynamics in the original control `α`: drift `κ(μ̄ − x) + α`.
    pub fn original_dynamics(&self) -> LqDynamics {
        let mut dy = transformed_dynamics(self);
        dy.b[(0, 0)] = -self.kappa;
        dy.b_bar[(0, 0)] = self.kappa;
        dy
    }
}

fn transformed_dynamics(p: &SystemicRiskParams) -> LqDynamics {
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let v = |x: f64| DVector::from_element(1, x);
    let idio = (1.0 - p.rho * p.rho).max(0.0).sqrt();
    LqDynamics {
        b0: v(0.0),
        b: s(-(p.kappa + p.q)),
        b_bar: s(p.kappa + p.q),
        c: s(1.0),
        theta: v(p.sigma0 * idio),
        d: s(p.sigma1 * idio),
        d_bar: s(0.0),
        f: s(0.0),
        theta0: v(p.sigma0 * p.rho),
        d0: s(p.sigma1 * p.rho),
        d0_bar: s(0.0),
        f0: s(0.0),
    }
}

/// LQ data of the interbank model written in the completed-square control
/// `α̃ = α − q(μ̄ − x)`, for which `M2 = 0`.
pub fn systemic_risk_model(p: &SystemicRiskParams) -> Result<(LqDynamics, LqCost)> {
    p.validate()?;
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    let half_gap = 0.5 * (p.eta - p.q * p.q);
    let cost = LqCost::new(
        s(half_gap),
        s(-half_gap),
        s(0.5),
        s(0.5 * p.c),
        s(-0.5 * p.c),
        s(0.0),
    )?;
    Ok((transformed_dynamics(p), cost))
}

/// Explicit `Λ(t)` of the interbank model.
pub fn closed_form_lambda(p: &SystemicRiskParams, t: f64) -> Result<f64> {
    if p.q * p.q > p.eta {
        return Err(Error::Domain(format!(
            "closed form needs q^2 <= eta, got q = {}, eta = {}",
            p.q, p.eta
        )));
    }
    if !(0.0..=p.horizon).contains(&t) {
        return Err(Error::TimeOutOfRange {
            t,
            lo: 0.0,
            hi: p.horizon,
        });
    }
    let (dp, dm) = p.deltas();
    let e = ((dp - dm) * (p.horizon - t)).exp();
    let gap = p.eta - p.q * p.q;
    let num = gap * (e - 1.0) + p.c * (dp * e - dm);
    let den = p.c * (e - 1.0) + dp - dm * e;
    Ok(0.5 * num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interbank(sigma1: f64) -> SystemicRiskParams {
        SystemicRiskParams {
            kappa: 1.0,
            q: 0.0,
            eta: 1.0,
            c: 1.0,
            sigma0: 1.0,
            sigma1,
            rho: 0.5,
            horizon: 1.0,
            x0: 0.0,
        }
    }

    #[test]
    fn closed_form_terminal_value() {
        let p = SystemicRiskParams::default();
        assert!((closed_form_lambda(&p, p.horizon).unwrap() - 0.5 * p.c).abs() < 1e-15);
    }

    #[test]
    fn closed_form_zero_data() {
        // eta = q^2 and c -> 0 gives the zero solution. c = 0 is outside the
        // parameter domain, so only the formula is exercised here.
        let p = SystemicRiskParams {
            eta: 0.25,
            q: 0.5,
            c: 0.0,
            ..SystemicRiskParams::default()
        };
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(closed_form_lambda(&p, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn closed_form_domain_errors() {
        let p = SystemicRiskParams {
            q: 2.0,
            ..SystemicRiskParams::default()
        };
        assert!(matches!(closed_form_lambda(&p, 0.0), Err(Error::Domain(_))));
        assert!(systemic_risk_model(&p).is_err());
        let ok = SystemicRiskParams::default();
        assert!(closed_form_lambda(&ok, 1.5).is_err());
    }

    #[test]
    fn model_coefficients() {
        let p = SystemicRiskParams {
            kappa: 1.0,
            q: 0.5,
            eta: 1.0,
            ..SystemicRiskParams::default()
        };
        let (dy, cost) = systemic_risk_model(&p).unwrap();
        assert_eq!(dy.b[(0, 0)], -1.5);
        assert_eq!(dy.b_bar[(0, 0)], 1.5);
        assert_eq!(cost.q2[(0, 0)], 0.375);
        assert_eq!(cost.q2_bar[(0, 0)], -0.375);
        assert_eq!(cost.m2[(0, 0)], 0.0);

        let p = SystemicRiskParams {
            sigma1: 0.0,
            rho: 1.0,
            sigma0: 0.7,
            ..SystemicRiskParams::default()
        };
        let (dy, _) = systemic_risk_model(&p).unwrap();
        assert_eq!(dy.d[(0, 0)], 0.0);
        assert_eq!(dy.d0[(0, 0)], 0.0);
        assert_eq!(dy.d0_bar[(0, 0)], 0.0);
        assert_eq!(dy.theta[0], 0.0);
        assert_eq!(dy.theta0[0], 0.7);
    }

    #[test]
    fn riccati_matches_closed_form() {
        let p = interbank(0.0);
        let (dy, cost) = systemic_risk_model(&p).unwrap();
        let sol = solve_riccati(&dy, &cost, p.horizon, 1e-3).unwrap();
        let mut err: f64 = 0.0;
        for (t, s) in sol.grid.iter().zip(&sol.states) {
            err = err.max((s.lam[(0, 0)] - closed_form_lambda(&p, *t).unwrap()).abs());
            assert!(s.gam[(0, 0)].abs() <= 1e-14);
            assert!(s.gamma[0].abs() <= 1e-14);
        }
        assert!(err <= 1e-8, "max error {err}");
        let last = sol.states.last().unwrap();
        assert_eq!(last.lam[(0, 0)], 0.5);
        assert_eq!(last.gam[(0, 0)], 0.0);
    }

    #[test]
    fn zero_data_gives_zero_lambda() {
        let mut dy = LqDynamics::zeros(2, 2);
        dy.b = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.1]);
        dy.c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.2, 1.0]);
        dy.d = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, -0.3]);
        dy.d0 = DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.1, 0.0]);
        dy.theta = DVector::from_vec(vec![0.5, 1.0]);
        let mut cost = LqCost::zeros(2, 2);
        cost.r2 = DMatrix::identity(2, 2);
        cost.q2_bar = DMatrix::identity(2, 2);
        let sol = solve_riccati(&dy, &cost, 1.0, 0.01).unwrap();
        assert!(sol.states.iter().all(|s| s.lam.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn eval_examples() {
        let p = interbank(0.3);
        let (dy, cost) = systemic_risk_model(&p).unwrap();
        let sol = solve_riccati(&dy, &cost, 1.0, 0.01).unwrap();
        let end = sol.eval(1.0).unwrap();
        assert_eq!(end, RiccatiState::terminal(&cost));
        for k in [0usize, 17, 50, 99] {
            assert_eq!(sol.eval(sol.grid[k]).unwrap(), sol.states[k]);
        }
        let mid = 0.5 * (sol.grid[10] + sol.grid[11]);
        let m = sol.eval(mid).unwrap();
        let avg = 0.5 * (sol.states[10].lam[(0, 0)] + sol.states[11].lam[(0, 0)]);
        assert!((m.lam[(0, 0)] - avg).abs() <= 1e-15);
        assert!(sol.eval(-0.1).is_err());
        assert!(sol.eval(1.0 + 1e-9).is_err());
    }

    #[test]
    fn rejects_bad_steps_and_singular_gains() {
        let p = interbank(0.0);
        let (dy, mut cost) = systemic_risk_model(&p).unwrap();
        assert!(solve_riccati(&dy, &cost, 1.0, 0.3).is_err());
        assert!(solve_riccati(&dy, &cost, 1.0, 0.6).is_err());
        cost.r2 = DMatrix::zeros(1, 1);
        assert!(matches!(
            solve_riccati(&dy, &cost, 1.0, 0.01),
            Err(Error::NonPositiveGain { which: "U", .. })
        ));
    }

    #[test]
    fn blowup_is_reported() {
        // Λ' = −Q2 + Λ²/R2 with negative Q2 escapes in finite backward time.
        let mut dy = LqDynamics::zeros(1, 1);
        dy.c = DMatrix::from_element(1, 1, 1.0);
        let mut cost = LqCost::zeros(1, 1);
        cost.r2 = DMatrix::from_element(1, 1, 1.0);
        cost.q2 = DMatrix::from_element(1, 1, -1.0);
        cost.p2 = DMatrix::from_element(1, 1, -1.0);
        let err = solve_riccati(&dy, &cost, 10.0, 0.01).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn csv_header_and_rows() {
        let p = interbank(0.0);
        let (dy, cost) = systemic_risk_model(&p).unwrap();
        let sol = solve_riccati(&dy, &cost, 1.0, 0.25).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,Lam_00,Gam_00,gam_0,chi,minEigU,minEigV");
        assert_eq!(lines.len(), 6);
        assert!(lines[5].starts_with("1.0,0.5,0.0,0.0,0.0,"));
    }
}
