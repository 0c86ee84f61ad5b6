//! Differentiable Newton layers.
//!
//! Two layers share one damped Newton kernel: the standard layer solves
//! `g(x, z) = 0` for `z` given the full differential state, and the extended
//! layer solves `F(x_s, y) = [f_fast; g] = 0` for `y = (x_f, z)` given only
//! the slow states. Sensitivities come from the implicit function theorem
//! using the factorization retained at the solution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dae::DaeSystem;
use crate::linalg::{self, DenseMatrix, LinalgError, LuFactorization};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NewtonError {
    #[error("Newton did not converge within {iterations} iterations (residual {residual_norm:e})")]
    MaxItersExceeded { iterations: usize, residual_norm: f64 },
    #[error("Newton Jacobian is singular at pivot {pivot_index}")]
    SingularJacobian { pivot_index: usize },
    #[error("extended Jacobian is singular at pivot {pivot_index} (det J_z = {det_jz:e}, det S = {det_s:e})")]
    SingularExtendedJacobian { pivot_index: usize, det_jz: f64, det_s: f64 },
    #[error("residual became non-finite")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

impl From<LinalgError> for NewtonError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::SingularMatrix { pivot_index } => NewtonError::SingularJacobian { pivot_index },
            LinalgError::NonFinite => NewtonError::NonFinite,
            other => NewtonError::Dimension(other.to_string()),
        }
    }
}

/// How the starting iterate is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Use the supplied iterate (typically the previous window's solution).
    #[default]
    PreviousSolution,
    /// Use the supplied iterate as-is.
    UserSupplied,
    /// Prefer the model's closed-form guess, then the supplied iterate, then zero.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    /// Convergence threshold on `‖F‖_∞`.
    pub tol: f64,
    pub max_iters: usize,
    /// Smallest line-search step before the iteration is declared stalled.
    pub min_damping: f64,
    pub warm_start: WarmStart,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: 1e-12, max_iters: 25, min_damping: 1.0 / 64.0, warm_start: WarmStart::Heuristic }
    }
}

impl NewtonConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// A parametric nonlinear system `F(p, y) = 0` solved for `y`.
pub trait ImplicitSystem {
    fn n_params(&self) -> usize;
    fn n_unknowns(&self) -> usize;
    fn residual(&self, p: &[f64], y: &[f64], out: &mut [f64]);
    fn jacobian_y(&self, p: &[f64], y: &[f64]) -> DenseMatrix;
    fn jacobian_p(&self, p: &[f64], y: &[f64]) -> DenseMatrix;
    /// Optional exact projection applied to every trial iterate.
    fn polish(&self, _p: &[f64], _y: &mut [f64]) {}
}

/// Converged (or flagged) output of a Newton layer.
#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub y_star: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `‖F‖_∞` at the start and after every accepted step.
    pub residual_history: Vec<f64>,
    /// Factorization of `∂F/∂y` at `y_star`.
    pub jacobian_lu: LuFactorization,
}

impl NewtonResult {
    pub fn ensure_converged(&self) -> Result<&Self, NewtonError> {
        if self.converged {
            Ok(self)
        } else {
            Err(NewtonError::MaxItersExceeded { iterations: self.iterations, residual_norm: self.residual_norm })
        }
    }
}

/// Damped Newton with a halving line search that only accepts steps which
/// do not increase `‖F‖_∞`.
pub fn newton_solve<S: ImplicitSystem + ?Sized>(
    sys: &S,
    p: &[f64],
    y0: &[f64],
    cfg: &NewtonConfig,
) -> Result<NewtonResult, NewtonError> {
    let n = sys.n_unknowns();
    if y0.len() != n || p.len() != sys.n_params() {
        return Err(NewtonError::Dimension(format!(
            "expected {} params and {} unknowns, got {} and {}",
            sys.n_params(),
            n,
            p.len(),
            y0.len()
        )));
    }
    let mut y = y0.to_vec();
    let mut r = vec![0.0; n];
    sys.residual(p, &y, &mut r);
    let mut norm = linalg::norm_inf(&r);
    if !norm.is_finite() {
        return Err(NewtonError::NonFinite);
    }
    let mut history = vec![norm];
    let mut iterations = 0;
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; n];

    while norm > cfg.tol && iterations < cfg.max_iters {
        let lu = linalg::lu_factor(&sys.jacobian_y(p, &y))?;
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let dy = lu.solve(&neg_r);
        iterations += 1;

        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda >= cfg.min_damping {
            for i in 0..n {
                trial[i] = y[i] + lambda * dy[i];
            }
            sys.polish(p, &mut trial);
            sys.residual(p, &trial, &mut r_trial);
            let t = linalg::norm_inf(&r_trial);
            if t.is_finite() && t <= norm {
                std::mem::swap(&mut y, &mut trial);
                std::mem::swap(&mut r, &mut r_trial);
                norm = t;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        history.push(norm);
        if !accepted {
            break;
        }
    }

    let jacobian_lu = linalg::lu_factor(&sys.jacobian_y(p, &y))?;
    Ok(NewtonResult {
        converged: norm <= cfg.tol,
        y_star: y,
        residual_norm: norm,
        iterations,
        residual_history: history,
        jacobian_lu,
    })
}

/// `dy*/dp = −(∂F/∂y)⁻¹ ∂F/∂p` with the retained factorization.
pub fn implicit_sensitivity<S: ImplicitSystem + ?Sized>(sys: &S, p: &[f64], result: &NewtonResult) -> DenseMatrix {
    let fp = sys.jacobian_p(p, &result.y_star);
    result.jacobian_lu.solve_matrix(&fp).scaled(-1.0)
}

/// `cotᵀ dy*/dp` via one transposed solve.
pub fn implicit_vjp<S: ImplicitSystem + ?Sized>(sys: &S, p: &[f64], result: &NewtonResult, cot: &[f64]) -> Vec<f64> {
    if cot.iter().all(|&c| c == 0.0) {
        return vec![0.0; sys.n_params()];
    }
    let lambda = result.jacobian_lu.solve_transpose(cot);
    let fp = sys.jacobian_p(p, &result.y_star);
    fp.tmatvec(&lambda).into_iter().map(|v| -v).collect()
}

/// `F(x_s, y) = [f_fast; g]` at a fixed input `u`, parameterized by `x_s`.
pub struct ExtendedView<'a> {
    pub sys: &'a DaeSystem,
    pub u: &'a [f64],
}

impl ImplicitSystem for ExtendedView<'_> {
    fn n_params(&self) -> usize {
        self.sys.n_s()
    }
    fn n_unknowns(&self) -> usize {
        self.sys.n_y()
    }
    fn residual(&self, p: &[f64], y: &[f64], out: &mut [f64]) {
        self.sys.extended_residual(p, y, self.u, out);
    }
    fn jacobian_y(&self, p: &[f64], y: &[f64]) -> DenseMatrix {
        self.sys.extended_jacobians(p, y, self.u).f_y
    }
    fn jacobian_p(&self, p: &[f64], y: &[f64]) -> DenseMatrix {
        self.sys.extended_jacobians(p, y, self.u).f_xs
    }
    fn polish(&self, p: &[f64], y: &mut [f64]) {
        let n_f = self.sys.n_f();
        let (x, _) = self.sys.assemble(p, y);
        self.sys.finalize_algebraic(&x, &mut y[n_f..]);
    }
}

/// `g(x, z) = 0` at a fixed input `u`, parameterized by the full state `x`.
pub struct AlgebraicView<'a> {
    pub sys: &'a DaeSystem,
    pub u: &'a [f64],
}

impl ImplicitSystem for AlgebraicView<'_> {
    fn n_params(&self) -> usize {
        self.sys.n_x()
    }
    fn n_unknowns(&self) -> usize {
        self.sys.n_z()
    }
    fn residual(&self, p: &[f64], y: &[f64], out: &mut [f64]) {
        self.sys.model().constraint(p, y, self.u, out);
    }
    fn jacobian_y(&self, p: &[f64], y: &[f64]) -> DenseMatrix {
        self.sys.model().jacobians(p, y, self.u).gz
    }
    fn jacobian_p(&self, p: &[f64], y: &[f64]) -> DenseMatrix {
        self.sys.model().jacobians(p, y, self.u).gx
    }
    fn polish(&self, p: &[f64], y: &mut [f64]) {
        self.sys.finalize_algebraic(p, y);
    }
}

fn starting_point(guess: Option<Vec<f64>>, y0: Option<&[f64]>, n: usize, mode: WarmStart) -> Vec<f64> {
    match (mode, y0) {
        (WarmStart::Heuristic, _) | (_, None) => guess.or_else(|| y0.map(<[f64]>::to_vec)).unwrap_or_else(|| vec![0.0; n]),
        (_, Some(y)) => y.to_vec(),
    }
}

/// `det J_z` and `det S` for the extended Jacobian at `(x_s, y)`.
pub fn schur_determinants(sys: &DaeSystem, x_s: &[f64], y: &[f64], u: &[f64]) -> (f64, f64) {
    let f_y = sys.extended_jacobians(x_s, y, u).f_y;
    let n_f = sys.n_f();
    let n_z = sys.n_z();
    let a = f_y.block(0, 0, n_f, n_f);
    if n_z == 0 {
        return (1.0, linalg::det(&a).unwrap_or(f64::NAN));
    }
    let jz = f_y.block(n_f, n_f, n_z, n_z);
    match linalg::lu_factor(&jz) {
        Ok(lu) => {
            let b = f_y.block(0, n_f, n_f, n_z);
            let c = f_y.block(n_f, 0, n_z, n_f);
            let s = a.sub(&b.matmul(&lu.solve_matrix(&c)));
            (lu.det(), linalg::det(&s).unwrap_or(f64::NAN))
        }
        Err(_) => (0.0, f64::NAN),
    }
}

/// Extended Newton layer: solves `[f_fast; g] = 0` for `y = (x_f, z)`.
pub fn solve_extended(
    sys: &DaeSystem,
    x_s: &[f64],
    u: &[f64],
    y0: Option<&[f64]>,
    cfg: &NewtonConfig,
) -> Result<NewtonResult, NewtonError> {
    let start = starting_point(sys.qss_guess(x_s, u), y0, sys.n_y(), cfg.warm_start);
    let view = ExtendedView { sys, u };
    match newton_solve(&view, x_s, &start, cfg) {
        Err(NewtonError::SingularJacobian { pivot_index }) => {
            let (det_jz, det_s) = schur_determinants(sys, x_s, &start, u);
            Err(NewtonError::SingularExtendedJacobian { pivot_index, det_jz, det_s })
        }
        other => other,
    }
}

/// Standard Newton layer: solves `g(x, z) = 0` for `z` with `x` given.
pub fn solve_algebraic(
    sys: &DaeSystem,
    x: &[f64],
    u: &[f64],
    z0: &[f64],
    cfg: &NewtonConfig,
) -> Result<NewtonResult, NewtonError> {
    let view = AlgebraicView { sys, u };
    newton_solve(&view, x, z0, cfg)
}

/// `dy*/dx_s` of the extended layer.
#[derive(Debug, Clone)]
pub struct IftSensitivity {
    pub d_ystar_d_xs: DenseMatrix,
}

pub fn ift_sensitivity(sys: &DaeSystem, x_s: &[f64], u: &[f64], result: &NewtonResult) -> Result<IftSensitivity, NewtonError> {
    result.ensure_converged()?;
    let view = ExtendedView { sys, u };
    Ok(IftSensitivity { d_ystar_d_xs: implicit_sensitivity(&view, x_s, result) })
}

/// `∂z*/∂x = −J_z⁻¹ ∂g/∂x` for the standard layer.
pub fn algebraic_sensitivity(sys: &DaeSystem, x: &[f64], u: &[f64], result: &NewtonResult) -> Result<DenseMatrix, NewtonError> {
    result.ensure_converged()?;
    Ok(implicit_sensitivity(&AlgebraicView { sys, u }, x, result))
}

/// Pulls a cotangent on `y*` back to `x_s` through the extended layer.
pub fn vjp_through_layer(
    sys: &DaeSystem,
    x_s: &[f64],
    u: &[f64],
    result: &NewtonResult,
    cot_y: &[f64],
) -> Result<Vec<f64>, NewtonError> {
    result.ensure_converged()?;
    if cot_y.len() != sys.n_y() {
        return Err(NewtonError::Dimension(format!("cotangent has length {}, expected {}", cot_y.len(), sys.n_y())));
    }
    Ok(implicit_vjp(&ExtendedView { sys, u }, x_s, result, cot_y))
}

/// Pulls a cotangent on `z*` back to the full state through the standard layer.
pub fn vjp_through_algebraic(
    sys: &DaeSystem,
    x: &[f64],
    u: &[f64],
    result: &NewtonResult,
    cot_z: &[f64],
) -> Result<Vec<f64>, NewtonError> {
    result.ensure_converged()?;
    Ok(implicit_vjp(&AlgebraicView { sys, u }, x, result, cot_z))
}

/// Measured effect of state prediction errors on the slow vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct ContaminationReport {
    /// `‖∂f_slow/∂x_s‖₂`.
    pub l_s_est: f64,
    /// `‖∂f_slow/∂x_f‖₂ + ‖∂f_slow/∂z‖₂ ‖J_z⁻¹ ∂g/∂x_f‖₂`.
    pub l_kappa_est: f64,
    pub rhs_error_standard: f64,
    pub rhs_error_extended: f64,
}

fn unit_direction(n: usize, salt: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + salt).cos() + 0.5).collect();
    let nv = linalg::norm2(&v);
    v.into_iter().map(|x| x / nv).collect()
}

/// Perturbs the slow states by `eps_s` (and, for the standard pathway, the
/// fast states by `eps_f`) along fixed unit directions, re-solves, and
/// reports the resulting `f_slow` errors together with the coupling constants.
pub fn contamination_probe(
    sys: &DaeSystem,
    x_true: &[f64],
    z_true: &[f64],
    u: &[f64],
    eps_s: f64,
    eps_f: f64,
    cfg: &NewtonConfig,
) -> Result<ContaminationReport, NewtonError> {
    let n_f = sys.n_f();
    let n_z = sys.n_z();
    let x_s = sys.slow_part(x_true);
    let y_true = sys.y_part(x_true, z_true);
    let ext = sys.extended_jacobians(&x_s, &y_true, u);

    let l_s_est = ext.slow_xs.norm2();
    let d_fast = ext.slow_y.block(0, 0, sys.n_s(), n_f);
    let d_alg = ext.slow_y.block(0, n_f, sys.n_s(), n_z);
    let mut l_kappa_est = d_fast.norm2();
    if n_z > 0 {
        let jz = ext.f_y.block(n_f, n_f, n_z, n_z);
        let c = ext.f_y.block(n_f, 0, n_z, n_f);
        let lu = linalg::lu_factor(&jz)?;
        l_kappa_est += d_alg.norm2() * lu.solve_matrix(&c).norm2();
    }

    let f_true = sys.f_slow(&x_s, &y_true, u);
    let ds = unit_direction(sys.n_s(), 0.3);
    let df = unit_direction(n_f, 1.1);
    let x_s_hat: Vec<f64> = x_s.iter().zip(&ds).map(|(a, d)| a + eps_s * d).collect();

    // Standard pathway: slow and fast states predicted, z from g = 0.
    let mut x_hat = x_true.to_vec();
    for (k, &i) in sys.partition().slow.iter().enumerate() {
        x_hat[i] = x_s_hat[k];
    }
    for (k, &i) in sys.partition().fast.iter().enumerate() {
        x_hat[i] += eps_f * df[k];
    }
    let alg = solve_algebraic(sys, &x_hat, u, z_true, cfg)?;
    alg.ensure_converged()?;
    let f_std = sys.slow_part(&sys.rhs(&x_hat, &alg.y_star, u));
    let rhs_error_standard = linalg::norm2(&f_std.iter().zip(&f_true).map(|(a, b)| a - b).collect::<Vec<_>>());

    // Extended pathway: only slow states predicted.
    let res = solve_extended(sys, &x_s_hat, u, Some(&y_true), cfg)?;
    res.ensure_converged()?;
    let f_ext = sys.f_slow(&x_s_hat, &res.y_star, u);
    let rhs_error_extended = linalg::norm2(&f_ext.iter().zip(&f_true).map(|(a, b)| a - b).collect::<Vec<_>>());

    Ok(ContaminationReport { l_s_est, l_kappa_est, rhs_error_standard, rhs_error_extended })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dae::{make_linear_probe, make_robertson, make_smib, Smib};

    #[test]
    fn robertson_algebraic_solve_is_one_step() {
        let sys = make_robertson();
        let r = solve_algebraic(&sys, &[0.3, 1e-5], &[], &[0.0], &NewtonConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.y_star[0], 1.0 - (0.3 + 1e-5));
        assert_eq!(r.residual_norm, 0.0);
    }

    #[test]
    fn smib_algebraic_solve_matches_quadratic_root() {
        let sys = make_smib();
        let v = Smib::default().closed_form_voltage(0.4).unwrap();
        let r = solve_algebraic(&sys, &[0.4, 0.0], &[], &[1.0], &NewtonConfig::default()).unwrap();
        assert!(r.converged);
        assert!((r.y_star[0] - v).abs() < 1e-12);
    }

    #[test]
    fn linear_extended_solve() {
        let sys = make_linear_probe();
        let cfg = NewtonConfig::default();
        let r = solve_extended(&sys, &[0.7], &[], Some(&[0.0, 0.0]), &cfg).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!((r.y_star[0] - 0.7).abs() < 1e-15 && (r.y_star[1] - 0.7).abs() < 1e-15);
        let s = ift_sensitivity(&sys, &[0.7], &[], &r).unwrap();
        assert!((s.d_ystar_d_xs[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((s.d_ystar_d_xs[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vjp_of_zero_is_zero_and_unit_picks_row() {
        let sys = make_robertson();
        let cfg = NewtonConfig::default();
        let r = solve_extended(&sys, &[0.9], &[], None, &cfg).unwrap();
        assert_eq!(vjp_through_layer(&sys, &[0.9], &[], &r, &[0.0, 0.0]).unwrap(), vec![0.0]);
        let s = ift_sensitivity(&sys, &[0.9], &[], &r).unwrap();
        for k in 0..2 {
            let mut e = [0.0, 0.0];
            e[k] = 1.0;
            let v = vjp_through_layer(&sys, &[0.9], &[], &r, &e).unwrap();
            assert!((v[0] - s.d_ystar_d_xs[(k, 0)]).abs() <= 1e-12 * s.d_ystar_d_xs[(k, 0)].abs().max(1e-12));
        }
    }

    #[test]
    fn line_search_never_increases_residual() {
        let sys = make_robertson();
        let cfg = NewtonConfig { warm_start: WarmStart::UserSupplied, ..Default::default() };
        let r = solve_extended(&sys, &[0.5], &[], Some(&[0.3, 0.0]), &cfg).unwrap();
        for w in r.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(r.converged, "{:?}", r.residual_history);
    }

    #[test]
    fn unconverged_result_is_flagged() {
        let sys = make_robertson();
        let cfg = NewtonConfig { max_iters: 1, warm_start: WarmStart::UserSupplied, ..Default::default() };
        let r = solve_extended(&sys, &[0.5], &[], Some(&[0.3, 0.0]), &cfg).unwrap();
        assert!(!r.converged);
        assert!(matches!(r.ensure_converged(), Err(NewtonError::MaxItersExceeded { .. })));
    }
}
