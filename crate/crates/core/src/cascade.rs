//! Cascaded extended Newton for components coupled through shared network
//! variables `v`.
//!
//! Each component solves its own `[f_fast; g] = 0` with `v` frozen (the
//! component's external input is `v`); a small outer Newton on
//! `g_net(y_1..y_N, v) = 0` then updates `v`. Gradients are propagated with a
//! two-level adjoint that reproduces the monolithic implicit gradient.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dae::{DaeError, DaeJacobians, DaeModel, DaeSystem, SyntheticParams, SyntheticTwoTimescale};
use crate::linalg::{self, DenseMatrix};
use crate::newton::{self, ImplicitSystem, NewtonConfig, NewtonError, NewtonResult, WarmStart};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CascadeError {
    #[error("outer iteration diverged after {} iterations", residual_history.len().saturating_sub(1))]
    OuterDiverged { residual_history: Vec<f64> },
    #[error("outer iteration hit the limit with residual {:e}", residual_history.last().copied().unwrap_or(f64::NAN))]
    MaxOuterIters { residual_history: Vec<f64> },
    #[error("local solve failed in component {component}: {source}")]
    LocalFailure { component: usize, source: NewtonError },
    #[error("network Jacobian J_v is singular")]
    SingularJv,
    #[error("invalid coupled system: {0}")]
    Invalid(String),
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error(transparent)]
    Dae(#[from] DaeError),
}

/// Network equations `g_net(y_1..y_N, x_s,1..x_s,N, v) = 0`.
pub trait NetworkCoupling: Send + Sync {
    fn n_v(&self) -> usize;
    fn residual(&self, ys: &[&[f64]], xs: &[&[f64]], v: &[f64]) -> Vec<f64>;
    fn jac_v(&self, ys: &[&[f64]], xs: &[&[f64]], v: &[f64]) -> DenseMatrix;
    fn jac_y(&self, component: usize, ys: &[&[f64]], xs: &[&[f64]], v: &[f64]) -> DenseMatrix;
    fn jac_xs(&self, component: usize, ys: &[&[f64]], xs: &[&[f64]], v: &[f64]) -> DenseMatrix;
}

/// Components plus network coupling. Each component's external input is `v`.
#[derive(Clone)]
pub struct CoupledSystem {
    pub components: Vec<DaeSystem>,
    pub coupling: Arc<dyn NetworkCoupling>,
}

impl fmt::Debug for CoupledSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoupledSystem")
            .field("components", &self.components)
            .field("n_v", &self.coupling.n_v())
            .finish()
    }
}

impl CoupledSystem {
    pub fn new(components: Vec<DaeSystem>, coupling: Arc<dyn NetworkCoupling>) -> Result<Self, CascadeError> {
        let n_v = coupling.n_v();
        for (i, c) in components.iter().enumerate() {
            if c.n_u() != n_v {
                return Err(CascadeError::Invalid(format!(
                    "component {i} takes {} inputs but the network has {n_v} variables",
                    c.n_u()
                )));
            }
        }
        Ok(Self { components, coupling })
    }

    pub fn n_v(&self) -> usize {
        self.coupling.n_v()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    #[default]
    None,
    /// Retry with the damping halved until it converges or drops below 1/64.
    Damped,
    /// Solve the stacked system with a single Newton iteration.
    Monolithic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub outer_tol: f64,
    pub outer_max_iters: usize,
    pub eta: f64,
    pub fallback: Fallback,
    pub local: NewtonConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { outer_tol: 1e-10, outer_max_iters: 50, eta: 1.0, fallback: Fallback::None, local: NewtonConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct CascadeResult {
    pub locals: Vec<NewtonResult>,
    pub x_s: Vec<Vec<f64>>,
    pub v_star: Vec<f64>,
    pub outer_iterations: usize,
    /// `‖g_net‖_∞` before every outer update and at termination.
    pub residual_history: Vec<f64>,
    pub estimated_rho: f64,
    pub eta_used: f64,
    /// Which safeguard produced the result, if any.
    pub fallback_used: Option<Fallback>,
}

impl CascadeResult {
    pub fn y(&self, component: usize) -> &[f64] {
        &self.locals[component].y_star
    }
}

/// `ρ = ‖J_v⁻¹ A‖₂` with `A = Σ_i (∂g_net/∂y_i)(∂y_i*/∂v)`.
#[derive(Debug, Clone)]
pub struct ContractionEstimate {
    pub rho: f64,
    pub j_v: DenseMatrix,
    pub a: DenseMatrix,
}

fn local_solves(
    cs: &CoupledSystem,
    x_s: &[Vec<f64>],
    v: &[f64],
    warm: &[Option<Vec<f64>>],
    cfg: &NewtonConfig,
) -> Result<Vec<NewtonResult>, CascadeError> {
    cs.components
        .par_iter()
        .enumerate()
        .map(|(i, sys)| {
            let res = newton::solve_extended(sys, &x_s[i], v, warm[i].as_deref(), cfg)
                .map_err(|source| CascadeError::LocalFailure { component: i, source })?;
            if !res.converged {
                return Err(CascadeError::LocalFailure {
                    component: i,
                    source: NewtonError::MaxItersExceeded { iterations: res.iterations, residual_norm: res.residual_norm },
                });
            }
            Ok(res)
        })
        .collect()
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// `∂y_i*/∂v = −(∂F_i/∂y)⁻¹ ∂F_i/∂v`, reusing the retained factorization.
fn dy_dv(sys: &DaeSystem, x_s: &[f64], v: &[f64], res: &NewtonResult) -> DenseMatrix {
    let jac = sys.extended_jacobians(x_s, &res.y_star, v);
    res.jacobian_lu.solve_matrix(&jac.f_u).scaled(-1.0)
}

fn contraction_from_locals(
    cs: &CoupledSystem,
    x_s: &[Vec<f64>],
    v: &[f64],
    locals: &[NewtonResult],
) -> Result<ContractionEstimate, CascadeError> {
    let ys: Vec<&[f64]> = locals.iter().map(|r| r.y_star.as_slice()).collect();
    let xs = refs(x_s);
    let n_v = cs.n_v();
    let j_v = cs.coupling.jac_v(&ys, &xs, v);
    let mut a = DenseMatrix::zeros(n_v, n_v);
    for (i, sys) in cs.components.iter().enumerate() {
        let gy = cs.coupling.jac_y(i, &ys, &xs, v);
        a = a.add(&gy.matmul(&dy_dv(sys, &x_s[i], v, &locals[i])));
    }
    if n_v == 0 {
        return Ok(ContractionEstimate { rho: 0.0, j_v, a });
    }
    let lu = linalg::lu_factor(&j_v).map_err(|_| CascadeError::SingularJv)?;
    let rho = lu.solve_matrix(&a).norm2();
    Ok(ContractionEstimate { rho, j_v, a })
}

/// Contraction ratio of the undamped outer iteration at `v`.
pub fn estimate_contraction(
    cs: &CoupledSystem,
    x_s: &[Vec<f64>],
    v: &[f64],
    cfg: &NewtonConfig,
) -> Result<ContractionEstimate, CascadeError> {
    let warm = vec![None; cs.n_components()];
    let locals = local_solves(cs, x_s, v, &warm, cfg)?;
    contraction_from_locals(cs, x_s, v, &locals)
}

fn cascade_attempt(
    cs: &CoupledSystem,
    x_s: &[Vec<f64>],
    v0: &[f64],
    eta: f64,
    cfg: &CascadeConfig,
) -> Result<CascadeResult, CascadeError> {
    let n_v = cs.n_v();
    let mut v = v0.to_vec();
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; cs.n_components()];
    let mut history = Vec::new();
    let mut increases = 0;
    let mut iterations = 0;

    loop {
        let locals = local_solves(cs, x_s, &v, &warm, &cfg.local)?;
        let ys: Vec<&[f64]> = locals.iter().map(|r| r.y_star.as_slice()).collect();
        let xs = refs(x_s);
        let r = cs.coupling.residual(&ys, &xs, &v);
        let norm = linalg::norm_inf(&r);
        history.push(norm);

        if norm < cfg.outer_tol || n_v == 0 {
            let estimated_rho = contraction_from_locals(cs, x_s, &v, &locals).map(|c| c.rho).unwrap_or(f64::NAN);
            return Ok(CascadeResult {
                locals,
                x_s: x_s.to_vec(),
                v_star: v,
                outer_iterations: iterations,
                residual_history: history,
                estimated_rho,
                eta_used: eta,
                fallback_used: None,
            });
        }
        if !norm.is_finite() || norm > 1e6 * history[0] {
            return Err(CascadeError::OuterDiverged { residual_history: history });
        }
        if history.len() >= 2 && norm > history[history.len() - 2] {
            increases += 1;
            if increases >= 3 {
                return Err(CascadeError::OuterDiverged { residual_history: history });
            }
        } else {
            increases = 0;
        }
        if iterations >= cfg.outer_max_iters {
            return Err(CascadeError::MaxOuterIters { residual_history: history });
        }

        let j_v = cs.coupling.jac_v(&ys, &xs, &v);
        let lu = linalg::lu_factor(&j_v).map_err(|_| CascadeError::SingularJv)?;
        let step = lu.solve(&r);
        for (vi, s) in v.iter_mut().zip(&step) {
            *vi -= eta * s;
        }
        warm = locals.into_iter().map(|r| Some(r.y_star)).collect();
        iterations += 1;
    }
}

/// Algorithm: parallel local extended solves with `v` frozen, then
/// `v ← v − η J_v⁻¹ g_net`, until `‖g_net‖_∞ < outer_tol`.
pub fn cascade_solve(
    cs: &CoupledSystem,
    x_s: &[Vec<f64>],
    v0: &[f64],
    cfg: &CascadeConfig,
) -> Result<CascadeResult, CascadeError> {
    if x_s.len() != cs.n_components() || v0.len() != cs.n_v() {
        return Err(CascadeError::Invalid("slow-state list or v0 has the wrong size".into()));
    }
    if !(cfg.eta > 0.0 && cfg.eta <= 1.0) {
        return Err(CascadeError::Invalid(format!("damping must lie in (0, 1], got {}", cfg.eta)));
    }
    let first = cascade_attempt(cs, x_s, v0, cfg.eta, cfg);
    let failure = match first {
        Ok(r) => return Ok(r),
        Err(e @ (CascadeError::OuterDiverged { .. } | CascadeError::MaxOuterIters { .. })) => e,
        Err(e) => return Err(e),
    };
    match cfg.fallback {
        Fallback::None => Err(failure),
        Fallback::Damped => {
            let mut eta = cfg.eta * 0.5;
            while eta >= 1.0 / 64.0 {
                if let Ok(mut r) = cascade_attempt(cs, x_s, v0, eta, cfg) {
                    r.fallback_used = Some(Fallback::Damped);
                    return Ok(r);
                }
                eta *= 0.5;
            }
            Err(failure)
        }
        Fallback::Monolithic => {
            let mut r = monolithic_solve(cs, x_s, v0, &cfg.local.clone().with_tol(cfg.outer_tol.min(cfg.local.tol)))?;
            r.fallback_used = Some(Fallback::Monolithic);
            Ok(r)
        }
    }
}

/// Stacked `[F_1; …; F_N; g_net]` in the unknowns `(y_1, …, y_N, v)` with
/// parameters `(x_s,1, …, x_s,N)`.
pub struct StackedSystem<'a> {
    pub cs: &'a CoupledSystem,
    y_offsets: Vec<usize>,
    p_offsets: Vec<usize>,
}

impl<'a> StackedSystem<'a> {
    pub fn new(cs: &'a CoupledSystem) -> Self {
        let mut y_offsets = vec![0];
        let mut p_offsets = vec![0];
        for c in &cs.components {
            y_offsets.push(y_offsets.last().unwrap() + c.n_y());
            p_offsets.push(p_offsets.last().unwrap() + c.n_s());
        }
        Self { cs, y_offsets, p_offsets }
    }

    fn n_y_total(&self) -> usize {
        *self.y_offsets.last().unwrap()
    }

    fn split<'b>(&self, p: &'b [f64], y: &'b [f64]) -> (Vec<&'b [f64]>, Vec<&'b [f64]>, &'b [f64]) {
        let n = self.cs.n_components();
        let ys = (0..n).map(|i| &y[self.y_offsets[i]..self.y_offsets[i + 1]]).collect();
        let xs = (0..n).map(|i| &p[self.p_offsets[i]..self.p_offsets[i + 1]]).collect();
        (ys, xs, &y[self.n_y_total()..])
    }

    pub fn pack(&self, x_s: &[Vec<f64>], ys: &[Vec<f64>], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = x_s.concat();
        let mut y = ys.concat();
        y.extend_from_slice(v);
        (p, y)
    }
}

impl ImplicitSystem for StackedSystem<'_> {
    fn n_params(&self) -> usize {
        *self.p_offsets.last().unwrap()
    }
    fn n_unknowns(&self) -> usize {
        self.n_y_total() + self.cs.n_v()
    }
    fn residual(&self, p: &[f64], y: &[f64], out: &mut [f64]) {
        let (ys, xs, v) = self.split(p, y);
        for (i, sys) in self.cs.components.iter().enumerate() {
            sys.extended_residual(xs[i], ys[i], v, &mut out[self.y_offsets[i]..self.y_offsets[i + 1]]);
        }
        let g = self.cs.coupling.residual(&ys, &xs, v);
        out[self.n_y_total()..].copy_from_slice(&g);
    }
    fn jacobian_y(&self, p: &[f64], y: &[f64]) -> DenseMatrix {
        let (ys, xs, v) = self.split(p, y);
        let n = self.n_unknowns();
        let ny = self.n_y_total();
        let mut j = DenseMatrix::zeros(n, n);
        for (i, sys) in self.cs.components.iter().enumerate() {
            let e = sys.extended_jacobians(xs[i], ys[i], v);
            j.set_block(self.y_offsets[i], self.y_offsets[i], &e.f_y);
            j.set_block(self.y_offsets[i], ny, &e.f_u);
            j.set_block(ny, self.y_offsets[i], &self.cs.coupling.jac_y(i, &ys, &xs, v));
        }
        j.set_block(ny, ny, &self.cs.coupling.jac_v(&ys, &xs, v));
        j
    }
    fn jacobian_p(&self, p: &[f64], y: &[f64]) -> DenseMatrix {
        let (ys, xs, v) = self.split(p, y);
        let ny = self.n_y_total();
        let mut j = DenseMatrix::zeros(self.n_unknowns(), self.n_params());
        for (i, sys) in self.cs.components.iter().enumerate() {
            let e = sys.extended_jacobians(xs[i], ys[i], v);
            j.set_block(self.y_offsets[i], self.p_offsets[i], &e.f_xs);
            j.set_block(ny, self.p_offsets[i], &self.cs.coupling.jac_xs(i, &ys, &xs, v));
        }
        j
    }
    fn polish(&self, p: &[f64], y: &mut [f64]) {
        let ny = self.n_y_total();
        let (head, v) = y.split_at_mut(ny);
        for (i, sys) in self.cs.components.iter().enumerate() {
            let yi = &mut head[self.y_offsets[i]..self.y_offsets[i + 1]];
            let (x, _) = sys.assemble(&p[self.p_offsets[i]..self.p_offsets[i + 1]], yi);
            sys.finalize_algebraic(&x, &mut yi[sys.n_f()..]);
        }
        let _ = v;
    }
}

/// Single Newton solve on the stacked system, packaged like a cascade result.
pub fn monolithic_solve(
    cs: &CoupledSystem,
    x_s: &[Vec<f64>],
    v0: &[f64],
    cfg: &NewtonConfig,
) -> Result<CascadeResult, CascadeError> {
    let stacked = StackedSystem::new(cs);
    let guesses: Vec<Vec<f64>> = cs
        .components
        .iter()
        .zip(x_s)
        .map(|(sys, xs)| sys.qss_guess(xs, v0).unwrap_or_else(|| vec![0.0; sys.n_y()]))
        .collect();
    let (p, y0) = stacked.pack(x_s, &guesses, v0);
    let res = newton::newton_solve(&stacked, &p, &y0, cfg)?;
    if !res.converged {
        return Err(CascadeError::Newton(NewtonError::MaxItersExceeded {
            iterations: res.iterations,
            residual_norm: res.residual_norm,
        }));
    }
    let ny = stacked.n_y_total();
    let v_star = res.y_star[ny..].to_vec();
    // Local results at the monolithic solution carry the factorizations the
    // adjoint needs.
    let warm: Vec<Option<Vec<f64>>> = (0..cs.n_components())
        .map(|i| Some(res.y_star[stacked.y_offsets[i]..stacked.y_offsets[i + 1]].to_vec()))
        .collect();
    let local_cfg = NewtonConfig { warm_start: WarmStart::UserSupplied, ..cfg.clone() };
    let locals = local_solves(cs, x_s, &v_star, &warm, &local_cfg)?;
    let estimated_rho = contraction_from_locals(cs, x_s, &v_star, &locals).map(|c| c.rho).unwrap_or(f64::NAN);
    Ok(CascadeResult {
        locals,
        x_s: x_s.to_vec(),
        v_star,
        outer_iterations: res.iterations,
        residual_history: res.residual_history,
        estimated_rho,
        eta_used: 1.0,
        fallback_used: Some(Fallback::Monolithic),
    })
}

/// Monolithic implicit gradient: cotangents on `(y_1..y_N, v)` pulled back
/// to every component's slow states through the stacked Jacobian.
pub fn monolithic_vjp(
    cs: &CoupledSystem,
    result: &CascadeResult,
    cot_y: &[Vec<f64>],
    cot_v: &[f64],
) -> Result<Vec<Vec<f64>>, CascadeError> {
    let stacked = StackedSystem::new(cs);
    let ys: Vec<Vec<f64>> = result.locals.iter().map(|r| r.y_star.clone()).collect();
    let (p, y) = stacked.pack(&result.x_s, &ys, &result.v_star);
    let lu = linalg::lu_factor(&stacked.jacobian_y(&p, &y)).map_err(NewtonError::from)?;
    let mut cot = cot_y.concat();
    cot.extend_from_slice(cot_v);
    let lambda = lu.solve_transpose(&cot);
    let grad = stacked.jacobian_p(&p, &y).tmatvec(&lambda);
    Ok((0..cs.n_components())
        .map(|i| grad[stacked.p_offsets[i]..stacked.p_offsets[i + 1]].iter().map(|g| -g).collect())
        .collect())
}

/// Two-level adjoint through a converged cascade.
///
/// Solves `(J_v + A)ᵀ μ = v̄ + Σ_i D_iᵀ ȳ_i` with `D_i = ∂y_i*/∂v`, then pulls
/// `ȳ_i − (∂g_net/∂y_i)ᵀ μ` back through each local layer.
pub fn cascade_vjp(
    cs: &CoupledSystem,
    result: &CascadeResult,
    cot_y: &[Vec<f64>],
    cot_v: &[f64],
) -> Result<Vec<Vec<f64>>, CascadeError> {
    let n = cs.n_components();
    if cot_y.len() != n || cot_v.len() != cs.n_v() {
        return Err(CascadeError::Invalid("cotangent shapes do not match the coupled system".into()));
    }
    let v = &result.v_star;
    let x_s = &result.x_s;
    let ys: Vec<&[f64]> = result.locals.iter().map(|r| r.y_star.as_slice()).collect();
    let xs = refs(x_s);

    let d: Vec<DenseMatrix> = (0..n).map(|i| dy_dv(&cs.components[i], &x_s[i], v, &result.locals[i])).collect();
    let gy: Vec<DenseMatrix> = (0..n).map(|i| cs.coupling.jac_y(i, &ys, &xs, v)).collect();

    let mu = if cs.n_v() == 0 {
        Vec::new()
    } else {
        let mut lhs = cs.coupling.jac_v(&ys, &xs, v);
        let mut rhs = cot_v.to_vec();
        for i in 0..n {
            lhs = lhs.add(&gy[i].matmul(&d[i]));
            for (r, c) in rhs.iter_mut().zip(d[i].tmatvec(&cot_y[i])) {
                *r += c;
            }
        }
        linalg::lu_factor(&lhs).map_err(NewtonError::from)?.solve_transpose(&rhs)
    };

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut local_cot = cot_y[i].clone();
        if !mu.is_empty() {
            for (c, g) in local_cot.iter_mut().zip(gy[i].tmatvec(&mu)) {
                *c -= g;
            }
        }
        let mut g = newton::vjp_through_layer(&cs.components[i], &x_s[i], v, &result.locals[i], &local_cot)?;
        if !mu.is_empty() {
            let gx = cs.coupling.jac_xs(i, &ys, &xs, v);
            for (gi, c) in g.iter_mut().zip(gx.tmatvec(&mu)) {
                *gi -= c;
            }
        }
        out.push(g);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Built-in couplings and components

/// Scalar component whose algebraic variable is affine in `v`:
/// `ẋ_s = −x_s`, `0 = y − a v − x_s`.
#[derive(Debug, Clone)]
pub struct AffineComponent {
    pub a: f64,
}

impl DaeModel for AffineComponent {
    fn name(&self) -> &str {
        "affine"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_z(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn parameters(&self) -> std::collections::BTreeMap<String, f64> {
        std::collections::BTreeMap::from([("a".into(), self.a)])
    }
    fn rhs(&self, x: &[f64], _z: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = -x[0];
    }
    fn constraint(&self, x: &[f64], z: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = z[0] - self.a * u[0] - x[0];
    }
    fn jacobians(&self, _x: &[f64], _z: &[f64], _u: &[f64]) -> DaeJacobians {
        let mut j = DaeJacobians::zeros(1, 1, 1);
        j.fx[(0, 0)] = -1.0;
        j.gx[(0, 0)] = -1.0;
        j.gz[(0, 0)] = 1.0;
        j.gu[(0, 0)] = -self.a;
        j
    }
    fn default_partition(&self) -> (Vec<usize>, Vec<usize>) {
        (vec![0], vec![])
    }
    fn sample_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![0.2], vec![0.2 + 0.3 * self.a], vec![0.3])
    }
}

/// `g_net = J v + c Σ_i w_iᵀ y_i − v_ref` for scalar `v`, where `w_i`
/// averages the entries of `y_i` listed in `taps[i]`.
#[derive(Debug, Clone)]
pub struct AveragingCoupling {
    pub c: f64,
    pub j_v: f64,
    pub v_ref: f64,
    pub taps: Vec<Vec<usize>>,
    pub n_y: Vec<usize>,
}

impl AveragingCoupling {
    fn weight(&self, i: usize) -> f64 {
        1.0 / self.taps[i].len().max(1) as f64
    }
}

impl NetworkCoupling for AveragingCoupling {
    fn n_v(&self) -> usize {
        1
    }
    fn residual(&self, ys: &[&[f64]], _xs: &[&[f64]], v: &[f64]) -> Vec<f64> {
        let mut s = 0.0;
        for (i, y) in ys.iter().enumerate() {
            let w = self.weight(i);
            s += self.taps[i].iter().map(|&k| w * y[k]).sum::<f64>();
        }
        vec![self.j_v * v[0] + self.c * s - self.v_ref]
    }
    fn jac_v(&self, _ys: &[&[f64]], _xs: &[&[f64]], _v: &[f64]) -> DenseMatrix {
        DenseMatrix::from_diag(&[self.j_v])
    }
    fn jac_y(&self, i: usize, _ys: &[&[f64]], _xs: &[&[f64]], _v: &[f64]) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(1, self.n_y[i]);
        let w = self.weight(i);
        for &k in &self.taps[i] {
            m[(0, k)] += self.c * w;
        }
        m
    }
    fn jac_xs(&self, i: usize, _ys: &[&[f64]], xs: &[&[f64]], _v: &[f64]) -> DenseMatrix {
        DenseMatrix::zeros(1, xs[i].len())
    }
}

/// No network variables at all.
#[derive(Debug, Clone, Default)]
pub struct NoCoupling;

impl NetworkCoupling for NoCoupling {
    fn n_v(&self) -> usize {
        0
    }
    fn residual(&self, _ys: &[&[f64]], _xs: &[&[f64]], _v: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn jac_v(&self, _ys: &[&[f64]], _xs: &[&[f64]], _v: &[f64]) -> DenseMatrix {
        DenseMatrix::zeros(0, 0)
    }
    fn jac_y(&self, _i: usize, ys: &[&[f64]], _xs: &[&[f64]], _v: &[f64]) -> DenseMatrix {
        DenseMatrix::zeros(0, ys[_i].len())
    }
    fn jac_xs(&self, i: usize, _ys: &[&[f64]], xs: &[&[f64]], _v: &[f64]) -> DenseMatrix {
        DenseMatrix::zeros(0, xs[i].len())
    }
}

/// Two affine scalar components `y_i = a_i v + x_s,i` with
/// `g_net = v + c (y_1 + y_2) − v_ref`. The undamped contraction ratio is
/// `|c (a_1 + a_2)|`.
pub fn two_scalar_affine(a1: f64, a2: f64, c: f64, v_ref: f64) -> CoupledSystem {
    let comps = [a1, a2]
        .iter()
        .map(|&a| DaeSystem::new(Arc::new(AffineComponent { a })).expect("affine component is consistent"))
        .collect();
    let coupling = AveragingCoupling { c, j_v: 1.0, v_ref, taps: vec![vec![0], vec![0]], n_y: vec![1, 1] };
    CoupledSystem::new(comps, Arc::new(coupling)).expect("shapes match")
}

/// `n` synthetic two-timescale components (κ = 50, 100, 150, …) sharing one
/// network variable through the mean of their algebraic states.
pub fn coupled_synthetic(n: usize, c: f64) -> Result<CoupledSystem, CascadeError> {
    let mut comps = Vec::with_capacity(n);
    let mut taps = Vec::with_capacity(n);
    let mut n_y = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = SyntheticParams::new(50.0 * (i + 1) as f64, 2, 2, 2);
        p.spread_decades = 0.5;
        let sys = DaeSystem::new(Arc::new(SyntheticTwoTimescale::new(p)?))?;
        taps.push((sys.n_f()..sys.n_y()).collect());
        n_y.push(sys.n_y());
        comps.push(sys);
    }
    let coupling = AveragingCoupling { c, j_v: 1.0, v_ref: 0.2, taps, n_y };
    CoupledSystem::new(comps, Arc::new(coupling))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncoupled_single_component_needs_no_outer_iteration() {
        let sys = DaeSystem::new(Arc::new(crate::dae::Robertson::default())).unwrap();
        let cs = CoupledSystem::new(vec![sys], Arc::new(NoCoupling)).unwrap();
        let r = cascade_solve(&cs, &[vec![0.9]], &[], &CascadeConfig::default()).unwrap();
        assert_eq!(r.outer_iterations, 0);
        assert_eq!(r.estimated_rho, 0.0);
    }

    #[test]
    fn affine_pair_contraction_closed_form() {
        let cs = two_scalar_affine(0.5, 0.5, 0.4, 1.0);
        let est = estimate_contraction(&cs, &[vec![0.1], vec![-0.2]], &[0.0], &NewtonConfig::default()).unwrap();
        assert!((est.rho - 0.4).abs() < 1e-10);
    }

    #[test]
    fn damped_fallback_rescues_strong_coupling() {
        let cs = two_scalar_affine(0.5, 0.5, 3.0, 1.0);
        let cfg = CascadeConfig { fallback: Fallback::Damped, ..Default::default() };
        let r = cascade_solve(&cs, &[vec![0.1], vec![-0.2]], &[0.0], &cfg).unwrap();
        assert_eq!(r.fallback_used, Some(Fallback::Damped));
        assert!(r.eta_used < 1.0);
    }

    #[test]
    fn monolithic_fallback_agrees_with_cascade() {
        let cs = two_scalar_affine(0.5, 0.5, 0.4, 1.0);
        let xs = [vec![0.1], vec![-0.2]];
        let a = cascade_solve(&cs, &xs, &[0.0], &CascadeConfig::default()).unwrap();
        let b = monolithic_solve(&cs, &xs, &[0.0], &NewtonConfig::default()).unwrap();
        assert!((a.v_star[0] - b.v_star[0]).abs() < 1e-10);
    }
}
