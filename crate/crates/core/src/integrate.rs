//! Reference integrator for semi-explicit index-1 DAEs.
//!
//! Stiffly accurate implicit Runge–Kutta on the full system: every stage
//! satisfies `X_i = x_n + h Σ_j a_ij f(X_j, Z_j)` and `g(X_i, Z_i) = 0`, and
//! the step result is the last stage. The stage system is solved by a
//! simplified Newton iteration with the Jacobian frozen at the step start and
//! refreshed once on failure. Adaptive steps use a step-doubling error
//! estimate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dae::{DaeSystem, InputSchedule};
use crate::linalg::{self, DenseMatrix};
use crate::newton::{self, NewtonConfig, NewtonError};
pub use crate::trajectory::{Trajectory, TrajectoryMeta};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrateError {
    #[error("step size underflow or repeated rejections at t = {t:e}")]
    StepFailure { t: f64 },
    #[error("inconsistent initial condition: ‖g(x0, z0)‖∞ = {residual:e} exceeds 1e-8 (request projection to fix)")]
    InconsistentIC { residual: f64 },
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Newton(#[from] NewtonError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// 3-stage Radau IIA, order 5.
    #[default]
    Radau3,
    /// Trapezoidal rule, order 2.
    Trapezoid,
}

impl Method {
    pub fn order(self) -> i32 {
        match self {
            Method::Radau3 => 5,
            Method::Trapezoid => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepControl {
    Fixed { h: f64 },
    Adaptive { rtol: f64, atol: f64 },
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::Adaptive { rtol: 1e-8, atol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub step: StepControl,
    pub t_span: (f64, f64),
    /// Times at which the solution is stored (the start time is always stored).
    #[serde(default)]
    pub output_times: Vec<f64>,
    /// Initial step for adaptive control; defaults to `1e-6·(1 + |t0|)`.
    #[serde(default)]
    pub initial_step: Option<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_max_steps() -> usize {
    1_000_000
}

impl IntegratorConfig {
    pub fn adaptive(t0: f64, t1: f64, output_times: Vec<f64>) -> Self {
        Self {
            method: Method::Radau3,
            step: StepControl::default(),
            t_span: (t0, t1),
            output_times,
            initial_step: None,
            max_steps: default_max_steps(),
        }
    }

    pub fn fixed(method: Method, h: f64, t0: f64, t1: f64) -> Self {
        Self {
            method,
            step: StepControl::Fixed { h },
            t_span: (t0, t1),
            output_times: vec![t1],
            initial_step: None,
            max_steps: default_max_steps(),
        }
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.step = StepControl::Adaptive { rtol, atol };
        self
    }
}

struct Tableau {
    a: Vec<Vec<f64>>,
    c: Vec<f64>,
}

impl Tableau {
    fn for_method(m: Method) -> Self {
        match m {
            Method::Radau3 => {
                let s6 = 6f64.sqrt();
                Tableau {
                    a: vec![
                        vec![(88.0 - 7.0 * s6) / 360.0, (296.0 - 169.0 * s6) / 1800.0, (-2.0 + 3.0 * s6) / 225.0],
                        vec![(296.0 + 169.0 * s6) / 1800.0, (88.0 + 7.0 * s6) / 360.0, (-2.0 - 3.0 * s6) / 225.0],
                        vec![(16.0 - s6) / 36.0, (16.0 + s6) / 36.0, 1.0 / 9.0],
                    ],
                    c: vec![(4.0 - s6) / 10.0, (4.0 + s6) / 10.0, 1.0],
                }
            }
            Method::Trapezoid => Tableau { a: vec![vec![0.0, 0.0], vec![0.5, 0.5]], c: vec![0.0, 1.0] },
        }
    }

    fn stages(&self) -> usize {
        self.c.len()
    }
}

struct Stepper<'a> {
    sys: &'a DaeSystem,
    tab: Tableau,
    /// Per-component Newton tolerance `atol + rtol·|w|`.
    newton_atol: f64,
    newton_rtol: f64,
}

impl Stepper<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        let n_x = self.sys.n_x();
        let n_z = self.sys.n_z();
        (n_x, n_z, n_x + n_z)
    }

    /// Stage residual for unknowns `w = [X_1, Z_1, X_2, Z_2, …]`.
    fn residual(&self, x0: &[f64], h: f64, u: &[f64], w: &[f64], out: &mut [f64]) {
        let (n_x, n_z, m) = self.dims();
        let s = self.tab.stages();
        let mut f = vec![vec![0.0; n_x]; s];
        for j in 0..s {
            let (xj, zj) = w[j * m..(j + 1) * m].split_at(n_x);
            self.sys.model().rhs(xj, zj, u, &mut f[j]);
        }
        for i in 0..s {
            let (xi, zi) = w[i * m..(i + 1) * m].split_at(n_x);
            for k in 0..n_x {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += self.tab.a[i][j] * f[j][k];
                }
                out[i * m + k] = xi[k] - x0[k] - h * acc;
            }
            if n_z > 0 {
                self.sys.model().constraint(xi, zi, u, &mut out[i * m + n_x..(i + 1) * m]);
            }
        }
    }

    /// Stage Jacobian; stage `i` uses partials evaluated at `points[i]`.
    fn stage_jacobian(&self, points: &[(&[f64], &[f64])], h: f64, u: &[f64]) -> DenseMatrix {
        let (n_x, _n_z, m) = self.dims();
        let s = self.tab.stages();
        let jacs: Vec<_> = points.iter().map(|(x, z)| self.sys.model().jacobians(x, z, u)).collect();
        let mut big = DenseMatrix::zeros(s * m, s * m);
        for i in 0..s {
            for jj in 0..s {
                let a = self.tab.a[i][jj];
                let j = &jacs[jj];
                for r in 0..n_x {
                    for c in 0..n_x {
                        let delta = if i == jj && r == c { 1.0 } else { 0.0 };
                        big[(i * m + r, jj * m + c)] = delta - h * a * j.fx[(r, c)];
                    }
                    for c in 0..j.fz.cols() {
                        big[(i * m + r, jj * m + n_x + c)] = -h * a * j.fz[(r, c)];
                    }
                }
            }
            let j = &jacs[i];
            for r in 0..j.gx.rows() {
                for c in 0..n_x {
                    big[(i * m + n_x + r, i * m + c)] = j.gx[(r, c)];
                }
                for c in 0..j.gz.cols() {
                    big[(i * m + n_x + r, i * m + n_x + c)] = j.gz[(r, c)];
                }
            }
        }
        big
    }

    /// Stage Newton. With `refresh` the Jacobian is rebuilt every iteration
    /// from the current stage values; otherwise it stays frozen at the step start.
    fn newton(&self, x0: &[f64], z0: &[f64], h: f64, u: &[f64], w: &mut [f64], refresh: bool) -> bool {
        let (n_x, _, m) = self.dims();
        let s = self.tab.stages();
        let n = w.len();
        let frozen = vec![(x0, z0); s];
        let mut lu = match linalg::lu_factor(&self.stage_jacobian(&frozen, h, u)) {
            Ok(lu) => lu,
            Err(_) => return false,
        };
        let mut r = vec![0.0; n];
        let mut prev = f64::INFINITY;
        for it in 0..30 {
            if refresh && it > 0 {
                let pts: Vec<(&[f64], &[f64])> =
                    (0..s).map(|i| w[i * m..(i + 1) * m].split_at(n_x)).collect();
                lu = match linalg::lu_factor(&self.stage_jacobian(&pts, h, u)) {
                    Ok(lu) => lu,
                    Err(_) => return false,
                };
            }
            self.residual(x0, h, u, w, &mut r);
            if r.iter().any(|v| !v.is_finite()) {
                return false;
            }
            let dw = lu.solve(&r);
            let mut err: f64 = 0.0;
            for i in 0..n {
                w[i] -= dw[i];
                err = err.max(dw[i].abs() / (self.newton_atol + self.newton_rtol * w[i].abs()));
            }
            if !err.is_finite() {
                return false;
            }
            if err <= 1.0 {
                return true;
            }
            if err > 2.0 * prev {
                return false;
            }
            prev = err;
        }
        false
    }

    /// One step of size `h`; returns the end state.
    fn step(&self, x0: &[f64], z0: &[f64], h: f64, u: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let (n_x, _, m) = self.dims();
        let s = self.tab.stages();
        let mut start = Vec::with_capacity(s * m);
        for _ in 0..s {
            start.extend_from_slice(x0);
            start.extend_from_slice(z0);
        }
        let mut w = start.clone();
        if !self.newton(x0, z0, h, u, &mut w, false) {
            w = start;
            if !self.newton(x0, z0, h, u, &mut w, true) {
                return None;
            }
        }
        let last = &w[(s - 1) * m..];
        let x = last[..n_x].to_vec();
        let mut z = last[n_x..].to_vec();
        if x.iter().chain(&z).any(|v| !v.is_finite()) {
            return None;
        }
        self.sys.finalize_algebraic(&x, &mut z);
        Some((x, z))
    }
}

/// Integrates from a consistent `(x0, z0)`.
pub fn integrate(
    sys: &DaeSystem,
    x0: &[f64],
    z0: &[f64],
    input: &InputSchedule,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, IntegrateError> {
    let (t0, t1) = cfg.t_span;
    if !(t1 > t0) {
        return Err(IntegrateError::Config(format!("t_span must be increasing, got ({t0}, {t1})")));
    }
    if x0.len() != sys.n_x() || z0.len() != sys.n_z() {
        return Err(IntegrateError::Config("initial state has the wrong dimension".into()));
    }
    let g0 = linalg::norm_inf(&sys.constraint(x0, z0, input.value_at(t0)));
    if !(g0 <= 1e-8) {
        return Err(IntegrateError::InconsistentIC { residual: g0 });
    }

    let (rtol, atol, fixed_h) = match cfg.step {
        StepControl::Fixed { h } => {
            if !(h > 0.0) {
                return Err(IntegrateError::Config(format!("step must be positive, got {h}")));
            }
            (1e-13, 1e-15, Some(h))
        }
        StepControl::Adaptive { rtol, atol } => {
            if !(rtol > 0.0 && atol > 0.0) {
                return Err(IntegrateError::Config("rtol and atol must be positive".into()));
            }
            (rtol, atol, None)
        }
    };
    let stepper = Stepper {
        sys,
        tab: Tableau::for_method(cfg.method),
        newton_atol: if fixed_h.is_some() { atol } else { 1e-3 * atol },
        newton_rtol: if fixed_h.is_some() { rtol } else { 1e-3 * rtol },
    };

    // Every stored time and input switch is a mandatory landing point.
    let mut stops: Vec<f64> = cfg.output_times.iter().copied().filter(|&t| t > t0 && t <= t1).collect();
    stops.extend(input.times.iter().copied().filter(|&t| t > t0 && t < t1));
    stops.push(t1);
    stops.sort_by(f64::total_cmp);
    stops.dedup();
    let store: Vec<f64> = {
        let mut s: Vec<f64> = cfg.output_times.iter().copied().filter(|&t| t > t0 && t <= t1).collect();
        if cfg.output_times.is_empty() {
            s.push(t1);
        }
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    };

    let mut traj = Trajectory {
        times: vec![t0],
        x: vec![x0.to_vec()],
        z: vec![z0.to_vec()],
        meta: TrajectoryMeta::for_system(sys, input),
    };
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut z = z0.to_vec();
    let mut h = fixed_h.unwrap_or_else(|| cfg.initial_step.unwrap_or(1e-6 * (1.0 + t0.abs())));
    let mut stop_idx = 0;
    let mut store_idx = 0;
    let p = cfg.method.order();
    let mut consecutive_rejects = 0;
    let mut accepted_steps = 0usize;

    while stop_idx < stops.len() {
        let target = stops[stop_idx];
        let remaining = target - t;
        // Land exactly on the next stop; avoid leaving a sliver.
        let (h_try, lands) = if h >= remaining * (1.0 - 1e-12) {
            (remaining, true)
        } else if fixed_h.is_none() && h > 0.5 * remaining {
            (0.5 * remaining, false)
        } else {
            (h, false)
        };
        let u = input.value_at(t + 0.5 * h_try).to_vec();

        let accepted = if fixed_h.is_some() {
            match stepper.step(&x, &z, h_try, &u) {
                Some((xn, zn)) => Some((xn, zn, h)),
                None => return Err(IntegrateError::StepFailure { t }),
            }
        } else {
            let full = stepper.step(&x, &z, h_try, &u);
            let half = stepper
                .step(&x, &z, 0.5 * h_try, &u)
                .and_then(|(xm, zm)| stepper.step(&xm, &zm, 0.5 * h_try, &u));
            match (full, half) {
                (Some((xf, zf)), Some((xh, zh))) => {
                    let denom = (2f64.powi(p) - 1.0).max(1.0);
                    let mut err: f64 = 0.0;
                    for (a, b) in xh.iter().chain(&zh).zip(xf.iter().chain(&zf)) {
                        let sc = atol + rtol * a.abs().max(b.abs());
                        err = err.max((a - b).abs() / denom / sc);
                    }
                    let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-1.0 / (p as f64 + 1.0))).clamp(0.2, 5.0) };
                    if err <= 1.0 {
                        Some((xh, zh, h_try * factor))
                    } else {
                        h = h_try * factor.min(0.9);
                        None
                    }
                }
                _ => {
                    h = 0.25 * h_try;
                    None
                }
            }
        };

        match accepted {
            Some((xn, zn, h_next)) => {
                consecutive_rejects = 0;
                accepted_steps += 1;
                t = if lands { target } else { t + h_try };
                x = xn;
                z = zn;
                if fixed_h.is_none() {
                    h = h_next.max(h_try);
                    if !lands {
                        h = h_next;
                    }
                }
                if lands {
                    stop_idx += 1;
                    while store_idx < store.len() && store[store_idx] <= t {
                        if store[store_idx] == t {
                            traj.times.push(t);
                            traj.x.push(x.clone());
                            traj.z.push(z.clone());
                        }
                        store_idx += 1;
                    }
                }
                if accepted_steps > cfg.max_steps {
                    return Err(IntegrateError::StepFailure { t });
                }
            }
            None => {
                                consecutive_rejects += 1;
                if consecutive_rejects > 60 || h < 1e-14 * (1.0 + t.abs()) {
                    return Err(IntegrateError::StepFailure { t });
                }
            }
        }
    }
    Ok(traj)
}

/// How [`project_consistent`] fills in the non-slow variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Keep every differential state and solve `g = 0` for `z`.
    Algebraic,
    /// Keep the slow states and solve `[f_fast; g] = 0` for `(x_f, z)`.
    QuasiSteady,
}

/// Makes an initial condition consistent by a Newton solve.
pub fn project_consistent(
    sys: &DaeSystem,
    x_guess: &[f64],
    z_guess: &[f64],
    u: &[f64],
    mode: Projection,
) -> Result<(Vec<f64>, Vec<f64>), IntegrateError> {
    let cfg = NewtonConfig::default();
    match mode {
        Projection::Algebraic => {
            let r = newton::solve_algebraic(sys, x_guess, u, z_guess, &cfg)?;
            r.ensure_converged()?;
            let mut z = r.y_star;
            sys.finalize_algebraic(x_guess, &mut z);
            Ok((x_guess.to_vec(), z))
        }
        Projection::QuasiSteady => {
            let x_s = sys.slow_part(x_guess);
            let y0 = sys.y_part(x_guess, z_guess);
            let r = newton::solve_extended(sys, &x_s, u, Some(&y0), &cfg)?;
            r.ensure_converged()?;
            Ok(sys.assemble(&x_s, &r.y_star))
        }
    }
}

/// Geometric grid from `t0` to `t1` with `per_decade` intervals per decade.
pub fn log_time_grid(t0: f64, t1: f64, per_decade: usize) -> Vec<f64> {
    assert!(t0 > 0.0 && t1 > t0 && per_decade > 0, "log_time_grid needs 0 < t0 < t1");
    let decades = (t1 / t0).log10();
    let n = ((decades * per_decade as f64).round() as usize).max(1);
    let ratio_exp = decades / n as f64;
    let mut grid: Vec<f64> = (0..=n).map(|k| t0 * 10f64.powf(ratio_exp * k as f64)).collect();
    grid[n] = t1;
    grid
}
