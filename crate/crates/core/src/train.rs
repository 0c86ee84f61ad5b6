//! Simulation-free physics-informed training and recursive window rollout.
//!
//! Each training window is described by a sampled initial condition, a
//! constant input, and a start time. The network predicts states over the
//! window in normalized time `τ`; the loss is the causally weighted squared
//! residual of the differential equations written in window time,
//!
//! ```text
//! r(τ) = dx̂/dτ − (dt/dτ) · f(x̂, y*(x̂))
//! ```
//!
//! where `y*` comes from a Newton layer (extended or standard) or, in penalty
//! mode, is predicted directly with a ramped `‖g‖²` term. No reference
//! trajectory is ever consulted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dae::{DaeError, DaeSystem, InputSchedule};
use crate::linalg::{self, DenseMatrix};
use crate::newton::{self, NewtonConfig, NewtonError, NewtonResult};
use crate::operator::{NetConfig, OperatorError, OperatorNet, WindowInput};
use crate::trajectory::{Trajectory, TrajectoryMeta};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("network produces {got} outputs but the {mode:?} formulation of this system needs {expected}")]
    OutputMismatch { mode: LossMode, expected: usize, got: usize },
    #[error("{:.1}% of collocation Newton solves failed", 100.0 * fraction)]
    NewtonFailureRate { fraction: f64 },
    #[error("could not sample a consistent initial condition: {0}")]
    Sampling(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error(transparent)]
    Dae(#[from] DaeError),
}

/// Which states the network predicts and how the rest are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Predict slow states; solve `[f_fast; g] = 0` for fast and algebraic ones.
    #[default]
    ExtendedNewton,
    /// Predict every differential state; solve `g = 0` for the algebraic ones.
    StandardNewton,
    /// Predict differential and algebraic states; penalize `‖g‖²`.
    Penalty,
}

impl LossMode {
    /// Network output dimension for this formulation.
    pub fn n_out(self, sys: &DaeSystem) -> usize {
        match self {
            LossMode::ExtendedNewton => sys.n_s(),
            LossMode::StandardNewton => sys.n_x(),
            LossMode::Penalty => sys.n_x() + sys.n_z(),
        }
    }

    /// The anchoring vector the network sees for a full state `(x, z)`.
    pub fn anchor(self, sys: &DaeSystem, x: &[f64], z: &[f64]) -> Vec<f64> {
        match self {
            LossMode::ExtendedNewton => sys.slow_part(x),
            LossMode::StandardNewton => x.to_vec(),
            LossMode::Penalty => x.iter().chain(z).copied().collect(),
        }
    }
}

/// Map from normalized window time `τ ∈ [0, 1]` to physical time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowClock {
    /// `t = t_a + τ·t_w`.
    Linear { t_w: f64 },
    /// `t = t_a · 10^(τ·decades)`.
    Log10 { decades: f64 },
}

impl WindowClock {
    pub fn time(&self, t_start: f64, tau: f64) -> f64 {
        match *self {
            WindowClock::Linear { t_w } => t_start + tau * t_w,
            WindowClock::Log10 { decades } => t_start * 10f64.powf(tau * decades),
        }
    }

    pub fn dt_dtau(&self, t_start: f64, tau: f64) -> f64 {
        match *self {
            WindowClock::Linear { t_w } => t_w,
            WindowClock::Log10 { decades } => self.time(t_start, tau) * std::f64::consts::LN_10 * decades,
        }
    }

    /// Time at global window coordinate `k + τ` measured from `t0`.
    pub fn global_time(&self, t0: f64, k: usize, tau: f64) -> f64 {
        let s = k as f64 + tau;
        match *self {
            WindowClock::Linear { t_w } => t0 + s * t_w,
            WindowClock::Log10 { decades } => t0 * 10f64.powf(s * decades),
        }
    }

    /// Extra context entries identifying the window (empty for linear clocks).
    pub fn descriptor(&self, t_start: f64) -> Vec<f64> {
        match self {
            WindowClock::Linear { .. } => Vec::new(),
            WindowClock::Log10 { .. } => vec![t_start.log10()],
        }
    }

    pub fn descriptor_len(&self) -> usize {
        match self {
            WindowClock::Linear { .. } => 0,
            WindowClock::Log10 { .. } => 1,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let ok = match *self {
            WindowClock::Linear { t_w } => t_w > 0.0 && t_w.is_finite(),
            WindowClock::Log10 { decades } => decades > 0.0 && decades.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config("window length must be positive".into()))
        }
    }
}

/// One window of a training batch.
#[derive(Debug, Clone)]
pub struct TrainWindow {
    pub input: WindowInput,
    pub t_start: f64,
    /// System input, constant over the window.
    pub u: Vec<f64>,
    /// Consistent `(x_f, z)` at the window start; seeds the Newton solves.
    pub y_guess: Vec<f64>,
}

/// Builds the network input for a window: context is `u ⊕ clock descriptor`.
pub fn window_input(anchor: Vec<f64>, u: &[f64], clock: &WindowClock, t_start: f64, taus: Vec<f64>) -> WindowInput {
    let mut ctx = u.to_vec();
    ctx.extend(clock.descriptor(t_start));
    WindowInput::new(anchor, Vec::new(), ctx, taus)
}

/// Anything that maps a window to predicted states with hand-written gradients.
pub trait Surrogate: Sync {
    fn n_out(&self) -> usize;
    fn n_params(&self) -> usize;
    fn forward_with_dtau(&self, w: &WindowInput) -> Result<(DenseMatrix, DenseMatrix), OperatorError>;
    fn backward(
        &self,
        w: &WindowInput,
        cot: &DenseMatrix,
        cot_dtau: Option<&DenseMatrix>,
        grad_theta: &mut [f64],
    ) -> Result<Vec<f64>, OperatorError>;
}

impl Surrogate for OperatorNet {
    fn n_out(&self) -> usize {
        OperatorNet::n_out(self)
    }
    fn n_params(&self) -> usize {
        OperatorNet::n_params(self)
    }
    fn forward_with_dtau(&self, w: &WindowInput) -> Result<(DenseMatrix, DenseMatrix), OperatorError> {
        OperatorNet::forward_with_dtau(self, w)
    }
    fn backward(
        &self,
        w: &WindowInput,
        cot: &DenseMatrix,
        cot_dtau: Option<&DenseMatrix>,
        grad_theta: &mut [f64],
    ) -> Result<Vec<f64>, OperatorError> {
        OperatorNet::backward(self, w, cot, cot_dtau, grad_theta)
    }
}

/// Settings for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    pub clock: WindowClock,
    pub n_chunks: usize,
    pub causal_eps: f64,
    /// Per-state residual weights `λ_s`; empty means all ones.
    pub lambdas: Vec<f64>,
    /// Weight on the mean `‖g‖²` (penalty mode only).
    pub penalty_weight: f64,
    pub newton: NewtonConfig,
}

impl LossConfig {
    pub fn new(mode: LossMode, clock: WindowClock) -> Self {
        Self {
            mode,
            clock,
            n_chunks: 8,
            causal_eps: 1.0,
            lambdas: Vec::new(),
            penalty_weight: 1.0,
            newton: NewtonConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub residual_loss: f64,
    pub penalty_loss: f64,
    /// RMS residual per differential state in the loss.
    pub per_state_rms: Vec<f64>,
    pub chunk_losses: Vec<f64>,
    /// Causal weights `w_j`; `w_1 = 1`, non-increasing.
    pub chunk_weights: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// RMS of `g` at the collocation points.
    pub constraint_rms: f64,
    pub n_points: usize,
    pub newton_failures: usize,
    pub newton_mean_iterations: f64,
    pub newton_max_iterations: usize,
}

impl LossReport {
    pub fn newton_failure_fraction(&self) -> f64 {
        if self.n_points == 0 {
            0.0
        } else {
            self.newton_failures as f64 / self.n_points as f64
        }
    }

    /// Flags a training signal when more than 10% of solves failed.
    pub fn failure_flag(&self) -> Option<TrainError> {
        let fraction = self.newton_failure_fraction();
        (fraction > 0.1).then_some(TrainError::NewtonFailureRate { fraction })
    }
}

enum PointGrad {
    Extended { x_s: Vec<f64>, j_xs: DenseMatrix, j_y: DenseMatrix, res: NewtonResult },
    Standard { x: Vec<f64>, f_x: DenseMatrix, f_z: DenseMatrix, res: NewtonResult },
    Penalty { f_x: DenseMatrix, f_z: DenseMatrix, g_x: DenseMatrix, g_z: DenseMatrix, g: Vec<f64> },
    Failed,
}

struct PointEval {
    chunk: usize,
    scale: f64,
    r: Vec<f64>,
    iterations: usize,
    grad: PointGrad,
}

fn n_residual_states(mode: LossMode, sys: &DaeSystem) -> usize {
    match mode {
        LossMode::ExtendedNewton => sys.n_s(),
        _ => sys.n_x(),
    }
}

fn eval_point(sys: &DaeSystem, cfg: &LossConfig, win: &TrainWindow, xhat: &[f64], dxhat: &[f64], tau: f64) -> PointEval {
    let chunk = ((tau * cfg.n_chunks as f64) as usize).min(cfg.n_chunks - 1);
    let scale = cfg.clock.dt_dtau(win.t_start, tau);
    let u = &win.u;
    let n_r = n_residual_states(cfg.mode, sys);
    let failed = |iterations| PointEval { chunk, scale, r: vec![0.0; n_r], iterations, grad: PointGrad::Failed };
    match cfg.mode {
        LossMode::ExtendedNewton => {
            let res = match newton::solve_extended(sys, xhat, u, Some(&win.y_guess), &cfg.newton) {
                Ok(r) if r.converged => r,
                Ok(r) => return failed(r.iterations),
                Err(_) => return failed(cfg.newton.max_iters),
            };
            let f = sys.f_slow(xhat, &res.y_star, u);
            let r = dxhat.iter().zip(&f).map(|(d, f)| d - scale * f).collect();
            let ext = sys.extended_jacobians(xhat, &res.y_star, u);
            PointEval {
                chunk,
                scale,
                r,
                iterations: res.iterations,
                grad: PointGrad::Extended { x_s: xhat.to_vec(), j_xs: ext.slow_xs, j_y: ext.slow_y, res },
            }
        }
        LossMode::StandardNewton => {
            let z0 = &win.y_guess[sys.n_f()..];
            let res = match newton::solve_algebraic(sys, xhat, u, z0, &cfg.newton) {
                Ok(r) if r.converged => r,
                Ok(r) => return failed(r.iterations),
                Err(_) => return failed(cfg.newton.max_iters),
            };
            let f = sys.rhs(xhat, &res.y_star, u);
            let r = dxhat.iter().zip(&f).map(|(d, f)| d - scale * f).collect();
            let j = sys.model().jacobians(xhat, &res.y_star, u);
            PointEval {
                chunk,
                scale,
                r,
                iterations: res.iterations,
                grad: PointGrad::Standard { x: xhat.to_vec(), f_x: j.fx, f_z: j.fz, res },
            }
        }
        LossMode::Penalty => {
            let (x, z) = xhat.split_at(sys.n_x());
            let f = sys.rhs(x, z, u);
            let r = dxhat[..sys.n_x()].iter().zip(&f).map(|(d, f)| d - scale * f).collect();
            let j = sys.model().jacobians(x, z, u);
            let g = sys.constraint(x, z, u);
            PointEval { chunk, scale, r, iterations: 0, grad: PointGrad::Penalty { f_x: j.fx, f_z: j.fz, g_x: j.gx, g_z: j.gz, g } }
        }
    }
}

/// Causally weighted physics loss over a batch and its gradient with respect
/// to the network parameters. Newton failures drop the point from the loss and
/// are counted in the report.
pub fn physics_loss<S: Surrogate + ?Sized>(
    net: &S,
    sys: &DaeSystem,
    batch: &[TrainWindow],
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<f64>), TrainError> {
    let expected = cfg.mode.n_out(sys);
    if net.n_out() != expected {
        return Err(TrainError::OutputMismatch { mode: cfg.mode, expected, got: net.n_out() });
    }
    if cfg.n_chunks == 0 || !(cfg.causal_eps >= 0.0) {
        return Err(TrainError::Config("n_chunks must be ≥ 1 and causal ε ≥ 0".into()));
    }
    let n_r = n_residual_states(cfg.mode, sys);
    let lambdas: Vec<f64> = if cfg.lambdas.is_empty() { vec![1.0; n_r] } else { cfg.lambdas.clone() };
    if lambdas.len() != n_r {
        return Err(TrainError::Config(format!("expected {n_r} residual weights, got {}", lambdas.len())));
    }

    // Pass 1: forward, Newton solves, residuals.
    let evals: Vec<Vec<PointEval>> = batch
        .par_iter()
        .map(|win| {
            let (vals, ders) = net.forward_with_dtau(&win.input)?;
            Ok(win
                .input
                .taus
                .iter()
                .enumerate()
                .map(|(p, &tau)| eval_point(sys, cfg, win, vals.row(p), ders.row(p), tau))
                .collect())
        })
        .collect::<Result<_, OperatorError>>()?;

    // Pass 2: chunk statistics and causal weights (treated as constants).
    let nc = cfg.n_chunks;
    let mut counts = vec![0usize; nc];
    let mut chunk_state = vec![vec![0.0; n_r]; nc];
    let mut g_sq = 0.0;
    let mut n_points = 0;
    let mut failures = 0;
    let mut iters_sum = 0usize;
    let mut iters_max = 0usize;
    for pe in evals.iter().flatten() {
        n_points += 1;
        iters_sum += pe.iterations;
        iters_max = iters_max.max(pe.iterations);
        if matches!(pe.grad, PointGrad::Failed) {
            failures += 1;
            continue;
        }
        counts[pe.chunk] += 1;
        for s in 0..n_r {
            chunk_state[pe.chunk][s] += pe.r[s] * pe.r[s];
        }
        if let PointGrad::Penalty { g, .. } = &pe.grad {
            g_sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let n_ok = n_points - failures;
    let chunk_losses: Vec<f64> = (0..nc)
        .map(|j| if counts[j] == 0 { 0.0 } else { (0..n_r).map(|s| lambdas[s] * chunk_state[j][s]).sum::<f64>() / counts[j] as f64 })
        .collect();
    let mut chunk_weights = Vec::with_capacity(nc);
    let mut acc = 0.0;
    for &lj in &chunk_losses {
        chunk_weights.push((-cfg.causal_eps * acc).exp());
        acc += lj;
    }
    let residual_loss: f64 = chunk_weights.iter().zip(&chunk_losses).map(|(w, l)| w * l).sum::<f64>() / nc as f64;
    let penalty_on = cfg.mode == LossMode::Penalty && n_ok > 0;
    let penalty_loss = if penalty_on { cfg.penalty_weight * g_sq / n_ok as f64 } else { 0.0 };
    let per_state_rms: Vec<f64> = (0..n_r)
        .map(|s| if n_ok == 0 { 0.0 } else { ((0..nc).map(|j| chunk_state[j][s]).sum::<f64>() / n_ok as f64).sqrt() })
        .collect();

    // Pass 3: cotangents and reverse mode, reduced in batch order.
    let n_out = net.n_out();
    let n_x = sys.n_x();
    let grads: Vec<Vec<f64>> = batch
        .par_iter()
        .zip(evals.par_iter())
        .map(|(win, pts)| -> Result<Vec<f64>, TrainError> {
            let n_tau = win.input.taus.len();
            let mut cot = DenseMatrix::zeros(n_tau, n_out);
            let mut cot_d = DenseMatrix::zeros(n_tau, n_out);
            for (p, pe) in pts.iter().enumerate() {
                if matches!(pe.grad, PointGrad::Failed) {
                    continue;
                }
                let coef = 2.0 * chunk_weights[pe.chunk] / (counts[pe.chunk] as f64 * nc as f64);
                let rbar: Vec<f64> = (0..n_r).map(|s| coef * lambdas[s] * pe.r[s]).collect();
                for s in 0..n_r {
                    cot_d[(p, s)] = rbar[s];
                }
                // r = dx̂ − c·f, so ∂r/∂(state) = −c·∂f/∂(state).
                let neg: Vec<f64> = rbar.iter().map(|v| -pe.scale * v).collect();
                match &pe.grad {
                    PointGrad::Extended { x_s, j_xs, j_y, res } => {
                        let direct = j_xs.tmatvec(&neg);
                        let indirect = newton::vjp_through_layer(sys, x_s, &win.u, res, &j_y.tmatvec(&neg))?;
                        for s in 0..n_out {
                            cot[(p, s)] = direct[s] + indirect[s];
                        }
                    }
                    PointGrad::Standard { x, f_x, f_z, res } => {
                        let direct = f_x.tmatvec(&neg);
                        let indirect = if sys.n_z() > 0 {
                            newton::vjp_through_algebraic(sys, x, &win.u, res, &f_z.tmatvec(&neg))?
                        } else {
                            vec![0.0; n_x]
                        };
                        for s in 0..n_out {
                            cot[(p, s)] = direct[s] + indirect[s];
                        }
                    }
                    PointGrad::Penalty { f_x, f_z, g_x, g_z, g } => {
                        let pc = 2.0 * cfg.penalty_weight / n_ok as f64;
                        let gbar: Vec<f64> = g.iter().map(|v| pc * v).collect();
                        let dx = f_x.tmatvec(&neg);
                        let dz = f_z.tmatvec(&neg);
                        let px = g_x.tmatvec(&gbar);
                        let pz = g_z.tmatvec(&gbar);
                        for s in 0..n_x {
                            cot[(p, s)] = dx[s] + px[s];
                        }
                        for s in 0..sys.n_z() {
                            cot[(p, n_x + s)] = dz[s] + pz[s];
                        }
                    }
                    PointGrad::Failed => unreachable!(),
                }
            }
            let mut g = vec![0.0; net.n_params()];
            net.backward(&win.input, &cot, Some(&cot_d), &mut g)?;
            Ok(g)
        })
        .collect::<Result<_, _>>()?;
    let mut grad = vec![0.0; net.n_params()];
    for g in &grads {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    let constraint_rms = match cfg.mode {
        LossMode::Penalty if n_ok > 0 => (g_sq / (n_ok * sys.n_z().max(1)) as f64).sqrt(),
        _ => 0.0,
    };
    let report = LossReport {
        total: residual_loss + penalty_loss,
        residual_loss,
        penalty_loss,
        per_state_rms,
        chunk_losses,
        chunk_weights,
        lambdas,
        constraint_rms,
        n_points,
        newton_failures: failures,
        newton_mean_iterations: if n_points == 0 { 0.0 } else { iters_sum as f64 / n_points as f64 },
        newton_max_iterations: iters_max,
    };
    Ok((report, grad))
}

/// Box ranges for sampling training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSampler {
    /// One `[lo, hi]` per slow state.
    pub slow_ranges: Vec<[f64; 2]>,
    /// One `[lo, hi]` per system input.
    #[serde(default)]
    pub input_ranges: Vec<[f64; 2]>,
    /// Window start range: time for linear clocks, `log10(t)` for log clocks.
    #[serde(default)]
    pub start_range: [f64; 2],
    /// Rejects draws whose initial slow rate in window time,
    /// `|dt/dτ · f_slow|` divided by the slow range width, exceeds this bound.
    #[serde(default)]
    pub max_tau_rate: Option<f64>,
    /// Rejects draws whose reduced slow Jacobian in window time,
    /// `dt/dτ · ‖∂f_slow/∂x_s + ∂f_slow/∂y · dy*/dx_s‖_∞`, exceeds this bound.
    #[serde(default)]
    pub max_tau_stiffness: Option<f64>,
    /// Fraction of slow-state draws placed near a range edge, at a distance
    /// log-uniform in `[edge_min, 1]` times the range width.
    #[serde(default)]
    pub edge_fraction: f64,
    #[serde(default = "default_edge_min")]
    pub edge_min: f64,
}

fn default_edge_min() -> f64 {
    1e-3
}

impl WindowSampler {
    fn draw(range: [f64; 2], rng: &mut ChaCha8Rng) -> f64 {
        if range[1] > range[0] {
            rng.gen_range(range[0]..range[1])
        } else {
            range[0]
        }
    }

    fn draw_slow(&self, range: [f64; 2], rng: &mut ChaCha8Rng) -> f64 {
        if self.edge_fraction > 0.0 && range[1] > range[0] && rng.gen::<f64>() < self.edge_fraction {
            let width = range[1] - range[0];
            let d = width * self.edge_min.powf(rng.gen::<f64>());
            if rng.gen::<bool>() {
                range[0] + d
            } else {
                range[1] - d
            }
        } else {
            Self::draw(range, rng)
        }
    }

    /// Consistent state at a sampled slow state: `(x, z)` from the extended solve.
    pub fn sample_state(
        &self,
        sys: &DaeSystem,
        rng: &mut ChaCha8Rng,
        newton: &NewtonConfig,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), TrainError> {
        let guess = {
            let (x, z, _) = sys.model().sample_point();
            sys.y_part(&x, &z)
        };
        for _ in 0..100 {
            let x_s: Vec<f64> = self.slow_ranges.iter().map(|&r| self.draw_slow(r, rng)).collect();
            let u: Vec<f64> = self.input_ranges.iter().map(|&r| Self::draw(r, rng)).collect();
            if let Ok(res) = newton::solve_extended(sys, &x_s, &u, Some(&guess), newton) {
                if res.converged {
                    let (x, z) = sys.assemble(&x_s, &res.y_star);
                    return Ok((x, z, u));
                }
            }
        }
        Err(TrainError::Sampling("100 consecutive draws failed to converge".into()))
    }

    fn validate(&self, sys: &DaeSystem) -> Result<(), TrainError> {
        if self.slow_ranges.len() != sys.n_s() || self.input_ranges.len() != sys.n_u() {
            return Err(TrainError::Config(format!(
                "sampler needs {} slow ranges and {} input ranges",
                sys.n_s(),
                sys.n_u()
            )));
        }
        if !((0.0..=1.0).contains(&self.edge_fraction) && self.edge_min > 0.0 && self.edge_min <= 1.0) {
            return Err(TrainError::Config("edge_fraction must lie in [0, 1] and edge_min in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    /// Learning rate reached at the last epoch by exponential decay.
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, lr_final: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_windows")]
    pub windows_per_batch: usize,
    #[serde(default = "default_collocation")]
    pub collocation: usize,
    #[serde(default = "default_chunks")]
    pub n_chunks: usize,
    #[serde(default = "default_eps")]
    pub causal_eps: f64,
    #[serde(default = "default_true")]
    pub adaptive_lambdas: bool,
    #[serde(default = "default_lambda_period")]
    pub lambda_period: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub sampler: WindowSampler,
    pub clock: WindowClock,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: LossMode,
    /// Penalty weight ramps as `10^(p·min(1, 2e/E))` with this `p`.
    #[serde(default = "default_penalty_decades")]
    pub penalty_decades: f64,
    #[serde(default)]
    pub newton: NewtonConfig,
}

fn default_windows() -> usize {
    16
}
fn default_collocation() -> usize {
    128
}
fn default_chunks() -> usize {
    8
}
fn default_eps() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_lambda_period() -> usize {
    500
}
fn default_penalty_decades() -> f64 {
    3.0
}

impl TrainConfig {
    pub fn new(epochs: usize, sampler: WindowSampler, clock: WindowClock, mode: LossMode) -> Self {
        Self {
            epochs,
            windows_per_batch: default_windows(),
            collocation: default_collocation(),
            n_chunks: default_chunks(),
            causal_eps: default_eps(),
            adaptive_lambdas: true,
            lambda_period: default_lambda_period(),
            adam: AdamConfig::default(),
            sampler,
            clock,
            seed: 0,
            mode,
            penalty_decades: default_penalty_decades(),
            newton: NewtonConfig::default(),
        }
    }

    pub fn penalty_weight(&self, epoch: usize) -> f64 {
        let half = (self.epochs as f64 / 2.0).max(1.0);
        10f64.powf(self.penalty_decades * (epoch as f64 / half).min(1.0))
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs.max(1) as f64;
        self.adam.lr * (self.adam.lr_final / self.adam.lr).powf(frac)
    }

    fn validate(&self, sys: &DaeSystem) -> Result<(), TrainError> {
        self.clock.validate()?;
        self.sampler.validate(sys)?;
        if self.windows_per_batch == 0 || self.collocation == 0 || self.n_chunks == 0 {
            return Err(TrainError::Config("batch, collocation and chunk counts must be ≥ 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr_final > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Network config whose input normalization matches the sampler's box.
pub fn net_config_for(sys: &DaeSystem, cfg: &TrainConfig, n_basis: usize, hidden: usize, depth: usize, seed: u64) -> NetConfig {
    let n_out = cfg.mode.n_out(sys);
    let n_context = sys.n_u() + cfg.clock.descriptor_len();
    let mut net = NetConfig::new(n_out, n_context, n_basis, hidden, depth).with_seed(seed);
    let mid_half = |r: [f64; 2]| ((r[0] + r[1]) / 2.0, ((r[1] - r[0]) / 2.0).max(1e-12));
    let mut shift = Vec::new();
    let mut scale = Vec::new();
    if cfg.mode == LossMode::ExtendedNewton {
        for &r in &cfg.sampler.slow_ranges {
            let (m, h) = mid_half(r);
            shift.push(m);
            scale.push(h);
        }
    } else {
        // Fast and algebraic anchors keep their raw scale.
        shift.extend(std::iter::repeat(0.0).take(n_out));
        scale.extend(std::iter::repeat(1.0).take(n_out));
        for (k, &i) in sys.partition().slow.iter().enumerate() {
            let (m, h) = mid_half(cfg.sampler.slow_ranges[k]);
            shift[i] = m;
            scale[i] = h;
        }
    }
    for &r in &cfg.sampler.input_ranges {
        let (m, h) = mid_half(r);
        shift.push(m);
        scale.push(h);
    }
    if cfg.clock.descriptor_len() > 0 {
        let (m, h) = mid_half(cfg.sampler.start_range);
        shift.push(m);
        scale.push(h);
    }
    net.input_shift = shift;
    net.input_scale = scale;
    net
}

fn draw_start(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> f64 {
    let start = WindowSampler::draw(cfg.sampler.start_range, rng);
    match cfg.clock {
        WindowClock::Linear { .. } => start,
        WindowClock::Log10 { .. } => 10f64.powf(start),
    }
}

fn within_rate(sys: &DaeSystem, cfg: &TrainConfig, x: &[f64], z: &[f64], u: &[f64], t_start: f64) -> bool {
    let x_s = sys.slow_part(x);
    let y = sys.y_part(x, z);
    let c = cfg.clock.dt_dtau(t_start, 0.0);
    if let Some(limit) = cfg.sampler.max_tau_rate {
        let f = sys.f_slow(&x_s, &y, u);
        let ok = f
            .iter()
            .zip(&cfg.sampler.slow_ranges)
            .all(|(fi, r)| (c * fi).abs() <= limit * (r[1] - r[0]).abs().max(f64::MIN_POSITIVE));
        if !ok {
            return false;
        }
    }
    if let Some(limit) = cfg.sampler.max_tau_stiffness {
        let ext = sys.extended_jacobians(&x_s, &y, u);
        let Ok(lu) = linalg::lu_factor(&ext.f_y) else { return false };
        let reduced = ext.slow_xs.sub(&ext.slow_y.matmul(&lu.solve_matrix(&ext.f_xs)));
        if !(c * reduced.norm_inf() <= limit) {
            return false;
        }
    }
    true
}

/// Draws one training batch.
pub fn sample_batch(sys: &DaeSystem, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<TrainWindow>, TrainError> {
    (0..cfg.windows_per_batch)
        .map(|_| {
            let mut attempt = 0;
            let (x, z, u, t_start) = loop {
                let (x, z, u) = cfg.sampler.sample_state(sys, rng, &cfg.newton)?;
                let t_start = draw_start(cfg, rng);
                if within_rate(sys, cfg, &x, &z, &u, t_start) {
                    break (x, z, u, t_start);
                }
                attempt += 1;
                if attempt >= 10_000 {
                    return Err(TrainError::Sampling("rate filter rejected 10000 consecutive draws".into()));
                }
            };
            let m = cfg.collocation;
            let taus = (0..m).map(|i| (i as f64 + rng.gen::<f64>()) / m as f64).collect();
            let anchor = cfg.mode.anchor(sys, &x, &z);
            Ok(TrainWindow {
                input: window_input(anchor, &u, &cfg.clock, t_start, taus),
                t_start,
                y_guess: sys.y_part(&x, &z),
                u,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub per_state_rms: Vec<f64>,
    pub constraint_rms: f64,
    pub newton_failure_fraction: f64,
    pub newton_mean_iterations: f64,
    pub lr: f64,
    pub penalty_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub final_lambdas: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.total)
    }

    /// Trailing moving average of the total loss over `window` epochs.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let window = window.max(1);
        let mut sum = 0.0;
        self.history
            .iter()
            .enumerate()
            .map(|(i, r)| {
                sum += r.total;
                if i >= window {
                    sum -= self.history[i - window].total;
                }
                sum / (i + 1).min(window) as f64
            })
            .collect()
    }

    /// Loss history as CSV with one row per epoch; `smoothed` is the
    /// 100-epoch trailing mean of `total`.
    pub fn to_csv(&self, mode: LossMode) -> String {
        use std::fmt::Write as _;
        let n_s = self.history.first().map_or(0, |r| r.per_state_rms.len());
        let smoothed = self.smoothed_loss(100);
        let mut out = String::from("epoch,total,smoothed");
        for s in 0..n_s {
            write!(out, ",rms_{s}").unwrap();
        }
        if mode == LossMode::Penalty {
            out.push_str(",g_rms,penalty_weight");
        }
        out.push_str(",newton_fail_frac,newton_mean_iters,lr\n");
        for (r, sm) in self.history.iter().zip(&smoothed) {
            write!(out, "{},{:.16e},{sm:.16e}", r.epoch, r.total).unwrap();
            for v in &r.per_state_rms {
                write!(out, ",{v:.16e}").unwrap();
            }
            if mode == LossMode::Penalty {
                write!(out, ",{:.16e},{:.16e}", r.constraint_rms, r.penalty_weight).unwrap();
            }
            writeln!(out, ",{:.16e},{:.16e},{:.16e}", r.newton_failure_fraction, r.newton_mean_iterations, r.lr).unwrap();
        }
        out
    }
}

/// Adam over an f64 master copy of θ.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t);
        let b2t = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            theta[i] -= lr * (self.m[i] / b1t) / ((self.v[i] / b2t).sqrt() + cfg.eps);
        }
    }
}

/// Trains in place; `observer` sees every epoch record and the current net.
pub fn train_with_observer(
    net: &mut OperatorNet,
    sys: &DaeSystem,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord, &OperatorNet),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(sys)?;
    let expected = cfg.mode.n_out(sys);
    if net.n_out() != expected {
        return Err(TrainError::OutputMismatch { mode: cfg.mode, expected, got: net.n_out() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = net.params();
    let mut adam = Adam::new(theta.len());
    let n_r = n_residual_states(cfg.mode, sys);
    let mut lambdas = vec![1.0; n_r];
    let mut mean_sq = vec![0.0; n_r];
    let mut ms_count = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    let mut loss_cfg = LossConfig::new(cfg.mode, cfg.clock);
    loss_cfg.n_chunks = cfg.n_chunks;
    loss_cfg.causal_eps = cfg.causal_eps;
    loss_cfg.newton = cfg.newton.clone();

    for epoch in 0..cfg.epochs {
        let batch = sample_batch(sys, cfg, &mut rng)?;
        loss_cfg.lambdas = lambdas.clone();
        loss_cfg.penalty_weight = cfg.penalty_weight(epoch);
        let (report, grad) = physics_loss(&*net, sys, &batch, &loss_cfg)?;
        let lr = cfg.learning_rate(epoch);
        if grad.iter().all(|g| g.is_finite()) {
            adam.step(&mut theta, &grad, lr, &cfg.adam);
            net.set_params(&theta)?;
        }

        if cfg.adaptive_lambdas && n_r > 1 {
            for s in 0..n_r {
                mean_sq[s] += report.per_state_rms[s].powi(2);
            }
            ms_count += 1;
            if (epoch + 1) % cfg.lambda_period.max(1) == 0 {
                let inv: Vec<f64> = mean_sq.iter().map(|&m| 1.0 / ((m / ms_count as f64).sqrt() + 1e-12)).collect();
                let mean = inv.iter().sum::<f64>() / n_r as f64;
                lambdas = inv.iter().map(|v| v / mean).collect();
                mean_sq.iter_mut().for_each(|v| *v = 0.0);
                ms_count = 0;
            }
        }

        let record = EpochRecord {
            epoch,
            total: report.total,
            per_state_rms: report.per_state_rms.clone(),
            constraint_rms: report.constraint_rms,
            newton_failure_fraction: report.newton_failure_fraction(),
            newton_mean_iterations: report.newton_mean_iterations,
            lr,
            penalty_weight: loss_cfg.penalty_weight,
        };
        observer(&record, net);
        history.push(record);
    }
    Ok(TrainOutcome { history, final_lambdas: lambdas })
}

pub fn train(net: &mut OperatorNet, sys: &DaeSystem, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_observer(net, sys, cfg, &mut |_, _| {})
}

/// State carried from one rollout window to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutState {
    pub window: usize,
    pub t_start: f64,
    /// Network anchor at the window start.
    pub anchor: Vec<f64>,
    /// Solved `(x_f, z)` at the window start.
    pub y: Vec<f64>,
    /// Newton convergence flag per emitted point of this window.
    pub converged: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub mode: LossMode,
    pub clock: WindowClock,
    pub t0: f64,
    pub n_windows: usize,
    /// Emitted points per window (at `τ = k/m`, `k = 1..m`).
    #[serde(default = "default_points")]
    pub points_per_window: usize,
    #[serde(default)]
    pub newton: NewtonConfig,
}

fn default_points() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    pub states: Vec<RolloutState>,
    pub flagged_windows: Vec<usize>,
    /// Newton iterations per emitted point (0 in penalty mode).
    pub newton_iterations: Vec<usize>,
}

impl RolloutResult {
    pub fn flagged_fraction(&self) -> f64 {
        if self.states.is_empty() {
            0.0
        } else {
            self.flagged_windows.len() as f64 / self.states.len() as f64
        }
    }
}

/// Emits the full state `(x, z)` for a network output, solving where the
/// formulation requires it.
fn complete_state(
    sys: &DaeSystem,
    mode: LossMode,
    out: &[f64],
    u: &[f64],
    y_prev: &[f64],
    newton_cfg: &NewtonConfig,
) -> (Vec<f64>, Vec<f64>, bool, usize) {
    match mode {
        LossMode::ExtendedNewton => match newton::solve_extended(sys, out, u, Some(y_prev), newton_cfg) {
            Ok(r) => {
                let (x, z) = sys.assemble(out, &r.y_star);
                (x, z, r.converged, r.iterations)
            }
            Err(_) => {
                let (x, z) = sys.assemble(out, y_prev);
                (x, z, false, newton_cfg.max_iters)
            }
        },
        LossMode::StandardNewton => {
            let z_prev = &y_prev[sys.n_f()..];
            match newton::solve_algebraic(sys, out, u, z_prev, newton_cfg) {
                Ok(r) => (out.to_vec(), r.y_star, r.converged, r.iterations),
                Err(_) => (out.to_vec(), z_prev.to_vec(), false, newton_cfg.max_iters),
            }
        }
        LossMode::Penalty => {
            let (x, z) = out.split_at(sys.n_x());
            (x.to_vec(), z.to_vec(), true, 0)
        }
    }
}

/// Recursive window rollout from a consistent `(x0, z0)` at `cfg.t0`. Each
/// window's `τ = 1` prediction is the next window's anchor; unconverged
/// solves are kept as computed and their windows flagged.
pub fn rollout(
    net: &OperatorNet,
    sys: &DaeSystem,
    x0: &[f64],
    z0: &[f64],
    input: &InputSchedule,
    cfg: &RolloutConfig,
) -> Result<RolloutResult, TrainError> {
    cfg.clock.validate()?;
    let expected = cfg.mode.n_out(sys);
    if net.n_out() != expected {
        return Err(TrainError::OutputMismatch { mode: cfg.mode, expected, got: net.n_out() });
    }
    if cfg.points_per_window == 0 || cfg.n_windows == 0 {
        return Err(TrainError::Config("rollout needs at least one window and one point per window".into()));
    }
    let mut traj = Trajectory::new(TrajectoryMeta::for_system(sys, input));
    traj.push(cfg.t0, x0.to_vec(), z0.to_vec());
    let m = cfg.points_per_window;
    let taus: Vec<f64> = (0..=m).map(|k| k as f64 / m as f64).collect();
    let mut anchor = cfg.mode.anchor(sys, x0, z0);
    let mut y = sys.y_part(x0, z0);
    let mut states = Vec::with_capacity(cfg.n_windows);
    let mut flagged = Vec::new();
    let mut iterations = Vec::new();

    for k in 0..cfg.n_windows {
        let t_start = cfg.clock.global_time(cfg.t0, k, 0.0);
        let u = input.value_at(t_start).to_vec();
        let w = window_input(anchor.clone(), &u, &cfg.clock, t_start, taus.clone());
        let vals = net.forward(&w)?;
        let mut state = RolloutState { window: k, t_start, anchor: anchor.clone(), y: y.clone(), converged: Vec::with_capacity(m) };
        for (p, &tau) in taus.iter().enumerate().skip(1) {
            let (x, z, ok, it) = complete_state(sys, cfg.mode, vals.row(p), &u, &y, &cfg.newton);
            y = sys.y_part(&x, &z);
            state.converged.push(ok);
            iterations.push(it);
            traj.push(cfg.clock.global_time(cfg.t0, k, tau), x, z);
        }
        if state.converged.iter().any(|c| !c) {
            flagged.push(k);
        }
        anchor = vals.row(m).to_vec();
        states.push(state);
    }
    Ok(RolloutResult { trajectory: traj, states, flagged_windows: flagged, newton_iterations: iterations })
}

/// Rollout of a formulation that leaves an invariant unenforced; returns the
/// result and `|invariant(x, z)|` at every emitted point.
pub fn rollout_ode_formulation(
    net: &OperatorNet,
    sys: &DaeSystem,
    x0: &[f64],
    z0: &[f64],
    input: &InputSchedule,
    cfg: &RolloutConfig,
    invariant: &dyn Fn(&[f64], &[f64]) -> f64,
) -> Result<(RolloutResult, Vec<f64>), TrainError> {
    let res = rollout(net, sys, x0, z0, input, cfg)?;
    let drift = res.trajectory.x.iter().zip(&res.trajectory.z).map(|(x, z)| invariant(x, z).abs()).collect();
    Ok((res, drift))
}

/// Robertson mass balance `y1 + y2 + y3 − 1` for either formulation.
pub fn robertson_mass_balance(x: &[f64], z: &[f64]) -> f64 {
    x.iter().chain(z).sum::<f64>() - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dae::make_linear_probe;
    use crate::operator::Precision;

    fn linear_cfg(mode: LossMode) -> TrainConfig {
        let sampler = WindowSampler { slow_ranges: vec![[-1.0, 1.0]], input_ranges: vec![], start_range: [0.0, 0.0], max_tau_rate: None, max_tau_stiffness: None, edge_fraction: 0.0, edge_min: 1e-3 };
        let mut cfg = TrainConfig::new(10, sampler, WindowClock::Linear { t_w: 0.5 }, mode);
        cfg.windows_per_batch = 3;
        cfg.collocation = 8;
        cfg
    }

    #[test]
    fn causal_weights_disabled_at_zero_eps() {
        let sys = make_linear_probe();
        let cfg = linear_cfg(LossMode::ExtendedNewton);
        let net = OperatorNet::new(net_config_for(&sys, &cfg, 4, 8, 1, 1)).unwrap();
        let batch = sample_batch(&sys, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut lc = LossConfig::new(cfg.mode, cfg.clock);
        lc.causal_eps = 0.0;
        let (rep, _) = physics_loss(&net, &sys, &batch, &lc).unwrap();
        assert!(rep.chunk_weights.iter().all(|&w| w == 1.0));
        lc.causal_eps = 1.0;
        let (rep, _) = physics_loss(&net, &sys, &batch, &lc).unwrap();
        assert_eq!(rep.chunk_weights[0], 1.0);
        assert!(rep.chunk_weights.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rollout_chains_windows_exactly() {
        let sys = make_linear_probe();
        let cfg = linear_cfg(LossMode::ExtendedNewton);
        let net = OperatorNet::new(net_config_for(&sys, &cfg, 4, 8, 1, 2).with_precision(Precision::F64)).unwrap();
        let rc = RolloutConfig {
            mode: LossMode::ExtendedNewton,
            clock: cfg.clock,
            t0: 0.0,
            n_windows: 3,
            points_per_window: 2,
            newton: NewtonConfig::default(),
        };
        let (x0, z0) = (vec![0.5, 0.5], vec![0.5]);
        let res = rollout(&net, &sys, &x0, &z0, &InputSchedule::none(), &rc).unwrap();
        assert_eq!(res.trajectory.len(), 7);
        for k in 1..3 {
            let end_prev = res.trajectory.x[2 * k][0];
            assert_eq!(res.states[k].anchor[0], end_prev);
        }
        assert!(res.flagged_windows.is_empty());
    }

    #[test]
    fn full_chain_gradient_matches_fd() {
        let sys = make_linear_probe();
        for mode in [LossMode::ExtendedNewton, LossMode::StandardNewton, LossMode::Penalty] {
            let cfg = linear_cfg(mode);
            let mut net = OperatorNet::new(net_config_for(&sys, &cfg, 4, 8, 1, 3).with_precision(Precision::F64).with_branch_output_gain(1.0)).unwrap();
            let batch = sample_batch(&sys, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let mut lc = LossConfig::new(mode, cfg.clock);
            lc.causal_eps = 0.0;
            lc.penalty_weight = 3.0;
            let (_, g) = physics_loss(&net, &sys, &batch, &lc).unwrap();
            let theta = net.params();
            let g_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in (0..theta.len()).step_by(5) {
                let h = 1e-6;
                let mut tp = theta.clone();
                tp[i] += h;
                net.set_params(&tp).unwrap();
                let fp = physics_loss(&net, &sys, &batch, &lc).unwrap().0.total;
                tp[i] -= 2.0 * h;
                net.set_params(&tp).unwrap();
                let fm = physics_loss(&net, &sys, &batch, &lc).unwrap().0.total;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3 * g_max), "{mode:?} θ[{i}]: {fd} vs {}", g[i]);
            }
            net.set_params(&theta).unwrap();
        }
    }
}
