//! Semi-explicit index-1 DAEs `ẋ = f(x, z, u)`, `0 = g(x, z, u)` with a
//! slow/fast split of the differential states, plus the built-in systems.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, DenseMatrix, LinalgError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DaeError {
    #[error("analytic Jacobian {block}[{row},{col}] = {analytic:e} disagrees with finite difference {fd:e} for system '{system}'")]
    JacobianMismatch {
        system: String,
        block: &'static str,
        row: usize,
        col: usize,
        analytic: f64,
        fd: f64,
    },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("algebraic Jacobian J_z is singular (index-1 violation)")]
    SingularJz,
    #[error("quadratic constraint has no real root (discriminant {discriminant:e})")]
    NoRealRoot { discriminant: f64 },
    #[error("unknown system '{0}'")]
    UnknownSystem(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Partial derivatives of `f` and `g` with respect to the full state `x`,
/// the algebraic variables `z` and the external input `u`.
#[derive(Debug, Clone)]
pub struct DaeJacobians {
    pub fx: DenseMatrix,
    pub fz: DenseMatrix,
    pub fu: DenseMatrix,
    pub gx: DenseMatrix,
    pub gz: DenseMatrix,
    pub gu: DenseMatrix,
}

impl DaeJacobians {
    pub fn zeros(n_x: usize, n_z: usize, n_u: usize) -> Self {
        Self {
            fx: DenseMatrix::zeros(n_x, n_x),
            fz: DenseMatrix::zeros(n_x, n_z),
            fu: DenseMatrix::zeros(n_x, n_u),
            gx: DenseMatrix::zeros(n_z, n_x),
            gz: DenseMatrix::zeros(n_z, n_z),
            gu: DenseMatrix::zeros(n_z, n_u),
        }
    }
}

/// A concrete DAE model over the full state vector. Partitioning into slow
/// and fast states is layered on top by [`DaeSystem`].
pub trait DaeModel: Send + Sync {
    fn name(&self) -> &str;
    fn n_x(&self) -> usize;
    fn n_z(&self) -> usize;
    fn n_u(&self) -> usize {
        0
    }
    fn state_names(&self) -> Vec<String> {
        (0..self.n_x()).map(|i| format!("x{i}")).collect()
    }
    fn algebraic_names(&self) -> Vec<String> {
        (0..self.n_z()).map(|i| format!("z{i}")).collect()
    }
    fn parameters(&self) -> BTreeMap<String, f64>;

    fn rhs(&self, x: &[f64], z: &[f64], u: &[f64], out: &mut [f64]);
    fn constraint(&self, x: &[f64], z: &[f64], u: &[f64], out: &mut [f64]);
    fn jacobians(&self, x: &[f64], z: &[f64], u: &[f64]) -> DaeJacobians;

    /// Default `(slow, fast)` index lists into `x`.
    fn default_partition(&self) -> (Vec<usize>, Vec<usize>);

    /// A representative consistent point used for the construction-time
    /// Jacobian check.
    fn sample_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>);

    /// Hook to overwrite algebraic variables with an exact closed form after
    /// a numerical solve. The default leaves `z` untouched.
    fn finalize_algebraic(&self, _x: &[f64], _z: &mut [f64]) {}

    /// Closed-form starting point `y = (x_f, z)` for the extended solve, when
    /// the model has one for this partition.
    fn qss_guess(&self, _slow: &[usize], _fast: &[usize], _x_s: &[f64], _u: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Slow/fast index lists into the differential state vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaePartition {
    pub slow: Vec<usize>,
    pub fast: Vec<usize>,
    pub n_z: usize,
}

impl DaePartition {
    pub fn new(slow: Vec<usize>, fast: Vec<usize>, n_x: usize, n_z: usize) -> Result<Self, DaeError> {
        let mut seen = vec![false; n_x];
        for &i in slow.iter().chain(&fast) {
            if i >= n_x {
                return Err(DaeError::InvalidPartition(format!("index {i} out of range for n_x = {n_x}")));
            }
            if seen[i] {
                return Err(DaeError::InvalidPartition(format!("index {i} listed twice")));
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DaeError::InvalidPartition(format!("state {missing} is neither slow nor fast")));
        }
        Ok(Self { slow, fast, n_z })
    }

    pub fn n_s(&self) -> usize {
        self.slow.len()
    }

    pub fn n_f(&self) -> usize {
        self.fast.len()
    }

    /// Dimension of the extended unknown `y = (x_f, z)`.
    pub fn n_y(&self) -> usize {
        self.fast.len() + self.n_z
    }
}

/// A DAE model together with its slow/fast partition.
#[derive(Clone)]
pub struct DaeSystem {
    model: Arc<dyn DaeModel>,
    partition: DaePartition,
}

impl fmt::Debug for DaeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DaeSystem")
            .field("model", &self.model.name())
            .field("partition", &self.partition)
            .finish()
    }
}

/// Blocks of the extended residual `F = [f_fast; g]` and of `f_slow` with
/// respect to `x_s`, `y = (x_f, z)` and `u`.
#[derive(Debug, Clone)]
pub struct ExtendedJacobians {
    pub f_y: DenseMatrix,
    pub f_xs: DenseMatrix,
    pub f_u: DenseMatrix,
    pub slow_xs: DenseMatrix,
    pub slow_y: DenseMatrix,
    pub slow_u: DenseMatrix,
}

impl DaeSystem {
    /// Wraps a model with its default partition and verifies its analytic
    /// Jacobians against central differences.
    pub fn new(model: Arc<dyn DaeModel>) -> Result<Self, DaeError> {
        let (slow, fast) = model.default_partition();
        Self::with_partition(model, slow, fast)
    }

    pub fn with_partition(model: Arc<dyn DaeModel>, slow: Vec<usize>, fast: Vec<usize>) -> Result<Self, DaeError> {
        let partition = DaePartition::new(slow, fast, model.n_x(), model.n_z())?;
        let sys = Self { model, partition };
        let (x, z, u) = sys.model.sample_point();
        check_jacobians(sys.model.as_ref(), &x, &z, &u)?;
        Ok(sys)
    }

    /// Same model, different slow/fast split.
    pub fn repartition(&self, slow: Vec<usize>, fast: Vec<usize>) -> Result<Self, DaeError> {
        let partition = DaePartition::new(slow, fast, self.model.n_x(), self.model.n_z())?;
        Ok(Self { model: Arc::clone(&self.model), partition })
    }

    pub fn model(&self) -> &dyn DaeModel {
        self.model.as_ref()
    }

    pub fn model_arc(&self) -> Arc<dyn DaeModel> {
        Arc::clone(&self.model)
    }

    pub fn name(&self) -> &str {
        self.model.name()
    }

    pub fn partition(&self) -> &DaePartition {
        &self.partition
    }

    pub fn n_x(&self) -> usize {
        self.model.n_x()
    }

    pub fn n_z(&self) -> usize {
        self.model.n_z()
    }

    pub fn n_u(&self) -> usize {
        self.model.n_u()
    }

    pub fn n_s(&self) -> usize {
        self.partition.n_s()
    }

    pub fn n_f(&self) -> usize {
        self.partition.n_f()
    }

    pub fn n_y(&self) -> usize {
        self.partition.n_y()
    }

    /// Scatters `x_s` and `y = (x_f, z)` into full `(x, z)` vectors.
    pub fn assemble(&self, x_s: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n_f = self.n_f();
        let mut x = vec![0.0; self.n_x()];
        for (k, &i) in self.partition.slow.iter().enumerate() {
            x[i] = x_s[k];
        }
        for (k, &i) in self.partition.fast.iter().enumerate() {
            x[i] = y[k];
        }
        (x, y[n_f..].to_vec())
    }

    pub fn slow_part(&self, x: &[f64]) -> Vec<f64> {
        self.partition.slow.iter().map(|&i| x[i]).collect()
    }

    pub fn fast_part(&self, x: &[f64]) -> Vec<f64> {
        self.partition.fast.iter().map(|&i| x[i]).collect()
    }

    /// `y = (x_f, z)` from full vectors.
    pub fn y_part(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let mut y = self.fast_part(x);
        y.extend_from_slice(z);
        y
    }

    pub fn rhs(&self, x: &[f64], z: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_x()];
        self.model.rhs(x, z, u, &mut out);
        out
    }

    pub fn constraint(&self, x: &[f64], z: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_z()];
        self.model.constraint(x, z, u, &mut out);
        out
    }

    pub fn f_slow(&self, x_s: &[f64], y: &[f64], u: &[f64]) -> Vec<f64> {
        let (x, z) = self.assemble(x_s, y);
        let f = self.rhs(&x, &z, u);
        self.slow_part(&f)
    }

    pub fn f_fast(&self, x_s: &[f64], y: &[f64], u: &[f64]) -> Vec<f64> {
        let (x, z) = self.assemble(x_s, y);
        let f = self.rhs(&x, &z, u);
        self.fast_part(&f)
    }

    pub fn g(&self, x_s: &[f64], y: &[f64], u: &[f64]) -> Vec<f64> {
        let (x, z) = self.assemble(x_s, y);
        self.constraint(&x, &z, u)
    }

    /// Extended residual `F(x_s, y) = [f_fast; g]`.
    pub fn extended_residual(&self, x_s: &[f64], y: &[f64], u: &[f64], out: &mut [f64]) {
        let (x, z) = self.assemble(x_s, y);
        let mut f = vec![0.0; self.n_x()];
        self.model.rhs(&x, &z, u, &mut f);
        let n_f = self.n_f();
        for (k, &i) in self.partition.fast.iter().enumerate() {
            out[k] = f[i];
        }
        self.model.constraint(&x, &z, u, &mut out[n_f..]);
    }

    pub fn extended_jacobians(&self, x_s: &[f64], y: &[f64], u: &[f64]) -> ExtendedJacobians {
        let (x, z) = self.assemble(x_s, y);
        let j = self.model.jacobians(&x, &z, u);
        self.extended_blocks(&j)
    }

    /// Rearranges full-state Jacobians into extended-system blocks.
    pub fn extended_blocks(&self, j: &DaeJacobians) -> ExtendedJacobians {
        let p = &self.partition;
        let n_f = p.n_f();
        let n_y = p.n_y();
        let n_s = p.n_s();
        let n_z = p.n_z;
        let n_u = self.n_u();

        let mut f_y = DenseMatrix::zeros(n_y, n_y);
        let mut f_xs = DenseMatrix::zeros(n_y, n_s);
        let mut f_u = DenseMatrix::zeros(n_y, n_u);
        // Rows: fast equations, then constraints.
        for (r, &fi) in p.fast.iter().enumerate() {
            for (c, &xj) in p.fast.iter().enumerate() {
                f_y[(r, c)] = j.fx[(fi, xj)];
            }
            for c in 0..n_z {
                f_y[(r, n_f + c)] = j.fz[(fi, c)];
            }
            for (c, &xj) in p.slow.iter().enumerate() {
                f_xs[(r, c)] = j.fx[(fi, xj)];
            }
            for c in 0..n_u {
                f_u[(r, c)] = j.fu[(fi, c)];
            }
        }
        for r in 0..n_z {
            for (c, &xj) in p.fast.iter().enumerate() {
                f_y[(n_f + r, c)] = j.gx[(r, xj)];
            }
            for c in 0..n_z {
                f_y[(n_f + r, n_f + c)] = j.gz[(r, c)];
            }
            for (c, &xj) in p.slow.iter().enumerate() {
                f_xs[(n_f + r, c)] = j.gx[(r, xj)];
            }
            for c in 0..n_u {
                f_u[(n_f + r, c)] = j.gu[(r, c)];
            }
        }

        let mut slow_xs = DenseMatrix::zeros(n_s, n_s);
        let mut slow_y = DenseMatrix::zeros(n_s, n_y);
        let mut slow_u = DenseMatrix::zeros(n_s, n_u);
        for (r, &si) in p.slow.iter().enumerate() {
            for (c, &xj) in p.slow.iter().enumerate() {
                slow_xs[(r, c)] = j.fx[(si, xj)];
            }
            for (c, &xj) in p.fast.iter().enumerate() {
                slow_y[(r, c)] = j.fx[(si, xj)];
            }
            for c in 0..n_z {
                slow_y[(r, n_f + c)] = j.fz[(si, c)];
            }
            for c in 0..n_u {
                slow_u[(r, c)] = j.fu[(si, c)];
            }
        }
        ExtendedJacobians { f_y, f_xs, f_u, slow_xs, slow_y, slow_u }
    }

    pub fn finalize_algebraic(&self, x: &[f64], z: &mut [f64]) {
        self.model.finalize_algebraic(x, z);
    }

    pub fn qss_guess(&self, x_s: &[f64], u: &[f64]) -> Option<Vec<f64>> {
        self.model.qss_guess(&self.partition.slow, &self.partition.fast, x_s, u)
    }
}

/// Compares analytic Jacobians to central differences with step
/// `1e-6·(1+|v|)`; relative tolerance `1e-5`.
pub fn check_jacobians(model: &dyn DaeModel, x: &[f64], z: &[f64], u: &[f64]) -> Result<(), DaeError> {
    let j = model.jacobians(x, z, u);
    let n_x = model.n_x();
    let n_z = model.n_z();
    let eval = |x: &[f64], z: &[f64], u: &[f64]| {
        let mut f = vec![0.0; n_x];
        let mut g = vec![0.0; n_z];
        model.rhs(x, z, u, &mut f);
        model.constraint(x, z, u, &mut g);
        (f, g)
    };

    // Column of (f, g) derivatives with respect to one perturbed input, each
    // entry paired with its round-off noise level.
    let fd_column = |which: usize, k: usize| -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let (mut xp, mut zp, mut up) = (x.to_vec(), z.to_vec(), u.to_vec());
        let (mut xm, mut zm, mut um) = (x.to_vec(), z.to_vec(), u.to_vec());
        let (vp, vm, base) = match which {
            0 => (&mut xp[k], &mut xm[k], x[k]),
            1 => (&mut zp[k], &mut zm[k], z[k]),
            _ => (&mut up[k], &mut um[k], u[k]),
        };
        let h = 1e-6 * (1.0 + base.abs());
        *vp = base + h;
        *vm = base - h;
        let (fp, gp) = eval(&xp, &zp, &up);
        let (fm, gm) = eval(&xm, &zm, &um);
        let diff = |p: &[f64], m: &[f64]| -> Vec<(f64, f64)> {
            p.iter()
                .zip(m)
                .map(|(a, b)| ((a - b) / (2.0 * h), 64.0 * f64::EPSILON * a.abs().max(b.abs()) / (2.0 * h)))
                .collect()
        };
        (diff(&fp, &fm), diff(&gp, &gm))
    };

    let compare = |block: &'static str, m: &DenseMatrix, col: usize, fd: &[(f64, f64)]| -> Result<(), DaeError> {
        let scale = m.max_abs().max(1.0);
        for (row, &(d, noise)) in fd.iter().enumerate() {
            let a = m[(row, col)];
            if (a - d).abs() > 1e-5 * a.abs().max(d.abs()) + 1e-8 * scale + noise {
                return Err(DaeError::JacobianMismatch {
                    system: model.name().to_string(),
                    block,
                    row,
                    col,
                    analytic: a,
                    fd: d,
                });
            }
        }
        Ok(())
    };

    for k in 0..n_x {
        let (df, dg) = fd_column(0, k);
        compare("f_x", &j.fx, k, &df)?;
        compare("g_x", &j.gx, k, &dg)?;
    }
    for k in 0..n_z {
        let (df, dg) = fd_column(1, k);
        compare("f_z", &j.fz, k, &df)?;
        compare("g_z", &j.gz, k, &dg)?;
    }
    for k in 0..model.n_u() {
        let (df, dg) = fd_column(2, k);
        compare("f_u", &j.fu, k, &df)?;
        compare("g_u", &j.gu, k, &dg)?;
    }
    Ok(())
}

/// Piecewise-constant external input `u(t)`.
///
/// `values[0]` holds before `times[0]`, and `values[k]` from `times[k-1]` on,
/// so `values.len() == times.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSchedule {
    /// Switching times, ascending.
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Default for InputSchedule {
    fn default() -> Self {
        Self::none()
    }
}

impl InputSchedule {
    pub fn constant(value: Vec<f64>) -> Self {
        Self { times: Vec::new(), values: vec![value] }
    }

    pub fn none() -> Self {
        Self::constant(Vec::new())
    }

    /// A single step from `before` to `after` at `t_step`.
    pub fn step(t_step: f64, before: Vec<f64>, after: Vec<f64>) -> Self {
        Self { times: vec![t_step], values: vec![before, after] }
    }

    pub fn validate(&self) -> Result<(), DaeError> {
        let dim = self.dim();
        if self.values.len() != self.times.len() + 1
            || self.values.iter().any(|v| v.len() != dim)
            || self.times.windows(2).any(|w| !(w[0] < w[1]))
        {
            return Err(DaeError::InvalidParameter("input schedule needs ascending times and one more value than times".into()));
        }
        Ok(())
    }

    pub fn value_at(&self, t: f64) -> &[f64] {
        let idx = self.times.partition_point(|&s| s <= t);
        &self.values[idx.min(self.values.len() - 1)]
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

// ---------------------------------------------------------------------------
// Robertson kinetics

/// Robertson's three-species kinetics with mass conservation as the
/// algebraic equation: `x = (y1, y2)`, `z = (y3)`.
#[derive(Debug, Clone)]
pub struct Robertson {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl Default for Robertson {
    fn default() -> Self {
        Self { k1: 0.04, k2: 1e4, k3: 3e7 }
    }
}

impl Robertson {
    /// Positive root of `(k3 − k2) y2² + k2 (1 − y1) y2 − k1 y1 = 0`, i.e.
    /// `f_fast = 0` with `y3 = 1 − y1 − y2` substituted.
    pub fn qss_y2(&self, y1: f64) -> f64 {
        let a = self.k3 - self.k2;
        let b = self.k2 * (1.0 - y1);
        let c = -self.k1 * y1;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return 0.0;
        }
        // Cancellation-free form of (−b + √disc) / 2a.
        let denom = b + disc.sqrt();
        if denom == 0.0 {
            0.0
        } else {
            -2.0 * c / denom
        }
    }

    /// Exact conservation closure. `g` evaluated at the result is zero in
    /// floating point because it sums in the same order.
    pub fn conserve(y1: f64, y2: f64) -> f64 {
        1.0 - (y1 + y2)
    }
}

impl DaeModel for Robertson {
    fn name(&self) -> &str {
        "robertson"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_z(&self) -> usize {
        1
    }
    fn state_names(&self) -> Vec<String> {
        vec!["y1".into(), "y2".into()]
    }
    fn algebraic_names(&self) -> Vec<String> {
        vec!["y3".into()]
    }
    fn parameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("k1".into(), self.k1), ("k2".into(), self.k2), ("k3".into(), self.k3)])
    }

    fn rhs(&self, x: &[f64], z: &[f64], _u: &[f64], out: &mut [f64]) {
        let (y1, y2, y3) = (x[0], x[1], z[0]);
        out[0] = -self.k1 * y1 + self.k2 * y2 * y3;
        out[1] = self.k1 * y1 - self.k2 * y2 * y3 - self.k3 * y2 * y2;
    }

    fn constraint(&self, x: &[f64], z: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = (x[0] + x[1]) + z[0] - 1.0;
    }

    fn jacobians(&self, x: &[f64], z: &[f64], _u: &[f64]) -> DaeJacobians {
        let (y1, y2, y3) = (x[0], x[1], z[0]);
        let _ = y1;
        let mut j = DaeJacobians::zeros(2, 1, 0);
        j.fx[(0, 0)] = -self.k1;
        j.fx[(0, 1)] = self.k2 * y3;
        j.fx[(1, 0)] = self.k1;
        j.fx[(1, 1)] = -self.k2 * y3 - 2.0 * self.k3 * y2;
        j.fz[(0, 0)] = self.k2 * y2;
        j.fz[(1, 0)] = -self.k2 * y2;
        j.gx[(0, 0)] = 1.0;
        j.gx[(0, 1)] = 1.0;
        j.gz[(0, 0)] = 1.0;
        j
    }

    fn default_partition(&self) -> (Vec<usize>, Vec<usize>) {
        (vec![0], vec![1])
    }

    fn sample_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let y1 = 0.9;
        let y2 = self.qss_y2(y1);
        (vec![y1, y2], vec![Self::conserve(y1, y2)], vec![])
    }

    fn finalize_algebraic(&self, x: &[f64], z: &mut [f64]) {
        z[0] = Self::conserve(x[0], x[1]);
    }

    fn qss_guess(&self, slow: &[usize], fast: &[usize], x_s: &[f64], _u: &[f64]) -> Option<Vec<f64>> {
        if slow == [0] && fast == [1] {
            let y2 = self.qss_y2(x_s[0]);
            Some(vec![y2, Self::conserve(x_s[0], y2)])
        } else {
            None
        }
    }
}

/// Robertson kinetics as a pure ODE in `(y1, y2, y3)` with conservation left
/// implicit. Default partition: `(y1, y3)` slow, `y2` fast.
#[derive(Debug, Clone, Default)]
pub struct RobertsonOde {
    pub rates: Robertson,
}

impl RobertsonOde {
    /// Positive root of `k3 y2² + k2 y3 y2 − k1 y1 = 0`.
    pub fn qss_y2(&self, y1: f64, y3: f64) -> f64 {
        let Robertson { k1, k2, k3 } = self.rates;
        let b = k2 * y3;
        let disc = b * b + 4.0 * k3 * k1 * y1;
        if disc < 0.0 {
            return 0.0;
        }
        let denom = b + disc.sqrt();
        if denom == 0.0 {
            0.0
        } else {
            2.0 * k1 * y1 / denom
        }
    }
}

impl DaeModel for RobertsonOde {
    fn name(&self) -> &str {
        "robertson_ode"
    }
    fn n_x(&self) -> usize {
        3
    }
    fn n_z(&self) -> usize {
        0
    }
    fn state_names(&self) -> Vec<String> {
        vec!["y1".into(), "y2".into(), "y3".into()]
    }
    fn parameters(&self) -> BTreeMap<String, f64> {
        self.rates.parameters()
    }

    fn rhs(&self, x: &[f64], _z: &[f64], _u: &[f64], out: &mut [f64]) {
        let Robertson { k1, k2, k3 } = self.rates;
        let (y1, y2, y3) = (x[0], x[1], x[2]);
        out[0] = -k1 * y1 + k2 * y2 * y3;
        out[1] = k1 * y1 - k2 * y2 * y3 - k3 * y2 * y2;
        out[2] = k3 * y2 * y2;
    }

    fn constraint(&self, _x: &[f64], _z: &[f64], _u: &[f64], _out: &mut [f64]) {}

    fn jacobians(&self, x: &[f64], _z: &[f64], _u: &[f64]) -> DaeJacobians {
        let Robertson { k1, k2, k3 } = self.rates;
        let (y2, y3) = (x[1], x[2]);
        let mut j = DaeJacobians::zeros(3, 0, 0);
        j.fx[(0, 0)] = -k1;
        j.fx[(0, 1)] = k2 * y3;
        j.fx[(0, 2)] = k2 * y2;
        j.fx[(1, 0)] = k1;
        j.fx[(1, 1)] = -k2 * y3 - 2.0 * k3 * y2;
        j.fx[(1, 2)] = -k2 * y2;
        j.fx[(2, 1)] = 2.0 * k3 * y2;
        j
    }

    fn default_partition(&self) -> (Vec<usize>, Vec<usize>) {
        (vec![0, 2], vec![1])
    }

    fn sample_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let y1 = 0.9;
        let y2 = self.rates.qss_y2(y1);
        (vec![y1, y2, Robertson::conserve(y1, y2)], vec![], vec![])
    }

    fn qss_guess(&self, slow: &[usize], fast: &[usize], x_s: &[f64], _u: &[f64]) -> Option<Vec<f64>> {
        if slow == [0, 2] && fast == [1] {
            Some(vec![self.qss_y2(x_s[0], x_s[1])])
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Single machine, infinite bus

/// Classical swing model connected through a bus with a reactive load:
/// `x = (δ, ω)` (ω is the per-unit speed deviation), `z = (V)` the bus
/// voltage magnitude.
///
/// The network seen from the bus is replaced by its Thevenin equivalent
/// `E_th(δ)`, `X_th`, which makes the constraint quadratic in `V`:
/// `g = V² − E_th(δ) V + X_th Q_L`.
#[derive(Debug, Clone)]
pub struct Smib {
    /// Inertia constant (s).
    pub h: f64,
    /// Damping (pu).
    pub d: f64,
    /// Mechanical power (pu).
    pub p_m: f64,
    /// Internal EMF magnitude (pu).
    pub e: f64,
    /// Infinite-bus voltage (pu).
    pub v_inf: f64,
    /// Generator-side reactance (pu).
    pub x_d: f64,
    /// Line reactance to the infinite bus (pu).
    pub x_l: f64,
    /// Reactive load at the bus (pu).
    pub q_load: f64,
    /// Base angular frequency (rad/s).
    pub omega_b: f64,
}

impl Default for Smib {
    fn default() -> Self {
        Self {
            h: 3.5,
            d: 5.0,
            p_m: 0.8,
            e: 1.1,
            v_inf: 1.0,
            x_d: 0.3,
            x_l: 0.5,
            q_load: 0.2,
            omega_b: 2.0 * PI * 60.0,
        }
    }
}

impl Smib {
    fn x_total(&self) -> f64 {
        self.x_d + self.x_l
    }

    pub fn x_thevenin(&self) -> f64 {
        self.x_d * self.x_l / self.x_total()
    }

    fn thevenin_terms(&self) -> (f64, f64) {
        let a = self.x_d * self.v_inf / self.x_total();
        let b = self.x_l * self.e / self.x_total();
        (a, b)
    }

    pub fn e_thevenin(&self, delta: f64) -> f64 {
        let (a, b) = self.thevenin_terms();
        (a * a + b * b + 2.0 * a * b * delta.cos()).sqrt()
    }

    fn e_thevenin_prime(&self, delta: f64) -> f64 {
        let (a, b) = self.thevenin_terms();
        -a * b * delta.sin() / self.e_thevenin(delta)
    }

    /// Upper root of the voltage quadratic.
    pub fn closed_form_voltage(&self, delta: f64) -> Result<f64, DaeError> {
        let eth = self.e_thevenin(delta);
        let disc = eth * eth - 4.0 * self.x_thevenin() * self.q_load;
        if disc < 0.0 {
            return Err(DaeError::NoRealRoot { discriminant: disc });
        }
        Ok(0.5 * (eth + disc.sqrt()))
    }

    /// Electrical power delivered by the machine.
    pub fn electrical_power(&self, delta: f64, v: f64) -> f64 {
        self.e * self.v_inf * v * delta.sin() / (self.x_total() * self.e_thevenin(delta))
    }

    fn set(&mut self, key: &str, value: f64) -> Result<(), DaeError> {
        let slot = match key {
            "H" => &mut self.h,
            "D" => &mut self.d,
            "P_m" => &mut self.p_m,
            "E" => &mut self.e,
            "V_inf" => &mut self.v_inf,
            "X_d" => &mut self.x_d,
            "X_l" => &mut self.x_l,
            "Q_L" => &mut self.q_load,
            "omega_b" => &mut self.omega_b,
            _ => return Err(DaeError::InvalidParameter(format!("smib has no parameter '{key}'"))),
        };
        *slot = value;
        Ok(())
    }
}

impl DaeModel for Smib {
    fn name(&self) -> &str {
        "smib"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_z(&self) -> usize {
        1
    }
    fn state_names(&self) -> Vec<String> {
        vec!["delta".into(), "omega".into()]
    }
    fn algebraic_names(&self) -> Vec<String> {
        vec!["V".into()]
    }
    fn parameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("H".into(), self.h),
            ("D".into(), self.d),
            ("P_m".into(), self.p_m),
            ("E".into(), self.e),
            ("V_inf".into(), self.v_inf),
            ("X_d".into(), self.x_d),
            ("X_l".into(), self.x_l),
            ("Q_L".into(), self.q_load),
            ("omega_b".into(), self.omega_b),
        ])
    }

    fn rhs(&self, x: &[f64], z: &[f64], _u: &[f64], out: &mut [f64]) {
        let (delta, omega, v) = (x[0], x[1], z[0]);
        out[0] = self.omega_b * omega;
        out[1] = (self.p_m - self.electrical_power(delta, v) - self.d * omega) / (2.0 * self.h);
    }

    fn constraint(&self, x: &[f64], z: &[f64], _u: &[f64], out: &mut [f64]) {
        let v = z[0];
        out[0] = v * v - self.e_thevenin(x[0]) * v + self.x_thevenin() * self.q_load;
    }

    fn jacobians(&self, x: &[f64], z: &[f64], _u: &[f64]) -> DaeJacobians {
        let (delta, v) = (x[0], z[0]);
        let eth = self.e_thevenin(delta);
        let deth = self.e_thevenin_prime(delta);
        let k = self.e * self.v_inf / self.x_total();
        // P_e = k V sinδ / E_th
        let dpe_ddelta = k * v * (delta.cos() * eth - delta.sin() * deth) / (eth * eth);
        let dpe_dv = k * delta.sin() / eth;
        let m = 2.0 * self.h;

        let mut j = DaeJacobians::zeros(2, 1, 0);
        j.fx[(0, 1)] = self.omega_b;
        j.fx[(1, 0)] = -dpe_ddelta / m;
        j.fx[(1, 1)] = -self.d / m;
        j.fz[(1, 0)] = -dpe_dv / m;
        j.gx[(0, 0)] = -deth * v;
        j.gz[(0, 0)] = 2.0 * v - eth;
        j
    }

    fn default_partition(&self) -> (Vec<usize>, Vec<usize>) {
        (vec![0, 1], vec![])
    }

    fn sample_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let delta = 0.5;
        let v = self.closed_form_voltage(delta).unwrap_or(1.0);
        (vec![delta, 0.01], vec![v], vec![])
    }

    fn qss_guess(&self, slow: &[usize], _fast: &[usize], x_s: &[f64], _u: &[f64]) -> Option<Vec<f64>> {
        if slow == [0, 1] {
            self.closed_form_voltage(x_s[0]).ok().map(|v| vec![v])
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic two-timescale system

/// Construction parameters for [`SyntheticTwoTimescale`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    /// Slowest fast decay rate.
    pub kappa: f64,
    pub n_s: usize,
    pub n_f: usize,
    pub n_z: usize,
    /// Magnitude of the fast-to-slow coupling blocks `P_f`, `P_z`.
    pub coupling: f64,
    /// Fast rates spread geometrically over this many decades above `kappa`.
    pub spread_decades: f64,
    /// Cubic damping coefficient in the slow drift.
    pub cubic: f64,
    /// Gain of the scalar external input.
    pub input_gain: f64,
}

impl SyntheticParams {
    pub fn new(kappa: f64, n_s: usize, n_f: usize, n_z: usize) -> Self {
        Self {
            kappa,
            n_s,
            n_f,
            n_z,
            coupling: 0.5,
            spread_decades: 1.0,
            cubic: 0.05,
            input_gain: 1.0,
        }
    }
}

fn pattern(i: usize, j: usize, salt: f64) -> f64 {
    (1.7 * i as f64 + 2.3 * j as f64 + salt).sin()
}

/// Linear-plus-mild-nonlinearity system with a known slow manifold.
///
/// With `ψ(x_s, u)` the fast manifold and `ζ = L⁻¹(C_f ψ + Φ x_s)`:
///
/// ```text
/// ẋ_s = h(x_s, u) + P_f (x_f − ψ) + P_z (z − ζ)
/// ẋ_f = −K (x_f − ψ) + G g
///   0 = g = L z − C_f x_f − Φ x_s
/// ```
///
/// `L` is unit lower-triangular and `K` diagonal, so the reduced fast
/// Jacobian is exactly `−K`. The quasi-steady manifold is `x_f = ψ`, `z = ζ`
/// with reduced dynamics `ẋ_s = h`; the true trajectories lag it by
/// `O(‖ψ'‖ ‖h‖ / κ)`.
#[derive(Debug, Clone)]
pub struct SyntheticTwoTimescale {
    params: SyntheticParams,
    name: String,
    a_s: DenseMatrix,
    k_diag: Vec<f64>,
    psi: DenseMatrix,
    psi_u: Vec<f64>,
    phi: DenseMatrix,
    l: DenseMatrix,
    c_f: DenseMatrix,
    g_mix: DenseMatrix,
    p_f: DenseMatrix,
    p_z: DenseMatrix,
    b_u: Vec<f64>,
}

impl SyntheticTwoTimescale {
    pub fn new(params: SyntheticParams) -> Result<Self, DaeError> {
        if !(params.kappa >= 1.0) {
            return Err(DaeError::InvalidParameter(format!("kappa must be >= 1, got {}", params.kappa)));
        }
        if params.n_s == 0 || params.n_f == 0 {
            return Err(DaeError::InvalidParameter("synthetic system needs n_s >= 1 and n_f >= 1".into()));
        }
        let SyntheticParams { n_s, n_f, n_z, .. } = params;

        // Slow drift: 2×2 rotation-damping blocks with decay rates in [0.6, 1.2].
        let mut a_s = DenseMatrix::zeros(n_s, n_s);
        let mut i = 0;
        while i < n_s {
            let rate = 0.6 + 0.6 * (i as f64) / (n_s.max(2) - 1) as f64;
            if i + 1 < n_s {
                let w = 0.8 + 0.2 * pattern(i, 0, 0.3);
                a_s[(i, i)] = -rate;
                a_s[(i + 1, i + 1)] = -rate;
                a_s[(i, i + 1)] = w;
                a_s[(i + 1, i)] = -w;
                i += 2;
            } else {
                a_s[(i, i)] = -rate;
                i += 1;
            }
        }

        let k_diag = (0..n_f)
            .map(|j| {
                let frac = if n_f > 1 { j as f64 / (n_f - 1) as f64 } else { 0.0 };
                params.kappa * 10f64.powf(params.spread_decades * frac)
            })
            .collect();

        let psi = DenseMatrix::from_fn(n_f, n_s, |i, j| 0.8 * pattern(i, j, 0.1));
        let psi_u = (0..n_f).map(|i| 0.5 * pattern(i, 3, 0.7)).collect();
        let phi = DenseMatrix::from_fn(n_z, n_s, |i, j| 0.5 * pattern(i, j, 1.1));
        let l = DenseMatrix::from_fn(n_z, n_z, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => 0.4 * pattern(i, j, 2.2),
            std::cmp::Ordering::Less => 0.0,
        });
        let c_f = DenseMatrix::from_fn(n_z, n_f, |i, j| 0.6 * pattern(i, j, 0.5));
        let g_mix = DenseMatrix::from_fn(n_f, n_z, |i, j| 0.3 * pattern(i, j, 2.9));
        let p_f = DenseMatrix::from_fn(n_s, n_f, |i, j| params.coupling * pattern(i, j, 1.9));
        let p_z = DenseMatrix::from_fn(n_s, n_z, |i, j| params.coupling * pattern(i, j, 0.4));
        let b_u = (0..n_s).map(|i| params.input_gain * pattern(i, 1, 0.9)).collect();

        let name = format!("synthetic(kappa={})", params.kappa);
        Ok(Self { params, name, a_s, k_diag, psi, psi_u, phi, l, c_f, g_mix, p_f, p_z, b_u })
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn fast_rates(&self) -> &[f64] {
        &self.k_diag
    }

    fn n_s(&self) -> usize {
        self.params.n_s
    }

    fn n_f(&self) -> usize {
        self.params.n_f
    }

    fn n_z_(&self) -> usize {
        self.params.n_z
    }

    fn u0(u: &[f64]) -> f64 {
        u.first().copied().unwrap_or(0.0)
    }

    /// Fast manifold `ψ(x_s, u)`.
    pub fn psi(&self, x_s: &[f64], u: &[f64]) -> Vec<f64> {
        let u0 = Self::u0(u);
        let mut out = self.psi.matvec(x_s);
        for (i, o) in out.iter_mut().enumerate() {
            *o += 0.1 * x_s[i % self.n_s()].sin() + self.psi_u[i] * u0;
        }
        out
    }

    fn psi_jacobian(&self, x_s: &[f64]) -> DenseMatrix {
        let mut d = self.psi.clone();
        for i in 0..self.n_f() {
            let k = i % self.n_s();
            d[(i, k)] += 0.1 * x_s[k].cos();
        }
        d
    }

    fn solve_l(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n_z_();
        let mut out = rhs.to_vec();
        for i in 0..n {
            for j in 0..i {
                out[i] -= self.l[(i, j)] * out[j];
            }
        }
        out
    }

    fn solve_l_matrix(&self, rhs: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(rhs.rows(), rhs.cols());
        for c in 0..rhs.cols() {
            out.set_column(c, &self.solve_l(&rhs.column(c)));
        }
        out
    }

    /// Algebraic manifold `ζ(x_s, u) = L⁻¹(C_f ψ + Φ x_s)`.
    pub fn zeta(&self, x_s: &[f64], u: &[f64]) -> Vec<f64> {
        let psi = self.psi(x_s, u);
        let cf = self.c_f.matvec(&psi);
        let ph = self.phi.matvec(x_s);
        let rhs: Vec<f64> = cf.iter().zip(&ph).map(|(a, b)| a + b).collect();
        self.solve_l(&rhs)
    }

    /// Closed-form `y* = (ψ, ζ)` at `x_s`.
    pub fn manifold(&self, x_s: &[f64], u: &[f64]) -> Vec<f64> {
        let mut y = self.psi(x_s, u);
        y.extend(self.zeta(x_s, u));
        y
    }

    /// `d y*/d x_s` of the closed-form manifold.
    pub fn manifold_jacobian(&self, x_s: &[f64]) -> DenseMatrix {
        let dpsi = self.psi_jacobian(x_s);
        let dzeta = self.solve_l_matrix(&self.c_f.matmul(&dpsi).add(&self.phi));
        DenseMatrix::vstack(&[&dpsi, &dzeta])
    }

    fn dzeta_dxs(&self, x_s: &[f64]) -> DenseMatrix {
        self.solve_l_matrix(&self.c_f.matmul(&self.psi_jacobian(x_s)).add(&self.phi))
    }

    fn dzeta_du(&self) -> Vec<f64> {
        let cfu = self.c_f.matvec(&self.psi_u);
        self.solve_l(&cfu)
    }

    /// Slow drift on the manifold, `h(x_s, u)`.
    pub fn slow_drift(&self, x_s: &[f64], u: &[f64]) -> Vec<f64> {
        let u0 = Self::u0(u);
        let mut out = self.a_s.matvec(x_s);
        for (i, o) in out.iter_mut().enumerate() {
            *o += -self.params.cubic * x_s[i].powi(3) + self.b_u[i] * u0;
        }
        out
    }

    /// Fast-to-slow coupling constant `‖P_f‖ + ‖P_z‖ ‖L⁻¹ C_f‖`.
    pub fn l_kappa(&self) -> f64 {
        let lc = self.solve_l_matrix(&self.c_f);
        self.p_f.norm2() + self.p_z.norm2() * lc.norm2()
    }

    /// A consistent state on the manifold at `x_s`.
    pub fn consistent_state(&self, x_s: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut x = x_s.to_vec();
        x.extend(self.psi(x_s, u));
        (x, self.zeta(x_s, u))
    }

    fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        x.split_at(self.n_s())
    }

    fn set(&mut self, key: &str, value: f64) -> Result<(), DaeError> {
        match key {
            "kappa" => self.params.kappa = value,
            "n_s" => self.params.n_s = value as usize,
            "n_f" => self.params.n_f = value as usize,
            "n_z" => self.params.n_z = value as usize,
            "coupling" => self.params.coupling = value,
            "spread_decades" => self.params.spread_decades = value,
            "cubic" => self.params.cubic = value,
            "input_gain" => self.params.input_gain = value,
            _ => return Err(DaeError::InvalidParameter(format!("synthetic has no parameter '{key}'"))),
        }
        Ok(())
    }
}

impl DaeModel for SyntheticTwoTimescale {
    fn name(&self) -> &str {
        &self.name
    }
    fn n_x(&self) -> usize {
        self.n_s() + self.n_f()
    }
    fn n_z(&self) -> usize {
        self.n_z_()
    }
    fn n_u(&self) -> usize {
        1
    }
    fn state_names(&self) -> Vec<String> {
        (0..self.n_s())
            .map(|i| format!("xs{i}"))
            .chain((0..self.n_f()).map(|i| format!("xf{i}")))
            .collect()
    }
    fn parameters(&self) -> BTreeMap<String, f64> {
        let p = &self.params;
        BTreeMap::from([
            ("kappa".into(), p.kappa),
            ("n_s".into(), p.n_s as f64),
            ("n_f".into(), p.n_f as f64),
            ("n_z".into(), p.n_z as f64),
            ("coupling".into(), p.coupling),
            ("spread_decades".into(), p.spread_decades),
            ("cubic".into(), p.cubic),
            ("input_gain".into(), p.input_gain),
        ])
    }

    fn rhs(&self, x: &[f64], z: &[f64], u: &[f64], out: &mut [f64]) {
        let (x_s, x_f) = self.split(x);
        let psi = self.psi(x_s, u);
        let zeta = self.zeta(x_s, u);
        let mut g = vec![0.0; self.n_z_()];
        self.constraint(x, z, u, &mut g);

        let df: Vec<f64> = x_f.iter().zip(&psi).map(|(a, b)| a - b).collect();
        let dz: Vec<f64> = z.iter().zip(&zeta).map(|(a, b)| a - b).collect();
        let h = self.slow_drift(x_s, u);
        let pf = self.p_f.matvec(&df);
        let pz = self.p_z.matvec(&dz);
        for i in 0..self.n_s() {
            out[i] = h[i] + pf[i] + pz[i];
        }
        let gg = self.g_mix.matvec(&g);
        for i in 0..self.n_f() {
            out[self.n_s() + i] = -self.k_diag[i] * df[i] + gg[i];
        }
    }

    fn constraint(&self, x: &[f64], z: &[f64], _u: &[f64], out: &mut [f64]) {
        let (x_s, x_f) = self.split(x);
        let lz = self.l.matvec(z);
        let cf = self.c_f.matvec(x_f);
        let ph = self.phi.matvec(x_s);
        for i in 0..self.n_z_() {
            out[i] = lz[i] - cf[i] - ph[i];
        }
    }

    fn jacobians(&self, x: &[f64], _z: &[f64], _u: &[f64]) -> DaeJacobians {
        let (n_s, n_f, n_z) = (self.n_s(), self.n_f(), self.n_z_());
        let (x_s, _) = self.split(x);
        let mut j = DaeJacobians::zeros(n_s + n_f, n_z, 1);

        let dpsi = self.psi_jacobian(x_s);
        let dzeta = self.dzeta_dxs(x_s);
        let dzeta_u = self.dzeta_du();

        // g = L z − C_f x_f − Φ x_s
        j.gz = self.l.clone();
        j.gx.set_block(0, 0, &self.phi.scaled(-1.0));
        j.gx.set_block(0, n_s, &self.c_f.scaled(-1.0));

        // Slow rows.
        let mut dh = self.a_s.clone();
        for i in 0..n_s {
            dh[(i, i)] -= 3.0 * self.params.cubic * x_s[i] * x_s[i];
        }
        let slow_xs = dh.sub(&self.p_f.matmul(&dpsi)).sub(&self.p_z.matmul(&dzeta));
        j.fx.set_block(0, 0, &slow_xs);
        j.fx.set_block(0, n_s, &self.p_f);
        j.fz.set_block(0, 0, &self.p_z);
        let pf_psiu = self.p_f.matvec(&self.psi_u);
        let pz_zu = self.p_z.matvec(&dzeta_u);
        for i in 0..n_s {
            j.fu[(i, 0)] = self.b_u[i] - pf_psiu[i] - pz_zu[i];
        }

        // Fast rows: −K (x_f − ψ) + G g.
        let gmix_gx = self.g_mix.matmul(&j.gx);
        let gmix_gz = self.g_mix.matmul(&j.gz);
        for i in 0..n_f {
            let r = n_s + i;
            let k = self.k_diag[i];
            for c in 0..n_s {
                j.fx[(r, c)] = k * dpsi[(i, c)] + gmix_gx[(i, c)];
            }
            for c in 0..n_f {
                j.fx[(r, n_s + c)] = gmix_gx[(i, n_s + c)] - if c == i { k } else { 0.0 };
            }
            for c in 0..n_z {
                j.fz[(r, c)] = gmix_gz[(i, c)];
            }
            j.fu[(r, 0)] = k * self.psi_u[i];
        }
        j
    }

    fn default_partition(&self) -> (Vec<usize>, Vec<usize>) {
        let n_s = self.n_s();
        ((0..n_s).collect(), (n_s..n_s + self.n_f()).collect())
    }

    fn sample_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x_s: Vec<f64> = (0..self.n_s()).map(|i| 0.4 * pattern(i, 2, 0.2) + 0.1).collect();
        let u = vec![0.3];
        let (mut x, mut z) = self.consistent_state(&x_s, &u);
        // Off-manifold so that every Jacobian term is exercised.
        for (i, v) in x.iter_mut().enumerate() {
            *v += 0.05 * pattern(i, 5, 0.6);
        }
        for (i, v) in z.iter_mut().enumerate() {
            *v += 0.05 * pattern(i, 6, 0.8);
        }
        (x, z, u)
    }
}

// ---------------------------------------------------------------------------
// Linear probe system

/// `ẋ_s = −r x_s + q z + v`, `ẋ_f = −a (x_f − x_s)`, `0 = z − x_f`.
///
/// The manifold is `x_f = z = x_s`, on which `ẋ_s = (q − r) x_s + v`. With
/// `r = q = 0` the slow state is the ramp `x_s(t) = x_s(0) + v t`.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub r: f64,
    pub q: f64,
    pub a: f64,
    pub v: f64,
}

impl Default for LinearProbe {
    fn default() -> Self {
        Self { r: 1.5, q: 1.0, a: 1.0, v: 0.0 }
    }
}

impl LinearProbe {
    /// Rate of the reduced slow dynamics, `ẋ_s = λ x_s`.
    pub fn reduced_rate(&self) -> f64 {
        self.q - self.r
    }
}

impl DaeModel for LinearProbe {
    fn name(&self) -> &str {
        "linear"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_z(&self) -> usize {
        1
    }
    fn state_names(&self) -> Vec<String> {
        vec!["xs".into(), "xf".into()]
    }
    fn parameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("r".into(), self.r), ("q".into(), self.q), ("a".into(), self.a), ("v".into(), self.v)])
    }
    fn rhs(&self, x: &[f64], z: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = -self.r * x[0] + self.q * z[0] + self.v;
        out[1] = -self.a * (x[1] - x[0]);
    }
    fn constraint(&self, x: &[f64], z: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = z[0] - x[1];
    }
    fn jacobians(&self, _x: &[f64], _z: &[f64], _u: &[f64]) -> DaeJacobians {
        let mut j = DaeJacobians::zeros(2, 1, 0);
        j.fx[(0, 0)] = -self.r;
        j.fz[(0, 0)] = self.q;
        j.fx[(1, 0)] = self.a;
        j.fx[(1, 1)] = -self.a;
        j.gx[(0, 1)] = -1.0;
        j.gz[(0, 0)] = 1.0;
        j
    }
    fn default_partition(&self) -> (Vec<usize>, Vec<usize>) {
        (vec![0], vec![1])
    }
    fn sample_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![0.7, 0.5], vec![0.4], vec![])
    }
}

// ---------------------------------------------------------------------------
// Catalog and configuration

pub fn make_robertson() -> DaeSystem {
    DaeSystem::new(Arc::new(Robertson::default())).expect("robertson Jacobians are consistent")
}

pub fn make_robertson_ode() -> DaeSystem {
    DaeSystem::new(Arc::new(RobertsonOde::default())).expect("robertson ODE Jacobians are consistent")
}

pub fn make_smib() -> DaeSystem {
    DaeSystem::new(Arc::new(Smib::default())).expect("smib Jacobians are consistent")
}

pub fn make_linear_probe() -> DaeSystem {
    DaeSystem::new(Arc::new(LinearProbe::default())).expect("linear probe Jacobians are consistent")
}

pub fn make_synthetic_two_timescale(kappa: f64, n_s: usize, n_f: usize, n_z: usize) -> Result<DaeSystem, DaeError> {
    let model = SyntheticTwoTimescale::new(SyntheticParams::new(kappa, n_s, n_f, n_z))?;
    DaeSystem::new(Arc::new(model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionOverride {
    pub slow: Vec<usize>,
    pub fast: Vec<usize>,
}

/// JSON system description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub system: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub partition_override: Option<PartitionOverride>,
}

impl SystemConfig {
    pub fn named(system: &str) -> Self {
        Self { system: system.to_string(), params: BTreeMap::new(), partition_override: None }
    }

    pub fn build(&self) -> Result<DaeSystem, DaeError> {
        let model: Arc<dyn DaeModel> = match self.system.as_str() {
            "robertson" => {
                let mut m = Robertson::default();
                for (k, &v) in &self.params {
                    match k.as_str() {
                        "k1" => m.k1 = v,
                        "k2" => m.k2 = v,
                        "k3" => m.k3 = v,
                        _ => return Err(DaeError::InvalidParameter(format!("robertson has no parameter '{k}'"))),
                    }
                }
                Arc::new(m)
            }
            "robertson_ode" => {
                let mut m = RobertsonOde::default();
                for (k, &v) in &self.params {
                    match k.as_str() {
                        "k1" => m.rates.k1 = v,
                        "k2" => m.rates.k2 = v,
                        "k3" => m.rates.k3 = v,
                        _ => {
                            return Err(DaeError::InvalidParameter(format!("robertson_ode has no parameter '{k}'")))
                        }
                    }
                }
                Arc::new(m)
            }
            "smib" => {
                let mut m = Smib::default();
                for (k, &v) in &self.params {
                    m.set(k, v)?;
                }
                Arc::new(m)
            }
            "synthetic" => {
                let mut m = SyntheticTwoTimescale::new(SyntheticParams::new(100.0, 2, 4, 2))?;
                for (k, &v) in &self.params {
                    m.set(k, v)?;
                }
                Arc::new(SyntheticTwoTimescale::new(m.params.clone())?)
            }
            "linear" => {
                let mut m = LinearProbe::default();
                for (k, &v) in &self.params {
                    match k.as_str() {
                        "r" => m.r = v,
                        "q" => m.q = v,
                        "a" => m.a = v,
                        "v" => m.v = v,
                        _ => return Err(DaeError::InvalidParameter(format!("linear has no parameter '{k}'"))),
                    }
                }
                Arc::new(m)
            }
            other => return Err(DaeError::UnknownSystem(other.to_string())),
        };
        match &self.partition_override {
            Some(p) => DaeSystem::with_partition(model, p.slow.clone(), p.fast.clone()),
            None => DaeSystem::new(model),
        }
    }
}

// ---------------------------------------------------------------------------
// Spectral diagnostics

/// Timescale diagnostics at one state.
#[derive(Debug, Clone)]
pub struct SpectralGapReport {
    /// Eigenvalues of the reduced fast Jacobian `S = A − B J_z⁻¹ C`.
    pub fast_eigs: Vec<Complex64>,
    /// Eigenvalues of the reduced slow Jacobian on the manifold (empty when
    /// `∂F/∂y` is singular).
    pub slow_eigs: Vec<Complex64>,
    /// `min |Re λ_fast| / max |Re λ_slow|`.
    pub gap: f64,
    /// Minimum fast decay rate; `0.0` when `S` is numerically singular.
    pub alpha: f64,
    pub sigma_min_s: f64,
    pub sigma_min_ext: f64,
    pub det_jz: f64,
    pub det_s: f64,
    pub det_ext: f64,
    /// Set when a fast mode is not strictly decaying.
    pub degenerate: bool,
}

/// Schur-complement and eigenvalue report for the extended system at
/// `(x, z)`.
pub fn spectral_gap_report(sys: &DaeSystem, x: &[f64], z: &[f64], u: &[f64]) -> Result<SpectralGapReport, DaeError> {
    let j = sys.model().jacobians(x, z, u);
    let p = sys.partition();
    let n_f = p.n_f();
    let ext = sys.extended_blocks(&j);

    let jz = j.gz.clone();
    let (jz_lu, det_jz) = if p.n_z == 0 {
        (None, 1.0)
    } else {
        match linalg::lu_factor(&jz) {
            Ok(lu) => {
                let d = lu.det();
                (Some(lu), d)
            }
            Err(LinalgError::SingularMatrix { .. }) => return Err(DaeError::SingularJz),
            Err(e) => return Err(e.into()),
        }
    };

    let a = ext.f_y.block(0, 0, n_f, n_f);
    let s = match &jz_lu {
        Some(lu) => {
            let b = ext.f_y.block(0, n_f, n_f, p.n_z);
            let c = ext.f_y.block(n_f, 0, p.n_z, n_f);
            a.sub(&b.matmul(&lu.solve_matrix(&c)))
        }
        None => a,
    };

    let fast_eigs = linalg::eigenvalues(&s)?;
    let sigma_min_s = linalg::min_singular_value(&s)?;
    let det_s = linalg::det(&s)?;
    let scale = s.max_abs().max(f64::MIN_POSITIVE);
    let mut alpha = fast_eigs.iter().map(|l| l.re.abs()).fold(f64::INFINITY, f64::min);
    if n_f == 0 {
        alpha = f64::INFINITY;
    }
    let degenerate = fast_eigs.iter().any(|l| l.re > -1e-12 * scale) || sigma_min_s <= 1e-12 * scale;
    if degenerate {
        alpha = 0.0;
    }

    let sigma_min_ext = if p.n_y() == 0 { f64::INFINITY } else { linalg::min_singular_value(&ext.f_y)? };
    let det_ext = linalg::det(&ext.f_y)?;

    let slow_eigs = match linalg::lu_factor(&ext.f_y) {
        Ok(lu) => {
            let dy = lu.solve_matrix(&ext.f_xs).scaled(-1.0);
            let reduced = ext.slow_xs.add(&ext.slow_y.matmul(&dy));
            linalg::eigenvalues(&reduced)?
        }
        Err(_) if p.n_y() == 0 => linalg::eigenvalues(&ext.slow_xs)?,
        Err(_) => Vec::new(),
    };
    let slow_max = slow_eigs.iter().map(|l| l.re.abs()).fold(0.0, f64::max);
    let gap = if slow_max > 0.0 { alpha / slow_max } else { f64::INFINITY };

    Ok(SpectralGapReport {
        fast_eigs,
        slow_eigs,
        gap,
        alpha,
        sigma_min_s,
        sigma_min_ext,
        det_jz,
        det_s,
        det_ext,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn robertson_initial_state() {
        let sys = make_robertson();
        assert_eq!(sys.constraint(&[1.0, 0.0], &[0.0], &[]), vec![0.0]);
        assert_eq!(sys.rhs(&[1.0, 0.0], &[0.0], &[])[0], -0.04);
        assert_eq!(sys.constraint(&[0.3, 0.0], &[0.7], &[]), vec![0.0]);
    }

    #[test]
    fn robertson_conservation_closure_is_exact() {
        let m = Robertson::default();
        let mut g = [0.0];
        for k in 0..2000 {
            let y1 = (k as f64 * 0.7919).fract();
            let y2 = 1e-5 * (k as f64 * 0.31).fract();
            let y3 = Robertson::conserve(y1, y2);
            m.constraint(&[y1, y2], &[y3], &[], &mut g);
            assert_eq!(g[0], 0.0, "y1={y1} y2={y2}");
        }
    }

    #[test]
    fn smib_voltage_root_and_no_root() {
        let m = Smib::default();
        let v = m.closed_form_voltage(0.5).unwrap();
        let mut g = [0.0];
        m.constraint(&[0.5, 0.0], &[v], &[], &mut g);
        assert!(g[0].abs() < 1e-14);
        assert!(matches!(m.closed_form_voltage(PI), Err(DaeError::NoRealRoot { .. })));
    }

    #[test]
    fn partition_validation() {
        assert!(DaePartition::new(vec![0], vec![0], 2, 1).is_err());
        assert!(DaePartition::new(vec![0], vec![], 2, 1).is_err());
        assert!(DaePartition::new(vec![0], vec![2], 2, 1).is_err());
        assert!(DaePartition::new(vec![1], vec![0], 2, 1).is_ok());
    }

    #[test]
    fn builtins_pass_jacobian_check() {
        make_robertson();
        make_robertson_ode();
        make_smib();
        make_linear_probe();
        for kappa in [1.0, 10.0, 100.0, 1e3, 1e4] {
            make_synthetic_two_timescale(kappa, 3, 4, 3).unwrap();
        }
    }

    #[test]
    fn wrong_jacobian_is_rejected() {
        struct Bad;
        impl DaeModel for Bad {
            fn name(&self) -> &str {
                "bad"
            }
            fn n_x(&self) -> usize {
                1
            }
            fn n_z(&self) -> usize {
                0
            }
            fn parameters(&self) -> BTreeMap<String, f64> {
                BTreeMap::new()
            }
            fn rhs(&self, x: &[f64], _z: &[f64], _u: &[f64], out: &mut [f64]) {
                out[0] = x[0] * x[0];
            }
            fn constraint(&self, _x: &[f64], _z: &[f64], _u: &[f64], _out: &mut [f64]) {}
            fn jacobians(&self, x: &[f64], _z: &[f64], _u: &[f64]) -> DaeJacobians {
                let mut j = DaeJacobians::zeros(1, 0, 0);
                j.fx[(0, 0)] = x[0];
                j
            }
            fn default_partition(&self) -> (Vec<usize>, Vec<usize>) {
                (vec![0], vec![])
            }
            fn sample_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
                (vec![0.5], vec![], vec![])
            }
        }
        let err = DaeSystem::new(Arc::new(Bad)).unwrap_err();
        assert!(matches!(err, DaeError::JacobianMismatch { block: "f_x", .. }));
    }

    #[test]
    fn synthetic_manifold_is_a_fixed_point() {
        let m = SyntheticTwoTimescale::new(SyntheticParams::new(50.0, 2, 3, 2)).unwrap();
        let x_s = [0.3, -0.2];
        let u = [0.1];
        let (x, z) = m.consistent_state(&x_s, &u);
        let mut f = vec![0.0; 5];
        let mut g = vec![0.0; 2];
        m.rhs(&x, &z, &u, &mut f);
        m.constraint(&x, &z, &u, &mut g);
        assert!(g.iter().all(|v| v.abs() < 1e-14));
        assert!(f[2..].iter().all(|v| v.abs() < 1e-12));
        let h = m.slow_drift(&x_s, &u);
        assert!((f[0] - h[0]).abs() < 1e-14 && (f[1] - h[1]).abs() < 1e-14);
    }

    #[test]
    fn input_schedule_steps() {
        let s = InputSchedule::step(1.0, vec![0.0], vec![2.0]);
        assert_eq!(s.value_at(0.5), &[0.0]);
        assert_eq!(s.value_at(1.0), &[2.0]);
        assert_eq!(s.value_at(5.0), &[2.0]);
    }

    #[test]
    fn config_rejects_unknown_names() {
        assert!(matches!(SystemConfig::named("lorenz").build(), Err(DaeError::UnknownSystem(_))));
        let mut c = SystemConfig::named("robertson");
        c.params.insert("k9".into(), 1.0);
        assert!(matches!(c.build(), Err(DaeError::InvalidParameter(_))));
    }
}
