//! Branch–trunk operator network for one prediction window.
//!
//! The branch MLP maps the window's initial slow state and context (parameters
//! and input descriptor) to `p` coefficients per output; the trunk maps the
//! normalized window time `τ ∈ [0, 1]` through Fourier features and an MLP to
//! `p` basis values. Outputs are anchored to the initial condition:
//!
//! ```text
//! x̂_j(τ) = x0_j + τ · c_j · Σ_k B_jk · T_k(τ)
//! ```
//!
//! so `x̂(0) = x0` holds bit-exactly for any parameters. The `d/dτ` outputs use
//! a forward-mode tangent through the trunk, and gradients (including through
//! that tangent) are computed by hand-written reverse mode.

use std::fs;
use std::path::Path;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::DenseMatrix;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("window time {0} outside [0, 1]")]
    TauOutOfRange(f64),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint config hash mismatch: stored {stored}, computed {computed}")]
    ConfigHashMismatch { stored: String, computed: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Parameters and network arithmetic in f32; inputs and outputs in f64.
    #[default]
    F32ParamsF64Boundary,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Number of predicted states (and length of the anchoring initial state).
    pub n_out: usize,
    /// Length of the context vector (parameters followed by input descriptor).
    #[serde(default)]
    pub n_context: usize,
    pub n_basis: usize,
    pub hidden_width: usize,
    /// Residual blocks per MLP.
    pub depth: usize,
    #[serde(default = "default_frequencies")]
    pub fourier_frequencies: Vec<f64>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Branch inputs are mapped to `(raw - shift) / scale`; empty means identity.
    #[serde(default)]
    pub input_shift: Vec<f64>,
    #[serde(default)]
    pub input_scale: Vec<f64>,
    /// Per-output factor `c_j`; empty means all ones.
    #[serde(default)]
    pub output_scale: Vec<f64>,
    /// Gain on the initial branch output weights. Zero starts the network
    /// at the constant prediction `x̂ = x_s0`.
    #[serde(default)]
    pub branch_output_gain: f64,
}

fn default_frequencies() -> Vec<f64> {
    [1.0, 2.0, 4.0, 8.0].iter().map(|k| k * std::f64::consts::PI).collect()
}

impl NetConfig {
    pub fn new(n_out: usize, n_context: usize, n_basis: usize, hidden_width: usize, depth: usize) -> Self {
        Self {
            n_out,
            n_context,
            n_basis,
            hidden_width,
            depth,
            fourier_frequencies: default_frequencies(),
            activation: Activation::Tanh,
            seed: 0,
            precision: Precision::F32ParamsF64Boundary,
            input_shift: Vec::new(),
            input_scale: Vec::new(),
            output_scale: Vec::new(),
            branch_output_gain: 0.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_branch_output_gain(mut self, gain: f64) -> Self {
        self.branch_output_gain = gain;
        self
    }

    pub fn n_branch_inputs(&self) -> usize {
        self.n_out + self.n_context
    }

    pub fn validate(&self) -> Result<(), OperatorError> {
        let bad = |m: String| Err(OperatorError::InvalidConfig(m));
        if self.n_out == 0 {
            return bad("n_out must be at least 1".into());
        }
        if self.n_basis == 0 {
            return bad("n_basis must be at least 1".into());
        }
        if self.depth == 0 || self.hidden_width == 0 {
            return bad("depth and hidden_width must be at least 1".into());
        }
        let n_in = self.n_branch_inputs();
        for (name, v, n) in [
            ("input_shift", &self.input_shift, n_in),
            ("input_scale", &self.input_scale, n_in),
            ("output_scale", &self.output_scale, self.n_out),
        ] {
            if !v.is_empty() && v.len() != n {
                return bad(format!("{name} has length {}, expected {n}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{name} contains non-finite values"));
            }
        }
        if self.input_scale.iter().any(|&s| s == 0.0) {
            return bad("input_scale entries must be non-zero".into());
        }
        if !(self.branch_output_gain.is_finite() && self.branch_output_gain >= 0.0) {
            return bad("branch_output_gain must be finite and non-negative".into());
        }
        if self.fourier_frequencies.iter().any(|f| !f.is_finite()) {
            return bad("fourier frequencies must be finite".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One window's inputs. The context is `μ ⊕ u` in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowInput {
    pub x_s0: Vec<f64>,
    pub mu: Vec<f64>,
    pub u: Vec<f64>,
    pub taus: Vec<f64>,
}

impl WindowInput {
    pub fn new(x_s0: Vec<f64>, mu: Vec<f64>, u: Vec<f64>, taus: Vec<f64>) -> Self {
        Self { x_s0, mu, u, taus }
    }
}

/// Dense row/column strides of a matrix operand.
#[derive(Clone, Copy)]
struct Strides(isize, isize);

impl Strides {
    fn max_index(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.0 as usize + (cols - 1) * self.1 as usize + 1
        }
    }
}

trait Scalar: Float + Send + Sync + std::fmt::Debug + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn erf(self) -> Self;
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        sa: Strides,
        b: *const Self,
        sb: Strides,
        beta: Self,
        c: *mut Self,
        sc: Strides,
    );

    /// `C ← A·B + beta·C` with `A: m×k`, `B: k×n`, `C: m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, beta: Self, c: &mut [Self], sc: Strides) {
        assert!(sa.max_index(m, k) <= a.len() && sb.max_index(k, n) <= b.len() && sc.max_index(m, n) <= c.len());
        // SAFETY: all strided accesses stay inside the slices checked above,
        // and `c` is borrowed mutably so it cannot alias `a` or `b`.
        unsafe { Self::raw_gemm(m, k, n, a.as_ptr(), sa, b.as_ptr(), sb, beta, c.as_mut_ptr(), sc) }
    }
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    unsafe fn raw_gemm(m: usize, k: usize, n: usize, a: *const f32, sa: Strides, b: *const f32, sb: Strides, beta: f32, c: *mut f32, sc: Strides) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, sa.0, sa.1, b, sb.0, sb.1, beta, c, sc.0, sc.1)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    unsafe fn raw_gemm(m: usize, k: usize, n: usize, a: *const f64, sa: Strides, b: *const f64, sb: Strides, beta: f64, c: *mut f64, sc: Strides) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, sa.0, sa.1, b, sb.0, sb.1, beta, c, sc.0, sc.1)
    }
}

/// Activation value and its first two derivatives.
fn activate<T: Scalar>(kind: Activation, x: T) -> (T, T, T) {
    match kind {
        Activation::Tanh => {
            let t = x.tanh();
            let d1 = T::one() - t * t;
            (t, d1, T::of(-2.0) * t * d1)
        }
        Activation::Gelu => {
            let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
            let pdf = (T::of(-0.5) * x * x).exp() * T::of(0.398_942_280_401_432_7);
            (x * cdf, cdf + x * pdf, pdf * (T::of(2.0) - x * x))
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Dense layer `y = W x + b`, stored as offsets into θ. `W` is row-major
/// `n_out × n_in`. All methods act on `n` points at once, one per row.
#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    n_out: usize,
    n_in: usize,
}

impl Layer {
    fn size(&self) -> usize {
        self.n_out * (self.n_in + 1)
    }

    fn weights<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.w..self.w + self.n_out * self.n_in]
    }

    /// `X Wᵀ (+ b)` for `X: n × n_in`.
    fn apply<T: Scalar>(&self, p: &[T], x: &[T], n: usize, bias: bool) -> Vec<T> {
        let mut out = vec![T::zero(); n * self.n_out];
        if bias {
            for row in out.chunks_exact_mut(self.n_out) {
                row.copy_from_slice(&p[self.b..self.b + self.n_out]);
            }
        }
        let (ni, no) = (self.n_in as isize, self.n_out as isize);
        T::gemm(n, self.n_in, self.n_out, x, Strides(ni, 1), self.weights(p), Strides(1, ni), T::one(), &mut out, Strides(no, 1));
        out
    }

    /// `Ȳ W` for `Ȳ: n × n_out`.
    fn apply_transpose<T: Scalar>(&self, p: &[T], y: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); n * self.n_in];
        let (ni, no) = (self.n_in as isize, self.n_out as isize);
        T::gemm(n, self.n_out, self.n_in, y, Strides(no, 1), self.weights(p), Strides(ni, 1), T::zero(), &mut out, Strides(ni, 1));
        out
    }

    /// Adds `Ȳᵀ X` (and the column sums of `Ȳ`) into the θ gradient.
    fn accumulate<T: Scalar>(&self, grad: &mut [f64], dy: &[T], x: &[T], n: usize, with_bias: bool) {
        let mut g = vec![T::zero(); self.n_out * self.n_in];
        let (ni, no) = (self.n_in as isize, self.n_out as isize);
        T::gemm(self.n_out, n, self.n_in, dy, Strides(1, no), x, Strides(ni, 1), T::zero(), &mut g, Strides(ni, 1));
        for (acc, v) in grad[self.w..self.w + g.len()].iter_mut().zip(&g) {
            *acc += v.f64();
        }
        if with_bias {
            for row in dy.chunks_exact(self.n_out) {
                for (acc, v) in grad[self.b..self.b + self.n_out].iter_mut().zip(row) {
                    *acc += v.f64();
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    input: Layer,
    hidden: Vec<Layer>,
    output: Layer,
}

impl Mlp {
    fn new(offset: &mut usize, n_in: usize, width: usize, depth: usize, n_out: usize) -> Self {
        let mut mk = |n_out: usize, n_in: usize| {
            let l = Layer { w: *offset, b: *offset + n_out * n_in, n_out, n_in };
            *offset += l.size();
            l
        };
        let input = mk(width, n_in);
        let hidden = (0..depth).map(|_| mk(width, width)).collect();
        let output = mk(n_out, width);
        Self { input, hidden, output }
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        std::iter::once(&self.input).chain(self.hidden.iter()).chain(std::iter::once(&self.output))
    }
}

/// Intermediate values of an MLP evaluated at `n` points, with optional
/// tangents. Every buffer is row-major with one row per point.
struct MlpTape<T> {
    n: usize,
    x: Vec<T>,
    xdot: Option<Vec<T>>,
    /// First and second activation derivatives at the pre-activations of
    /// the input layer and every residual block.
    d1: Vec<Vec<T>>,
    d2: Vec<Vec<T>>,
    /// Tangents of those pre-activations.
    adot: Vec<Vec<T>>,
    /// Hidden state after the input layer and after every residual block.
    h: Vec<Vec<T>>,
    hdot: Vec<Vec<T>>,
    out: Vec<T>,
    outdot: Vec<T>,
}

fn mlp_forward<T: Scalar>(mlp: &Mlp, act: Activation, p: &[T], x: Vec<T>, xdot: Option<Vec<T>>, n: usize) -> MlpTape<T> {
    let tangent = xdot.is_some();
    let n_layers = mlp.hidden.len() + 1;
    let mut tape = MlpTape {
        n,
        x,
        xdot,
        d1: Vec::with_capacity(n_layers),
        d2: Vec::with_capacity(n_layers),
        adot: Vec::new(),
        h: Vec::with_capacity(n_layers),
        hdot: Vec::new(),
        out: Vec::new(),
        outdot: Vec::new(),
    };
    let size = n * mlp.input.n_out;
    let mut h = vec![T::zero(); size];
    let mut hdot = vec![T::zero(); if tangent { size } else { 0 }];
    for (l, layer) in std::iter::once(&mlp.input).chain(&mlp.hidden).enumerate() {
        let skip = l > 0;
        let a = layer.apply(p, if skip { &h } else { &tape.x }, n, true);
        let ad = if tangent {
            let src = if skip { &hdot } else { tape.xdot.as_ref().unwrap() };
            layer.apply(p, src, n, false)
        } else {
            Vec::new()
        };
        let mut d1 = Vec::with_capacity(size);
        let mut d2 = Vec::with_capacity(size);
        for i in 0..size {
            let (v, g1, g2) = activate(act, a[i]);
            h[i] = if skip { h[i] + v } else { v };
            if tangent {
                hdot[i] = if skip { hdot[i] + g1 * ad[i] } else { g1 * ad[i] };
            }
            d1.push(g1);
            d2.push(g2);
        }
        tape.d1.push(d1);
        tape.d2.push(d2);
        tape.h.push(h.clone());
        if tangent {
            tape.adot.push(ad);
            tape.hdot.push(hdot.clone());
        }
    }
    tape.out = mlp.output.apply(p, &h, n, true);
    if tangent {
        tape.outdot = mlp.output.apply(p, &hdot, n, false);
    }
    tape
}

/// Reverse pass; returns the cotangent on the MLP input.
fn mlp_backward<T: Scalar>(
    mlp: &Mlp,
    p: &[T],
    tape: &MlpTape<T>,
    out_bar: &[T],
    outdot_bar: Option<&[T]>,
    grad: &mut [f64],
) -> Vec<T> {
    let n = tape.n;
    let tangent = outdot_bar.is_some() && tape.xdot.is_some();
    let last = tape.h.len() - 1;
    mlp.output.accumulate(grad, out_bar, &tape.h[last], n, true);
    let mut h_bar = mlp.output.apply_transpose(p, out_bar, n);
    let mut hdot_bar = Vec::new();
    if tangent {
        let odb = outdot_bar.unwrap();
        mlp.output.accumulate(grad, odb, &tape.hdot[last], n, false);
        hdot_bar = mlp.output.apply_transpose(p, odb, n);
    }

    for l in (0..=mlp.hidden.len()).rev() {
        let (layer, skip) = if l == 0 { (&mlp.input, false) } else { (&mlp.hidden[l - 1], true) };
        let size = n * layer.n_out;
        let mut a_bar = vec![T::zero(); size];
        let mut adot_bar = vec![T::zero(); if tangent { size } else { 0 }];
        for i in 0..size {
            let d1 = tape.d1[l][i];
            a_bar[i] = h_bar[i] * d1;
            if tangent {
                a_bar[i] = a_bar[i] + hdot_bar[i] * tape.d2[l][i] * tape.adot[l][i];
                adot_bar[i] = hdot_bar[i] * d1;
            }
        }
        let h_in: &[T] = if skip { &tape.h[l - 1] } else { &tape.x };
        layer.accumulate(grad, &a_bar, h_in, n, true);
        let back = layer.apply_transpose(p, &a_bar, n);
        let back_dot = if tangent {
            let hdot_in: &[T] = if skip { &tape.hdot[l - 1] } else { tape.xdot.as_ref().unwrap() };
            layer.accumulate(grad, &adot_bar, hdot_in, n, false);
            layer.apply_transpose(p, &adot_bar, n)
        } else {
            Vec::new()
        };
        if skip {
            h_bar.iter_mut().zip(&back).for_each(|(hb, v)| *hb = *hb + *v);
            hdot_bar.iter_mut().zip(&back_dot).for_each(|(hb, v)| *hb = *hb + *v);
        } else {
            h_bar = back;
            hdot_bar = back_dot;
        }
    }
    h_bar
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Branch–trunk network with its parameter vector θ.
#[derive(Debug, Clone)]
pub struct OperatorNet {
    config: NetConfig,
    branch: Mlp,
    trunk: Mlp,
    n_params: usize,
    params: Params,
}

impl PartialEq for OperatorNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl OperatorNet {
    pub fn new(config: NetConfig) -> Result<Self, OperatorError> {
        config.validate()?;
        let mut offset = 0;
        let branch = Mlp::new(
            &mut offset,
            config.n_branch_inputs(),
            config.hidden_width,
            config.depth,
            config.n_basis * config.n_out,
        );
        let trunk = Mlp::new(
            &mut offset,
            1 + 2 * config.fourier_frequencies.len(),
            config.hidden_width,
            config.depth,
            config.n_basis,
        );
        let n_params = offset;

        // Glorot-uniform weights, zero biases; residual blocks start damped.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut theta = vec![0.0f64; n_params];
        for (m, mlp) in [&branch, &trunk].into_iter().enumerate() {
            for (i, layer) in mlp.layers().enumerate() {
                let gain = match (m, i) {
                    (0, i) if i == mlp.hidden.len() + 1 => config.branch_output_gain,
                    (_, i) if i > 0 && i <= mlp.hidden.len() => 0.5,
                    _ => 1.0,
                };
                if gain == 0.0 {
                    continue;
                }
                let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt() * gain;
                for v in &mut theta[layer.w..layer.w + layer.n_in * layer.n_out] {
                    *v = rng.gen_range(-limit..limit);
                }
            }
        }
        let params = match config.precision {
            Precision::F32ParamsF64Boundary => Params::F32(theta.iter().map(|&v| v as f32).collect()),
            Precision::F64 => Params::F64(theta),
        };
        Ok(Self { config, branch, trunk, n_params, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_out(&self) -> usize {
        self.config.n_out
    }

    /// Parameters widened to f64.
    pub fn params(&self) -> Vec<f64> {
        match &self.params {
            Params::F32(p) => p.iter().map(|&v| v as f64).collect(),
            Params::F64(p) => p.clone(),
        }
    }

    /// Overwrites θ; values are rounded to f32 in mixed-precision mode.
    pub fn set_params(&mut self, theta: &[f64]) -> Result<(), OperatorError> {
        if theta.len() != self.n_params {
            return Err(OperatorError::ShapeMismatch { what: "parameter vector", expected: self.n_params, got: theta.len() });
        }
        match &mut self.params {
            Params::F32(p) => p.iter_mut().zip(theta).for_each(|(d, &s)| *d = s as f32),
            Params::F64(p) => p.copy_from_slice(theta),
        }
        Ok(())
    }

    /// Zeros the branch output layer, making the network the identity map on `x0`.
    pub fn zero_branch_output(&mut self) {
        let l = self.branch.output;
        let range = l.w..l.w + l.size();
        match &mut self.params {
            Params::F32(p) => p[range].iter_mut().for_each(|v| *v = 0.0),
            Params::F64(p) => p[range].iter_mut().for_each(|v| *v = 0.0),
        }
    }

    fn check(&self, w: &WindowInput) -> Result<(), OperatorError> {
        if w.x_s0.len() != self.config.n_out {
            return Err(OperatorError::ShapeMismatch { what: "x_s0", expected: self.config.n_out, got: w.x_s0.len() });
        }
        let ctx = w.mu.len() + w.u.len();
        if ctx != self.config.n_context {
            return Err(OperatorError::ShapeMismatch { what: "context (mu ⊕ u)", expected: self.config.n_context, got: ctx });
        }
        if let Some(&t) = w.taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(OperatorError::TauOutOfRange(t));
        }
        if w.x_s0.iter().chain(&w.mu).chain(&w.u).any(|v| !v.is_finite()) {
            return Err(OperatorError::InvalidConfig("non-finite window input".into()));
        }
        Ok(())
    }

    fn branch_input<T: Scalar>(&self, w: &WindowInput) -> Vec<T> {
        let c = &self.config;
        w.x_s0
            .iter()
            .chain(&w.mu)
            .chain(&w.u)
            .enumerate()
            .map(|(i, &v)| {
                let shift = c.input_shift.get(i).copied().unwrap_or(0.0);
                let scale = c.input_scale.get(i).copied().unwrap_or(1.0);
                T::of((v - shift) / scale)
            })
            .collect()
    }

    /// Trunk features for every `τ` (rows) and their `τ`-derivatives.
    fn features<T: Scalar>(&self, taus: &[f64]) -> (Vec<T>, Vec<T>) {
        let freqs = &self.config.fourier_frequencies;
        let width = 1 + 2 * freqs.len();
        let mut f = Vec::with_capacity(taus.len() * width);
        let mut fd = Vec::with_capacity(f.capacity());
        for &tau in taus {
            f.push(T::of(tau));
            fd.push(T::one());
            for &om in freqs {
                let (s, c) = (om * tau).sin_cos();
                f.push(T::of(s));
                fd.push(T::of(om * c));
                f.push(T::of(c));
                fd.push(T::of(-om * s));
            }
        }
        (f, fd)
    }

    fn out_scale(&self, j: usize) -> f64 {
        self.config.output_scale.get(j).copied().unwrap_or(1.0)
    }

    fn forward_impl<T: Scalar>(&self, p: &[T], w: &WindowInput, dtau: bool) -> (DenseMatrix, DenseMatrix) {
        let (n_out, n_b, n) = (self.config.n_out, self.config.n_basis, w.taus.len());
        let act = self.config.activation;
        let bt = mlp_forward(&self.branch, act, p, self.branch_input(w), None, 1);
        let (f, fd) = self.features::<T>(&w.taus);
        let tt = mlp_forward(&self.trunk, act, p, f, dtau.then_some(fd), n);
        let mut vals = DenseMatrix::zeros(n, n_out);
        let mut ders = DenseMatrix::zeros(n, if dtau { n_out } else { 0 });
        for (r, &tau) in w.taus.iter().enumerate() {
            let tau_t = T::of(tau);
            let trow = &tt.out[r * n_b..(r + 1) * n_b];
            for j in 0..n_out {
                let c = T::of(self.out_scale(j));
                let coeffs = &bt.out[j * n_b..(j + 1) * n_b];
                let s = dot(coeffs, trow);
                vals[(r, j)] = w.x_s0[j] + (tau_t * c * s).f64();
                if dtau {
                    let sd = dot(coeffs, &tt.outdot[r * n_b..(r + 1) * n_b]);
                    ders[(r, j)] = (c * (s + tau_t * sd)).f64();
                }
            }
        }
        (vals, ders)
    }

    /// Predicted states, one row per `τ`.
    pub fn forward(&self, w: &WindowInput) -> Result<DenseMatrix, OperatorError> {
        self.check(w)?;
        Ok(match &self.params {
            Params::F32(p) => self.forward_impl(p, w, false).0,
            Params::F64(p) => self.forward_impl(p, w, false).0,
        })
    }

    /// Predicted states and their derivatives with respect to `τ`.
    pub fn forward_with_dtau(&self, w: &WindowInput) -> Result<(DenseMatrix, DenseMatrix), OperatorError> {
        self.check(w)?;
        Ok(match &self.params {
            Params::F32(p) => self.forward_impl(p, w, true),
            Params::F64(p) => self.forward_impl(p, w, true),
        })
    }

    fn backward_impl<T: Scalar>(
        &self,
        p: &[T],
        w: &WindowInput,
        cot: &DenseMatrix,
        cot_dtau: Option<&DenseMatrix>,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let (n_out, n_b, n) = (self.config.n_out, self.config.n_basis, w.taus.len());
        let act = self.config.activation;
        let use_dot = cot_dtau.is_some();
        let bt = mlp_forward(&self.branch, act, p, self.branch_input(w), None, 1);
        let (f, fd) = self.features::<T>(&w.taus);
        let tt = mlp_forward(&self.trunk, act, p, f, use_dot.then_some(fd), n);
        let mut coeff_bar = vec![T::zero(); n_out * n_b];
        let mut x0_bar = vec![0.0; n_out];
        let mut t_bar = vec![T::zero(); n * n_b];
        let mut tdot_bar = vec![T::zero(); if use_dot { n * n_b } else { 0 }];
        for (r, &tau) in w.taus.iter().enumerate() {
            let tau_t = T::of(tau);
            let rows = r * n_b..(r + 1) * n_b;
            for j in 0..n_out {
                let c = T::of(self.out_scale(j));
                let vb = cot[(r, j)];
                x0_bar[j] += vb;
                let vb = T::of(vb);
                let db = cot_dtau.map(|m| T::of(m[(r, j)])).unwrap_or(T::zero());
                let coeffs = &bt.out[j * n_b..(j + 1) * n_b];
                let cb = &mut coeff_bar[j * n_b..(j + 1) * n_b];
                let tb = &mut t_bar[rows.clone()];
                for k in 0..n_b {
                    let tk = tt.out[r * n_b + k];
                    let tdk = if use_dot { tt.outdot[r * n_b + k] } else { T::zero() };
                    cb[k] = cb[k] + vb * tau_t * c * tk + db * c * (tk + tau_t * tdk);
                    tb[k] = tb[k] + (vb * tau_t + db) * c * coeffs[k];
                }
                if use_dot {
                    for (k, tdb) in tdot_bar[rows.clone()].iter_mut().enumerate() {
                        *tdb = *tdb + db * c * tau_t * coeffs[k];
                    }
                }
            }
        }
        mlp_backward(&self.trunk, p, &tt, &t_bar, use_dot.then_some(&tdot_bar[..]), grad);
        let in_bar = mlp_backward(&self.branch, p, &bt, &coeff_bar, None, grad);
        for j in 0..n_out {
            let scale = self.config.input_scale.get(j).copied().unwrap_or(1.0);
            x0_bar[j] += in_bar[j].f64() / scale;
        }
        x0_bar
    }

    /// Reverse mode. Accumulates `∂L/∂θ` into `grad_theta` and returns
    /// `∂L/∂x_s0`, given cotangents on the outputs and optionally on their
    /// `τ`-derivatives (both `n_τ × n_out`).
    pub fn backward(
        &self,
        w: &WindowInput,
        cot: &DenseMatrix,
        cot_dtau: Option<&DenseMatrix>,
        grad_theta: &mut [f64],
    ) -> Result<Vec<f64>, OperatorError> {
        self.check(w)?;
        let shape = (w.taus.len(), self.config.n_out);
        for m in std::iter::once(cot).chain(cot_dtau) {
            if (m.rows(), m.cols()) != shape {
                return Err(OperatorError::ShapeMismatch { what: "output cotangent", expected: shape.0 * shape.1, got: m.rows() * m.cols() });
            }
        }
        if grad_theta.len() != self.n_params {
            return Err(OperatorError::ShapeMismatch { what: "gradient buffer", expected: self.n_params, got: grad_theta.len() });
        }
        Ok(match &self.params {
            Params::F32(p) => self.backward_impl(p, w, cot, cot_dtau, grad_theta),
            Params::F64(p) => self.backward_impl(p, w, cot, cot_dtau, grad_theta),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            n_params: self.n_params,
            params: self.params(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, OperatorError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(OperatorError::Checkpoint(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        let computed = ck.config.hash();
        if computed != ck.config_hash {
            return Err(OperatorError::ConfigHashMismatch { stored: ck.config_hash.clone(), computed });
        }
        let mut net = Self::new(ck.config.clone())?;
        if ck.n_params != net.n_params {
            return Err(OperatorError::ShapeMismatch { what: "checkpoint parameters", expected: net.n_params, got: ck.n_params });
        }
        net.set_params(&ck.params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), OperatorError> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint()).map_err(|e| OperatorError::Checkpoint(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, OperatorError> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| OperatorError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

const CHECKPOINT_FORMAT: &str = "daenet-operator";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialized network: config echo, its hash, and θ widened to f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: NetConfig,
    pub config_hash: String,
    pub n_params: usize,
    pub params: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(n_out: usize) -> WindowInput {
        WindowInput::new((0..n_out).map(|i| 0.3 + 0.1 * i as f64).collect(), vec![0.7], vec![], vec![0.0, 0.25, 0.6, 1.0])
    }

    #[test]
    fn anchored_at_zero() {
        let net = OperatorNet::new(NetConfig::new(2, 1, 4, 8, 2).with_seed(3).with_branch_output_gain(1.0)).unwrap();
        let w = window(2);
        let y = net.forward(&w).unwrap();
        assert_eq!(y.row(0), &w.x_s0[..]);
    }

    #[test]
    fn zero_branch_is_constant() {
        let mut net = OperatorNet::new(NetConfig::new(2, 1, 4, 8, 2)).unwrap();
        net.zero_branch_output();
        let w = window(2);
        let (y, d) = net.forward_with_dtau(&w).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &w.x_s0[..]);
            assert!(d.row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dtau_matches_central_difference() {
        let net = OperatorNet::new(NetConfig::new(2, 1, 4, 8, 2).with_branch_output_gain(1.0).with_precision(Precision::F64).with_activation(Activation::Gelu)).unwrap();
        let mut w = window(2);
        w.taus = vec![0.4];
        let (_, d) = net.forward_with_dtau(&w).unwrap();
        let h = 1e-6;
        w.taus = vec![0.4 + h, 0.4 - h];
        let y = net.forward(&w).unwrap();
        for j in 0..2 {
            let fd = (y[(0, j)] - y[(1, j)]) / (2.0 * h);
            assert!((fd - d[(0, j)]).abs() <= 1e-6 * d[(0, j)].abs().max(1e-3), "{fd} vs {}", d[(0, j)]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = OperatorNet::new(NetConfig::new(1, 1, 3, 5, 1).with_seed(9)).unwrap();
        let back = OperatorNet::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(net, back);
        let mut ck = net.to_checkpoint();
        ck.config.seed = 10;
        assert!(matches!(OperatorNet::from_checkpoint(&ck), Err(OperatorError::ConfigHashMismatch { .. })));
    }

    fn weighted_sum(net: &OperatorNet, w: &WindowInput, cv: &DenseMatrix, cd: &DenseMatrix) -> f64 {
        let (y, d) = net.forward_with_dtau(w).unwrap();
        y.as_slice().iter().zip(cv.as_slice()).chain(d.as_slice().iter().zip(cd.as_slice())).map(|(a, b)| a * b).sum()
    }

    fn grad_check(precision: Precision, act: Activation, step: f64, tol: f64) {
        let mut net = OperatorNet::new(NetConfig::new(2, 1, 4, 8, 2).with_seed(5).with_branch_output_gain(1.0).with_precision(precision).with_activation(act)).unwrap();
        if precision == Precision::F32ParamsF64Boundary {
            // Dyadic parameters survive the f32 round trip exactly.
            let th: Vec<f64> = net.params().iter().map(|v| (v * 256.0).round() / 256.0).collect();
            net.set_params(&th).unwrap();
        }
        let w = window(2);
        let cv = DenseMatrix::from_fn(4, 2, |r, c| 0.3 + 0.2 * r as f64 - 0.5 * c as f64);
        let cd = DenseMatrix::from_fn(4, 2, |r, c| 0.1 * (r + c) as f64 - 0.2);
        let mut g = vec![0.0; net.n_params()];
        net.backward(&w, &cv, Some(&cd), &mut g).unwrap();
        let theta = net.params();
        let g_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst: f64 = 0.0;
        for i in (0..theta.len()).step_by(7) {
            let mut tp = theta.clone();
            tp[i] = theta[i] + step;
            net.set_params(&tp).unwrap();
            let up = net.params()[i];
            let fp = weighted_sum(&net, &w, &cv, &cd);
            tp[i] = theta[i] - step;
            net.set_params(&tp).unwrap();
            let down = net.params()[i];
            let fm = weighted_sum(&net, &w, &cv, &cd);
            let fd = (fp - fm) / (up - down);
            worst = worst.max((fd - g[i]).abs() / g_max);
        }
        net.set_params(&theta).unwrap();
        assert!(worst <= tol, "{precision:?} {act:?} worst {worst}");
    }

    #[test]
    fn parameter_gradients_match_fd() {
        grad_check(Precision::F64, Activation::Tanh, 1e-6, 1e-6);
        grad_check(Precision::F64, Activation::Gelu, 1e-6, 1e-6);
        grad_check(Precision::F32ParamsF64Boundary, Activation::Tanh, 1e-4, 1e-3);
    }
}
