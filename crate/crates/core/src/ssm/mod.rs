//! State-space sequence engine.
//!
//! A continuous single-input system `h' = A h + B x, y = C h (+ D x)` with
//! diagonal `A` is discretized by zero-order hold,
//!
//! ```text
//! Ā = exp(ΔA),   B̄ = (ΔA)⁻¹ (exp(ΔA) − I) ΔB
//! ```
//!
//! and evaluated three ways: the sequential recurrence, the causal
//! convolution with kernel `K̄ = (C B̄, C Ā B̄, …)` (time-invariant parameters
//! only), and a chunked parallel scan over the associative operator
//! `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)` (time-varying parameters).

pub mod scan;
pub mod selective;

pub use scan::{combine, scan_diag_parallel, scan_diag_sequential, Affine};
pub use selective::ScanMode;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SsmError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("diagonal of A must be negative, entry {index} is {value}")]
    UnstableA { index: usize, value: f64 },
    #[error("non-finite hidden state at timestep {0}")]
    NonFiniteState(usize),
    #[error("parameters vary over time; the convolution kernel needs a time-invariant system")]
    TimeVarying,
    #[error("scan over an empty sequence")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, SsmError>;

/// Below this `|ΔA|` the input factor uses its limit `B̄ = ΔB`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-12;

/// `(e^z − 1) / z`, the factor with `B̄ = Δ·φ(ΔA)·B`.
#[inline]
pub fn zoh_phi(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0
    } else {
        z.exp_m1() / z
    }
}

/// `dφ/dz`.
#[inline]
pub fn zoh_phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        0.5 + z / 3.0 + z * z / 8.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Continuous parameters of one channel: diagonal `A` (length `N`), `B`,
/// `C` (length `N` each) and an optional skip coefficient `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Option<f64>,
}

impl SsmParams {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, d: Option<f64>) -> Result<Self> {
        if b.len() != a.len() || c.len() != a.len() {
            return Err(SsmError::Shape(format!("A {}, B {}, C {}", a.len(), b.len(), c.len())));
        }
        if let Some((index, &value)) = a.iter().enumerate().find(|(_, v)| !(**v < 0.0)) {
            return Err(SsmError::UnstableA { index, value });
        }
        Ok(Self { a, b, c, d })
    }

    /// `A_n = −(n + 1)`, `B = C = 1`, `D = 1`.
    pub fn default_init(state: usize) -> Self {
        Self { a: (0..state).map(|n| -((n + 1) as f64)).collect(), b: vec![1.0; state], c: vec![1.0; state], d: Some(1.0) }
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }
}

/// Discrete time-invariant system (diagonal storage).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// Hidden state `h_t` of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    pub h: Vec<f64>,
}

impl SsmState {
    pub fn zeros(state: usize) -> Self {
        Self { h: vec![0.0; state] }
    }

    pub fn reset(&mut self) {
        self.h.iter_mut().for_each(|v| *v = 0.0);
    }

    /// One recurrence step; returns `C·h_t`.
    pub fn step(&mut self, a_bar: &[f64], b_bar: &[f64], c: &[f64], x: f64) -> f64 {
        let mut y = 0.0;
        for n in 0..self.h.len() {
            self.h[n] = a_bar[n] * self.h[n] + b_bar[n] * x;
            y += c[n] * self.h[n];
        }
        y
    }
}

pub fn discretize_zoh(params: &SsmParams, delta: f64) -> Result<DiscreteSsm> {
    if !(delta > 0.0) {
        return Err(SsmError::NonPositiveDelta(delta));
    }
    let (a_bar, b_bar) = params
        .a
        .iter()
        .zip(&params.b)
        .map(|(&a, &b)| {
            let z = delta * a;
            (z.exp(), delta * zoh_phi(z) * b)
        })
        .unzip();
    Ok(DiscreteSsm { a_bar, b_bar })
}

/// Exact recurrence from a zero state.
pub fn scan_sequential(disc: &DiscreteSsm, c: &[f64], d: Option<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let mut state = SsmState::zeros(disc.a_bar.len());
    x.iter()
        .enumerate()
        .map(|(t, &xt)| {
            let y = state.step(&disc.a_bar, &disc.b_bar, c, xt) + d.unwrap_or(0.0) * xt;
            if state.h.iter().all(|v| v.is_finite()) {
                Ok(y)
            } else {
                Err(SsmError::NonFiniteState(t))
            }
        })
        .collect()
}

/// `K̄_k = Σ_n C_n Ā_n^k B̄_n` for `k < len`.
pub fn ssm_kernel(disc: &DiscreteSsm, c: &[f64], len: usize) -> Vec<f64> {
    let mut pow: Vec<f64> = disc.b_bar.clone();
    (0..len)
        .map(|_| {
            let k = pow.iter().zip(c).map(|(p, c)| p * c).sum();
            pow.iter_mut().zip(&disc.a_bar).for_each(|(p, a)| *p *= a);
            k
        })
        .collect()
}

/// Causal convolution `y_t = Σ_{k ≤ t} K̄_k x_{t−k} + D x_t`. Quadratic in length.
pub fn apply_kernel(kernel: &[f64], x: &[f64], d: Option<f64>) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            let conv: f64 = (0..=t.min(kernel.len().saturating_sub(1))).map(|k| kernel[k] * x[t - k]).sum();
            conv + d.unwrap_or(0.0) * x[t]
        })
        .collect()
}

/// Per-timestep discrete parameters of one channel: `[len, state]` arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveDiscrete {
    pub state: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

impl SelectiveDiscrete {
    pub fn len(&self) -> usize {
        self.a_bar.len() / self.state
    }

    pub fn is_empty(&self) -> bool {
        self.a_bar.is_empty()
    }

    /// Discretizes continuous diagonal `a` (`[state]`) with per-step `delta`
    /// (`[len]`) and `b` (`[len, state]`).
    pub fn from_continuous(a: &[f64], delta: &[f64], b: &[f64]) -> Result<Self> {
        let state = a.len();
        if b.len() != delta.len() * state {
            return Err(SsmError::Shape(format!("b has {} values for {} steps of {state}", b.len(), delta.len())));
        }
        let mut a_bar = Vec::with_capacity(b.len());
        let mut b_bar = Vec::with_capacity(b.len());
        for (t, &dt) in delta.iter().enumerate() {
            if !(dt > 0.0) {
                return Err(SsmError::NonPositiveDelta(dt));
            }
            for n in 0..state {
                let z = dt * a[n];
                a_bar.push(z.exp());
                b_bar.push(dt * zoh_phi(z) * b[t * state + n]);
            }
        }
        Ok(Self { state, a_bar, b_bar })
    }

    /// The single time-invariant system, if every step is identical.
    pub fn to_lti(&self) -> Result<DiscreteSsm> {
        let s = self.state;
        let (a0, b0) = (&self.a_bar[..s], &self.b_bar[..s]);
        let varies = self.a_bar.chunks(s).any(|c| c != a0) || self.b_bar.chunks(s).any(|c| c != b0);
        if varies {
            return Err(SsmError::TimeVarying);
        }
        Ok(DiscreteSsm { a_bar: a0.to_vec(), b_bar: b0.to_vec() })
    }

    fn check(&self, c: &[f64], x: &[f64]) -> Result<()> {
        if x.is_empty() {
            return Err(SsmError::Empty);
        }
        if x.len() != self.len() || c.len() != self.a_bar.len() {
            return Err(SsmError::Shape(format!("{} steps, x {}, c {}", self.len(), x.len(), c.len())));
        }
        Ok(())
    }

    fn readout(&self, h: &[f64], c: &[f64], d: Option<f64>, x: &[f64]) -> Result<Vec<f64>> {
        let s = self.state;
        x.iter()
            .enumerate()
            .map(|(t, &xt)| {
                let ht = &h[t * s..(t + 1) * s];
                if !ht.iter().all(|v| v.is_finite()) {
                    return Err(SsmError::NonFiniteState(t));
                }
                Ok(ht.iter().zip(&c[t * s..(t + 1) * s]).map(|(p, q)| p * q).sum::<f64>() + d.unwrap_or(0.0) * xt)
            })
            .collect()
    }

    fn inputs(&self, x: &[f64]) -> Vec<f64> {
        self.b_bar.iter().enumerate().map(|(i, b)| b * x[i / self.state]).collect()
    }

    /// Time-varying recurrence, one step at a time.
    pub fn scan_sequential(&self, c: &[f64], d: Option<f64>, x: &[f64]) -> Result<Vec<f64>> {
        self.check(c, x)?;
        let h = scan_diag_sequential(&self.a_bar, &self.inputs(x), self.state);
        self.readout(&h, c, d, x)
    }

    /// Chunked Blelloch scan; agrees with [`Self::scan_sequential`] to rounding.
    pub fn scan_parallel(&self, c: &[f64], d: Option<f64>, x: &[f64], chunk: usize) -> Result<Vec<f64>> {
        self.check(c, x)?;
        let h = scan_diag_parallel(&self.a_bar, &self.inputs(x), self.state, chunk);
        self.readout(&h, c, d, x)
    }
}

/// Linear maps producing the input-dependent `(Δ_t, B_t, C_t)` from features
/// `x_t` (`[len, din]`).
#[derive(Clone, Debug)]
pub struct SelectiveProjection {
    pub din: usize,
    pub ch: usize,
    pub state: usize,
    /// `[din, ch]`
    pub w_delta: Vec<f64>,
    /// `[ch]`
    pub delta_bias: Vec<f64>,
    /// `[din, state]`
    pub w_b: Vec<f64>,
    /// `[din, state]`
    pub w_c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    /// `[len, ch]`, strictly positive.
    pub delta: Vec<f64>,
    /// `[len, state]`
    pub b: Vec<f64>,
    /// `[len, state]`
    pub c: Vec<f64>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `Δ_t = softplus(x_t W_Δ + b_Δ)`, `B_t = x_t W_B`, `C_t = x_t W_C`.
pub fn selective_params(x: &[f64], proj: &SelectiveProjection) -> Result<SelectiveParams> {
    let din = proj.din;
    if din == 0 || !x.len().is_multiple_of(din) {
        return Err(SsmError::Shape(format!("{} values for {din} features", x.len())));
    }
    let len = x.len() / din;
    let project = |w: &[f64], out_dim: usize| -> Vec<f64> {
        let mut out = vec![0.0; len * out_dim];
        for t in 0..len {
            for j in 0..out_dim {
                out[t * out_dim + j] = (0..din).map(|i| x[t * din + i] * w[i * out_dim + j]).sum();
            }
        }
        out
    };
    let mut delta = project(&proj.w_delta, proj.ch);
    for (i, v) in delta.iter_mut().enumerate() {
        *v = softplus(*v + proj.delta_bias[i % proj.ch]);
    }
    Ok(SelectiveParams { delta, b: project(&proj.w_b, proj.state), c: project(&proj.w_c, proj.state) })
}

/// `sup |y|` bound for a stable system driven by `|x| ≤ x_max`, from the
/// geometric series of each mode.
pub fn output_bound(disc: &DiscreteSsm, c: &[f64], d: Option<f64>, x_max: f64) -> f64 {
    let modes: f64 = disc.a_bar.iter().zip(&disc.b_bar).zip(c).map(|((a, b), c)| (c * b).abs() / (1.0 - a.abs())).sum();
    (modes + d.unwrap_or(0.0).abs()) * x_max
}
