//! Fused selective scan over many channels sharing per-step `B_t`, `C_t`,
//! with its reverse-mode rule. This is the kernel behind
//! [`Var::selective_scan`](crate::tensor::Var::selective_scan).

use super::scan::{scan_diag_parallel, scan_diag_sequential};
use super::{zoh_phi, zoh_phi_prime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel {
        chunk: usize,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct SelectiveDims {
    pub len: usize,
    pub ch: usize,
    pub state: usize,
}

pub struct SelectiveGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Returns `y: [len, ch]` and the hidden states `[ch, len, state]`.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    dims: SelectiveDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    mode: ScanMode,
) -> (Vec<f64>, Vec<f64>) {
    let SelectiveDims { len, ch, state } = dims;
    let mut y = vec![0.0; len * ch];
    let mut hidden = Vec::with_capacity(ch * len * state);
    let mut abar = vec![0.0; len * state];
    let mut bx = vec![0.0; len * state];
    for k in 0..ch {
        for t in 0..len {
            let dt = delta[t * ch + k];
            let ut = u[t * ch + k];
            for n in 0..state {
                let z = dt * a[k * state + n];
                abar[t * state + n] = z.exp();
                bx[t * state + n] = dt * zoh_phi(z) * b[t * state + n] * ut;
            }
        }
        let h = match mode {
            ScanMode::Sequential => scan_diag_sequential(&abar, &bx, state),
            ScanMode::Parallel { chunk } => scan_diag_parallel(&abar, &bx, state, chunk),
        };
        for t in 0..len {
            let ht = &h[t * state..(t + 1) * state];
            let ct = &c[t * state..(t + 1) * state];
            y[t * ch + k] = ht.iter().zip(ct).map(|(p, q)| p * q).sum::<f64>() + d[k] * u[t * ch + k];
        }
        hidden.extend_from_slice(&h);
    }
    (y, hidden)
}

#[allow(clippy::too_many_arguments)]
pub fn backward(
    dims: SelectiveDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    hidden: &[f64],
    gy: &[f64],
) -> SelectiveGrads {
    let SelectiveDims { len, ch, state } = dims;
    let mut g = SelectiveGrads {
        u: vec![0.0; len * ch],
        delta: vec![0.0; len * ch],
        a: vec![0.0; ch * state],
        b: vec![0.0; len * state],
        c: vec![0.0; len * state],
        d: vec![0.0; ch],
    };
    let mut lambda = vec![0.0; state];
    for k in 0..ch {
        let h = &hidden[k * len * state..(k + 1) * len * state];
        lambda.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let i = t * ch + k;
            let (gyt, ut, dt) = (gy[i], u[i], delta[i]);
            g.d[k] += gyt * ut;
            g.u[i] += gyt * d[k];
            for n in 0..state {
                let s = t * state + n;
                g.c[s] += gyt * h[s];
                lambda[n] += gyt * c[s];
                let h_prev = if t > 0 { h[s - state] } else { 0.0 };
                let an = a[k * state + n];
                let z = dt * an;
                let abar = z.exp();
                let (phi, dphi) = (zoh_phi(z), zoh_phi_prime(z));
                let g_abar = lambda[n] * h_prev;
                let g_bx = lambda[n];
                let bu = b[s] * ut;
                g.delta[i] += g_abar * an * abar + g_bx * bu * (phi + z * dphi);
                g.a[k * state + n] += g_abar * dt * abar + g_bx * bu * dt * dt * dphi;
                g.b[s] += g_bx * dt * phi * ut;
                g.u[i] += g_bx * dt * phi * b[s];
                lambda[n] *= abar;
            }
        }
    }
    g
}
