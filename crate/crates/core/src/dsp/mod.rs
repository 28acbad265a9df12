//! Signal-domain pieces: training losses, zero-phase bandpass, Welch PSD,
//! heart-rate readout and evaluation metrics.

mod filter;
mod loss;
mod metrics;
mod spectrum;

pub use filter::{butterworth_bandpass, filtfilt, lfilter_zi, Biquad};
pub use loss::{loss_freq, loss_freq_with_grad, loss_time, loss_time_with_grad, LossConfig, LOG_POWER_EPS};
pub use metrics::{metrics, pearson, snr_db, Metrics};
pub use spectrum::{estimate_hr, hr_from_wave, periodogram, welch_psd, HrEstimate, SpectrumEstimate, WelchConfig};

use thiserror::Error;

/// Heart-rate search band in Hz (45 to 150 bpm).
pub const HR_BAND: (f64, f64) = (0.75, 2.5);

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sampling rates differ: {0} vs {1}")]
    RateMismatch(f64, f64),
    #[error("wave needs fs > 0 and at least 2 samples (fs {fs}, {len} samples)")]
    InvalidWave { fs: f64, len: usize },
    #[error("band {lo}..{hi} Hz holds {bins} bins, need at least {need}")]
    BandTooNarrow { lo: f64, hi: f64, bins: usize, need: usize },
    #[error("sampling rate {fs} Hz is too low for a {hi} Hz cutoff")]
    RateTooLow { fs: f64, hi: f64 },
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, DspError>;

/// A uniformly sampled real signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Wave {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl Wave {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs > 0.0) || samples.len() < 2 {
            return Err(DspError::InvalidWave { fs, len: samples.len() });
        }
        Ok(Self { samples, fs })
    }

    /// `amp · sin(2π f t + phase)`.
    pub fn sine(freq: f64, fs: f64, len: usize, amp: f64, phase: f64) -> Self {
        let samples = (0..len).map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / fs + phase).sin()).collect();
        Self { samples, fs }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Subtracts the least-squares line. The map is an orthogonal projection, so
/// it is also its own adjoint.
pub(crate) fn detrend_linear(x: &mut [f64]) {
    let n = x.len();
    if n < 2 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let tm = (n as f64 - 1.0) / 2.0;
    let xm = mean(x);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let dt = i as f64 - tm;
        sxy += dt * (v - xm);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    for (i, v) in x.iter_mut().enumerate() {
        *v -= xm + slope * (i as f64 - tm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wave_validation() {
        assert!(Wave::new(vec![1.0], 30.0).is_err());
        assert!(Wave::new(vec![1.0, 2.0], 0.0).is_err());
        assert_eq!(Wave::new(vec![0.0; 60], 30.0).unwrap().duration(), 2.0);
    }

    #[test]
    fn detrend_removes_lines_and_is_self_adjoint() {
        let mut line: Vec<f64> = (0..9).map(|i| 3.0 - 0.5 * i as f64).collect();
        detrend_linear(&mut line);
        assert!(line.iter().all(|v| v.abs() < 1e-12));

        let x: Vec<f64> = (0..7).map(|i| ((i * i) as f64).sin()).collect();
        let y: Vec<f64> = (0..7).map(|i| ((3 * i) as f64).cos()).collect();
        let (mut px, mut py) = (x.clone(), y.clone());
        detrend_linear(&mut px);
        detrend_linear(&mut py);
        let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&py).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
