use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{butterworth_bandpass, detrend_linear, DspError, Result, Wave, HR_BAND};

/// One-sided power spectral density.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumEstimate {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub bin_width: f64,
}

impl SpectrumEstimate {
    /// Indices of bins with `lo ≤ f ≤ hi`.
    pub fn band(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let start = self.freqs.partition_point(|&f| f < lo);
        let end = self.freqs.partition_point(|&f| f <= hi);
        start..end.max(start)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchConfig {
    /// Upper bound on the segment length; shorter waves use one full segment.
    pub max_segment: usize,
    /// Largest acceptable bin spacing in Hz; sets the zero-padded FFT size.
    pub max_bin_width: f64,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self { max_segment: 160, max_bin_width: 0.01 }
    }
}

/// Resolved Welch geometry for one signal length.
#[derive(Clone, Debug)]
pub(crate) struct WelchPlan {
    pub seg: usize,
    pub hop: usize,
    pub nseg: usize,
    pub nfft: usize,
    pub window: Vec<f64>,
    /// `1 / (fs Σ w²)`
    pub scale: f64,
}

impl WelchPlan {
    pub fn new(len: usize, fs: f64, cfg: &WelchConfig) -> Self {
        let seg = len.min(cfg.max_segment).max(1);
        let hop = (seg - seg / 2).max(1);
        let nseg = (len - seg) / hop + 1;
        let nfft = seg.max((fs / cfg.max_bin_width).ceil() as usize).next_power_of_two();
        let window = hamming(seg);
        let scale = 1.0 / (fs * window.iter().map(|w| w * w).sum::<f64>());
        Self { seg, hop, nseg, nfft, window, scale }
    }

    /// One-sided doubling: every bin but DC and Nyquist.
    pub fn fold(&self, k: usize) -> f64 {
        if k == 0 || (self.nfft.is_multiple_of(2) && k == self.nfft / 2) {
            1.0
        } else {
            2.0
        }
    }

    pub fn segment(&self, x: &[f64], s: usize) -> Vec<f64> {
        let mut d = x[s * self.hop..s * self.hop + self.seg].to_vec();
        detrend_linear(&mut d);
        d
    }
}

/// Periodic Hamming window.
pub(crate) fn hamming(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn averaged_periodogram(x: &[f64], fs: f64, plan: &WelchPlan) -> SpectrumEstimate {
    let bins = plan.nfft / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(plan.nfft);
    let mut power = vec![0.0; bins];
    let mut buf = vec![Complex64::default(); plan.nfft];
    for s in 0..plan.nseg {
        let d = plan.segment(x, s);
        buf.iter_mut().for_each(|c| *c = Complex64::default());
        for (i, (v, w)) in d.iter().zip(&plan.window).enumerate() {
            buf[i].re = v * w;
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p += buf[k].norm_sqr();
        }
    }
    let norm = plan.scale / plan.nseg as f64;
    for (k, p) in power.iter_mut().enumerate() {
        *p *= norm * plan.fold(k);
    }
    let bin_width = fs / plan.nfft as f64;
    SpectrumEstimate { freqs: (0..bins).map(|k| k as f64 * bin_width).collect(), power, bin_width }
}

/// Welch density estimate: linear detrend per segment, periodic Hamming
/// window, 50% overlap, zero padding to the configured bin width.
pub fn welch_psd(w: &Wave, cfg: &WelchConfig) -> SpectrumEstimate {
    averaged_periodogram(&w.samples, w.fs, &WelchPlan::new(w.len(), w.fs, cfg))
}

/// Single full-length Hamming periodogram with the same padding rule.
pub fn periodogram(w: &Wave, max_bin_width: f64) -> SpectrumEstimate {
    let cfg = WelchConfig { max_segment: w.len(), max_bin_width };
    welch_psd(w, &cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HrEstimate {
    pub bpm: f64,
    /// The strongest non-DC peak lies outside the heart-rate band.
    pub low_confidence: bool,
}

/// `60 ×` the in-band argmax frequency.
pub fn estimate_hr(spec: &SpectrumEstimate) -> Result<HrEstimate> {
    let band = spec.band(HR_BAND.0, HR_BAND.1);
    if band.is_empty() {
        return Err(DspError::BandTooNarrow { lo: HR_BAND.0, hi: HR_BAND.1, bins: 0, need: 1 });
    }
    let peak = argmax(&spec.power[band.clone()]) + band.start;
    let global = argmax(&spec.power[1..]) + 1;
    Ok(HrEstimate {
        bpm: 60.0 * spec.freqs[peak],
        low_confidence: !band.contains(&global) && spec.power[global] > spec.power[peak],
    })
}

/// Bandpass, Welch, argmax: the post-processing chain for predicted waves.
pub fn hr_from_wave(w: &Wave) -> Result<HrEstimate> {
    let filtered = butterworth_bandpass(w, HR_BAND.0, HR_BAND.1)?;
    estimate_hr(&welch_psd(&filtered, &WelchConfig::default()))
}

pub(crate) fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}
