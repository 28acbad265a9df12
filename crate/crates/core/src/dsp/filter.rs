use std::f64::consts::PI;

use super::{DspError, Result, Wave};

/// Second-order section `b0 + b1 z⁻¹ + b2 z⁻² / 1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Butterworth bandpass from a first-order lowpass prototype, mapped by
    /// the bilinear transform with both edges prewarped.
    pub fn bandpass(lo: f64, hi: f64, fs: f64) -> Result<Self> {
        if !(fs > 2.0 * hi) || !(lo > 0.0) || !(hi > lo) {
            return Err(DspError::RateTooLow { fs, hi });
        }
        let k = 2.0 * fs;
        let w1 = k * (PI * lo / fs).tan();
        let w2 = k * (PI * hi / fs).tan();
        let (w0sq, bw) = (w1 * w2, w2 - w1);
        let a0 = k * k + bw * k + w0sq;
        let g = bw * k / a0;
        Ok(Self { b: [g, 0.0, -g], a: [1.0, (2.0 * w0sq - 2.0 * k * k) / a0, (k * k - bw * k + w0sq) / a0] })
    }

    /// `|H(e^{iω})|` at `freq` Hz.
    pub fn magnitude(&self, freq: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * freq / fs;
        let eval = |c: &[f64; 3]| {
            let re = c[0] + c[1] * w.cos() + c[2] * (2.0 * w).cos();
            let im = -c[1] * w.sin() - c[2] * (2.0 * w).sin();
            re.hypot(im)
        };
        eval(&self.b) / eval(&self.a)
    }

    /// Direct form II transposed, starting from state `zi`.
    fn run(&self, x: &[f64], mut zi: [f64; 2]) -> Vec<f64> {
        let ([b0, b1, b2], [_, a1, a2]) = (self.b, self.a);
        x.iter()
            .map(|&v| {
                let y = b0 * v + zi[0];
                zi[0] = b1 * v - a1 * y + zi[1];
                zi[1] = b2 * v - a2 * y;
                y
            })
            .collect()
    }
}

/// Steady-state filter state for a unit step input.
pub fn lfilter_zi(f: &Biquad) -> [f64; 2] {
    let ([b0, b1, b2], [_, a1, a2]) = (f.b, f.a);
    let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
    let z0 = (r0 + r1) / (1.0 + a1 + a2);
    [z0, r1 - a2 * z0]
}

/// Zero-phase forward-backward filtering with odd reflection padding of
/// `min(9, n - 1)` samples at each end.
pub fn filtfilt(f: &Biquad, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = 9.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = lfilter_zi(f);
    let scaled = |s: f64| [zi[0] * s, zi[1] * s];
    let fwd = f.run(&ext, scaled(ext[0]));
    let rev: Vec<f64> = fwd.into_iter().rev().collect();
    let mut back = f.run(&rev, scaled(rev[0]));
    back.reverse();
    back[pad..pad + n].to_vec()
}

/// Second-order zero-phase bandpass between `lo` and `hi` Hz.
pub fn butterworth_bandpass(w: &Wave, lo: f64, hi: f64) -> Result<Wave> {
    let f = Biquad::bandpass(lo, hi, w.fs)?;
    Ok(Wave { samples: filtfilt(&f, &w.samples), fs: w.fs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::HR_BAND;

    // scipy.signal.butter(1, [0.75, 2.5], btype="bandpass", fs=30)
    const B: [f64; 3] = [0.1563595206991934, 0.0, -0.1563595206991934];
    const A: [f64; 3] = [1.0, -1.6175876941699503, 0.6872809586016133];

    #[test]
    fn coefficients_match_reference_design() {
        let f = Biquad::bandpass(0.75, 2.5, 30.0).unwrap();
        for i in 0..3 {
            assert!((f.b[i] - B[i]).abs() < 1e-14, "b{i}");
            assert!((f.a[i] - A[i]).abs() < 1e-14, "a{i}");
        }
        // prewarped edges sit at -3 dB
        for edge in [0.75, 2.5] {
            assert!((f.magnitude(edge, 30.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_low_rate() {
        assert!(Biquad::bandpass(0.75, 2.5, 5.0).is_err());
    }

    #[test]
    fn dc_is_removed() {
        let w = Wave { samples: vec![1.0; 600], fs: 30.0 };
        let y = butterworth_bandpass(&w, HR_BAND.0, HR_BAND.1).unwrap();
        assert!(y.samples[60..540].iter().all(|v| v.abs() <= 1e-3));
    }

    fn mid_amplitude(freq: f64) -> f64 {
        let w = Wave::sine(freq, 30.0, 900, 1.0, 0.0);
        let y = butterworth_bandpass(&w, HR_BAND.0, HR_BAND.1).unwrap();
        y.samples[300..600].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn passband_and_stopband_gain() {
        let pass = mid_amplitude(1.5);
        assert!((0.9..=1.0).contains(&pass), "{pass}");
        let f = Biquad::bandpass(0.75, 2.5, 30.0).unwrap();
        assert!((pass - f.magnitude(1.5, 30.0).powi(2)).abs() < 2e-3);
        assert!(mid_amplitude(5.0) <= 0.2);
    }

    // scipy.signal.filtfilt(b, a, x) with the default pad length
    #[test]
    fn filtfilt_matches_reference() {
        let f = Biquad { b: B, a: A };
        let x: Vec<f64> = (0..40).map(|i| (0.37 * i as f64).sin() + 0.02 * i as f64).collect();
        let y = filtfilt(&f, &x);
        for (i, want) in [(0, 0.0924378955509477), (7, 0.4557555956161944), (19, 0.6155923766291301), (39, -0.10597849503327283)]
        {
            assert!((y[i] - want).abs() < 1e-12, "y[{i}] = {}", y[i]);
        }
        // padlen = 4 for five samples
        let y = filtfilt(&f, &[1.0, 2.0, 0.5, -1.0, 3.0]);
        let want = [-0.8698123307952851, -1.0103864650893575, -1.111441616876559, -0.9818911482861259, -0.5361543290230643];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn short_inputs_do_not_panic() {
        let f = Biquad::bandpass(0.75, 2.5, 30.0).unwrap();
        assert_eq!(filtfilt(&f, &[2.0]).len(), 1);
        assert_eq!(filtfilt(&f, &[1.0, 2.0, 0.5]).len(), 3);
    }
}
