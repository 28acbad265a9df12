use super::{mean, periodogram, DspError, Result, Wave};

/// Half-width of the SNR signal windows in Hz.
const SNR_HALF_WIDTH: f64 = 0.1;
/// Range whose remaining power counts as noise.
const SNR_RANGE: (f64, f64) = (0.6, 3.3);

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub pearson: f64,
    pub snr_db: f64,
}

/// Pearson correlation. Two constant lists correlate at 1 when equal and 0
/// otherwise; one constant list against a varying one gives 0.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return if x == y { 1.0 } else { 0.0 };
    }
    sxy / (sxx * syy).sqrt()
}

/// Power within ±0.1 Hz of the reference fundamental and its first harmonic
/// over the remaining power in 0.6–3.3 Hz, in dB, from a full-length
/// Hamming periodogram.
pub fn snr_db(w: &Wave, ref_hr_bpm: f64) -> f64 {
    let spec = periodogram(w, 0.01);
    let f0 = ref_hr_bpm / 60.0;
    let (mut signal, mut noise) = (0.0, 0.0);
    for (f, p) in spec.freqs.iter().zip(&spec.power) {
        if (f - f0).abs() <= SNR_HALF_WIDTH || (f - 2.0 * f0).abs() <= SNR_HALF_WIDTH {
            signal += p;
        } else if (SNR_RANGE.0..=SNR_RANGE.1).contains(f) {
            noise += p;
        }
    }
    let tiny = 1e-300;
    10.0 * ((signal + tiny) / (noise + tiny)).log10()
}

/// Clip-level heart-rate errors and the mean SNR of predicted waves against
/// the reference heart rates.
pub fn metrics(pred_hr: &[f64], gt_hr: &[f64], pred_waves: &[Wave]) -> Result<Metrics> {
    if pred_hr.is_empty() {
        return Err(DspError::Empty);
    }
    if pred_hr.len() != gt_hr.len() {
        return Err(DspError::LengthMismatch(pred_hr.len(), gt_hr.len()));
    }
    if pred_waves.len() != gt_hr.len() {
        return Err(DspError::LengthMismatch(pred_waves.len(), gt_hr.len()));
    }
    let n = pred_hr.len() as f64;
    let err: Vec<f64> = pred_hr.iter().zip(gt_hr).map(|(p, g)| p - g).collect();
    Ok(Metrics {
        mae: err.iter().map(|e| e.abs()).sum::<f64>() / n,
        rmse: (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mape: 100.0 * err.iter().zip(gt_hr).map(|(e, g)| (e / g).abs()).sum::<f64>() / n,
        pearson: pearson(pred_hr, gt_hr),
        snr_db: pred_waves.iter().zip(gt_hr).map(|(w, g)| snr_db(w, *g)).sum::<f64>() / n,
    })
}
