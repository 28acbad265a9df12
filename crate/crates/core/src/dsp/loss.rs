use std::f64::consts::PI;

use super::spectrum::{argmax, WelchPlan};
use super::{detrend_linear, mean, welch_psd, DspError, Result, Wave, WelchConfig, HR_BAND};

/// Added to band power before taking logs.
pub const LOG_POWER_EPS: f64 = 1e-10;
const VAR_EPS: f64 = 1e-8;

/// Weights of `L = a·L_time + b·L_freq` and the band the frequency term sees.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub a: f64,
    pub b: f64,
    pub hr_band: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { a: 0.2, b: 1.0, hr_band: HR_BAND }
    }
}

impl LossConfig {
    /// `a·L_time + b·L_freq` and its gradient with respect to `pred`.
    pub fn overall_with_grad(&self, pred: &Wave, gt: &Wave) -> Result<(f64, Vec<f64>)> {
        let (lt, gt_time) = loss_time_with_grad(pred, gt)?;
        let (lf, gt_freq) = loss_freq_with_grad(pred, gt, self.hr_band)?;
        let grad = gt_time.iter().zip(&gt_freq).map(|(x, y)| self.a * x + self.b * y).collect();
        Ok((self.a * lt + self.b * lf, grad))
    }
}

fn check_pair(pred: &Wave, gt: &Wave) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(DspError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.fs != gt.fs {
        return Err(DspError::RateMismatch(pred.fs, gt.fs));
    }
    Ok(())
}

/// `1 − ρ(pred, gt)`.
pub fn loss_time(pred: &Wave, gt: &Wave) -> Result<f64> {
    Ok(loss_time_with_grad(pred, gt)?.0)
}

/// `1 − ρ` and its gradient with respect to `pred`.
pub fn loss_time_with_grad(pred: &Wave, gt: &Wave) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, gt)?;
    let (mp, mg) = (mean(&pred.samples), mean(&gt.samples));
    let a: Vec<f64> = pred.samples.iter().map(|v| v - mp).collect();
    let b: Vec<f64> = gt.samples.iter().map(|v| v - mg).collect();
    let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let saa = a.iter().map(|x| x * x).sum::<f64>().max(VAR_EPS);
    let sbb = b.iter().map(|x| x * x).sum::<f64>().max(VAR_EPS);
    let denom = (saa * sbb).sqrt();
    let rho = sab / denom;
    // a and b are already centered, so the centering projection drops out
    let grad = a.iter().zip(&b).map(|(x, y)| -(y / denom - rho * x / saa)).collect();
    Ok((1.0 - rho, grad))
}

pub fn loss_freq(pred: &Wave, gt: &Wave, band: (f64, f64)) -> Result<f64> {
    Ok(loss_freq_with_grad(pred, gt, band)?.0)
}

/// Cross-entropy of the in-band log-power of `pred` against the in-band
/// argmax of `gt`, with its gradient with respect to `pred`.
pub fn loss_freq_with_grad(pred: &Wave, gt: &Wave, band: (f64, f64)) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, gt)?;
    let cfg = WelchConfig::default();
    let gspec = welch_psd(gt, &cfg);
    let pspec = welch_psd(pred, &cfg);
    let range = pspec.band(band.0, band.1);
    if range.len() < 2 {
        return Err(DspError::BandTooNarrow { lo: band.0, hi: band.1, bins: range.len(), need: 2 });
    }
    let target = argmax(&gspec.power[range.clone()]);
    let p: Vec<f64> = pspec.power[range.clone()].iter().map(|v| v + LOG_POWER_EPS).collect();
    let total: f64 = p.iter().sum();
    let loss = total.ln() - p[target].ln();

    let mut dp: Vec<f64> = vec![1.0 / total; p.len()];
    dp[target] -= 1.0 / p[target];
    let grad = welch_vjp(&pred.samples, pred.fs, &cfg, range.start, &dp);
    Ok((loss, grad))
}

/// `Σ_k g_k ∂P_k/∂x` for Welch bins `first..first + g.len()`, by direct DFT
/// over only those bins.
fn welch_vjp(x: &[f64], fs: f64, cfg: &WelchConfig, first: usize, g: &[f64]) -> Vec<f64> {
    let plan = WelchPlan::new(x.len(), fs, cfg);
    let seg = plan.seg;
    let norm = plan.scale / plan.nseg as f64;
    // twiddles e^{-iθ} for every (bin, sample) pair, shared by all segments
    let mut cos = vec![0.0; g.len() * seg];
    let mut sin = vec![0.0; g.len() * seg];
    for (j, _) in g.iter().enumerate() {
        let k = first + j;
        for n in 0..seg {
            let theta = 2.0 * PI * ((k * n) % plan.nfft) as f64 / plan.nfft as f64;
            cos[j * seg + n] = theta.cos();
            sin[j * seg + n] = theta.sin();
        }
    }
    let mut grad = vec![0.0; x.len()];
    for s in 0..plan.nseg {
        let d = plan.segment(x, s);
        let wd: Vec<f64> = d.iter().zip(&plan.window).map(|(a, b)| a * b).collect();
        let mut gd = vec![0.0; seg];
        for (j, &gk) in g.iter().enumerate() {
            let c = &cos[j * seg..(j + 1) * seg];
            let sn = &sin[j * seg..(j + 1) * seg];
            let re: f64 = wd.iter().zip(c).map(|(a, b)| a * b).sum();
            let im: f64 = -wd.iter().zip(sn).map(|(a, b)| a * b).sum::<f64>();
            let coef = 2.0 * gk * norm * plan.fold(first + j);
            for n in 0..seg {
                gd[n] += coef * (re * c[n] - im * sn[n]);
            }
        }
        for (v, w) in gd.iter_mut().zip(&plan.window) {
            *v *= w;
        }
        detrend_linear(&mut gd);
        for (n, v) in gd.iter().enumerate() {
            grad[s * plan.hop + n] += v;
        }
    }
    grad
}
