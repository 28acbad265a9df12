//! The rPPG network: frame stem, multi-temporal constraint Mamba blocks,
//! frequency-domain feed-forward and a linear predictor head.
//!
//! Frames of every clip in a batch are stacked along the leading axis for the
//! 2-D stem, so batch-norm statistics span the whole batch. The sequence part
//! runs per clip on `[T, C]` features.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CONFIG_ENTRY};
pub use config::{HeadType, ModelConfig};
pub use params::{BnBuffer, Bound, ParamStore};

use thiserror::Error;

use crate::synth::VideoClip;
use crate::tensor::{BnMode, BnStats, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("clip has {0} frames, need at least 5")]
    TooShort(usize),
    #[error("training needs a length divisible by 4, got {0}")]
    NotDivisible(usize),
    #[error("clip shape {0:?} does not fit the model")]
    ClipShape(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; lengths must divide by 4.
    Train,
    /// Running statistics; any length of at least 5 frames.
    Eval,
}

/// Output of one forward pass.
pub struct ForwardOut<'t> {
    /// One standardized `[T]` wave per clip.
    pub waves: Vec<Var<'t>>,
    /// Batch statistics per batch-norm call, by buffer index.
    pub bn_stats: Vec<(usize, BnStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bn: Vec<BnBuffer>,
}

/// Frame-difference stack of a `[3, T, H, W]` clip as `[T, 12, H, W]`:
/// `D_{t-2} = X_{t-2} - X_{t-1}`, `D_{t-1} = X_{t-1} - X_t`,
/// `D_{t+1} = X_{t+1} - X_t`, `D_{t+2} = X_{t+2} - X_{t+1}`, each oriented
/// toward the centre frame, with out-of-range indices clamped.
pub fn frame_differences(frames: &Tensor) -> Result<Tensor> {
    let [c, t, h, w] = frames.dims::<4>("frame_differences")?;
    let plane = h * w;
    let x = frames.data();
    let at = |ch: usize, ti: isize| {
        let ti = ti.clamp(0, t as isize - 1) as usize;
        &x[(ch * t + ti) * plane..(ch * t + ti + 1) * plane]
    };
    let pairs: [(isize, isize); 4] = [(-2, -1), (-1, 0), (1, 0), (2, 1)];
    let mut out = vec![0.0; t * 4 * c * plane];
    for ti in 0..t {
        for (k, (p, q)) in pairs.iter().enumerate() {
            for ch in 0..c {
                let (a, b) = (at(ch, ti as isize + p), at(ch, ti as isize + q));
                let dst = &mut out[((ti * 4 + k) * c + ch) * plane..((ti * 4 + k) * c + ch + 1) * plane];
                for i in 0..plane {
                    dst[i] = a[i] - b[i];
                }
            }
        }
    }
    Ok(Tensor::new([t, 4 * c, h, w], out)?)
}

/// `[3, T, H, W]` to frame-major `[T, 3, H, W]`.
pub fn frames_major(frames: &Tensor) -> Result<Tensor> {
    let [c, t, h, w] = frames.dims::<4>("frames_major")?;
    let plane = h * w;
    let x = frames.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for ti in 0..t {
            out[(ti * c + ch) * plane..(ti * c + ch + 1) * plane]
                .copy_from_slice(&x[(ch * t + ti) * plane..(ch * t + ti + 1) * plane]);
        }
    }
    Ok(Tensor::new([t, c, h, w], out)?)
}

/// Rows of `ones[rows, 1] · bias[1, n]`, the only broadcast the tape needs.
fn linear<'t>(x: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let ones = x.tape().constant(Tensor::ones([x.shape()[0], 1]));
    Ok(x.matmul(w)?.add(&ones.matmul(b)?)?)
}

/// Repeats the last row until the length is a multiple of 4.
fn pad_to_multiple_of_four<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let t = x.shape()[0];
    let extra = (4 - t % 4) % 4;
    if extra == 0 {
        return Ok(x.clone());
    }
    let last = x.slice_time(t - 1, t)?;
    let mut parts = vec![x.clone()];
    parts.extend(std::iter::repeat_n(last, extra));
    Ok(Var::concat_time(&parts)?)
}

/// `N · σ(s) / (2 ‖σ(s)‖₁)` over each spatial plane of `[n, c, h, w]`
/// scores, `N = h · w`.
pub fn mask_from_scores<'t>(scores: &Var<'t>) -> Result<Var<'t>> {
    let n = (scores.shape()[2] * scores.shape()[3]) as f64;
    Ok(scores.sigmoid()?.l1_normalize_spatial(n / 2.0)?)
}

/// The 2-D part of the network for one batch, collecting batch-norm
/// statistics as it goes.
pub struct StemPass<'a, 't> {
    model: &'a Model,
    p: &'a Bound<'t>,
    mode: Mode,
    stats: Vec<(usize, BnStats)>,
}

impl<'a, 't> StemPass<'a, 't> {
    pub fn new(model: &'a Model, p: &'a Bound<'t>, mode: Mode) -> Self {
        Self { model, p, mode, stats: Vec::new() }
    }

    /// Batch statistics gathered so far (train mode only).
    pub fn into_stats(self) -> Vec<(usize, BnStats)> {
        self.stats
    }

    fn batchnorm(&mut self, x: &Var<'t>, name: &str) -> Result<Var<'t>> {
        let idx = self.model.bn.iter().position(|b| b.name == name).expect("known batch-norm layer");
        let (g, b) = (self.p.get(&format!("{name}.gamma")), self.p.get(&format!("{name}.beta")));
        let buf = &self.model.bn[idx];
        let mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval { mean: &buf.mean, var: &buf.var },
        };
        let (y, stats) = x.batchnorm2d(g, b, mode, self.model.config.bn_eps)?;
        if let Some(s) = stats {
            self.stats.push((idx, s));
        }
        Ok(y)
    }

    /// conv → BN → ReLU → 2×2 max pool.
    fn stem_stage(&mut self, x: &Var<'t>, name: &str, stride: usize) -> Result<Var<'t>> {
        let y = x.conv2d(self.p.get(&format!("{name}.conv.w")), self.p.get(&format!("{name}.conv.b")), stride, 3)?;
        Ok(self.batchnorm(&y, &format!("{name}.bn"))?.relu()?.maxpool2d(2)?)
    }

    /// Raw and difference branches fused as `Stem₂(raw + diff) + Stem₂(diff)`.
    /// Inputs are frame-major `[N, 3, H, W]` and `[N, 12, H, W]`.
    pub fn diff_fusion(&mut self, raw: &Var<'t>, diff: &Var<'t>) -> Result<Var<'t>> {
        let x_raw = self.stem_stage(raw, "stem1_raw", 2)?;
        let x_diff = self.stem_stage(diff, "stem1_diff", 2)?;
        let both = self.stem_stage(&x_raw.add(&x_diff)?, "stem2", 1)?;
        Ok(both.add(&self.stem_stage(&x_diff, "stem2", 1)?)?)
    }

    /// `N · σ(Stem₃(x)) / (2 ‖σ(Stem₃(x))‖₁)` per frame and channel, with `N`
    /// the number of spatial positions.
    pub fn attention_mask(&mut self, fusion: &Var<'t>) -> Result<Var<'t>> {
        let y = fusion.conv2d(self.p.get("stem3.conv.w"), self.p.get("stem3.conv.b"), 1, 2)?;
        mask_from_scores(&self.batchnorm(&y, "stem3.bn")?)
    }

    /// Frame-major clips to stem features `[N, C]`.
    pub fn frame_stem(&mut self, raw: &Var<'t>, diff: &Var<'t>) -> Result<Var<'t>> {
        let fusion = self.diff_fusion(raw, diff)?;
        let mask = self.attention_mask(&fusion)?;
        Ok(fusion.mul(&mask)?.global_avgpool_spatial()?)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, bn) = params::init(&config, seed);
        Ok(Self { config, params, bn })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<Bound<'t>> {
        self.params.bind(tape, trainable)
    }

    /// Folds batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(usize, BnStats)]) {
        let m = self.config.bn_momentum;
        for (i, s) in stats {
            let buf = &mut self.bn[*i];
            for c in 0..buf.mean.len() {
                buf.mean[c] = (1.0 - m) * buf.mean[c] + m * s.mean[c];
                buf.var[c] = (1.0 - m) * buf.var[c] + m * s.var_unbiased[c];
            }
        }
    }

    fn check_clip(&self, frames: &Tensor, mode: Mode) -> Result<usize> {
        let shape = frames.shape();
        if shape.len() != 4
            || shape[0] != 3
            || !shape[2].is_multiple_of(8)
            || !shape[3].is_multiple_of(8)
            || shape[2] == 0
            || shape[3] == 0
        {
            return Err(ModelError::ClipShape(shape.to_vec()));
        }
        let t = shape[1];
        if t < 5 {
            return Err(ModelError::TooShort(t));
        }
        if mode == Mode::Train && !t.is_multiple_of(4) {
            return Err(ModelError::NotDivisible(t));
        }
        Ok(t)
    }

    /// Depthwise causal conv → SiLU → selective scan over one slice.
    fn ssm_path<'t>(&self, p: &Bound<'t>, u: &Var<'t>, a: &Var<'t>, pre: &str) -> Result<Var<'t>> {
        let g = |n: &str| p.get(&format!("{pre}.{n}"));
        let v = u.depthwise_conv1d(g("conv_w"), g("conv_b"))?.silu()?;
        let delta = linear(&v, g("dt_w"), g("dt_b"))?.softplus()?;
        let b = v.matmul(g("b_w"))?;
        let c = v.matmul(g("c_w"))?;
        Ok(v.selective_scan(&delta, a, &b, &c, g("d"), self.config.scan_mode)?)
    }

    /// Multi-temporal constraint block on `[T, C]` with `T` divisible by 4:
    /// the projected input runs through one shared path on 1, 2 and 4 equal
    /// slices (state reset per slice); the summed paths are gated by
    /// `SiLU(Proj(x))` and projected back to `C`.
    pub fn mtc_mamba<'t>(&self, p: &Bound<'t>, block: usize, x: &Var<'t>) -> Result<Var<'t>> {
        let pre = format!("block{block}.mtc");
        let g = |n: &str| p.get(&format!("{pre}.{n}"));
        let t = x.shape()[0];
        if !t.is_multiple_of(4) {
            return Err(ModelError::NotDivisible(t));
        }
        let u = linear(x, g("in_w"), g("in_b"))?;
        let gate = linear(x, g("gate_w"), g("gate_b"))?.silu()?;
        let a = g("a_log").exp()?.scale(-1.0)?;
        let mut total: Option<Var<'t>> = None;
        for parts in [1, 2, 4] {
            let len = t / parts;
            let outs = (0..parts)
                .map(|s| {
                    let slice = if parts == 1 { u.clone() } else { u.slice_time(s * len, (s + 1) * len)? };
                    self.ssm_path(p, &slice, &a, &pre)
                })
                .collect::<Result<Vec<_>>>()?;
            let path = if parts == 1 { outs.into_iter().next().unwrap() } else { Var::concat_time(&outs)? };
            total = Some(match total {
                None => path,
                Some(acc) => acc.add(&path)?,
            });
        }
        let mixed = total.unwrap().mul(&gate)?;
        linear(&mixed, g("out_w"), g("out_b"))
    }

    /// Linear up → rfft over time → complex channel mixing → irfft → linear down.
    pub fn freq_ffn<'t>(&self, p: &Bound<'t>, block: usize, x: &Var<'t>) -> Result<Var<'t>> {
        let g = |n: &str| p.get(&format!("block{block}.ffn.{n}"));
        let t = x.shape()[0];
        let h = linear(x, g("up_w"), g("up_b"))?;
        let spec = h.rfft_time()?.complex_linear(g("w_re"), g("w_im"), g("b_re"), g("b_im"))?;
        linear(&spec.irfft_time(t)?, g("down_w"), g("down_b"))
    }

    fn layer_norm<'t>(&self, p: &Bound<'t>, name: &str, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(x.layernorm_channels(p.get(&format!("{name}.gamma")), p.get(&format!("{name}.beta")), self.config.ln_eps)?)
    }

    /// `x ← LN(x + mtc(x))`, then `x ← LN(x + ffn(x))`.
    pub fn block<'t>(&self, p: &Bound<'t>, i: usize, x: &Var<'t>) -> Result<Var<'t>> {
        let x = self.layer_norm(p, &format!("block{i}.norm1"), &x.add(&self.mtc_mamba(p, i, x)?)?)?;
        self.layer_norm(p, &format!("block{i}.norm2"), &x.add(&self.freq_ffn(p, i, &x)?)?)
    }

    /// `[T, C]` features to a standardized `[T]` wave.
    pub fn predictor_head<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let t = x.shape()[0];
        let y = linear(x, p.get("head.w"), p.get("head.b"))?.reshape([t])?;
        Ok(y.standardize(1e-8)?)
    }

    /// Stem features for every clip, `[Σ T, C]`, in clip order.
    pub fn stem_features<'t>(&self, p: &Bound<'t>, clips: &[&Tensor], mode: Mode) -> Result<(Var<'t>, Vec<(usize, BnStats)>)> {
        let tape = p.tape();
        let raws = clips.iter().map(|c| frames_major(c)).collect::<Result<Vec<_>>>()?;
        let diffs = clips.iter().map(|c| frame_differences(c)).collect::<Result<Vec<_>>>()?;
        let raw = tape.constant(Tensor::concat_rows(&raws.iter().collect::<Vec<_>>())?);
        let diff = tape.constant(Tensor::concat_rows(&diffs.iter().collect::<Vec<_>>())?);
        let mut pass = StemPass::new(self, p, mode);
        let feats = pass.frame_stem(&raw, &diff)?;
        Ok((feats, pass.into_stats()))
    }

    /// Full network on a batch of `[3, T, H, W]` clips sharing `H, W`.
    pub fn forward<'t>(&self, p: &Bound<'t>, clips: &[&Tensor], mode: Mode) -> Result<ForwardOut<'t>> {
        let lens = clips.iter().map(|c| self.check_clip(c, mode)).collect::<Result<Vec<_>>>()?;
        if clips.is_empty() || clips.iter().any(|c| c.shape()[2..] != clips[0].shape()[2..]) {
            return Err(ModelError::ClipShape(clips.first().map(|c| c.shape().to_vec()).unwrap_or_default()));
        }
        let (feats, bn_stats) = self.stem_features(p, clips, mode)?;
        let mut start = 0;
        let mut waves = Vec::with_capacity(clips.len());
        for &t in &lens {
            let mut x = pad_to_multiple_of_four(&feats.slice_time(start, start + t)?)?;
            for i in 0..self.config.depth {
                x = self.block(p, i, &x)?;
            }
            if x.shape()[0] != t {
                x = x.slice_time(0, t)?;
            }
            waves.push(self.predictor_head(p, &x)?);
            start += t;
        }
        Ok(ForwardOut { waves, bn_stats })
    }

    /// Single-clip forward pass returning the wave.
    pub fn model_forward<'t>(&self, p: &Bound<'t>, clip: &Tensor, mode: Mode) -> Result<Var<'t>> {
        Ok(self.forward(p, &[clip], mode)?.waves.remove(0))
    }

    /// Eval-mode prediction for one clip.
    pub fn predict(&self, clip: &VideoClip) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false)?;
        let out = self.forward(&p, &[&clip.frames], Mode::Eval)?;
        Ok(out.waves[0].value().data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(t: usize, hw: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Tensor {
        Tensor::from_fn([3, t, hw, hw], |i| {
            let x = i % hw;
            let y = (i / hw) % hw;
            let ti = (i / (hw * hw)) % t;
            let c = i / (hw * hw * t);
            f(c, ti, y, x)
        })
    }

    #[test]
    fn differences_of_static_and_brightening_clips() {
        let d = frame_differences(&clip(6, 8, |c, _, y, x| (c + y * x) as f64)).unwrap();
        assert_eq!(d.shape(), [6, 12, 8, 8]);
        assert!(d.data().iter().all(|&v| v == 0.0));

        let d = frame_differences(&clip(9, 8, |_, t, _, _| t as f64)).unwrap();
        let plane = 64;
        for t in 2..7 {
            for (k, want) in [-1.0, -1.0, 1.0, 1.0].iter().enumerate() {
                let off = (t * 12 + k * 3) * plane;
                assert!(d.data()[off..off + 3 * plane].iter().all(|v| v == want), "t {t} k {k}");
            }
        }
    }

    #[test]
    fn untrained_forward_is_finite() {
        let model = Model::new(ModelConfig::toy(), 0).unwrap();
        let c = clip(160, 32, |c, t, y, x| 0.5 + 0.01 * ((t as f64 * 0.3).sin() + (c + y + x) as f64 * 0.01));
        let tape = Tape::new();
        let p = model.bind(&tape, false).unwrap();
        let out = model.forward(&p, &[&c], Mode::Eval).unwrap();
        assert_eq!(out.waves[0].shape(), [160]);
        assert!(out.waves[0].value().is_finite());
    }

    #[test]
    fn lengths_and_modes() {
        let model = Model::new(ModelConfig::toy(), 1).unwrap();
        let tape = Tape::new();
        let p = model.bind(&tape, false).unwrap();
        let c = clip(30, 32, |c, t, _, _| (c + t) as f64 * 0.01);
        let out = model.forward(&p, &[&c], Mode::Eval).unwrap();
        assert_eq!(out.waves[0].shape(), [30]);
        assert!(matches!(model.forward(&p, &[&c, &c], Mode::Train), Err(ModelError::NotDivisible(30))));
        let short = clip(4, 32, |_, _, _, _| 0.0);
        assert!(matches!(model.forward(&p, &[&short], Mode::Eval), Err(ModelError::TooShort(4))));
        let odd = clip(8, 20, |_, _, _, _| 0.0);
        assert!(matches!(model.forward(&p, &[&odd], Mode::Eval), Err(ModelError::ClipShape(_))));
    }

    #[test]
    fn train_mode_reports_every_batchnorm() {
        let mut model = Model::new(ModelConfig::toy(), 2).unwrap();
        let c = clip(8, 32, |c, t, y, x| ((c * 7 + t * 3 + y * 5 + x) % 11) as f64 * 0.1);
        let tape = Tape::new();
        let p = model.bind(&tape, true).unwrap();
        let out = model.forward(&p, &[&c, &c], Mode::Train).unwrap();
        // stem1 raw, stem1 diff, stem2 twice, stem3
        assert_eq!(out.bn_stats.len(), 5);
        let stats = out.bn_stats.clone();
        drop(out);
        drop(p);
        let before = model.bn.clone();
        model.update_running_stats(&stats);
        assert_ne!(model.bn, before);
    }
}
