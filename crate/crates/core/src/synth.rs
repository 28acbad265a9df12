//! Synthetic pulse waves and skin-patch videos with known heart rate.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dsp::Wave;
use crate::tensor::{read_container, write_container, ContainerEntry, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("heart rate {0} bpm outside 45..=150")]
    HeartRate(f64),
    #[error("modulation depth {0} outside (0, 0.05]")]
    Depth(f64),
    #[error("pulse has {pulse} samples, clip needs {frames}")]
    Length { pulse: usize, frames: usize },
    #[error("resampled clip would have {0} frames, need at least 5")]
    TooShort(usize),
    #[error("clip file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PulseSpec {
    pub hr_bpm: f64,
    pub fs: f64,
    pub duration_s: f64,
    pub harmonic_ratios: Vec<f64>,
    /// Std of each beat interval as a fraction of the mean period.
    pub hr_jitter_pct: f64,
    pub noise_std: f64,
}

impl Default for PulseSpec {
    fn default() -> Self {
        Self {
            hr_bpm: 72.0,
            fs: 30.0,
            duration_s: 10.0,
            harmonic_ratios: vec![1.0, 0.35, 0.1],
            hr_jitter_pct: 0.0,
            noise_std: 0.0,
        }
    }
}

impl PulseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(45.0..=150.0).contains(&self.hr_bpm) {
            return Err(SynthError::HeartRate(self.hr_bpm));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Harmonic sum over a piecewise-linear beat phase. Each beat interval is
/// drawn around the nominal period; the phase of the first beat is random.
pub fn gen_pulse(spec: &PulseSpec, seed: u64) -> Result<Wave> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = 60.0 / spec.hr_bpm;
    let len = spec.len();
    let end = len as f64 / spec.fs;

    let jitter = Normal::new(0.0, spec.hr_jitter_pct.max(0.0)).expect("finite std");
    let mut beats = vec![-rng.random_range(0.0..period)];
    while *beats.last().unwrap() <= end {
        let scale = (1.0 + jitter.sample(&mut rng)).max(0.5);
        beats.push(beats.last().unwrap() + period * scale);
    }

    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let mut j = 0;
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / spec.fs;
            while beats[j + 1] <= t {
                j += 1;
            }
            let phase = 2.0 * PI * (j as f64 + (t - beats[j]) / (beats[j + 1] - beats[j]));
            let clean: f64 = spec.harmonic_ratios.iter().enumerate().map(|(k, r)| r * ((k + 1) as f64 * phase).sin()).sum();
            clean + noise.sample(&mut rng)
        })
        .collect();
    Ok(Wave { samples, fs: spec.fs })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Frame height and width.
    pub hw: (usize, usize),
    /// Skin ellipse center and radii as fractions of the frame size.
    pub skin_center: (f64, f64),
    pub skin_radii: (f64, f64),
    pub skin_color: [f64; 3],
    pub background_color: [f64; 3],
    /// Fractional intensity change per unit pulse amplitude.
    pub modulation_depth: f64,
    /// Additive brightness ramp reached at the last frame.
    pub illumination_drift: f64,
    pub sensor_noise_std: f64,
    /// Peak horizontal sway of the skin region, in pixels.
    pub motion_amplitude_px: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            hw: (32, 32),
            skin_center: (0.5, 0.5),
            skin_radii: (0.35, 0.3),
            skin_color: [0.75, 0.55, 0.45],
            background_color: [0.25, 0.3, 0.35],
            modulation_depth: 0.01,
            illumination_drift: 0.0,
            sensor_noise_std: 0.0,
            motion_amplitude_px: 0.0,
        }
    }
}

/// A `3 × T × H × W` pixel cube with its frame rate and reference pulse.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub fs: f64,
    pub gt_wave: Option<Vec<f64>>,
    pub hr_bpm: Option<f64>,
}

impl VideoClip {
    pub fn new(frames: Tensor, fs: f64) -> std::result::Result<Self, TensorError> {
        frames.dims::<4>("video clip")?;
        if frames.shape()[0] != 3 {
            return Err(crate::tensor::shape_err("video clip", format!("expected 3 colour planes, got {:?}", frames.shape())));
        }
        Ok(Self { frames, fs, gt_wave: None, hr_bpm: None })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    pub fn gt(&self) -> Option<Wave> {
        self.gt_wave.as_ref().map(|s| Wave { samples: s.clone(), fs: self.fs })
    }

    /// Frames `start..end` (and the matching part of the reference wave).
    pub fn window(&self, start: usize, end: usize) -> Self {
        let (t, (h, w)) = (self.len(), self.hw());
        let end = end.min(t);
        let plane = h * w;
        let mut data = Vec::with_capacity(3 * (end - start) * plane);
        for c in 0..3 {
            let off = c * t * plane;
            data.extend_from_slice(&self.frames.data()[off + start * plane..off + end * plane]);
        }
        Self {
            frames: Tensor::new([3, end - start, h, w], data).expect("sizes agree"),
            fs: self.fs,
            gt_wave: self.gt_wave.as_ref().map(|g| g[start..end].to_vec()),
            hr_bpm: self.hr_bpm,
        }
    }

    /// Mean of channel `c` over the pixels where `mask` holds, per frame.
    pub fn channel_mean(&self, c: usize, mask: impl Fn(usize, usize) -> bool) -> Vec<f64> {
        let (t, (h, w)) = (self.len(), self.hw());
        let data = self.frames.data();
        (0..t)
            .map(|ti| {
                let off = (c * t + ti) * h * w;
                let (mut s, mut n) = (0.0, 0usize);
                for y in 0..h {
                    for x in 0..w {
                        if mask(y, x) {
                            s += data[off + y * w + x];
                            n += 1;
                        }
                    }
                }
                s / n.max(1) as f64
            })
            .collect()
    }
}

fn in_ellipse(scene: &SceneSpec, y: usize, x: usize, dx: f64) -> bool {
    let (h, w) = (scene.hw.0 as f64, scene.hw.1 as f64);
    let cy = scene.skin_center.0 * h;
    let cx = scene.skin_center.1 * w + dx;
    let ry = scene.skin_radii.0 * h;
    let rx = scene.skin_radii.1 * w;
    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
    ((py - cy) / ry).powi(2) + ((px - cx) / rx).powi(2) <= 1.0
}

/// Whether pixel `(y, x)` is skin in the motionless scene.
pub fn skin_mask(scene: &SceneSpec) -> impl Fn(usize, usize) -> bool + '_ {
    move |y, x| in_ellipse(scene, y, x, 0.0)
}

/// Renders `pulse` into a skin ellipse over a flat background.
pub fn gen_clip(pulse: &Wave, scene: &SceneSpec, seed: u64) -> Result<VideoClip> {
    if !(scene.modulation_depth >= 0.0 && scene.modulation_depth <= 0.05) {
        return Err(SynthError::Depth(scene.modulation_depth));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, scene.sensor_noise_std.max(0.0)).expect("finite std");
    let (h, w) = scene.hw;
    let t = pulse.len();
    let mut data = vec![0.0; 3 * t * h * w];
    let sway_hz = 0.2;
    for ti in 0..t {
        let time = ti as f64 / pulse.fs;
        let drift = scene.illumination_drift * ti as f64 / (t.max(2) - 1) as f64;
        let dx = scene.motion_amplitude_px * (2.0 * PI * sway_hz * time).sin();
        let gain = 1.0 + scene.modulation_depth * pulse.samples[ti];
        for y in 0..h {
            for x in 0..w {
                let skin = in_ellipse(scene, y, x, dx);
                for c in 0..3 {
                    let base = if skin { scene.skin_color[c] * gain } else { scene.background_color[c] };
                    data[((c * t + ti) * h + y) * w + x] = base + drift + noise.sample(&mut rng);
                }
            }
        }
    }
    Ok(VideoClip { frames: Tensor::new([3, t, h, w], data)?, fs: pulse.fs, gt_wave: Some(pulse.samples.clone()), hr_bpm: None })
}

/// A concrete augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Augment {
    pub hflip: bool,
    /// Length factor; `r < 1` compresses time and raises the heart rate by `1/r`.
    pub resample: Option<f64>,
}

/// Random augmentation policy: flip with probability one half, and resample
/// by a factor drawn uniformly from the range.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    pub hflip: bool,
    pub resample_range: Option<(f64, f64)>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { hflip: true, resample_range: Some((0.8, 1.25)) }
    }
}

impl AugmentPolicy {
    pub fn draw(&self, seed: u64) -> Augment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hflip = self.hflip && rng.random_bool(0.5);
        let resample = self.resample_range.map(|(lo, hi)| rng.random_range(lo..=hi));
        Augment { hflip, resample }
    }
}

pub fn augment(clip: &VideoClip, policy: &AugmentPolicy, seed: u64) -> Result<VideoClip> {
    apply_augment(clip, &policy.draw(seed))
}

pub fn apply_augment(clip: &VideoClip, aug: &Augment) -> Result<VideoClip> {
    let mut out = clip.clone();
    if aug.hflip {
        out = hflip(&out);
    }
    if let Some(r) = aug.resample {
        out = resample(&out, r)?;
    }
    Ok(out)
}

fn hflip(clip: &VideoClip) -> VideoClip {
    let (_, w) = clip.hw();
    let mut data = clip.frames.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    VideoClip { frames: Tensor::new(clip.frames.shape().to_vec(), data).expect("same shape"), ..clip.clone() }
}

/// Neighbour indices and blend weight for linear interpolation at `pos`.
fn lerp_at(len: usize, pos: f64) -> (usize, usize, f64) {
    let i0 = (pos.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - i0 as f64)
}

fn resample(clip: &VideoClip, r: f64) -> Result<VideoClip> {
    let t = clip.len();
    let new_t = (t as f64 * r).round() as usize;
    if new_t < 5 {
        return Err(SynthError::TooShort(new_t));
    }
    let (h, w) = clip.hw();
    let plane = h * w;
    let src = clip.frames.data();
    let mut data = vec![0.0; 3 * new_t * plane];
    let taps: Vec<(usize, usize, f64)> = (0..new_t).map(|j| lerp_at(t, j as f64 / r)).collect();
    for c in 0..3 {
        for (j, &(i0, i1, f)) in taps.iter().enumerate() {
            let a = &src[(c * t + i0) * plane..(c * t + i0 + 1) * plane];
            let b = &src[(c * t + i1) * plane..(c * t + i1 + 1) * plane];
            let dst = &mut data[(c * new_t + j) * plane..(c * new_t + j + 1) * plane];
            for p in 0..plane {
                dst[p] = a[p] * (1.0 - f) + b[p] * f;
            }
        }
    }
    let gt = clip.gt_wave.as_ref().map(|g| taps.iter().map(|&(i0, i1, f)| g[i0] * (1.0 - f) + g[i1] * f).collect());
    Ok(VideoClip { frames: Tensor::new([3, new_t, h, w], data)?, fs: clip.fs, gt_wave: gt, hr_bpm: clip.hr_bpm.map(|hr| hr / r) })
}

/// A labelled set of clips with heart rates drawn uniformly from a range.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub count: usize,
    pub frames: usize,
    pub fs: f64,
    pub hr_range: (f64, f64),
    pub hr_jitter_pct: f64,
    pub scene: SceneSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 8,
            frames: 160,
            fs: 30.0,
            hr_range: (50.0, 140.0),
            hr_jitter_pct: 0.02,
            scene: SceneSpec { sensor_noise_std: 0.005, ..SceneSpec::default() },
            seed: 0,
        }
    }
}

/// Clips named `clip_0000`, `clip_0001`, … with `hr_bpm` set to the nominal rate.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<(String, VideoClip)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|i| {
            let hr = rng.random_range(spec.hr_range.0..=spec.hr_range.1);
            let (pulse_seed, scene_seed) = (rng.random(), rng.random());
            let pulse = PulseSpec {
                hr_bpm: hr,
                fs: spec.fs,
                duration_s: spec.frames as f64 / spec.fs,
                hr_jitter_pct: spec.hr_jitter_pct,
                ..PulseSpec::default()
            };
            let mut clip = gen_clip(&gen_pulse(&pulse, pulse_seed)?, &spec.scene, scene_seed)?;
            clip.hr_bpm = Some(hr);
            Ok((format!("clip_{i:04}"), clip))
        })
        .collect()
}

/// Writes `frames`, `fs` and, when present, `gt_wave` and `hr`.
pub fn save_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut entries =
        vec![ContainerEntry::f64("frames", clip.frames.clone()), ContainerEntry::f64("fs", Tensor::scalar(clip.fs))];
    if let Some(g) = &clip.gt_wave {
        entries.push(ContainerEntry::f64("gt_wave", Tensor::new([g.len()], g.clone())?));
    }
    if let Some(hr) = clip.hr_bpm {
        entries.push(ContainerEntry::f64("hr", Tensor::scalar(hr)));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, &entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<VideoClip> {
    let entries = read_container(BufReader::new(File::open(path)?))?;
    let find = |name: &str| entries.iter().find(|e| e.name == name).map(|e| e.tensor.clone());
    let frames = find("frames").ok_or_else(|| SynthError::Format("missing frames".into()))?;
    let fs = find("fs").ok_or_else(|| SynthError::Format("missing fs".into()))?.item();
    let mut clip = VideoClip::new(frames, fs)?;
    clip.gt_wave = find("gt_wave").map(Tensor::into_data);
    clip.hr_bpm = find("hr").map(|t| t.item());
    if let Some(g) = &clip.gt_wave {
        if g.len() != clip.len() {
            return Err(SynthError::Length { pulse: g.len(), frames: clip.len() });
        }
    }
    Ok(clip)
}
