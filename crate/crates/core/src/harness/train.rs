use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, HarnessError, Result, RunConfig};
use crate::dsp::{Metrics, Wave};
use crate::model::{Mode, Model, ModelError};
use crate::synth::{augment, VideoClip};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub segments: usize,
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub eval: Option<Metrics>,
    pub checkpoint: Option<PathBuf>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub manifest: RunManifest,
}

/// Non-overlapping `len`-frame windows of every clip. A clip shorter than
/// `len` contributes one window trimmed to a multiple of 4, if that leaves at
/// least 8 frames.
pub fn segments(clips: &[VideoClip], len: usize) -> Result<Vec<VideoClip>> {
    let mut out = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        if clip.gt_wave.is_none() {
            return Err(HarnessError::Data(format!("training clip {i} has no reference wave")));
        }
        let t = clip.len();
        if t < len {
            let usable = t - t % 4;
            if usable >= 8 {
                out.push(clip.window(0, usable));
            }
            continue;
        }
        out.extend((0..t / len).map(|k| clip.window(k * len, (k + 1) * len)));
    }
    Ok(out)
}

fn numeric(step: usize) -> impl Fn(ModelError) -> HarnessError {
    move |e| match e {
        ModelError::Tensor(TensorError::NonFinite { op }) => {
            HarnessError::Numeric { step, detail: format!("non-finite output of {op}") }
        }
        other => other.into(),
    }
}

/// Batches of `size` indices; a trailing singleton joins the previous batch
/// so that batch norm always sees at least two clips.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// One optimizer step on a batch; returns the batch-mean loss.
fn train_step(model: &mut Model, opt: &mut Adam, cfg: &RunConfig, batch: &[VideoClip], step: usize) -> Result<f64> {
    let tape = Tape::new();
    let (loss, grads, stats) = {
        let p = model.bind(&tape, true)?;
        let frames: Vec<&Tensor> = batch.iter().map(|c| &c.frames).collect();
        let out = model.forward(&p, &frames, Mode::Train).map_err(numeric(step))?;
        let mut total: Option<Var<'_>> = None;
        for (wave, clip) in out.waves.iter().zip(batch) {
            let gt = clip.gt().expect("segments carry reference waves");
            let l = wave.scalar_fn::<HarnessError>(|w| {
                let (v, g) = cfg.train.loss.overall_with_grad(&Wave::new(w.data().to_vec(), clip.fs)?, &gt)?;
                Ok((v, Tensor::new(w.shape().to_vec(), g)?))
            });
            let l = match l {
                Err(HarnessError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(HarnessError::Numeric { step, detail: "loss".into() });
                }
                other => other?,
            };
            total = Some(match total {
                None => l,
                Some(acc) => acc.add(&l)?,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / batch.len() as f64)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(HarnessError::Numeric { step, detail: format!("loss = {value}") });
        }
        let g = tape.backward(&loss)?;
        let grads: Vec<Tensor> = p.vars().iter().map(|v| g.wrt(v)).collect();
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(HarnessError::Numeric { step, detail: format!("gradient of {}", model.params.names()[k]) });
        }
        (value, grads, out.bn_stats)
    };
    opt.update(model.params.values_mut(), &grads);
    model.update_running_stats(&stats);
    Ok(loss)
}

/// Adam on `a·L_time + b·L_freq` over fixed-length segments. Deterministic
/// for a given config and data. With `out_dir`, writes `epoch_NNN.ckpt` and
/// `manifest.json` after every epoch.
pub fn train(cfg: &RunConfig, clips: &[VideoClip], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clips.len() < 2 {
        return Err(HarnessError::Config(format!("training needs at least 2 clips, got {}", clips.len())));
    }
    if let Some(c) = clips.iter().find(|c| c.hw() != cfg.model.input_hw) {
        return Err(HarnessError::Config(format!("clip size {:?} differs from model input_hw {:?}", c.hw(), cfg.model.input_hw)));
    }
    let segs = segments(clips, cfg.train.frames_per_segment)?;
    if segs.len() < 2 {
        return Err(HarnessError::Config(format!("training needs at least 2 segments, got {}", segs.len())));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let t = &cfg.train;
    let mut model = Model::new(cfg.model.clone(), t.seed)?;
    let mut opt = Adam::new(t.lr, t.betas, t.adam_eps, t.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(0x5eed));
    let mut manifest = RunManifest {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: t.seed,
        segments: segs.len(),
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        eval: None,
        checkpoint: None,
    };
    let mut order: Vec<usize> = (0..segs.len()).collect();
    for epoch in 0..t.epochs {
        order.shuffle(&mut rng);
        let first = manifest.step_losses.len();
        for idx in batches(&order, t.batch_size) {
            let batch = idx
                .iter()
                .map(|&i| {
                    if !t.augment {
                        return Ok(segs[i].clone());
                    }
                    let c = augment(&segs[i], &t.augment_policy, rng.random())?;
                    let keep = c.len() - c.len() % 4;
                    Ok(c.window(0, keep))
                })
                .collect::<Result<Vec<_>>>()?;
            let step = manifest.step_losses.len();
            manifest.step_losses.push(train_step(&mut model, &mut opt, cfg, &batch, step)?);
        }
        let losses = &manifest.step_losses[first..];
        manifest.epoch_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
            model.save(&path)?;
            manifest.checkpoint = Some(path);
            manifest.save(&dir.join("manifest.json"))?;
        }
    }
    Ok(TrainOutcome { model, manifest })
}
