use serde::{Deserialize, Serialize};

use super::{config_hash, HarnessError, Result};
use crate::dsp::LossConfig;
use crate::model::ModelConfig;
use crate::synth::AugmentPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Decoupled decay, applied as `p ← p − lr·wd·p`.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub frames_per_segment: usize,
    pub augment: bool,
    pub augment_policy: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            loss: LossConfig::default(),
            frames_per_segment: 160,
            augment: false,
            augment_policy: AugmentPolicy::default(),
        }
    }
}

/// Model and training settings, read from one TOML file with `[model]` and
/// `[train]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(HarnessError::Config(m));
        // lr = 0 is allowed as a frozen run
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return bad(format!("lr must be finite and non-negative, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.betas.0) || !(0.0..1.0).contains(&t.betas.1) || !(t.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if t.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 for batch norm, got {}", t.batch_size));
        }
        if t.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if t.frames_per_segment < 8 || !t.frames_per_segment.is_multiple_of(4) {
            return bad(format!("frames_per_segment must be a multiple of 4 and at least 8, got {}", t.frames_per_segment));
        }
        if t.frames_per_segment != self.model.frames_per_segment {
            return bad(format!(
                "train.frames_per_segment ({}) and model.frames_per_segment ({}) differ",
                t.frames_per_segment, self.model.frames_per_segment
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_toml())
    }

    /// Sets the segment length in both tables.
    pub fn set_frames_per_segment(&mut self, frames: usize) {
        self.train.frames_per_segment = frames;
        self.model.frames_per_segment = frames;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash() {
        let mut cfg = RunConfig { model: ModelConfig::toy(), ..RunConfig::default() };
        cfg.train.epochs = 3;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        cfg.train.seed = 1;
        assert_ne!(back.hash(), cfg.hash());
    }

    #[test]
    fn rejects_invalid() {
        assert!(RunConfig::from_toml("[train]\nbatch_size = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nframes_per_segment = 80\n").is_err());
        assert!(RunConfig::from_toml("[training]\nlr = 1.0\n").is_err());
        let ok = RunConfig::from_toml("[model]\ndepth = 1\nframes_per_segment = 80\n[train]\nframes_per_segment = 80\n").unwrap();
        assert_eq!(ok.model.depth, 1);
    }
}
