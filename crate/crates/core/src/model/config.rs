use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::ssm::ScanMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    /// Per-frame `C → 1` projection followed by per-clip standardization.
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of (Mamba block, frequency FFN) pairs.
    pub depth: usize,
    pub channels: usize,
    /// Width multiplier for the Mamba inner width and the FFN hidden width.
    pub expansion: usize,
    pub state_size: usize,
    pub input_hw: (usize, usize),
    pub frames_per_segment: usize,
    pub conv1d_kernel: usize,
    pub scan_mode: ScanMode,
    pub head: HeadType,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            channels: 64,
            expansion: 2,
            state_size: 16,
            input_hw: (128, 128),
            frames_per_segment: 160,
            conv1d_kernel: 4,
            scan_mode: ScanMode::Sequential,
            head: HeadType::Linear,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small network for 32×32 clips.
    pub fn toy() -> Self {
        Self { depth: 1, channels: 8, state_size: 8, input_hw: (32, 32), ..Self::default() }
    }

    pub fn inner(&self) -> usize {
        self.expansion * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.channels == 0 || self.expansion == 0 || self.state_size == 0 || self.conv1d_kernel == 0 {
            return bad("channels, expansion, state_size and conv1d_kernel must be positive");
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return bad("input_hw must be positive multiples of 8");
        }
        if self.frames_per_segment < 5 {
            return bad("frames_per_segment must be at least 5");
        }
        if let ScanMode::Parallel { chunk: 0 } = self.scan_mode {
            return bad("parallel scan chunk must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) || !(self.ln_eps > 0.0) {
            return bad("bn_momentum must lie in [0, 1] and eps values must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
