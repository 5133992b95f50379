//! Run configuration: one TOML file, overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use refvfx::adapt::AdaptConfig;
use refvfx::data::Family;
use refvfx::denoiser::DenoiserConfig;
use refvfx::diffusion::{Phase, SampleConfig, TrainConfig};
use refvfx::eval::OracleConfig;
use refvfx::icmask::MaskMode;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub pairs: usize,
    pub families: Vec<Family>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            pairs: 500,
            families: Family::IN_DOMAIN.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub judge: String,
    /// Clips judged; `0` means every pair of the dataset.
    pub clips: usize,
    pub endpoint: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub oracle: OracleConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            judge: "oracle".into(),
            clips: 0,
            endpoint: None,
            cache_dir: None,
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: DenoiserConfig,
    /// Unconditional pretraining run before in-context training when no
    /// initial checkpoint is given.
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub sample: SampleConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSection::default(),
            model: DenoiserConfig::default(),
            pretrain: TrainConfig {
                phase: Phase::Backbone,
                lr: 5e-4,
                steps: 1500,
                warmup: 100,
                ema: 0.999,
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mask_mode: Option<MaskMode>,
    pub steps: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Apply flag overrides. `--steps` targets the sampler for `infer` and
    /// `evaluate`, the optimiser otherwise.
    pub fn apply(&mut self, o: &Overrides, steps_target: StepsTarget) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(m) = o.mask_mode {
            self.train.mask_mode = m;
            self.sample.mask_mode = m;
        }
        if let Some(s) = o.steps {
            match steps_target {
                StepsTarget::Train => self.train.steps = s,
                StepsTarget::Adapt => self.adapt.steps = s,
                StepsTarget::Sample => self.sample.steps = s,
                StepsTarget::None => {}
            }
        }
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self.adapt.seed = self.seed;
        self.sample.seed = self.seed;
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        Ok(toml::Table::try_from(self)?)
    }

    pub fn to_text(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepsTarget {
    Train,
    Adapt,
    Sample,
    None,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_text().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_reach_every_section() {
        let mut c = RunConfig::default();
        let o = Overrides {
            seed: Some(7),
            mask_mode: Some(MaskMode::None),
            steps: Some(3),
        };
        c.apply(&o, StepsTarget::Sample);
        assert_eq!((c.train.seed, c.sample.seed, c.adapt.seed), (7, 7, 7));
        assert_eq!(c.train.mask_mode, MaskMode::None);
        assert_eq!((c.sample.steps, c.train.steps), (3, 2000));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 4\n[train]\nsteps = 10\n").unwrap();
        assert_eq!((c.seed, c.train.steps, c.train.batch_size), (4, 10, 8));
    }
}
