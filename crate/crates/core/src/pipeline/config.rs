use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nn::{Arch, DiceReduction, NetConfig};
use crate::preprocess::Sequence;
use crate::trainer::TrainConfig;

use super::PipelineError;

/// Environment variable that overrides `work_dir`.
pub const WORKDIR_ENV: &str = "MYOPS_WORKDIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Total phantom cases; the last `held_out` go to the test split.
    pub n_cases: usize,
    pub held_out: usize,
    pub size: usize,
    pub slices: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_cases: 10, held_out: 4, size: 256, slices: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub arch: Arch,
    pub depth: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub dice_reduction: DiceReduction,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            arch: Arch::Unet,
            depth: 2,
            base_channels: 32,
            epochs: 500,
            lr: 1e-5,
            batch_size: 8,
            val_fraction: 0.2,
            dice_reduction: DiceReduction::Batch,
        }
    }
}

/// Per-block overrides of [`TrainSettings`]; unset fields inherit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverride {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub base_channels: Option<usize>,
    pub depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
    pub seed: u64,
    pub crop_size: usize,
    pub warps_per_slice: usize,
    pub synth: SynthConfig,
    pub train: TrainSettings,
    /// Keys are block ids `"0"` to `"4"`.
    pub block_overrides: BTreeMap<String, TrainOverride>,
    /// Architectures of the averaged members for blocks 3 and 4.
    pub ensemble: Vec<Arch>,
    /// Input sequence overrides, keyed by block id.
    pub block_inputs: BTreeMap<String, Sequence>,
    /// Score for two empty masks.
    pub empty_empty_score: f64,
    /// Evaluate these predictions instead of the predict stage output.
    pub predictions_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_dir: PathBuf::from("data"),
            work_dir: PathBuf::from("work"),
            seed: 0,
            crop_size: 256,
            warps_per_slice: 20,
            synth: SynthConfig::default(),
            train: TrainSettings::default(),
            block_overrides: BTreeMap::new(),
            ensemble: vec![Arch::Unet, Arch::Unet, Arch::Unetpp],
            block_inputs: BTreeMap::new(),
            empty_empty_score: 1.0,
            predictions_dir: None,
        }
    }
}

/// Blocks whose predictions average several members.
pub const ENSEMBLE_BLOCKS: [usize; 2] = [3, 4];

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Small, fast settings: 64×64 crops and phantoms with 2 slices, 30
    /// epochs, 5 warps, lr 1e-3 and 8 base channels.
    pub fn desk_scale(mut self) -> Self {
        self.crop_size = 64;
        self.synth.size = 64;
        self.synth.slices = 2;
        self.warps_per_slice = 5;
        self.train.epochs = 30;
        self.train.lr = 1e-3;
        self.train.base_channels = 8;
        self
    }

    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var(WORKDIR_ENV) {
            if !dir.is_empty() {
                self.work_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.crop_size == 0 || self.crop_size % (1 << self.train.depth) != 0 {
            return bad(format!("crop_size {} must be a positive multiple of 2^depth", self.crop_size));
        }
        if self.warps_per_slice == 0 {
            return bad("warps_per_slice must be at least 1".into());
        }
        if self.ensemble.is_empty() {
            return bad("ensemble needs at least one member".into());
        }
        for key in self.block_overrides.keys().chain(self.block_inputs.keys()) {
            match key.parse::<usize>() {
                Ok(b) if b < 5 => {}
                _ => return bad(format!("unknown block id {key:?}")),
            }
        }
        if self.synth.held_out >= self.synth.n_cases {
            return bad("synth.held_out must leave at least one training case".into());
        }
        self.train_config(0, 0).validate().map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn members(&self, block: usize) -> Vec<Arch> {
        if ENSEMBLE_BLOCKS.contains(&block) {
            self.ensemble.clone()
        } else {
            vec![self.train.arch]
        }
    }

    pub fn block_input_overrides(&self) -> BTreeMap<usize, Sequence> {
        self.block_inputs.iter().filter_map(|(k, &v)| k.parse().ok().map(|b| (b, v))).collect()
    }

    /// Training settings of member `member` of `block`. Member seeds differ so
    /// equal architectures still give distinct networks.
    pub fn train_config(&self, block: usize, member: usize) -> TrainConfig {
        let t = &self.train;
        let o = self.block_overrides.get(&block.to_string()).cloned().unwrap_or_default();
        let arch = self.members(block).get(member).copied().unwrap_or(t.arch);
        TrainConfig {
            block_id: block,
            net: NetConfig {
                arch,
                depth: o.depth.unwrap_or(t.depth),
                base_channels: o.base_channels.unwrap_or(t.base_channels),
                seed: self.seed.wrapping_add(1000 * block as u64 + member as u64),
            },
            epochs: o.epochs.unwrap_or(t.epochs),
            lr: o.lr.unwrap_or(t.lr),
            batch_size: o.batch_size.unwrap_or(t.batch_size),
            val_fraction: t.val_fraction,
            seed: self.seed.wrapping_add(block as u64),
            dice_reduction: t.dice_reduction,
        }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.data_dir.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.data_dir.join("test")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!((c.crop_size, c.warps_per_slice), (256, 20));
        let t = c.train_config(0, 0);
        assert_eq!((t.epochs, t.batch_size), (500, 8));
        assert_eq!(t.lr, 1e-5);
        assert_eq!(t.val_fraction, 0.2);
        assert_eq!(c.members(3).len(), 3);
        assert_eq!(c.members(1).len(), 1);
    }

    #[test]
    fn toml_overrides_and_unknown_keys() {
        let c = PipelineConfig::from_toml(
            "seed = 7\ncrop_size = 64\n[train]\nepochs = 3\n[block_overrides.4]\nlr = 0.01\n[block_inputs]\n3 = \"T2\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train_config(0, 0).epochs, 3);
        assert_eq!(c.train_config(4, 1).lr, 0.01);
        assert_eq!(c.train_config(3, 0).lr, 1e-5);
        assert_eq!(c.block_input_overrides()[&3], Sequence::T2);
        assert_ne!(c.train_config(3, 0).net.seed, c.train_config(3, 1).net.seed);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn desk_scale_preset() {
        let c = PipelineConfig::default().desk_scale();
        assert_eq!((c.crop_size, c.train.epochs, c.warps_per_slice), (64, 30, 5));
        c.validate().unwrap();
    }
}
