//! Run configuration: one TOML file, every field defaulted.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dds_core::data::DEFAULT_NOTES;
use dds_core::{DdsConfig, FlowArch, SolverSchedule, SplitSpec, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every other seed.
    pub seed: u64,
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub solver: SolverSchedule,
    pub dds: DdsConfig,
    pub decompose: DecomposeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_presets: usize,
    pub note_duration_s: f64,
    pub notes: Vec<u8>,
    pub splits: Vec<SplitConfig>,
    /// Also write every rendered training/test note as WAV.
    pub write_note_audio: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub name: String,
    pub train_presets: Vec<usize>,
    pub test_presets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub n_coupling: usize,
    pub hidden_width: usize,
    pub n_hidden: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub dequant_noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    /// Test frames drawn per note for the reconstruction experiment; 0 keeps all.
    pub test_frames_per_note: usize,
    /// Splits whose pieces are decomposed.
    pub piece_splits: Vec<String>,
    /// Frames per decomposition whose full loss sequence is logged.
    pub trace_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            flow: FlowConfig::default(),
            solver: SolverSchedule::default(),
            dds: DdsConfig::default(),
            decompose: DecomposeConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        let split = |name: &str, train: &[usize], test: &[usize]| SplitConfig {
            name: name.into(),
            train_presets: train.to_vec(),
            test_presets: test.to_vec(),
        };
        Self {
            n_presets: 8,
            note_duration_s: 1.0,
            notes: DEFAULT_NOTES.to_vec(),
            splits: vec![
                split("s0", &[0, 1, 2, 3, 4], &[5, 6, 7]),
                split("s1", &[3, 4, 5, 6, 7], &[0, 1, 2]),
                split("s2", &[0, 2, 4, 6], &[1, 3, 5, 7]),
            ],
            write_note_audio: true,
        }
    }
}

impl Default for FlowConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            n_coupling: 8,
            hidden_width: 64,
            n_hidden: 2,
            lr: t.lr,
            max_epochs: 400,
            batch_size: 64,
            patience: t.patience,
            val_fraction: t.val_fraction,
            dequant_noise_sigma: t.dequant_noise_sigma,
        }
    }
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            test_frames_per_note: 12,
            piece_splits: vec!["s0".into()],
            trace_frames: 1,
        }
    }
}

impl FlowConfig {
    pub fn arch(&self, dim: usize) -> FlowArch {
        FlowArch {
            dim,
            n_coupling: self.n_coupling,
            hidden_width: self.hidden_width,
            n_hidden: self.n_hidden,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            val_fraction: self.val_fraction,
            seed,
            dequant_noise_sigma: self.dequant_noise_sigma,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn split_specs(&self) -> Vec<SplitSpec> {
        self.data
            .splits
            .iter()
            .map(|s| SplitSpec {
                name: s.name.clone(),
                train_presets: s.train_presets.clone(),
                test_presets: s.test_presets.clone(),
                notes: self.data.notes.clone(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.notes.is_empty() {
            bail!("data.notes is empty");
        }
        if self.data.splits.is_empty() {
            bail!("data.splits is empty");
        }
        if !(self.data.note_duration_s > 0.0) {
            bail!("data.note_duration_s must be positive");
        }
        let mut names: Vec<&str> = self.data.splits.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            bail!("split names must be unique");
        }
        for name in &self.decompose.piece_splits {
            if !names.contains(&name.as_str()) {
                bail!("decompose.piece_splits names unknown split {name:?}");
            }
        }
        for s in &self.data.splits {
            if s.train_presets.is_empty() || s.test_presets.is_empty() {
                bail!("split {:?} needs train and test presets", s.name);
            }
        }
        self.flow.train_config(0).validate()?;
        self.solver.validate()?;
        self.dds.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 5\n[flow]\nmax_epochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.flow.max_epochs, 3);
        assert_eq!(cfg.flow.patience, 50);
        assert_eq!(cfg.solver.max_steps, 10_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 5\n").is_err());
    }
}
