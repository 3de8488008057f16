//! Experiment configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::GridSpec;
use crate::error::{Error, Result};
use crate::federated::FlConfig;
use crate::model::{Architecture, ModelSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Shapes,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// CIFAR-10 batch directory (`data_batch_*.bin`, `test_batch.bin`).
    pub path: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    /// Shapes only; CIFAR-10 always has 10.
    pub classes: usize,
    /// Shapes only; CIFAR-10 images are 32×32.
    pub image_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Shapes,
            path: None,
            train_size: 1000,
            test_size: 200,
            classes: 4,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Second architecture for transfer experiments.
    pub transfer_arch: Architecture,
    /// Grad-CAM layer, e.g. `conv3`; defaults to the last convolution.
    pub capture: Option<String>,
    pub epochs: u32,
    pub lr: f64,
    pub batch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::ArchA,
            transfer_arch: Architecture::ArchB,
            capture: None,
            epochs: 3,
            lr: 0.05,
            batch: 32,
        }
    }
}

impl ModelConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Foreground fraction of a saliency map.
    pub tau: f64,
    /// Fraction of pixels compared by peak overlap.
    pub k_fraction: f64,
    pub probe_size: usize,
    /// Samples whose heatmaps are dumped as PGM.
    pub heatmaps: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            k_fraction: 0.1,
            probe_size: 100,
            heatmaps: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Test samples evaluated by both arms.
    pub samples: usize,
    /// Shrink or widen the random-skew ranges until its mean ΔE00 is within
    /// `delta_e_tolerance` of the CPM mean.
    pub match_delta_e: bool,
    pub delta_e_tolerance: f64,
    /// Largest range multiplier tried while matching.
    pub max_range: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            match_delta_e: true,
            delta_e_tolerance: 2.0,
            max_range: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub fl: FlConfig,
    pub attack: GridSpec,
    pub metrics: MetricsConfig,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            fl: FlConfig::default(),
            attack: GridSpec::default(),
            metrics: MetricsConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn classes(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::Shapes => self.dataset.classes,
            DatasetKind::Cifar10 => 10,
        }
    }

    pub fn image_size(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::Shapes => self.dataset.image_size,
            DatasetKind::Cifar10 => 32,
        }
    }

    pub fn model_spec(&self, arch: Architecture) -> ModelSpec {
        let spec = ModelSpec::new(arch, self.image_size(), self.classes());
        match &self.model.capture {
            Some(layer) => spec.with_capture(layer),
            None => spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        let d = &self.dataset;
        if d.train_size == 0 || d.test_size == 0 {
            return Err(Error::Config("train_size and test_size must be positive".into()));
        }
        if d.kind == DatasetKind::Shapes && (!(2..=10).contains(&d.classes) || d.image_size < 16) {
            return Err(Error::Config(format!(
                "shapes needs 2..=10 classes and image_size >= 16, got {} and {}",
                d.classes, d.image_size
            )));
        }
        if d.kind == DatasetKind::Cifar10 && d.path.is_none() {
            return Err(Error::Config("cifar10 needs dataset.path".into()));
        }
        for arch in [self.model.arch, self.model.transfer_arch] {
            self.model_spec(arch).validate().map_err(cfg_err)?;
        }
        if !(self.model.lr > 0.0) || self.model.batch == 0 {
            return Err(Error::Config("model lr must be positive and batch nonzero".into()));
        }
        self.fl.validate()?;
        if self.fl.clients > d.train_size.saturating_sub(self.fl.root_size) {
            return Err(Error::Config(format!(
                "{} clients need at least {} training samples after the root set",
                self.fl.clients, self.fl.clients
            )));
        }
        self.attack.candidates().map_err(cfg_err)?;
        let m = &self.metrics;
        if !(m.tau > 0.0 && m.tau < 1.0) || !(m.k_fraction > 0.0 && m.k_fraction < 1.0) {
            return Err(Error::Config("tau and k_fraction must lie in (0, 1)".into()));
        }
        if m.probe_size == 0 {
            return Err(Error::Config("probe_size must be positive".into()));
        }
        let c = &self.compare;
        if c.samples == 0 || !(c.delta_e_tolerance > 0.0) || !(c.max_range > 0.0) {
            return Err(Error::Config("compare settings must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(ExperimentConfig::from_toml("sed = 3").is_err());
        assert!(ExperimentConfig::from_toml("[fl]\nrouns = 3").is_err());
        let ok = ExperimentConfig::from_toml("seed = 3\n[fl]\nrounds = 4\naggregator = \"median\"").unwrap();
        assert_eq!(ok.fl.rounds, 4);
    }

    #[test]
    fn invalid_values_fail() {
        assert!(ExperimentConfig::from_toml("[fl]\nadversarial_ratio = 1.2").is_err());
        assert!(ExperimentConfig::from_toml("[fl]\nrounds = 0").is_err());
        assert!(ExperimentConfig::from_toml("[dataset]\nkind = \"cifar10\"").is_err());
        assert!(ExperimentConfig::from_toml("[attack]\nscale = [2.0]").is_err());
        assert!(ExperimentConfig::from_toml("[model]\ncapture = \"conv9\"").is_err());
    }
}
