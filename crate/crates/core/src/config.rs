//! Pipeline configuration: one TOML document with every tunable constant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bnn::{NetArchitecture, PretrainConfig};
use crate::error::{Result, ShmError};
use crate::hmc::HmcConfig;
use crate::synth::{NoiseConfig, SpecimenSpec, GAUGE_COUNT};
use crate::uq::{EdgeMode, FieldSpace, ReconstructionMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub pca: PcaConfig,
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    pub posterior: PosteriorConfig,
    pub hmc: HmcConfig,
    pub uq: UqConfig,
    pub monitor: MonitorConfig,
    pub study: StudyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// One specimen per entry (mm); 0 is the healthy coupon.
    pub crack_lengths: Vec<f64>,
    pub experiments_per_specimen: usize,
    /// The last this-many experiments of every specimen are held out.
    pub test_experiments: usize,
    pub frames_per_experiment: usize,
    /// Specimens (by crack length) whose training experiments carry edge outliers.
    pub outlier_specimens: Vec<f64>,
    pub outliers_in_test: bool,
    pub specimen: SpecimenSpec,
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaConfig {
    /// Retained modes; when absent the smallest `k` reaching `cev_threshold` is used.
    pub k: Option<usize>,
    pub cev_threshold: f64,
    /// Also write one diagnostic basis per specimen.
    pub per_specimen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorConfig {
    /// Divides the learned noise scales to form the likelihood scales.
    pub calibration_d: f64,
    pub prior_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqConfig {
    pub mode: ReconstructionMode,
    pub space: FieldSpace,
    pub upsample_factor: usize,
    pub edge: EdgeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    /// Emit full mean and epistemic grids on every output line.
    pub inline_fields: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Training frames per specimen for each run.
    pub sizes: Vec<usize>,
    /// Frames per experiment of the study's own dataset; must cover the largest size.
    pub frames_per_experiment: usize,
    /// Test input: specimen crack length and frame index within its test experiment.
    pub probe_specimen: f64,
    pub probe_frame: usize,
    pub histogram_bins: usize,
    /// Replaces `hmc.n_samples` inside the study when set.
    pub hmc_samples: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let crack_lengths = vec![0.0, 1.0, 3.0, 5.0, 7.0, 9.0, 12.0, 15.0];
        Self {
            output_dir: PathBuf::from("run"),
            data: DataConfig {
                seed: 2024,
                crack_lengths: crack_lengths.clone(),
                experiments_per_specimen: 5,
                test_experiments: 1,
                frames_per_experiment: 200,
                outlier_specimens: crack_lengths,
                outliers_in_test: false,
                specimen: SpecimenSpec::default(),
                noise: NoiseConfig::default(),
            },
            pca: PcaConfig {
                k: Some(8),
                cev_threshold: 0.95,
                per_specimen: false,
            },
            network: NetworkConfig {
                hidden: vec![100, 100, 100],
            },
            pretrain: PretrainConfig {
                learning_rate: 0.001,
                epochs: 300,
                train_fraction: 0.8,
                batch_size: 32,
                seed: 7,
            },
            posterior: PosteriorConfig {
                calibration_d: 20.0,
                prior_std: 0.5,
            },
            hmc: HmcConfig {
                step_size_init: 1e-4,
                target_accept: 0.6,
                burn_in: 100,
                n_samples: 1000,
                leapfrog_steps: 20,
                leapfrog_jitter: 0.2,
                thinning: 1,
                divergence_threshold: 1000.0,
                seed: 11,
            },
            uq: UqConfig {
                mode: ReconstructionMode::AbsoluteSum,
                space: FieldSpace::Normalized,
                upsample_factor: 4,
                edge: EdgeMode::Extrapolate,
            },
            monitor: MonitorConfig { inline_fields: false },
            study: StudyConfig {
                sizes: vec![300, 500, 700, 900],
                frames_per_experiment: 250,
                probe_specimen: 12.0,
                probe_frame: 25,
                histogram_bins: 20,
                hmc_samples: None,
            },
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ShmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path).map_err(|e| ShmError::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| ShmError::Config(e.to_string()))
    }

    pub fn architecture(&self, k: usize) -> NetArchitecture {
        NetArchitecture {
            input_dim: GAUGE_COUNT,
            hidden: self.network.hidden.clone(),
            output_dim: k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ShmError::Config(m.to_string()));
        let d = &self.data;
        if d.crack_lengths.is_empty() {
            return bad("at least one specimen is required");
        }
        if d.frames_per_experiment == 0 {
            return bad("frames_per_experiment must be at least 1");
        }
        if d.test_experiments == 0 || d.test_experiments >= d.experiments_per_specimen {
            return bad("test_experiments must leave at least one training experiment");
        }
        if matches!(self.pca.k, Some(0)) {
            return bad("pca.k must be at least 1");
        }
        if !(self.pca.cev_threshold > 0.0 && self.pca.cev_threshold <= 1.0) {
            return bad("pca.cev_threshold must lie in (0, 1]");
        }
        let split = self.pretrain.train_fraction;
        if !(split > 0.0 && split <= 1.0) {
            return bad("pretrain.train_fraction must lie in (0, 1]");
        }
        if !(self.pretrain.learning_rate > 0.0) || self.pretrain.batch_size == 0 {
            return bad("pretrain needs a positive learning rate and batch size");
        }
        if !(self.posterior.calibration_d > 0.0 && self.posterior.prior_std > 0.0) {
            return bad("posterior calibration and prior std must be positive");
        }
        if self.uq.upsample_factor == 0 {
            return bad("uq.upsample_factor must be at least 1");
        }
        if self.study.sizes.is_empty() || self.study.sizes.contains(&0) {
            return bad("study.sizes must be nonempty and positive");
        }
        self.hmc.validate()?;
        self.architecture(1).validate().map_err(|e| ShmError::Config(e.to_string()))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn basis_path(&self) -> PathBuf {
        self.output_dir.join("basis.json")
    }

    pub fn pca_report_path(&self) -> PathBuf {
        self.output_dir.join("pca_report.json")
    }

    pub fn model_path(&self) -> PathBuf {
        self.output_dir.join("model.json")
    }

    pub fn ensemble_path(&self) -> PathBuf {
        self.output_dir.join("ensemble.bin")
    }

    pub fn fields_dir(&self) -> PathBuf {
        self.output_dir.join("fields")
    }

    pub fn study_dir(&self) -> PathBuf {
        self.output_dir.join("study")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn protocol_constants_appear_once() {
        let text = PipelineConfig::default().to_toml().unwrap();
        for needle in [
            "learning_rate = 0.001",
            "epochs = 300",
            "prior_std = 0.5",
            "calibration_d = 20.0",
            "step_size_init = 0.0001",
            "target_accept = 0.6",
            "burn_in = 100",
            "n_samples = 1000",
            "k = 8",
            "cev_threshold = 0.95",
        ] {
            assert_eq!(text.matches(needle).count(), 1, "{needle}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = PipelineConfig::default();
        cfg.data.frames_per_experiment = 0;
        assert!(matches!(cfg.validate(), Err(ShmError::Config(_))));
        let err = PipelineConfig::from_toml("output_dir = 3").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
