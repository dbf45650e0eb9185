//! Run configuration for the command-line front end.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{ActivationConfig, ClusteringConfig};
use crate::dynamics::ManipulatorModel;
use crate::error::{Error, Result};
use crate::evaluation::{ControllerGains, NoiseCase, PeriodicReference};
use crate::pipeline::{FrictionMode, PipelineConfig};
use crate::trajectory::SuiteConfig;

/// Tracking study: the compensation model is a stepwise reconstruction of
/// the plant itself (direction-split when the plant has friction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub gains: ControllerGains,
    #[serde(default)]
    pub reference: PeriodicReference,
    /// Simulate the plant with the documented joint friction.
    #[serde(default = "yes")]
    pub plant_friction: bool,
    #[serde(default)]
    pub friction: FrictionMode,
    /// Excitation for the plant's reconstruction.
    #[serde(default = "SuiteConfig::friction_training")]
    pub training: SuiteConfig,
    /// Held-out trajectory for the plant's reconstruction.
    #[serde(default = "SuiteConfig::friction_test")]
    pub test: SuiteConfig,
}

fn yes() -> bool {
    true
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            gains: ControllerGains::default(),
            reference: PeriodicReference::default(),
            plant_friction: true,
            friction: FrictionMode::default(),
            training: SuiteConfig::friction_training(),
            test: SuiteConfig::friction_test(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the measurement-noise streams; trajectory suites and k-means
    /// carry their own seeds.
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "ManipulatorModel::default_arm")]
    pub manipulator: ManipulatorModel,
    #[serde(default = "SuiteConfig::default_training")]
    pub training: SuiteConfig,
    #[serde(default = "SuiteConfig::default_test")]
    pub test: SuiteConfig,
    #[serde(default = "NoiseCase::standard")]
    pub noise_cases: Vec<NoiseCase>,
    #[serde(default)]
    pub activation: ActivationConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub control: ControlConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            output: default_output(),
            manipulator: ManipulatorModel::default_arm(),
            training: SuiteConfig::default_training(),
            test: SuiteConfig::default_test(),
            noise_cases: NoiseCase::standard(),
            activation: ActivationConfig::default(),
            clustering: ClusteringConfig::default(),
            pipeline: PipelineConfig::default(),
            control: ControlConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("config serialization: {e}")))
    }

    /// SHA-256 of the resolved TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.manipulator.validate()?;
        let n = self.manipulator.dof();
        for suite in [
            &self.training,
            &self.test,
            &self.control.training,
            &self.control.test,
        ] {
            if suite.initial.len() != n {
                return Err(Error::dim(
                    "trajectory suite joints",
                    n,
                    suite.initial.len(),
                ));
            }
            suite.build()?;
        }
        if self.noise_cases.is_empty() {
            return Err(Error::Invalid("noise_cases is empty".into()));
        }
        for (i, c) in self.noise_cases.iter().enumerate() {
            c.validate()?;
            if self.noise_cases[..i].iter().any(|d| d.name == c.name) {
                return Err(Error::Invalid(format!("duplicate noise case `{}`", c.name)));
            }
        }
        self.activation.validate()?;
        self.clustering.validate()?;
        self.pipeline.regression.validate()?;
        self.control.gains.validate(n)?;
        self.control.reference.validate()?;
        if self.control.reference.dof() != n {
            return Err(Error::dim(
                "control reference",
                n,
                self.control.reference.dof(),
            ));
        }
        if self.control.plant_friction && ManipulatorModel::default_friction().len() != n {
            return Err(Error::Invalid(
                "documented friction parameters exist only for 3 joints".into(),
            ));
        }
        Ok(())
    }

    /// Pipeline settings for reconstructing the tracking plant.
    pub fn control_pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            friction: self
                .control
                .plant_friction
                .then(|| self.control.friction.clone()),
            ..self.pipeline.clone()
        }
    }

    /// The simulated plant of the tracking comparison.
    pub fn plant(&self) -> ManipulatorModel {
        let mut plant = self.manipulator.without_friction();
        if self.control.plant_friction {
            for (link, f) in plant
                .links
                .iter_mut()
                .zip(ManipulatorModel::default_friction())
            {
                link.friction = Some(f);
            }
        }
        plant
    }

    pub fn case(&self, name: &str) -> Result<&NoiseCase> {
        self.noise_cases
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Invalid(format!("unknown noise case `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        assert_eq!(
            RunConfig::from_toml("seed = 11").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(RunConfig::from_toml("seed = 1\n[clustering]\nk_min = 1\nk_max = 3\nrestarts = 1\nmax_iterations = 5\nflat_tolerance = 0.0\nseed = 1\nextra = 1").is_err());
    }
}
