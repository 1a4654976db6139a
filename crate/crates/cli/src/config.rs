use std::path::Path;

use serde::{de::Error as _, Deserialize, Deserializer, Serialize};
use star_kit::metrics::{Normalizer, DEFAULT_RESOLUTION, DEFAULT_THRESHOLD};
use star_kit::synthetic::{
    ContourSpec, DatasetConfig, FeatureSpec, NoiseModel, OptimizerConfig, TRAINING_EIGENVECTOR_GAP,
};
use star_kit::{Grid, LossConfig};

use crate::CliError;

/// Everything a command needs, with every default written out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the dataset and the first model; model `m` of an ensemble uses `seed + m`.
    pub seed: u64,
    pub grid: Grid,
    pub loss: LossConfig,
    pub synthetic: SyntheticConfig,
    pub metrics: MetricsConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: Grid::new(64, 64).expect("valid grid"),
            loss: LossConfig {
                eigenvector_gap: TRAINING_EIGENVECTOR_GAP,
                ..LossConfig::default()
            },
            synthetic: SyntheticConfig::default(),
            metrics: MetricsConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub contour: ContourSpec,
    pub noise: NoiseModel,
    pub features: FeatureSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Ensemble size of the stability experiment.
    pub n_models: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            contour: d.contour,
            noise: d.noise,
            features: d.features,
            n_train: d.n_train,
            n_test: d.n_test,
            n_models: 5,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            contour: self.contour.clone(),
            noise: self.noise.clone(),
            features: self.features.clone(),
            n_train: self.n_train,
            n_test: self.n_test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// An explicit normalizer or a preset name (`300w`, `wflw`, `cofw`).
    #[serde(deserialize_with = "normalizer_or_preset")]
    pub normalizer: Normalizer,
    pub threshold: f64,
    pub resolution: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            normalizer: preset_normalizer("300w").expect("known preset"),
            threshold: DEFAULT_THRESHOLD,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

/// Landmark index pairs of the common face layouts (0-based).
pub fn preset_normalizer(name: &str) -> Option<Normalizer> {
    match name.to_ascii_lowercase().as_str() {
        // 68 points, outer eye corners.
        "300w" => Some(Normalizer::InterOcular { i: 36, j: 45 }),
        // 98 points, outer eye corners.
        "wflw" => Some(Normalizer::InterOcular { i: 60, j: 72 }),
        // 29 points, pupils.
        "cofw" => Some(Normalizer::InterPupil { i: 8, j: 9 }),
        _ => None,
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NormalizerInput {
    Preset(String),
    Explicit(Normalizer),
}

fn normalizer_or_preset<'de, D: Deserializer<'de>>(d: D) -> Result<Normalizer, D::Error> {
    match NormalizerInput::deserialize(d)? {
        NormalizerInput::Explicit(n) => Ok(n),
        NormalizerInput::Preset(name) => preset_normalizer(&name).ok_or_else(|| {
            D::Error::custom(format!(
                "unknown normalizer preset {name:?} (expected 300w, wflw or cofw)"
            ))
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub grid: Grid,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            grid: Grid::new(8, 8).expect("valid grid"),
            step: 1e-6,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CliError::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from the defaults) and applies a seed override.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.loss.validate()?;
        let s = &self.synthetic;
        s.features.validate()?;
        s.noise.validate(s.contour.landmark_count)?;
        s.optimizer.validate()?;
        let m = &self.metrics;
        if !(m.threshold > 0.0) || !m.threshold.is_finite() {
            return Err(CliError::Input(format!(
                "metrics.threshold must be positive, got {}",
                m.threshold
            )));
        }
        if m.resolution < 2 {
            return Err(CliError::Input(format!(
                "metrics.resolution must be >= 2, got {}",
                m.resolution
            )));
        }
        if let Normalizer::Constant { value } = m.normalizer {
            if !(value > 0.0) {
                return Err(CliError::Input(format!(
                    "constant normalizer must be positive, got {value}"
                )));
            }
        }
        let step = self.gradcheck.step;
        if !(step > 0.0) || !step.is_finite() {
            return Err(CliError::Input(format!(
                "gradcheck.step must be positive, got {step}"
            )));
        }
        Ok(())
    }

    /// Optimizer settings with the run seed applied.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: self.seed,
            ..self.synthetic.optimizer.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_materializes_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert!(cfg.to_json().contains("\"lambda_floor\""));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sede": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss": {"weight": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"synthetic": {"optimizer": {"lr": 1}}}"#).is_err());
    }

    #[test]
    fn presets_resolve() {
        let cfg = RunConfig::from_json(r#"{"metrics": {"normalizer": "wflw"}}"#).unwrap();
        assert_eq!(cfg.metrics.normalizer, Normalizer::InterOcular { i: 60, j: 72 });
        assert!(cfg.to_json().contains("\"inter_ocular\""));
        assert!(RunConfig::from_json(r#"{"metrics": {"normalizer": "aflw"}}"#).is_err());
        let explicit =
            RunConfig::from_json(r#"{"metrics": {"normalizer": {"kind": "constant", "value": 2}}}"#)
                .unwrap();
        assert_eq!(explicit.metrics.normalizer, Normalizer::Constant { value: 2.0 });
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"grid": {"width": 1, "height": 8}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"metrics": {"threshold": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"gradcheck": {"step": -1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss": {"dr_sigma": 0}}"#).is_err());
    }

    #[test]
    fn seed_reaches_optimizer() {
        let cfg = RunConfig {
            seed: 17,
            ..RunConfig::default()
        };
        assert_eq!(cfg.optimizer().seed, 17);
    }
}
