//! Run configuration: one TOML document drives the whole workflow.
//! Every field has a default, so a config file only states the values
//! it changes; unknown keys are rejected to catch typos.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::JitterRanges;
use crate::error::{Error, Result};
use crate::ocsvm::GammaChoice;

/// Which classes the compactness term pulls toward their centers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterMode {
    /// Only the class the one-class model will be fit on.
    TargetOnly,
    AllClasses,
    /// Every class except the target; probes whether compacting the
    /// target class itself is what matters.
    ExcludeTarget,
}

/// RBF bandwidth: `"auto"` (variance heuristic) or a positive number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaSetting {
    Auto,
    Fixed(f64),
}

impl GammaSetting {
    pub fn to_choice(self) -> GammaChoice {
        match self {
            GammaSetting::Auto => GammaChoice::Auto,
            GammaSetting::Fixed(g) => GammaChoice::Fixed(g),
        }
    }
}

impl Serialize for GammaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GammaSetting::Auto => s.serialize_str("auto"),
            GammaSetting::Fixed(g) => s.serialize_f64(*g),
        }
    }
}

impl<'de> Deserialize<'de> for GammaSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(g) => Ok(GammaSetting::Fixed(g)),
            Raw::Word(w) if w == "auto" => Ok(GammaSetting::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "gamma must be \"auto\" or a number, got {w:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 32,
            epochs: 15,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight on the center-compactness term; 0 disables it.
    pub lambda: f64,
    /// Center update rate per iteration.
    pub beta: f64,
    pub center_mode: CenterMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { lambda: 1.0, beta: 0.5, center_mode: CenterMode::TargetOnly }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Histogram-transfer color mix-up between same-stain classes.
    pub mixup: bool,
    /// Replace mix-up with hue/saturation jitter (an ablation arm).
    pub hue_sat_only: bool,
    /// Photometric jitter applied to every encoder training tile.
    pub jitter: JitterRanges,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mixup: true,
            hue_sat_only: false,
            jitter: JitterRanges::brightness_contrast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// Margin-error bound: caps the training outlier fraction.
    pub nu: f64,
    pub gamma: GammaSetting,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { nu: 0.1, gamma: GammaSetting::Auto }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    /// Tile verdict cut: scores strictly below it count anomalous.
    pub threshold: f64,
    /// Steepness of the logistic slide-level sum.
    pub growth: f64,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig { threshold: 0.0, growth: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,
    pub target_class: usize,
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
    pub augment: AugmentConfig,
    pub svm: SvmConfig,
    pub aggregate: AggregateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus_dir: PathBuf::from("corpus"),
            output_dir: PathBuf::from("runs"),
            target_class: 0,
            encoder: EncoderConfig::default(),
            objective: ObjectiveConfig::default(),
            augment: AugmentConfig::default(),
            svm: SvmConfig::default(),
            aggregate: AggregateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("parsing config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        RunConfig::from_toml_str(&text)
    }

    /// The effective configuration, defaults filled in, as TOML.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.feature_dim == 0 {
            return Err(Error::config("encoder.feature_dim must be positive"));
        }
        if e.epochs == 0 {
            return Err(Error::config("encoder.epochs must be at least 1"));
        }
        if e.batch_size == 0 {
            return Err(Error::config("encoder.batch_size must be positive"));
        }
        if !(e.learning_rate > 0.0 && e.learning_rate.is_finite()) {
            return Err(Error::config("encoder.learning_rate must be positive and finite"));
        }
        if !(0.0..1.0).contains(&e.momentum) {
            return Err(Error::config("encoder.momentum must be in [0, 1)"));
        }
        let o = &self.objective;
        if !(o.lambda >= 0.0 && o.lambda.is_finite()) {
            return Err(Error::config("objective.lambda must be nonnegative and finite"));
        }
        if !(0.0..=1.0).contains(&o.beta) {
            return Err(Error::config("objective.beta must be in [0, 1]"));
        }
        if self.augment.mixup && self.augment.hue_sat_only {
            return Err(Error::config(
                "augment.hue_sat_only replaces mix-up; disable augment.mixup",
            ));
        }
        self.augment
            .jitter
            .validate()
            .map_err(|e| Error::config(format!("augment.jitter: {e}")))?;
        if !(self.svm.nu > 0.0 && self.svm.nu <= 1.0) {
            return Err(Error::config("svm.nu must be in (0, 1]"));
        }
        if let GammaSetting::Fixed(g) = self.svm.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::config("svm.gamma must be positive and finite"));
            }
        }
        if !self.aggregate.threshold.is_finite() {
            return Err(Error::config("aggregate.threshold must be finite"));
        }
        if !(self.aggregate.growth > 0.0 && self.aggregate.growth.is_finite()) {
            return Err(Error::config("aggregate.growth must be positive and finite"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_recipe_constants() {
        let c = RunConfig::default();
        assert_eq!(c.objective.lambda, 1.0);
        assert_eq!(c.objective.beta, 0.5);
        assert_eq!(c.svm.nu, 0.1);
        assert_eq!(c.encoder.learning_rate, 1e-3);
        assert_eq!(c.encoder.momentum, 0.9);
        assert_eq!(c.encoder.batch_size, 64);
        assert_eq!(c.encoder.epochs, 15);
        assert_eq!(c.svm.gamma, GammaSetting::Auto);
        assert_eq!(c.aggregate.threshold, 0.0);
        assert_eq!(c.aggregate.growth, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn empty_toml_yields_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_toml_overrides_only_named_fields() {
        let c = RunConfig::from_toml_str(
            "seed = 7\n[svm]\nnu = 0.25\ngamma = 0.05\n[objective]\ncenter_mode = \"all-classes\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.svm.nu, 0.25);
        assert_eq!(c.svm.gamma, GammaSetting::Fixed(0.05));
        assert_eq!(c.objective.center_mode, CenterMode::AllClasses);
        assert_eq!(c.encoder, EncoderConfig::default(), "untouched sections keep defaults");
    }

    #[test]
    fn gamma_accepts_auto_and_numbers_only() {
        let c = RunConfig::from_toml_str("[svm]\ngamma = \"auto\"\n").unwrap();
        assert_eq!(c.svm.gamma, GammaSetting::Auto);
        assert!(RunConfig::from_toml_str("[svm]\ngamma = \"wide\"\n").is_err());
        assert!(RunConfig::from_toml_str("[svm]\ngamma = -2.0\n").is_err(), "fails validation");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("sede = 7\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::from_toml_str("[encoder]\nlearning_rt = 0.1\n").is_err());
    }

    #[test]
    fn validation_catches_out_of_range_values() {
        for bad in [
            "[svm]\nnu = 0.0\n",
            "[svm]\nnu = 1.5\n",
            "[encoder]\nepochs = 0\n",
            "[encoder]\nmomentum = 1.0\n",
            "[objective]\nbeta = 1.2\n",
            "[aggregate]\ngrowth = 0.0\n",
            "[augment]\nhue_sat_only = true\n", // mix-up still on: conflicting pair
        ] {
            assert!(
                matches!(RunConfig::from_toml_str(bad), Err(Error::Config(_))),
                "accepted: {bad}"
            );
        }
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let mut c = RunConfig::default();
        c.seed = 99;
        c.svm.gamma = GammaSetting::Fixed(0.125);
        c.augment.hue_sat_only = true;
        c.augment.mixup = false;
        let text = c.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(c, back);
        assert!(text.contains("gamma = 0.125"));
    }
}
