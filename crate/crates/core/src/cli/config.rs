use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, DEFAULT_IMAGE_EXT};
use crate::error::{Error, Result};
use crate::model::{activation_for, ModelSpec};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub validation_count: usize,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            validation_count: 550,
            seed: 42,
            stratified: false,
        }
    }
}

/// Everything a `train` run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest_path: PathBuf,
    pub images_dir: PathBuf,
    pub image_ext: String,
    pub output_dir: PathBuf,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest_path: PathBuf::from("train.csv"),
            images_dir: PathBuf::from("train_images"),
            image_ext: DEFAULT_IMAGE_EXT.into(),
            output_dir: PathBuf::from("runs/experiment"),
            split: SplitConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Every violated constraint, as `section.field: constraint`.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.split.validation_count == 0 {
            v.push("split.validation_count: must be >= 1".into());
        }
        if self.image_ext.is_empty() || self.image_ext.contains(['/', '\\']) {
            v.push(format!("image_ext: invalid extension `{}`", self.image_ext));
        }
        v.extend(self.preprocess.violations());
        v.extend(self.model.violations());
        v.extend(self.train.violations());
        if self.model.output_activation != activation_for(self.train.regime) {
            v.push(format!(
                "model.output_activation: regime {} requires {}",
                self.train.regime,
                serde_json::to_string(&activation_for(self.train.regime)).unwrap_or_default()
            ));
        }
        if self.preprocess.target_size != self.model.input_size {
            v.push(format!(
                "preprocess.target_size: must equal model.input_size ({}), got {}",
                self.model.input_size, self.preprocess.target_size
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid values: {}", v.join("; "))))
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses TOML text. Missing fields take defaults; when `model.output_activation`
/// is absent it follows `train.regime`.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig> {
    let parse_err = |e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| format!(" at line {}", line_of(text, s.start)))
            .unwrap_or_default();
        Error::Config(format!(
            "{}: parse error{line}: {}",
            origin.display(),
            e.message().trim().replace('\n', " ")
        ))
    };
    let table: toml::Table = toml::from_str(text).map_err(parse_err)?;
    let mut config: ExperimentConfig = toml::from_str(text).map_err(parse_err)?;
    let explicit_activation = table
        .get("model")
        .and_then(|m| m.as_table())
        .is_some_and(|m| m.contains_key("output_activation"));
    if !explicit_activation {
        config.model.output_activation = activation_for(config.train.regime);
    }
    config.validate().map_err(|e| {
        Error::Config(format!(
            "{}: {}",
            origin.display(),
            e.to_string().trim_start_matches("config: ")
        ))
    })?;
    Ok(config)
}

/// Reads and validates a config file. Paths inside it are checked when used.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

pub fn config_to_toml(config: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::Config(format!("cannot serialize: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Regime;
    use crate::model::OutputActivation;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config(text, Path::new("exp.toml"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.learning_rate, 0.00005);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.epochs, 15);
        assert_eq!(c.model.dropout_rate, 0.5);
        assert_eq!(c.preprocess.zoom_range, 0.15);
        assert_eq!(c.preprocess.target_size, 224);
        assert_eq!(c.train.regime, Regime::Multi);
    }

    #[test]
    fn regime_selects_activation() {
        let c = parse("[train]\nregime = \"single\"\n").unwrap();
        assert_eq!(c.model.output_activation, OutputActivation::Softmax);
        let err =
            parse("[train]\nregime = \"single\"\n[model]\noutput_activation = \"independent-sigmoid\"\n").unwrap_err();
        assert!(err.to_string().contains("model.output_activation"));
    }

    #[test]
    fn every_violation_is_listed() {
        let err = parse("[train]\nlearning_rate = -1.0\nepochs = 0\n[model]\ndropout_rate = 1.5\n").unwrap_err();
        let msg = err.to_string();
        for field in ["train.learning_rate", "train.epochs", "model.dropout_rate"] {
            assert!(msg.contains(field), "{msg}");
        }
        assert!(!msg.contains('\n'));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse("[train]\nepochs = 3\nlearning_rate = = 2\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse("[train]\n\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse("[train]\nepochs = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn round_trip() {
        let text = "output_dir = \"out\"\n[split]\nvalidation_count = 10\n[train]\nregime = \"single\"\nseed = 9\n";
        let c = parse(text).unwrap();
        let again = parse(&config_to_toml(&c).unwrap()).unwrap();
        assert_eq!(again, c);
        let d = ExperimentConfig::default();
        assert_eq!(parse(&config_to_toml(&d).unwrap()).unwrap(), d);
    }
}
