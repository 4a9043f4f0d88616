//! Run configuration file. Every field is optional; command-line flags
//! override whatever the file sets.

use std::fs;
use std::path::{Path, PathBuf};

use platewaste::augment::AugmentationSpec;
use platewaste::metrics::Averaging;
use platewaste::nets::Family;
use platewaste::trainer::TrainConfig;
use platewaste::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Family,
    pub width: usize,
    pub depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Family::Unet,
            width: 64,
            depth: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            test_fraction: 0.25,
            val_fraction: 0.15,
        }
    }
}

/// A preset name or an explicit step list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AugmentChoice {
    Preset(String),
    Spec(AugmentationSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Defaults to the preset named after the manifest's food type.
    pub pipeline: Option<AugmentChoice>,
    pub multiplier: usize,
    /// Keep the untouched source as the first copy.
    pub include_original: bool,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            pipeline: None,
            multiplier: 3,
            include_original: true,
        }
    }
}

impl AugmentSection {
    pub fn resolve(&self, food_type: &str) -> Result<AugmentationSpec> {
        let spec = match &self.pipeline {
            Some(AugmentChoice::Spec(s)) => s.clone(),
            Some(AugmentChoice::Preset(name)) => AugmentationSpec::preset(name)?,
            None => AugmentationSpec::preset(food_type)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub aggregation: Averaging,
    pub include_background: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            aggregation: Averaging::Weighted,
            include_background: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub split: SplitSection,
    pub augment: AugmentSection,
    pub eval: EvalSection,
    pub clamp_eating_rate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out: None,
            seed: 0,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            split: SplitSection::default(),
            augment: AugmentSection::default(),
            eval: EvalSection::default(),
            clamp_eating_rate: true,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            Error::Parse {
                source_name: source_name.to_string(),
                location: format!("field `{}` (line {}, column {})", e.path(), inner.line(), inner.column()),
                message: inner.to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(vec![path.to_path_buf()]),
            _ => e.into(),
        })?;
        let mut cfg = Self::from_json_str(&text, &path.display().to_string())?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.augment.multiplier == 0 {
            return Err(Error::InvalidConfig("augment.multiplier must be at least 1".into()));
        }
        if let Some(AugmentChoice::Preset(name)) = &self.augment.pipeline {
            AugmentationSpec::preset(name)?;
        }
        for (name, f) in [("split.test_fraction", self.split.test_fraction), ("split.val_fraction", self.split.val_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        if self.model.width == 0 || self.model.depth == 0 {
            return Err(Error::InvalidConfig("model.width and model.depth must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json_str("{}", "mem").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_field_is_located() {
        let err = RunConfig::from_json_str(r#"{"train": {"epochz": 3}}"#, "run.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.epochz") || msg.contains("epochz"), "{msg}");
        assert!(msg.contains("run.json"));
    }

    #[test]
    fn augment_pipeline_accepts_preset_or_spec() {
        let c = RunConfig::from_json_str(r#"{"augment": {"pipeline": "Fesenjan"}}"#, "mem").unwrap();
        assert_eq!(c.augment.pipeline, Some(AugmentChoice::Preset("Fesenjan".into())));
        let c = RunConfig::from_json_str(
            r#"{"augment": {"pipeline": {"steps": [{"kind": "flip_h", "probability": 1.0}]}}}"#,
            "mem",
        )
        .unwrap();
        assert!(matches!(c.augment.pipeline, Some(AugmentChoice::Spec(_))));
    }

    #[test]
    fn bad_preset_fails_validation() {
        let c = RunConfig::from_json_str(r#"{"augment": {"pipeline": "Pizza"}}"#, "mem").unwrap();
        assert!(c.validate().is_err());
    }
}
