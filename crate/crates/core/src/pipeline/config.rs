use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cnn::CnnConfig;
use crate::cotrain::CoTrainConfig;
use crate::error::{Error, Result};
use crate::features::NUM_FEATURES;
use crate::gcn::GcnConfig;
use crate::graph::{EdgeConfig, SamplerConfig};
use crate::image::read_file;
use crate::segadapt::SegAdaptConfig;

/// Synthetic dataset shape and the split used for ingested folders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Share of each class assigned to the test split.
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 3,
            per_class: 250,
            image_size: 64,
            test_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.classes < 2 {
            bad.push("dataset.classes must be at least 2".to_string());
        }
        if self.per_class == 0 {
            bad.push("dataset.per_class must be positive".to_string());
        }
        if self.image_size < 16 {
            bad.push(format!("dataset.image_size {} is below the minimum of 16", self.image_size));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bad.push("dataset.test_fraction must lie in (0, 1)".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            runs_dir: PathBuf::from("runs"),
        }
    }
}

/// Whether the two branches are coupled during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Cotrain,
    Independent,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Cotrain => "cotrain",
            TrainMode::Independent => "independent",
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cotrain" => Ok(TrainMode::Cotrain),
            "independent" => Ok(TrainMode::Independent),
            _ => Err(Error::Validation(format!("mode must be cotrain or independent, got {s:?}"))),
        }
    }
}

/// Every tunable of the pipeline. Loaded from JSON; missing keys take the
/// defaults shown by `actgraph config`, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub dataset: DatasetConfig,
    pub sampler: SamplerConfig,
    pub edge: EdgeConfig,
    pub gcn: GcnConfig,
    pub cnn: CnnConfig,
    pub cotrain: CoTrainConfig,
    pub segadapt: SegAdaptConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: TrainMode::Cotrain,
            dataset: DatasetConfig::default(),
            sampler: SamplerConfig::default(),
            edge: EdgeConfig::default(),
            gcn: GcnConfig::default(),
            cnn: CnnConfig::default(),
            cotrain: CoTrainConfig::default(),
            segadapt: SegAdaptConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Checks every section and collects all problems into one error.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let checks = [
            self.dataset.validate(),
            self.sampler.validate(),
            self.edge.validate(),
            self.gcn.validate(),
            self.cnn.validate(),
            self.cotrain.validate(),
            self.segadapt.validate(),
        ];
        for r in checks {
            if let Err(e) = r {
                bad.push(e.to_string());
            }
        }
        if self.gcn.num_classes != self.cnn.num_classes || self.gcn.num_classes != self.dataset.classes {
            bad.push(format!(
                "class counts disagree: dataset {}, gcn {}, cnn {}",
                self.dataset.classes, self.gcn.num_classes, self.cnn.num_classes
            ));
        }
        if self.gcn.in_features != NUM_FEATURES {
            bad.push(format!("gcn.in_features must be {NUM_FEATURES}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::parse(source_name, format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::parse(path.display().to_string(), "byte 0", "config is not UTF-8"))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json_pretty(), "t").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_json("{}", "t").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let err = RunConfig::from_json("{\n  \"gcn\": {\"depht\": 3}\n}", "cfg.json").unwrap_err();
        match err {
            Error::Parse { location, message, .. } => {
                assert!(location.starts_with("line 2"));
                assert!(message.contains("depht"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_section_checks() {
        let mut cfg = RunConfig::default();
        cfg.gcn.num_classes = 4;
        cfg.cotrain.batch_size = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("class counts disagree"));
        assert!(msg.contains("batch_size"));
    }
}
