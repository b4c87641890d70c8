//! Versioned JSON records written next to datasets and runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::backbone::BackboneConfig;
use crate::data::{DatasetSummary, NoiseSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::trainer::{RunResult, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Written as `dataset.json` at the root of an image-folder dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub summary: DatasetSummary,
    /// Generator settings, for synthetic sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    /// Noise specs that produced `noise_domain`, for corrupted sets.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_assign_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
}

/// Everything needed to reproduce a training run; written before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    /// Toolkit version that wrote the manifest.
    pub version: String,
    pub data: PathBuf,
    pub dataset: DatasetSummary,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub policy: AugmentPolicy,
    #[serde(default)]
    pub noise: Vec<NoiseSpec>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        if self.seeds != self.train.seeds {
            return Err(Error::Config(format!(
                "manifest seeds {:?} disagree with the training config {:?}",
                self.seeds, self.train.seeds
            )));
        }
        self.backbone.validate()?;
        self.train.validate()
    }
}

/// Written as `result.json` in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub result: RunResult,
}

pub fn check_schema(found: u32) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported schema_version {found} (this build reads {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::default_policy;
    use crate::pixels::ImageShape;

    fn manifest() -> RunManifest {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            version: "0.1.0".into(),
            data: "d".into(),
            dataset: DatasetSummary {
                shape: ImageShape::square(3, 32),
                classes: vec!["a".into(), "b".into()],
                domains: vec!["x".into(), "y".into()],
                per_domain: vec![10, 10],
            },
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            policy: default_policy(),
            noise: vec![],
            seeds: vec![0, 1, 2],
            output_dir: "out".into(),
        }
    }

    #[test]
    fn round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = manifest();
        write_json(&p, &m).unwrap();
        let back: RunManifest = read_json(&p).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();

        let mut bad = m.clone();
        bad.schema_version = 7;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = m;
        bad.seeds = vec![5];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parse_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, "{\n  \"schema_version\": 1,\n  oops\n}").unwrap();
        match read_json::<RunManifest>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
