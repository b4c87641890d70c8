//! Multi-domain image datasets and the leave-one-domain-out protocol.

mod batch;
mod folder;
mod noise;
mod protocol;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixels::{check_range, ImageShape};

pub use batch::{batch_plan, batches, Batch};
pub use folder::{export_image_folder, load_image_folder, load_image_folder_any};
pub use noise::{corrupt, corrupt_image, NoiseKind, NoiseSpec};
pub use protocol::{build_protocol, ProtocolSplit, ProtocolView};
pub use synthetic::{generate_synthetic, SynthConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

/// Labeled images grouped into named domains sharing one class vocabulary.
/// A sample's identity is its index in [`MultiDomainDataset::samples`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    shape: ImageShape,
    classes: Vec<String>,
    domains: Vec<String>,
    samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub shape: ImageShape,
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    pub per_domain: Vec<usize>,
}

impl MultiDomainDataset {
    pub fn new(
        shape: ImageShape,
        classes: Vec<String>,
        domains: Vec<String>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Dataset(format!("need >= 2 classes, got {}", classes.len())));
        }
        if domains.is_empty() {
            return Err(Error::Dataset("dataset has no domains".into()));
        }
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].contains(d) {
                return Err(Error::Dataset(format!("duplicate domain name '{d}'")));
            }
        }
        for (i, s) in samples.iter().enumerate() {
            shape.check(&s.image).map_err(|e| Error::Dataset(format!("sample {i}: {e}")))?;
            check_range(&s.image).map_err(|e| Error::Dataset(format!("sample {i}: {e}")))?;
            if s.label >= classes.len() || s.domain >= domains.len() {
                return Err(Error::Dataset(format!(
                    "sample {i} has label {} / domain {} outside the vocabulary",
                    s.label, s.domain
                )));
            }
        }
        Ok(MultiDomainDataset {
            shape,
            classes,
            domains,
            samples,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains.iter().position(|d| d == name).ok_or_else(|| {
            Error::Dataset(format!(
                "unknown domain '{name}' (have: {})",
                self.domains.join(", ")
            ))
        })
    }

    /// Sample ids of one domain, in dataset order.
    pub fn domain_ids(&self, domain: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            shape: self.shape,
            classes: self.classes.clone(),
            domains: self.domains.clone(),
            per_domain: (0..self.domains.len())
                .map(|d| self.samples.iter().filter(|s| s.domain == d).count())
                .collect(),
        }
    }

    /// Concatenates two datasets with the same classes and shape; domains of
    /// `other` are appended.
    pub fn merge(mut self, other: MultiDomainDataset) -> Result<Self> {
        if self.classes != other.classes || self.shape != other.shape {
            return Err(Error::Dataset("cannot merge datasets with different classes or shapes".into()));
        }
        let offset = self.domains.len();
        for d in &other.domains {
            if self.domains.contains(d) {
                return Err(Error::Dataset(format!("duplicate domain name '{d}'")));
            }
        }
        self.domains.extend(other.domains);
        self.samples.extend(other.samples.into_iter().map(|mut s| {
            s.domain += offset;
            s
        }));
        Ok(self)
    }
}
