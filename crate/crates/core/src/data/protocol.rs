use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{MultiDomainDataset, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Leave-one-domain-out partition of sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub target_domain: String,
    pub target: usize,
    /// First 80% (floored) of each shuffled source domain.
    pub train: Vec<usize>,
    /// Remaining 20% of every source domain, concatenated.
    pub unified_val: Vec<usize>,
    /// Every sample of the target domain.
    pub test: Vec<usize>,
}

pub const MIN_DOMAIN_SIZE: usize = 5;

/// Holds out `target` and splits every other domain 80/20 after a seeded
/// shuffle.
pub fn build_protocol(dataset: &MultiDomainDataset, target: &str, split_seed: u64) -> Result<ProtocolSplit> {
    let t = dataset.domain_index(target)?;
    if dataset.domains().len() < 2 {
        return Err(Error::Dataset("leave-one-domain-out needs at least 2 domains".into()));
    }
    let mut train = Vec::new();
    let mut unified_val = Vec::new();
    for d in (0..dataset.domains().len()).filter(|&d| d != t) {
        let mut ids = dataset.domain_ids(d);
        if ids.len() < MIN_DOMAIN_SIZE {
            return Err(Error::Dataset(format!(
                "domain '{}' has {} samples; at least {MIN_DOMAIN_SIZE} are needed for an 80/20 split",
                dataset.domains()[d],
                ids.len()
            )));
        }
        ids.shuffle(&mut rng::rng_from(split_seed, &[rng::tag("split"), d as u64]));
        let n_train = ids.len() * 4 / 5;
        unified_val.extend_from_slice(&ids[n_train..]);
        ids.truncate(n_train);
        train.extend(ids);
    }
    Ok(ProtocolSplit {
        target_domain: target.to_string(),
        target: t,
        train,
        unified_val,
        test: dataset.domain_ids(t),
    })
}

/// Read access to a split that counts every touch of a target-domain sample
/// made before the test set is released.
#[derive(Debug)]
pub struct ProtocolView<'a> {
    dataset: &'a MultiDomainDataset,
    split: &'a ProtocolSplit,
    released: AtomicBool,
    early_target_reads: AtomicUsize,
    target_reads: AtomicUsize,
}

impl<'a> ProtocolView<'a> {
    pub fn new(dataset: &'a MultiDomainDataset, split: &'a ProtocolSplit) -> Self {
        ProtocolView {
            dataset,
            split,
            released: AtomicBool::new(false),
            early_target_reads: AtomicUsize::new(0),
            target_reads: AtomicUsize::new(0),
        }
    }

    pub fn dataset(&self) -> &'a MultiDomainDataset {
        self.dataset
    }

    pub fn split(&self) -> &'a ProtocolSplit {
        self.split
    }

    pub fn train_ids(&self) -> &'a [usize] {
        &self.split.train
    }

    pub fn val_ids(&self) -> &'a [usize] {
        &self.split.unified_val
    }

    pub fn sample(&self, id: usize) -> &'a Sample {
        let s = &self.dataset.samples()[id];
        if s.domain == self.split.target {
            self.target_reads.fetch_add(1, Ordering::Relaxed);
            if !self.released.load(Ordering::Relaxed) {
                self.early_target_reads.fetch_add(1, Ordering::Relaxed);
            }
        }
        s
    }

    /// Marks the start of the final evaluation and hands out the test ids.
    pub fn release_test(&self) -> &'a [usize] {
        self.released.store(true, Ordering::Relaxed);
        &self.split.test
    }

    /// Target-domain reads that happened before [`ProtocolView::release_test`].
    pub fn early_target_reads(&self) -> usize {
        self.early_target_reads.load(Ordering::Relaxed)
    }

    pub fn target_reads(&self) -> usize {
        self.target_reads.load(Ordering::Relaxed)
    }
}
