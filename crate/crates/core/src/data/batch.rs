use rand::seq::SliceRandom;

use super::Sample;
use crate::error::{Error, Result};
use crate::losses::one_hot;
use crate::rng;

/// Stacked images and one-hot labels for one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub one_hot: Vec<f64>,
}

impl Batch {
    pub fn gather<'a>(ids: &[usize], classes: usize, fetch: impl Fn(usize) -> &'a Sample) -> Self {
        let mut images = Vec::new();
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            let s = fetch(id);
            images.extend_from_slice(&s.image);
            labels.push(s.label);
        }
        Batch {
            ids: ids.to_vec(),
            one_hot: one_hot(&labels, classes),
            images,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Seeded shuffle of `ids` cut into batches; the last batch may be short.
pub fn batch_plan(ids: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if ids.is_empty() {
        return Err(Error::Dataset("cannot batch an empty sample set".into()));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::rng_from(epoch_seed, &[rng::tag("batches")]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Materialized batches over dataset ids.
pub fn batches(
    dataset: &super::MultiDomainDataset,
    ids: &[usize],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    Ok(batch_plan(ids, batch_size, epoch_seed)?
        .iter()
        .map(|chunk| Batch::gather(chunk, dataset.num_classes(), |i| &dataset.samples()[i]))
        .collect())
}
