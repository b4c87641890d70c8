//! Fixtures shared by the benchmarks.

use rrld_core::backbone::{BackboneConfig, Model};
use rrld_core::data::{generate_synthetic, Batch, MultiDomainDataset, SynthConfig};

/// Synthetic dataset at the default 32px, 3-channel shape.
pub fn dataset(per_domain: usize) -> MultiDomainDataset {
    generate_synthetic(&SynthConfig {
        per_domain,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config")
}

/// The first `size` samples as one batch.
pub fn batch(ds: &MultiDomainDataset, size: usize) -> Batch {
    let ids: Vec<usize> = (0..size.min(ds.len())).collect();
    Batch::gather(&ids, ds.num_classes(), |i| &ds.samples()[i])
}

/// The default backbone and a reduced one used for the desk-scale fixture.
pub fn backbones() -> [(&'static str, BackboneConfig); 2] {
    [
        ("default", BackboneConfig::default()),
        (
            "desk",
            BackboneConfig {
                patch_size: 8,
                embed_dim: 32,
                depth: 4,
                mlp_ratio: 2.0,
                ..BackboneConfig::default()
            },
        ),
    ]
}

pub fn model(cfg: &BackboneConfig) -> Model {
    Model::init(cfg.clone()).expect("valid backbone config")
}
