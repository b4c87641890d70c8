//! Gaussian, impulse, speckle and shot noise used to build an
//! out-of-distribution copy of a dataset.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{MultiDomainDataset, Sample};
use crate::error::{Error, Result};
use crate::pixels::clamp01;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Impulse,
    Speckle,
    Shot,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::Gaussian, NoiseKind::Impulse, NoiseKind::Speckle, NoiseKind::Shot];

    /// Toolkit default severity: gaussian sigma 0.1, impulse rate 0.05,
    /// speckle sigma 0.2, shot photon scale 60.
    pub fn default_param(self) -> f64 {
        match self {
            NoiseKind::Gaussian => 0.1,
            NoiseKind::Impulse => 0.05,
            NoiseKind::Speckle => 0.2,
            NoiseKind::Shot => 60.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Impulse => "impulse",
            NoiseKind::Speckle => "speckle",
            NoiseKind::Shot => "shot",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise kind '{s}' (expected gaussian, impulse, speckle or shot)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Gaussian sigma, impulse rate, speckle sigma or shot photon scale.
    pub param: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, param: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { kind, param, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_default(kind: NoiseKind, seed: u64) -> Self {
        NoiseSpec {
            kind,
            param: kind.default_param(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            NoiseKind::Gaussian | NoiseKind::Speckle => self.param >= 0.0 && self.param.is_finite(),
            NoiseKind::Impulse => (0.0..=1.0).contains(&self.param),
            NoiseKind::Shot => self.param > 0.0 && self.param.is_finite(),
        };
        if !ok {
            return Err(Error::Config(format!("invalid {} noise parameter {}", self.kind, self.param)));
        }
        Ok(())
    }
}

/// Corrupts one image; the result is clamped to `[0, 1]`.
pub fn corrupt_image(image: &[f64], spec: &NoiseSpec, r: &mut rng::Rng) -> Result<Vec<f64>> {
    spec.validate()?;
    let out = match spec.kind {
        NoiseKind::Gaussian => {
            let n = Normal::new(0.0, spec.param).map_err(|e| Error::Config(e.to_string()))?;
            image.iter().map(|&x| clamp01(x + n.sample(r))).collect()
        }
        NoiseKind::Speckle => {
            let n = Normal::new(0.0, spec.param).map_err(|e| Error::Config(e.to_string()))?;
            image.iter().map(|&x| clamp01(x * (1.0 + n.sample(r)))).collect()
        }
        NoiseKind::Impulse => {
            let half = spec.param / 2.0;
            image
                .iter()
                .map(|&x| {
                    let u = r.random::<f64>();
                    if u < half {
                        0.0
                    } else if u < spec.param {
                        1.0
                    } else {
                        x
                    }
                })
                .collect()
        }
        NoiseKind::Shot => image
            .iter()
            .map(|&x| {
                let rate = x * spec.param;
                if rate <= 0.0 {
                    return Ok(0.0);
                }
                let p = Poisson::new(rate).map_err(|e| Error::Config(e.to_string()))?;
                let k: f64 = p.sample(r);
                Ok(clamp01(k / spec.param))
            })
            .collect::<Result<Vec<f64>>>()?,
    };
    Ok(out)
}

/// Returns a copy of `dataset` with one extra domain holding a corrupted
/// version of every original sample. Each image receives one spec, chosen
/// uniformly from `specs` with a stream derived from `assign_seed`.
pub fn corrupt(
    dataset: &MultiDomainDataset,
    specs: &[NoiseSpec],
    domain_name: &str,
    assign_seed: u64,
) -> Result<MultiDomainDataset> {
    if specs.is_empty() {
        return Err(Error::Config("no noise specs given".into()));
    }
    for s in specs {
        s.validate()?;
    }
    if dataset.domains().iter().any(|d| d == domain_name) {
        return Err(Error::Dataset(format!("domain '{domain_name}' already exists")));
    }
    let mut noisy = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples().iter().enumerate() {
        let pick = if specs.len() == 1 {
            0
        } else {
            rng::rng_from(assign_seed, &[rng::tag("noise-assign"), i as u64]).random_range(0..specs.len())
        };
        let spec = &specs[pick];
        let mut r = rng::rng_from(spec.seed, &[rng::tag("noise"), i as u64]);
        noisy.push(Sample {
            image: corrupt_image(&s.image, spec, &mut r)?,
            label: s.label,
            domain: 0,
        });
    }
    let extra = MultiDomainDataset::new(
        dataset.shape(),
        dataset.classes().to_vec(),
        vec![domain_name.to_string()],
        noisy,
    )?;
    dataset.clone().merge(extra)
}
