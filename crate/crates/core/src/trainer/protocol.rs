use serde::{Deserialize, Serialize};

use super::fit::{fit, FitResult, MetricRecord};
use super::step::AugGradient;
use super::{TrainConfig, Variant};
use crate::augment::AugmentPolicy;
use crate::backbone::BackboneConfig;
use crate::data::{build_protocol, MultiDomainDataset, ProtocolView};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_step: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    /// Target-domain reads before the final evaluation; always 0 for a sound run.
    pub early_target_reads: usize,
    #[serde(skip)]
    pub metrics: Vec<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target: String,
    pub runs: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub targets: Vec<TargetResult>,
    /// Mean of the per-target means.
    pub average: f64,
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Every selected target domain is held out in turn and trained once per
/// seed. `on_run` sees each finished fit (for checkpoints and metric files).
pub fn run_protocol(
    dataset: &MultiDomainDataset,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    mut on_run: impl FnMut(&FitResult) -> Result<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    if dataset.domains().len() < 2 {
        return Err(Error::Dataset("leave-one-domain-out needs at least 2 domains".into()));
    }
    let targets: Vec<String> = match &cfg.targets {
        Some(t) => {
            for name in t {
                dataset.domain_index(name)?;
            }
            t.clone()
        }
        None => dataset.domains().to_vec(),
    };
    let mut out = Vec::with_capacity(targets.len());
    for target in &targets {
        let mut runs = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let split = build_protocol(dataset, target, seed)?;
            let view = ProtocolView::new(dataset, &split);
            let result = fit(&view, backbone, cfg, policy, seed, AugGradient::Halted)?;
            on_run(&result)?;
            runs.push(SeedResult {
                seed,
                best_step: result.best_step,
                best_val_acc: result.best_val_acc,
                test_acc: result.test_acc,
                early_target_reads: view.early_target_reads(),
                metrics: result.metrics,
            });
        }
        let accs: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
        let (mean, std) = mean_std(&accs);
        out.push(TargetResult {
            target: target.clone(),
            runs,
            mean,
            std,
        });
    }
    let average = out.iter().map(|t| t.mean).sum::<f64>() / out.len() as f64;
    Ok(RunResult {
        variant: cfg.variant,
        targets: out,
        average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[0.80, 0.82, 0.84]);
        assert!((m - 0.82).abs() < 1e-12);
        assert!((s - 0.02).abs() < 1e-12);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]).1, 0.0);
    }
}
