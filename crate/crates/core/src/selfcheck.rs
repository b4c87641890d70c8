//! Runtime checks behind the `selftest` command: loss oracles, a
//! finite-difference gradient check, the stop-gradient trajectory check and
//! the protocol no-leak check.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::augment::default_policy;
use crate::backbone::{BackboneConfig, Model};
use crate::data::{build_protocol, generate_synthetic, Batch, ProtocolView, Sample, SynthConfig};
use crate::error::Result;
use crate::losses::{agsd_loss, cross_entropy, ibsd_loss, softmax_rows, Logits};
use crate::rng;
use crate::trainer::{fit, loss_and_grad, loss_value, plan_step, train_step, AdamState, AugGradient, TrainConfig, Variant};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelfTestOptions {
    /// Let gradients flow through the augmented pass (negative control).
    pub break_stopgrad: bool,
    pub fd_tolerance: f64,
    pub oracle_instances: usize,
    pub seed: u64,
}

impl Default for SelfTestOptions {
    fn default() -> Self {
        SelfTestOptions {
            break_stopgrad: false,
            fd_tolerance: 1e-4,
            oracle_instances: 1000,
            seed: 0,
        }
    }
}

// Naive references: plain exp / sum / ln, no max shift.

fn naive_probs(l: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = l.iter().map(|v| (v / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn naive_kl(a: &[f64], b: &[f64], t: f64) -> f64 {
    let p = naive_probs(a, t);
    let q = naive_probs(b, t);
    let mut s = 0.0;
    for j in 0..p.len() {
        s += p[j] * (p[j] / q[j]).ln();
    }
    s
}

fn random_logits(r: &mut rng::Rng, rows: usize, classes: usize) -> Logits {
    Logits::from_vec(rows, classes, (0..rows * classes).map(|_| r.random_range(-6.0..6.0)).collect())
        .expect("sized")
}

/// Compares the library losses against the naive references on random
/// instances; returns the largest absolute deviation.
pub fn loss_oracle_deviation(instances: usize, seed: u64) -> Result<f64> {
    let mut r = rng::rng_from(seed, &[rng::tag("oracle")]);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = r.random_range(2..=16);
        let rows = r.random_range(1..=8);
        let a = random_logits(&mut r, rows, c);
        let b = random_logits(&mut r, rows, c);
        let t = r.random_range(0.5..8.0);
        let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..c)).collect();

        let mean_kl = |t: f64| (0..rows).map(|i| naive_kl(a.row(i), b.row(i), t)).sum::<f64>() / rows as f64;
        worst = worst.max((ibsd_loss(&a, &b, t)? - mean_kl(t)).abs());
        worst = worst.max((agsd_loss(&a, &b.detach(), t)? - mean_kl(t)).abs());

        let y = crate::losses::one_hot(&labels, c);
        let ce = cross_entropy(&y, softmax_rows(&a)?.as_slice(), c)?;
        let naive_ce = (0..rows).map(|i| -naive_probs(a.row(i), 1.0)[labels[i]].ln()).sum::<f64>() / rows as f64;
        worst = worst.max((ce - naive_ce).abs());
    }
    Ok(worst)
}

/// Small backbone used by the gradient and stop-gradient checks.
pub fn probe_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        in_channels: 3,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes: 3,
        seed: 11,
    }
}

/// Model with every parameter jittered away from its initial value, so no
/// gradient path starts out degenerate.
pub fn probe_model(cfg: BackboneConfig, seed: u64) -> Result<Model> {
    let mut m = Model::init(cfg)?;
    let mut r = rng::rng_from(seed, &[rng::tag("jitter")]);
    let n = Normal::new(0.0, 0.3).expect("valid");
    for p in m.params_mut() {
        *p += n.sample(&mut r);
    }
    Ok(m)
}

fn probe_batch(cfg: &BackboneConfig, rows: usize, seed: u64) -> Batch {
    let mut r = rng::rng_from(seed, &[rng::tag("probe-batch")]);
    let len = cfg.image_len();
    let samples: Vec<Sample> = (0..rows)
        .map(|i| Sample {
            image: (0..len).map(|_| r.random::<f64>()).collect(),
            label: i % cfg.num_classes,
            domain: 0,
        })
        .collect();
    let ids: Vec<usize> = (0..rows).collect();
    Batch::gather(&ids, cfg.num_classes, |i| &samples[i])
}

/// Maximum relative error between the analytic gradient and central
/// differences over every parameter. The augmented logits are frozen at the
/// unperturbed parameters, matching the stop-gradient.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(variant: Variant, h: f64, floor: f64, seed: u64) -> Result<f64> {
    let bb = probe_backbone();
    let mut model = probe_model(bb.clone(), seed)?;
    let batch = probe_batch(&bb, 4, seed);
    let cfg = TrainConfig {
        variant,
        ..TrainConfig::default()
    };
    let policy = default_policy();
    let mut r = rng::rng_from(seed, &[rng::tag("gradcheck")]);
    let plan = plan_step(&model, &batch, &policy, &cfg, &mut r)?;
    let (trace, grads) = loss_and_grad(&model, &batch, &plan, &cfg, AugGradient::Halted)?;
    let frozen = trace.aug_logits.as_ref().map(Logits::detach);

    let mut worst: f64 = 0.0;
    for k in 0..model.params().len() {
        let orig = model.params()[k];
        model.params_mut()[k] = orig + h;
        let up = loss_value(&model, &batch, &plan, &cfg, frozen.as_ref())?.total;
        model.params_mut()[k] = orig - h;
        let down = loss_value(&model, &batch, &plan, &cfg, frozen.as_ref())?.total;
        model.params_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.total[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct StopGradReport {
    pub identical_trajectories: bool,
    /// Largest |gradient| that arrived through the augmented pass.
    pub max_augmented_grad: f64,
}

impl StopGradReport {
    pub fn passed(&self) -> bool {
        self.identical_trajectories && self.max_augmented_grad == 0.0
    }
}

/// Runs `steps` RRLD updates twice from the same state: once with the
/// augmented pass unrecorded, once with `mode`. Passes when the parameter
/// trajectories are bit-identical and nothing flowed through the augmented
/// pass.
pub fn stop_gradient_check(mode: AugGradient, steps: usize, seed: u64) -> Result<StopGradReport> {
    let bb = probe_backbone();
    let cfg = TrainConfig {
        variant: Variant::Rrld,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let policy = default_policy();
    let run = |mode: AugGradient| -> Result<(Vec<Vec<u64>>, f64)> {
        let mut model = probe_model(bb.clone(), seed)?;
        let mut state = AdamState::new(model.params().len());
        let mut r = rng::rng_from(seed, &[rng::tag("stopgrad")]);
        let mut trajectory = Vec::with_capacity(steps);
        let mut max_aug: f64 = 0.0;
        for step in 0..steps {
            let batch = probe_batch(&bb, 4, seed + step as u64);
            let mut probe_rng = r.clone();
            let plan = plan_step(&model, &batch, &policy, &cfg, &mut probe_rng)?;
            let (_, g) = loss_and_grad(&model, &batch, &plan, &cfg, mode)?;
            max_aug = g.through_augmented.iter().fold(max_aug, |m, v| m.max(v.abs()));
            train_step(&mut model, &mut state, &batch, &policy, &cfg, &mut r, step, mode)?;
            trajectory.push(model.params().iter().map(|p| p.to_bits()).collect());
        }
        Ok((trajectory, max_aug))
    };
    let (reference, _) = run(AugGradient::Halted)?;
    let (candidate, max_augmented_grad) = run(mode)?;
    Ok(StopGradReport {
        identical_trajectories: reference == candidate,
        max_augmented_grad,
    })
}

/// Trains briefly with every domain held out in turn and returns the number
/// of target reads made before the test set was released, summed over
/// targets.
pub fn no_leak_reads(seed: u64) -> Result<usize> {
    let ds = generate_synthetic(&SynthConfig {
        classes: 2,
        domains: 3,
        per_domain: 10,
        image_size: 8,
        channels: 3,
        seed,
    })?;
    let bb = BackboneConfig {
        num_classes: 2,
        ..probe_backbone()
    };
    let cfg = TrainConfig {
        max_steps: 4,
        batch_size: 8,
        eval_every: Some(2),
        ..TrainConfig::default()
    };
    let mut early = 0;
    for target in ds.domains() {
        let split = build_protocol(&ds, target, seed)?;
        let view = ProtocolView::new(&ds, &split);
        fit(&view, &bb, &cfg, &default_policy(), seed, AugGradient::Halted)?;
        early += view.early_target_reads();
    }
    Ok(early)
}

/// Every check, in order.
pub fn run_selftest(opts: &SelfTestOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut record = |name: &str, r: Result<(bool, String)>| match r {
        Ok((ok, detail)) => out.push(CheckOutcome::new(name, ok, detail)),
        Err(e) => out.push(CheckOutcome::new(name, false, format!("error: {e}"))),
    };

    record(
        "loss-oracles",
        loss_oracle_deviation(opts.oracle_instances, opts.seed).map(|d| {
            (d <= 1e-9, format!("{} instances, max |deviation| {d:.3e} (limit 1e-9)", opts.oracle_instances))
        }),
    );

    for v in [Variant::Erm, Variant::IbsdOnly, Variant::AgsdOnly, Variant::Rrld] {
        record(
            &format!("gradient-check/{v}"),
            gradient_check(v, 1e-5, GRAD_FLOOR, opts.seed)
                .map(|e| (e < opts.fd_tolerance, format!("max relative error {e:.3e} (limit {:.0e})", opts.fd_tolerance))),
        );
    }

    let mode = if opts.break_stopgrad { AugGradient::Live } else { AugGradient::FrozenCopy };
    record(
        "stop-gradient",
        stop_gradient_check(mode, 10, opts.seed).map(|r| {
            (
                r.passed(),
                format!(
                    "10 RRLD steps, trajectories {}, max gradient through augmented pass {:.3e}",
                    if r.identical_trajectories { "bit-identical" } else { "DIVERGED" },
                    r.max_augmented_grad
                ),
            )
        }),
    );

    record(
        "no-leak",
        no_leak_reads(opts.seed).map(|n| (n == 0, format!("{n} target reads before final evaluation"))),
    );
    out
}

/// Denominator floor for the relative gradient error. Central differences at
/// h = 1e-5 carry roughly 1e-10 absolute error, so gradients below this are
/// compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_agree() {
        assert!(loss_oracle_deviation(50, 3).unwrap() < 1e-9);
    }

    #[test]
    fn broken_stopgrad_is_caught() {
        let ok = stop_gradient_check(AugGradient::FrozenCopy, 3, 0).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = stop_gradient_check(AugGradient::Live, 3, 0).unwrap();
        assert!(!bad.passed());
        assert!(bad.max_augmented_grad > 0.0);
    }
}
