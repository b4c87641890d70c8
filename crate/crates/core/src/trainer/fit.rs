use serde::{Deserialize, Serialize};

use super::step::{train_step, AugGradient};
use super::{AdamState, TrainConfig};
use crate::augment::AugmentPolicy;
use crate::backbone::{BackboneConfig, Model};
use crate::data::{batch_plan, Batch, ProtocolView, Sample};
use crate::error::{Error, Result};
use crate::losses::Logits;
use crate::rng;

const EVAL_CHUNK: usize = 64;

/// One line of the metrics stream. Step lines carry the loss breakdown,
/// validation lines carry `val_acc`, and the final line carries `test_acc` at
/// the selected step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ibsd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agsd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
}

/// Anything that maps an image batch to logits.
pub trait Classifier {
    fn image_len(&self) -> usize;
    fn classify(&self, images: &[f64]) -> Result<Logits>;
}

impl Classifier for Model {
    fn image_len(&self) -> usize {
        self.config().image_len()
    }

    fn classify(&self, images: &[f64]) -> Result<Logits> {
        self.forward_final(images)
    }
}

/// Fraction of samples whose final-block argmax equals the label.
pub fn evaluate<'a, C: Classifier>(model: &C, samples: impl IntoIterator<Item = &'a Sample>) -> Result<f64> {
    let samples: Vec<&Sample> = samples.into_iter().collect();
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty sample set".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut images = Vec::with_capacity(chunk.len() * model.image_len());
        for s in chunk {
            images.extend_from_slice(&s.image);
        }
        let logits = model.classify(&images)?;
        correct += chunk.iter().enumerate().filter(|(r, s)| logits.argmax(*r) == s.label).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Index of the highest value; ties resolve to the earliest.
pub fn select_best(curve: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in curve.iter().enumerate() {
        if best.is_none_or(|b| v > curve[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub seed: u64,
    pub target: String,
    pub best_step: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    /// `(step, unified validation accuracy)` at every evaluation.
    pub val_curve: Vec<(usize, f64)>,
    pub metrics: Vec<MetricRecord>,
    pub best_model: Model,
    pub best_optimizer: AdamState,
}

/// Trains one model on a split, keeps the checkpoint with the best unified
/// validation accuracy, and scores it once on the target domain.
pub fn fit(
    view: &ProtocolView<'_>,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    policy: &AugmentPolicy,
    seed: u64,
    aug_mode: AugGradient,
) -> Result<FitResult> {
    cfg.validate()?;
    let dataset = view.dataset();
    if backbone.num_classes != dataset.num_classes() {
        return Err(Error::Config(format!(
            "backbone has {} classes, dataset has {}",
            backbone.num_classes,
            dataset.num_classes()
        )));
    }
    let shape = dataset.shape();
    if shape.channels != backbone.in_channels || shape.height != backbone.image_size || shape.width != backbone.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, backbone expects {}x{}x{}",
            shape.channels, shape.height, shape.width, backbone.in_channels, backbone.image_size, backbone.image_size
        )));
    }
    let target = view.split().target_domain.clone();
    let train_ids = view.train_ids();
    let val_ids = view.val_ids();
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::Dataset("split has an empty training or validation pool".into()));
    }

    let mut model = Model::init(BackboneConfig {
        seed,
        ..backbone.clone()
    })?;
    let mut state = AdamState::new(model.params().len());
    let mut rng = rng::rng_from(seed, &[rng::tag("train"), view.split().target as u64]);
    let eval_every = cfg.eval_every.unwrap_or_else(|| train_ids.len().div_ceil(cfg.batch_size));
    let classes = dataset.num_classes();

    let validate = |m: &Model| evaluate(m, val_ids.iter().map(|&i| view.sample(i)));
    let mut metrics = Vec::new();
    let mut val_curve = Vec::new();

    let v0 = validate(&model)?;
    metrics.push(MetricRecord {
        step: 0,
        val_acc: Some(v0),
        ..Default::default()
    });
    val_curve.push((0, v0));
    let mut best = (0usize, v0, model.clone(), state.clone());

    let mut step = 0usize;
    let mut epoch = 0u64;
    while step < cfg.max_steps {
        let plan = batch_plan(train_ids, cfg.batch_size, rng::derive_seed(seed, &[rng::tag("epoch"), epoch]))?;
        for chunk in plan {
            if step >= cfg.max_steps {
                break;
            }
            let batch = Batch::gather(&chunk, classes, |i| view.sample(i));
            let trace = train_step(&mut model, &mut state, &batch, policy, cfg, &mut rng, step, aug_mode)?;
            step += 1;
            let b = trace.breakdown;
            metrics.push(MetricRecord {
                step,
                ce: Some(b.ce),
                ibsd: Some(b.ibsd),
                agsd: Some(b.agsd),
                total: Some(b.total),
                block_index: trace.block_index,
                ..Default::default()
            });
            if step % eval_every == 0 || step == cfg.max_steps {
                let v = validate(&model)?;
                metrics.push(MetricRecord {
                    step,
                    val_acc: Some(v),
                    ..Default::default()
                });
                val_curve.push((step, v));
                if v > best.1 {
                    best = (step, v, model.clone(), state.clone());
                }
            }
        }
        epoch += 1;
    }

    let curve: Vec<f64> = val_curve.iter().map(|&(_, v)| v).collect();
    let chosen = select_best(&curve).expect("at least one evaluation");
    debug_assert_eq!(val_curve[chosen].0, best.0);

    let (best_step, best_val_acc, best_model, best_optimizer) = best;
    let test_ids = view.release_test();
    let test_acc = evaluate(&best_model, test_ids.iter().map(|&i| view.sample(i)))?;
    metrics.push(MetricRecord {
        step: best_step,
        test_acc: Some(test_acc),
        ..Default::default()
    });
    Ok(FitResult {
        seed,
        target,
        best_step,
        best_val_acc,
        test_acc,
        val_curve,
        metrics,
        best_model,
        best_optimizer,
    })
}
