//! One optimisation step:
//!
//! 1. `x_a = policy(x)`
//! 2. draw the tapped block `i`
//! 3. `(l_n, l_i)` from one recorded forward pass on `x`
//! 4. `y_hat = softmax(l_n)`
//! 5. `l_an` from a forward pass on `x_a` whose values are constants
//! 6. `loss = ce(y, y_hat) + gamma * kl_t2(l_n, l_an) + lambda * kl_t1(l_n, l_i)`
//! 7. backpropagate and update
//!
//! Terms disabled by the variant are neither computed nor backpropagated and
//! are reported as 0.

use crate::augment::{base_augment, AugmentPolicy};
use crate::backbone::{sample_block_in, sample_block_index, Model};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{
    agsd_loss, cross_entropy, cross_entropy_grad, ibsd_loss, kl_grads, softmax_rows, total_loss, Detached,
    LossBreakdown, Logits,
};
use crate::pixels::ImageShape;
use crate::rng::Rng;

use super::{AdamState, TrainConfig, Variant};

/// Randomness drawn for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    /// Clean input after the optional base augmentation.
    pub base: Option<Vec<f64>>,
    pub augmented: Option<Vec<f64>>,
    pub block_index: Option<usize>,
}

/// How the augmented forward pass relates to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugGradient {
    /// Forward pass without recording anything.
    Halted,
    /// Recorded forward pass whose logits are then copied out as constants.
    FrozenCopy,
    /// Fault injection: gradients also flow through the augmented pass.
    Live,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub breakdown: LossBreakdown,
    pub block_index: Option<usize>,
    /// Logits entering the cross-entropy (clean input, or augmented input for
    /// `ERM_AA`).
    pub final_logits: Logits,
    pub tapped_logits: Option<Logits>,
    pub aug_logits: Option<Logits>,
    pub one_hot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    /// Gradient applied to the parameters.
    pub total: Vec<f64>,
    /// Part of `total` that arrived through the augmented forward pass.
    pub through_augmented: Vec<f64>,
}

impl StepGradients {
    pub fn norm(&self) -> f64 {
        self.total.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn shape_of(model: &Model) -> ImageShape {
    let c = model.config();
    ImageShape::square(c.in_channels, c.image_size)
}

/// Draws the augmented batch and tapped block for one step, in that order.
pub fn plan_step(
    model: &Model,
    batch: &Batch,
    policy: &AugmentPolicy,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepPlan> {
    let shape = shape_of(model);
    let base = if cfg.base_augment {
        let mut out = Vec::with_capacity(batch.images.len());
        for img in batch.images.chunks(shape.len()) {
            out.extend(base_augment(img, shape, rng));
        }
        Some(out)
    } else {
        None
    };
    let x = base.as_deref().unwrap_or(&batch.images);
    let augmented = if cfg.variant.uses_augmentation() {
        Some(policy.apply_batch(x, shape, rng)?)
    } else {
        None
    };
    let depth = model.config().depth;
    let block_index = if cfg.variant.uses_ibsd() {
        Some(match cfg.tap_range {
            Some((lo, hi)) => sample_block_in(rng, depth, lo, hi)?,
            None => sample_block_index(rng, depth)?,
        })
    } else {
        None
    };
    Ok(StepPlan {
        base,
        augmented,
        block_index,
    })
}

fn scaled(l: &Logits, s: f64) -> Logits {
    Logits::from_vec(l.rows(), l.classes(), l.as_slice().iter().map(|v| v * s).collect()).expect("same shape")
}

fn add_into(acc: &mut Logits, other: &Logits) {
    for r in 0..acc.rows() {
        for (a, b) in acc.row_mut(r).iter_mut().zip(other.row(r)) {
            *a += b;
        }
    }
}

fn augmented_of(plan: &StepPlan) -> Result<&[f64]> {
    plan.augmented
        .as_deref()
        .ok_or_else(|| Error::Contract("variant needs an augmented batch but the plan has none".into()))
}

/// Loss breakdown and gradients for a planned step. Parameters are untouched.
pub fn loss_and_grad(
    model: &Model,
    batch: &Batch,
    plan: &StepPlan,
    cfg: &TrainConfig,
    aug_mode: AugGradient,
) -> Result<(StepTrace, StepGradients)> {
    let variant = cfg.variant;
    let weights = variant.effective(&cfg.loss);
    let x = plan.base.as_deref().unwrap_or(&batch.images);
    let ce_input = if variant == Variant::ErmAa { augmented_of(plan)? } else { x };
    let tap = if variant.uses_ibsd() {
        Some(plan.block_index.ok_or_else(|| Error::Contract("plan has no tapped block".into()))?)
    } else {
        None
    };

    let cache = model.forward_recorded(ce_input, tap)?;
    let l_n = cache.final_logits();
    let probs = softmax_rows(l_n)?;
    let ce = cross_entropy(&batch.one_hot, probs.as_slice(), l_n.classes())?;
    let mut d_final = cross_entropy_grad(l_n, &batch.one_hot)?;

    let mut d_tap = None;
    let mut ibsd = 0.0;
    if let Some(l_i) = cache.tapped_logits() {
        ibsd = ibsd_loss(l_n, l_i, weights.t1)?;
        let (d_teacher, d_student) = kl_grads(l_n, l_i, weights.t1)?;
        if !weights.detach_ibsd_teacher {
            add_into(&mut d_final, &scaled(&d_teacher, weights.lambda));
        }
        d_tap = Some(scaled(&d_student, weights.lambda));
    }

    let mut agsd = 0.0;
    let mut aug_logits = None;
    let mut through_augmented = vec![0.0; model.params().len()];
    if variant.uses_agsd() {
        let x_a = augmented_of(plan)?;
        let (l_an, live_cache): (Detached, _) = match aug_mode {
            AugGradient::Halted => (model.forward_final(x_a)?.detach(), None),
            AugGradient::FrozenCopy => (model.forward_recorded(x_a, None)?.final_logits().detach(), None),
            AugGradient::Live => {
                let c = model.forward_recorded(x_a, None)?;
                (c.final_logits().detach(), Some(c))
            }
        };
        agsd = agsd_loss(l_n, &l_an, weights.t2)?;
        let (d_teacher, d_student) = kl_grads(l_n, l_an.logits(), weights.t2)?;
        add_into(&mut d_final, &scaled(&d_teacher, weights.gamma));
        if let Some(c) = live_cache {
            model.backward(&c, &scaled(&d_student, weights.gamma), None, &mut through_augmented)?;
        }
        aug_logits = Some(l_an.logits().clone());
    }

    let mut total = through_augmented.clone();
    model.backward(&cache, &d_final, d_tap.as_ref(), &mut total)?;

    let breakdown = LossBreakdown {
        ce,
        ibsd,
        agsd,
        total: ce + weights.lambda * ibsd + weights.gamma * agsd,
    };
    Ok((
        StepTrace {
            breakdown,
            block_index: tap,
            final_logits: l_n.clone(),
            tapped_logits: cache.tapped_logits().cloned(),
            aug_logits,
            one_hot: batch.one_hot.clone(),
        },
        StepGradients {
            total,
            through_augmented,
        },
    ))
}

/// Loss of a planned step with the augmented logits held fixed at
/// `frozen_aug`. Used as the finite-difference target.
pub fn loss_value(
    model: &Model,
    batch: &Batch,
    plan: &StepPlan,
    cfg: &TrainConfig,
    frozen_aug: Option<&Detached>,
) -> Result<LossBreakdown> {
    let variant = cfg.variant;
    let weights = variant.effective(&cfg.loss);
    let x = plan.base.as_deref().unwrap_or(&batch.images);
    let ce_input = if variant == Variant::ErmAa { augmented_of(plan)? } else { x };
    let (l_n, l_i) = match plan.block_index.filter(|_| variant.uses_ibsd()) {
        Some(i) => {
            let t = model.forward_with_tap(ce_input, i)?;
            (t.final_logits, Some(t.tapped_logits))
        }
        None => (model.forward_final(ce_input)?, None),
    };
    let probs = softmax_rows(&l_n)?;
    let ce = cross_entropy(&batch.one_hot, probs.as_slice(), l_n.classes())?;
    let ibsd = match &l_i {
        Some(l_i) => ibsd_loss(&l_n, l_i, weights.t1)?,
        None => 0.0,
    };
    let agsd = if variant.uses_agsd() {
        let l_an = frozen_aug.ok_or_else(|| Error::Contract("frozen augmented logits required".into()))?;
        agsd_loss(&l_n, l_an, weights.t2)?
    } else {
        0.0
    };
    total_loss(ce, ibsd, agsd, &weights)
}

/// Runs one full step and applies the optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    batch: &Batch,
    policy: &AugmentPolicy,
    cfg: &TrainConfig,
    rng: &mut Rng,
    step: usize,
    aug_mode: AugGradient,
) -> Result<StepTrace> {
    let plan = plan_step(model, batch, policy, cfg, rng)?;
    let (trace, mut grads) = loss_and_grad(model, batch, &plan, cfg, aug_mode)?;
    let b = &trace.breakdown;
    for (name, v) in [("ce", b.ce), ("ibsd", b.ibsd), ("agsd", b.agsd), ("total", b.total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                component: name.into(),
                grad_norm: grads.norm(),
            });
        }
    }
    let norm = grads.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            step,
            component: "gradient".into(),
            grad_norm: norm,
        });
    }
    if let Some(clip) = cfg.grad_clip {
        if norm > clip {
            let s = clip / norm;
            grads.total.iter_mut().for_each(|g| *g *= s);
        }
    }
    cfg.optimizer().update(model.params_mut(), &grads.total, state)?;
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            step,
            component: "parameters".into(),
            grad_norm: norm,
        });
    }
    Ok(trace)
}
