//! Training loop, model selection on the unified validation set, and the
//! multi-seed leave-one-domain-out driver.

mod fit;
mod optim;
mod protocol;
mod step;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

pub use fit::{evaluate, fit, select_best, Classifier, FitResult, MetricRecord};
pub use optim::{AdamState, AdamW};
pub use protocol::{mean_std, run_protocol, RunResult, SeedResult, TargetResult};
pub use step::{
    loss_and_grad, loss_value, plan_step, train_step, AugGradient, StepGradients, StepPlan, StepTrace,
};

/// Which loss terms and inputs a training step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Cross-entropy on clean images.
    #[serde(rename = "ERM")]
    Erm,
    /// Cross-entropy on augmented images.
    #[serde(rename = "ERM_AA")]
    ErmAa,
    /// Cross-entropy plus the intermediate-block term.
    #[serde(rename = "IBSD_only")]
    IbsdOnly,
    /// Cross-entropy plus the augmentation term.
    #[serde(rename = "AGSD_only")]
    AgsdOnly,
    /// Cross-entropy plus both distillation terms.
    #[serde(rename = "RRLD")]
    Rrld,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Erm, Variant::ErmAa, Variant::IbsdOnly, Variant::AgsdOnly, Variant::Rrld];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Erm => "ERM",
            Variant::ErmAa => "ERM_AA",
            Variant::IbsdOnly => "IBSD_only",
            Variant::AgsdOnly => "AGSD_only",
            Variant::Rrld => "RRLD",
        }
    }

    pub fn uses_ibsd(self) -> bool {
        matches!(self, Variant::IbsdOnly | Variant::Rrld)
    }

    pub fn uses_agsd(self) -> bool {
        matches!(self, Variant::AgsdOnly | Variant::Rrld)
    }

    /// Whether a step needs an augmented copy of the batch.
    pub fn uses_augmentation(self) -> bool {
        matches!(self, Variant::ErmAa | Variant::AgsdOnly | Variant::Rrld)
    }

    /// Loss weights actually in force for this variant.
    pub fn effective(self, loss: &LossConfig) -> LossConfig {
        LossConfig {
            lambda: if self.uses_ibsd() { loss.lambda } else { 0.0 },
            gamma: if self.uses_agsd() { loss.gamma } else { 0.0 },
            ..loss.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown variant '{s}' (expected one of {})",
                Variant::ALL.map(Variant::as_str).join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_steps: usize,
    /// Steps between validation passes; one epoch of the training pool when
    /// unset.
    #[serde(default)]
    pub eval_every: Option<usize>,
    pub seeds: Vec<u64>,
    pub variant: Variant,
    /// Inclusive range of blocks eligible for the tap; `1..=depth-1` when
    /// unset.
    #[serde(default)]
    pub tap_range: Option<(usize, usize)>,
    /// Random flip and shift applied to the clean input before anything else.
    #[serde(default)]
    pub base_augment: bool,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Target domains to hold out; every domain when unset.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            learning_rate: 5e-5,
            batch_size: 32,
            weight_decay: 0.01,
            max_steps: 2000,
            eval_every: None,
            seeds: vec![0, 1, 2],
            variant: Variant::Rrld,
            tap_range: None,
            base_augment: false,
            grad_clip: None,
            targets: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.learning_rate, self.weight_decay)
    }
}
