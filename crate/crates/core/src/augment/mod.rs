//! Stochastic two-operation sub-policies in the AutoAugment style.
//!
//! Applying a policy picks one sub-policy uniformly at random and then runs
//! its two operations in order, each one firing independently with its own
//! probability. Operations with a signed magnitude flip direction with
//! probability 1/2.

pub mod ops;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{de, Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::pixels::{check_range, ImageShape};
use crate::rng::Rng;

pub const POLICY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpName {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Color,
    Posterize,
    Solarize,
    Contrast,
    Sharpness,
    Brightness,
    Autocontrast,
    Equalize,
    Invert,
}

impl OpName {
    pub const ALL: [OpName; 14] = [
        OpName::ShearX,
        OpName::ShearY,
        OpName::TranslateX,
        OpName::TranslateY,
        OpName::Rotate,
        OpName::Color,
        OpName::Posterize,
        OpName::Solarize,
        OpName::Contrast,
        OpName::Sharpness,
        OpName::Brightness,
        OpName::Autocontrast,
        OpName::Equalize,
        OpName::Invert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpName::ShearX => "shear_x",
            OpName::ShearY => "shear_y",
            OpName::TranslateX => "translate_x",
            OpName::TranslateY => "translate_y",
            OpName::Rotate => "rotate",
            OpName::Color => "color",
            OpName::Posterize => "posterize",
            OpName::Solarize => "solarize",
            OpName::Contrast => "contrast",
            OpName::Sharpness => "sharpness",
            OpName::Brightness => "brightness",
            OpName::Autocontrast => "autocontrast",
            OpName::Equalize => "equalize",
            OpName::Invert => "invert",
        }
    }

    fn signed(self) -> bool {
        matches!(
            self,
            OpName::ShearX
                | OpName::ShearY
                | OpName::TranslateX
                | OpName::TranslateY
                | OpName::Rotate
                | OpName::Color
                | OpName::Contrast
                | OpName::Sharpness
                | OpName::Brightness
        )
    }
}

impl fmt::Display for OpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpName::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unsupported augmentation op '{s}'")))
    }
}

fn probability<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    let p = f64::deserialize(d)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(de::Error::custom(format!("probability {p} outside [0, 1]")));
    }
    Ok(p)
}

fn magnitude<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u8, D::Error> {
    let m = u64::deserialize(d)?;
    if m > 9 {
        return Err(de::Error::custom(format!("magnitude level {m} outside 0..=9")));
    }
    Ok(m as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentOp {
    pub op: OpName,
    #[serde(deserialize_with = "probability")]
    pub probability: f64,
    #[serde(deserialize_with = "magnitude", default)]
    pub magnitude: u8,
}

impl AugmentOp {
    pub fn new(op: OpName, probability: f64, magnitude: u8) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::Config(format!("probability {probability} outside [0, 1]")));
        }
        if magnitude > 9 {
            return Err(Error::Config(format!("magnitude level {magnitude} outside 0..=9")));
        }
        Ok(AugmentOp {
            op,
            probability,
            magnitude,
        })
    }

    /// Runs the operation unconditionally with the given direction.
    pub fn run(&self, image: &[f64], shape: ImageShape, negate: bool) -> Vec<f64> {
        let level = self.magnitude as f64 / 9.0;
        let sign = if negate && self.op.signed() { -1.0 } else { 1.0 };
        let enhance = 1.0 + sign * 0.9 * level;
        match self.op {
            OpName::ShearX => ops::shear_x(image, shape, sign * 0.3 * level),
            OpName::ShearY => ops::shear_y(image, shape, sign * 0.3 * level),
            OpName::TranslateX => {
                ops::translate_x(image, shape, sign * 150.0 / 331.0 * shape.width as f64 * level)
            }
            OpName::TranslateY => {
                ops::translate_y(image, shape, sign * 150.0 / 331.0 * shape.height as f64 * level)
            }
            OpName::Rotate => ops::rotate(image, shape, sign * 30.0 * level),
            OpName::Color => ops::color(image, shape, enhance),
            OpName::Contrast => ops::contrast(image, shape, enhance),
            OpName::Brightness => ops::brightness(image, enhance),
            OpName::Sharpness => ops::sharpness(image, shape, enhance),
            OpName::Posterize => ops::posterize(image, 8 - (4.0 * level).round() as u32),
            OpName::Solarize => ops::solarize(image, 1.0 - level),
            OpName::Autocontrast => ops::autocontrast(image, shape),
            OpName::Equalize => ops::equalize(image, shape),
            OpName::Invert => ops::invert(image),
        }
    }
}

pub type SubPolicy = [AugmentOp; 2];

fn nonempty<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<SubPolicy>, D::Error> {
    let v = Vec::<SubPolicy>::deserialize(d)?;
    if v.is_empty() {
        return Err(de::Error::custom("policy has no sub-policies"));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub schema_version: u32,
    #[serde(deserialize_with = "nonempty")]
    pub sub_policies: Vec<SubPolicy>,
}

impl AugmentPolicy {
    pub fn new(sub_policies: Vec<SubPolicy>) -> Result<Self> {
        if sub_policies.is_empty() {
            return Err(Error::Config("policy has no sub-policies".into()));
        }
        Ok(AugmentPolicy {
            schema_version: POLICY_SCHEMA_VERSION,
            sub_policies,
        })
    }

    /// Pretty JSON, one field per line.
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("policy serializes");
        s.push('\n');
        s
    }

    /// Augments one image.
    pub fn apply(&self, image: &[f64], shape: ImageShape, rng: &mut Rng) -> Result<Vec<f64>> {
        shape.check(image)?;
        check_range(image)?;
        let sub = &self.sub_policies[rng.random_range(0..self.sub_policies.len())];
        let mut out = image.to_vec();
        for op in sub {
            let fire = rng.random::<f64>() < op.probability;
            let negate = rng.random::<bool>();
            if fire {
                out = op.run(&out, shape, negate);
            }
        }
        Ok(out)
    }

    /// Augments every image of a `(batch, C, H, W)` buffer in order.
    pub fn apply_batch(&self, images: &[f64], shape: ImageShape, rng: &mut Rng) -> Result<Vec<f64>> {
        if shape.is_empty() || images.len() % shape.len() != 0 {
            return Err(Error::Dimension(format!(
                "batch of {} values is not a multiple of image size {}",
                images.len(),
                shape.len()
            )));
        }
        let mut out = Vec::with_capacity(images.len());
        for img in images.chunks(shape.len()) {
            out.extend(self.apply(img, shape, rng)?);
        }
        Ok(out)
    }
}

/// Parses a policy document. Errors carry the line of the offending entry.
pub fn parse_policy(text: &str) -> Result<AugmentPolicy> {
    let policy: AugmentPolicy = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if policy.schema_version != POLICY_SCHEMA_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported policy schema_version {}", policy.schema_version),
        });
    }
    Ok(policy)
}

/// The 25 ImageNet sub-policies found by the AutoAugment search, in their
/// published order. Magnitudes for level-free ops are stored as 0.
pub fn default_policy() -> AugmentPolicy {
    use OpName::*;
    let table: [((OpName, f64, u8), (OpName, f64, u8)); 25] = [
        ((Posterize, 0.4, 8), (Rotate, 0.6, 9)),
        ((Solarize, 0.6, 5), (Autocontrast, 0.6, 0)),
        ((Equalize, 0.8, 0), (Equalize, 0.6, 0)),
        ((Posterize, 0.6, 7), (Posterize, 0.6, 6)),
        ((Equalize, 0.4, 0), (Solarize, 0.2, 4)),
        ((Equalize, 0.4, 0), (Rotate, 0.8, 8)),
        ((Solarize, 0.6, 3), (Equalize, 0.6, 0)),
        ((Posterize, 0.8, 5), (Equalize, 1.0, 0)),
        ((Rotate, 0.2, 3), (Solarize, 0.6, 8)),
        ((Equalize, 0.6, 0), (Posterize, 0.4, 6)),
        ((Rotate, 0.8, 8), (Color, 0.4, 0)),
        ((Rotate, 0.4, 9), (Equalize, 0.6, 0)),
        ((Equalize, 0.0, 0), (Equalize, 0.8, 0)),
        ((Invert, 0.6, 0), (Equalize, 1.0, 0)),
        ((Color, 0.6, 4), (Contrast, 1.0, 8)),
        ((Rotate, 0.8, 8), (Color, 1.0, 2)),
        ((Color, 0.8, 8), (Solarize, 0.8, 7)),
        ((Sharpness, 0.4, 7), (Invert, 0.6, 0)),
        ((ShearX, 0.6, 5), (Equalize, 1.0, 0)),
        ((Color, 0.4, 0), (Equalize, 0.6, 0)),
        ((Equalize, 0.4, 0), (Solarize, 0.2, 4)),
        ((Solarize, 0.6, 5), (Autocontrast, 0.6, 0)),
        ((Invert, 0.6, 0), (Equalize, 1.0, 0)),
        ((Color, 0.6, 4), (Contrast, 1.0, 8)),
        ((Equalize, 0.8, 0), (Equalize, 0.6, 0)),
    ];
    let op = |(name, p, m): (OpName, f64, u8)| AugmentOp {
        op: name,
        probability: p,
        magnitude: m,
    };
    AugmentPolicy {
        schema_version: POLICY_SCHEMA_VERSION,
        sub_policies: table.iter().map(|&(a, b)| [op(a), op(b)]).collect(),
    }
}

/// Random horizontal flip plus a random shift of up to 1/8 of the size,
/// filled with gray. Applied before the policy when enabled.
pub fn base_augment(image: &[f64], shape: ImageShape, rng: &mut Rng) -> Vec<f64> {
    let flip = rng.random::<bool>();
    let max_shift = (shape.width.min(shape.height) / 8) as i64;
    let dx = rng.random_range(-max_shift..=max_shift) as f64;
    let dy = rng.random_range(-max_shift..=max_shift) as f64;
    let flipped = if flip {
        ops::hflip(image, shape)
    } else {
        image.to_vec()
    };
    let shifted = ops::translate_x(&flipped, shape, dx);
    ops::translate_y(&shifted, shape, dy)
}
