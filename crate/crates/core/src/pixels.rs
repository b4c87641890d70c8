use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major image geometry; pixels are `f64` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn square(channels: usize, size: usize) -> Self {
        ImageShape {
            channels,
            height: size,
            width: size,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn check(&self, image: &[f64]) -> Result<()> {
        if image.len() != self.len() {
            return Err(Error::Dimension(format!(
                "image has {} values, expected {}x{}x{}",
                image.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

/// Fails unless every value is finite and inside `[0, 1]`.
pub fn check_range(image: &[f64]) -> Result<()> {
    if let Some((i, v)) = image
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::Value(format!("pixel {i} = {v} outside [0, 1]")));
    }
    Ok(())
}

pub fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub fn to_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}
