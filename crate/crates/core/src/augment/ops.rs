//! Pixel-level operations. Every function maps an image in `[0, 1]` to an
//! image of the same shape in `[0, 1]`.
//!
//! | op            | level 0..9 maps to                    | signed |
//! |---------------|---------------------------------------|--------|
//! | shear_x/y     | shear factor `0.3 * l / 9`            | yes    |
//! | translate_x/y | `(150/331) * size * l / 9` pixels     | yes    |
//! | rotate        | `30 * l / 9` degrees                  | yes    |
//! | color         | factor `1 +/- 0.9 * l / 9`            | yes    |
//! | contrast      | factor `1 +/- 0.9 * l / 9`            | yes    |
//! | brightness    | factor `1 +/- 0.9 * l / 9`            | yes    |
//! | sharpness     | factor `1 +/- 0.9 * l / 9`            | yes    |
//! | posterize     | bits `8 - round(4 * l / 9)`           | no     |
//! | solarize      | threshold `1 - l / 9`                 | no     |
//! | autocontrast, equalize, invert | level ignored        | no     |
//!
//! Geometric ops use nearest-neighbour sampling and fill vacated pixels with
//! 0.5. On single-channel images `color` is the identity and the grayscale
//! used by `contrast` is the channel itself.

use crate::pixels::{clamp01, from_u8, to_u8, ImageShape};

pub const FILL: f64 = 0.5;

/// Grayscale plane (ITU-R 601 luma for RGB, channel mean otherwise).
fn grayscale(img: &[f64], shape: ImageShape) -> Vec<f64> {
    let plane = shape.plane();
    match shape.channels {
        1 => img.to_vec(),
        3 => (0..plane)
            .map(|i| 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i])
            .collect(),
        c => (0..plane)
            .map(|i| (0..c).map(|ch| img[ch * plane + i]).sum::<f64>() / c as f64)
            .collect(),
    }
}

fn blend(degenerate: &[f64], img: &[f64], factor: f64) -> Vec<f64> {
    degenerate
        .iter()
        .zip(img)
        .map(|(d, x)| clamp01(d + factor * (x - d)))
        .collect()
}

/// Resamples with an inverse map from output pixel centres to source
/// coordinates.
fn remap(img: &[f64], shape: ImageShape, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut out = vec![FILL; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse(x as f64 + 0.5, y as f64 + 0.5);
            let (sx, sy) = (sx.floor(), sy.floor());
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            for c in 0..shape.channels {
                out[(c * h + y) * w + x] = img[(c * h + sy) * w + sx];
            }
        }
    }
    out
}

pub fn shear_x(img: &[f64], shape: ImageShape, m: f64) -> Vec<f64> {
    remap(img, shape, |x, y| (x + m * y, y))
}

pub fn shear_y(img: &[f64], shape: ImageShape, m: f64) -> Vec<f64> {
    remap(img, shape, |x, y| (x, y + m * x))
}

pub fn translate_x(img: &[f64], shape: ImageShape, pixels: f64) -> Vec<f64> {
    remap(img, shape, |x, y| (x + pixels, y))
}

pub fn translate_y(img: &[f64], shape: ImageShape, pixels: f64) -> Vec<f64> {
    remap(img, shape, |x, y| (x, y + pixels))
}

/// Counter-clockwise rotation about the image centre.
pub fn rotate(img: &[f64], shape: ImageShape, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = shape.width as f64 / 2.0;
    let cy = shape.height as f64 / 2.0;
    remap(img, shape, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        // image y grows downward, so a visual CCW turn uses this sign pattern
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

pub fn color(img: &[f64], shape: ImageShape, factor: f64) -> Vec<f64> {
    if shape.channels == 1 {
        return img.to_vec();
    }
    let gray = grayscale(img, shape);
    let degenerate: Vec<f64> = (0..shape.channels).flat_map(|_| gray.iter().copied()).collect();
    blend(&degenerate, img, factor)
}

pub fn contrast(img: &[f64], shape: ImageShape, factor: f64) -> Vec<f64> {
    let gray = grayscale(img, shape);
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    blend(&vec![mean; img.len()], img, factor)
}

pub fn brightness(img: &[f64], factor: f64) -> Vec<f64> {
    blend(&vec![0.0; img.len()], img, factor)
}

/// Blend with a 3x3 smoothed copy (centre weight 5, others 1); border pixels
/// of the smoothed copy keep their original value.
pub fn sharpness(img: &[f64], shape: ImageShape, factor: f64) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut smooth = img.to_vec();
    if h >= 3 && w >= 3 {
        for c in 0..shape.channels {
            let p = &img[c * h * w..(c + 1) * h * w];
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let mut acc = 4.0 * p[y * w + x];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            acc += p[(y + dy - 1) * w + x + dx - 1];
                        }
                    }
                    smooth[c * h * w + y * w + x] = acc / 13.0;
                }
            }
        }
    }
    blend(&smooth, img, factor)
}

pub fn posterize(img: &[f64], bits: u32) -> Vec<f64> {
    let mask: u8 = !((1u16 << (8 - bits.min(8))) - 1) as u8;
    img.iter().map(|&v| from_u8(to_u8(v) & mask)).collect()
}

pub fn solarize(img: &[f64], threshold: f64) -> Vec<f64> {
    img.iter()
        .map(|&v| if v >= threshold { 1.0 - v } else { v })
        .collect()
}

pub fn autocontrast(img: &[f64], shape: ImageShape) -> Vec<f64> {
    let plane = shape.plane();
    let mut out = img.to_vec();
    for c in 0..shape.channels {
        let ch = &mut out[c * plane..(c + 1) * plane];
        let lo = ch.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            ch.iter_mut().for_each(|v| *v = clamp01((*v - lo) / (hi - lo)));
        }
    }
    out
}

/// Per-channel histogram equalization on 256 levels.
pub fn equalize(img: &[f64], shape: ImageShape) -> Vec<f64> {
    let plane = shape.plane();
    let mut out = img.to_vec();
    for c in 0..shape.channels {
        let ch = &mut out[c * plane..(c + 1) * plane];
        let levels: Vec<u8> = ch.iter().map(|&v| to_u8(v)).collect();
        let mut hist = [0usize; 256];
        for &l in &levels {
            hist[l as usize] += 1;
        }
        let last = hist.iter().rposition(|&n| n > 0).unwrap_or(0);
        let step = (plane - hist[last]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255) as u8;
            n += hist[i];
        }
        for (v, &l) in ch.iter_mut().zip(&levels) {
            *v = from_u8(lut[l as usize]);
        }
    }
    out
}

pub fn hflip(img: &[f64], shape: ImageShape) -> Vec<f64> {
    let w = shape.width;
    img.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

pub fn invert(img: &[f64]) -> Vec<f64> {
    img.iter().map(|v| 1.0 - v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: ImageShape) -> Vec<f64> {
        (0..shape.len()).map(|i| (i % 17) as f64 / 16.0).collect()
    }

    #[test]
    fn zero_magnitude_geometry_is_identity() {
        let s = ImageShape::square(3, 6);
        let img = ramp(s);
        assert_eq!(shear_x(&img, s, 0.0), img);
        assert_eq!(shear_y(&img, s, 0.0), img);
        assert_eq!(translate_x(&img, s, 0.0), img);
        assert_eq!(rotate(&img, s, 0.0), img);
    }

    #[test]
    fn translate_fills_gray() {
        let s = ImageShape::square(1, 4);
        let img = vec![1.0; 16];
        let out = translate_x(&img, s, 2.0);
        for y in 0..4 {
            assert_eq!(&out[y * 4..y * 4 + 4], &[1.0, 1.0, FILL, FILL]);
        }
    }

    #[test]
    fn rotate_quarter_turn_moves_corner() {
        let s = ImageShape::square(1, 4);
        let mut img = vec![0.0; 16];
        img[0] = 1.0; // top-left
        let out = rotate(&img, s, 90.0);
        // counter-clockwise: top-left goes to bottom-left
        assert_eq!(out[12], 1.0);
        assert_eq!(out.iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn unit_factors_are_identity() {
        let s = ImageShape::square(3, 5);
        let img = ramp(s);
        for out in [color(&img, s, 1.0), contrast(&img, s, 1.0), brightness(&img, 1.0), sharpness(&img, s, 1.0)] {
            for (a, b) in out.iter().zip(&img) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterize_and_solarize() {
        assert_eq!(posterize(&[1.0, 0.0], 1), vec![128.0 / 255.0, 0.0]);
        assert_eq!(posterize(&[200.0 / 255.0], 8), vec![200.0 / 255.0]);
        assert_eq!(solarize(&[0.2, 0.8], 0.5), vec![0.2, 1.0 - 0.8]);
        assert_eq!(solarize(&[0.2, 0.8], 1.0), vec![0.2, 0.8]);
    }

    #[test]
    fn equalize_spreads_levels() {
        // 1024 pixels over 4 adjacent levels; PIL maps them to 0, 85, 171, 255.
        let s = ImageShape::square(1, 32);
        let img: Vec<f64> = (0..1024).map(|i| from_u8(100 + (i % 4) as u8)).collect();
        let out = equalize(&img, s);
        assert_eq!(&out[..4], &[0.0, 85.0 / 255.0, 171.0 / 255.0, 1.0]);
        // too few pixels for a non-zero step, and constant images: unchanged
        let small = ImageShape::square(1, 4);
        assert_eq!(equalize(&img[..16], small), img[..16].to_vec());
        let flat = vec![0.3; 1024];
        assert_eq!(equalize(&flat, s), flat);
    }

    #[test]
    fn autocontrast_stretches() {
        let s = ImageShape::square(1, 2);
        let out = autocontrast(&[0.2, 0.4, 0.6, 0.3], s);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[2], 1.0);
    }

    #[test]
    fn color_on_single_channel_is_identity() {
        let s = ImageShape::square(1, 3);
        let img = ramp(s);
        assert_eq!(color(&img, s, 0.1), img);
    }
}
