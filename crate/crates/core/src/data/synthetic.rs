//! Procedural multi-domain glyph images. The class decides which glyph is
//! drawn; the domain decides how it is rendered (palette, stroke weight,
//! background texture). Every domain shares the same label function, so a
//! change of domain is a pure covariate shift.
//!
//! Foreground is always brighter than background. Palettes differ by hue,
//! spread over 40% of the colour wheel: enough that per-channel cues fail to
//! transfer, while luminance cues still do.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{MultiDomainDataset, Sample};
use crate::error::{Error, Result};
use crate::pixels::{clamp01, from_u8, to_u8, ImageShape};
use crate::rng;

pub const GLYPHS: [&str; 8] = [
    "circle",
    "square",
    "triangle",
    "plus",
    "diamond",
    "x_cross",
    "bar",
    "triangle_down",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub domains: usize,
    /// Images per class in each domain.
    pub per_domain: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            domains: 3,
            per_domain: 300,
            image_size: 32,
            channels: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=GLYPHS.len()).contains(&self.classes) {
            return fail(format!("classes must be in 2..={}, got {}", GLYPHS.len(), self.classes));
        }
        if self.domains < 2 {
            return fail(format!("domains must be >= 2, got {}", self.domains));
        }
        if self.per_domain < 10 {
            return fail(format!("per_domain must be >= 10, got {}", self.per_domain));
        }
        if self.image_size < 8 {
            return fail(format!("image_size must be >= 8, got {}", self.image_size));
        }
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    Flat,
    Stripes { freq: f64, angle: f64 },
    Checker { cell: f64 },
    Speckle,
}

#[derive(Debug, Clone)]
struct DomainStyle {
    fg: [f64; 3],
    bg: [f64; 3],
    texture: Texture,
    texture_amp: f64,
    weight: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn domain_style(k: usize, total: usize, seed: u64) -> DomainStyle {
    let mut r = rng::rng_from(seed, &[rng::tag("domain-style"), k as u64]);
    let hue = 0.4 * k as f64 / total as f64 + r.random_range(0.0..0.08);
    let fg = hsv(hue, r.random_range(0.5..0.9), r.random_range(0.85..1.0));
    let bg = hsv(hue + 0.5 + r.random_range(-0.1..0.1), r.random_range(0.3..0.7), r.random_range(0.15..0.35));
    let texture = match k % 4 {
        0 => Texture::Flat,
        1 => Texture::Stripes {
            freq: r.random_range(0.35..0.6),
            angle: r.random_range(0.0..std::f64::consts::PI),
        },
        2 => Texture::Checker {
            cell: r.random_range(2.0..4.0),
        },
        _ => Texture::Speckle,
    };
    // Stroke weight as a dilation of the glyph outline, in glyph radii.
    let weight = [0.0, 0.12, -0.1][k % 3];
    DomainStyle {
        fg,
        bg,
        texture,
        texture_amp: r.random_range(0.12..0.22),
        weight,
    }
}

fn box_sdf(x: f64, y: f64, bx: f64, by: f64) -> f64 {
    let qx = x.abs() - bx;
    let qy = y.abs() - by;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

fn triangle_sdf(x: f64, y: f64) -> f64 {
    let k = 3f64.sqrt();
    let mut px = x.abs() - 1.0;
    let mut py = y + 1.0 / k;
    if px + k * py > 0.0 {
        let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

/// Signed distance of glyph `class` at normalized position `(x, y)`, y up.
fn glyph_sdf(class: usize, x: f64, y: f64) -> f64 {
    let r45 = std::f64::consts::FRAC_1_SQRT_2;
    match class {
        0 => (x * x + y * y).sqrt() - 0.95,
        1 => box_sdf(x, y, 0.8, 0.8),
        2 => triangle_sdf(x, y + 0.15),
        3 => box_sdf(x, y, 1.0, 0.3).min(box_sdf(x, y, 0.3, 1.0)),
        4 => (x.abs() + y.abs() - 1.05) * r45,
        5 => {
            let (u, v) = (r45 * (x + y), r45 * (x - y));
            box_sdf(u, v, 1.05, 0.28).min(box_sdf(u, v, 0.28, 1.05))
        }
        6 => box_sdf(x, y, 1.0, 0.38),
        _ => triangle_sdf(x, -y + 0.15),
    }
}

fn render(class: usize, style: &DomainStyle, cfg: &SynthConfig, r: &mut rng::Rng) -> Vec<f64> {
    let s = cfg.image_size;
    let sf = s as f64;
    let radius = r.random_range(0.28..0.4) * sf;
    let cx = sf / 2.0 + r.random_range(-0.1..0.1) * sf;
    let cy = sf / 2.0 + r.random_range(-0.1..0.1) * sf;
    let (sin, cos) = r.random_range(-0.26..0.26f64).sin_cos();
    let jitter: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.05..0.05));
    let fg: [f64; 3] = std::array::from_fn(|c| clamp01(style.fg[c] + jitter[c]));
    let bg = style.bg;

    const SS: usize = 4;
    let mut out = vec![0.0; cfg.channels * s * s];
    for py in 0..s {
        for px in 0..s {
            let mut hits = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = (px as f64 + (sx as f64 + 0.5) / SS as f64 - cx) / radius;
                    let y = -(py as f64 + (sy as f64 + 0.5) / SS as f64 - cy) / radius;
                    let (u, v) = (cos * x - sin * y, sin * x + cos * y);
                    let d = glyph_sdf(class, u, v);
                    hits += (d <= style.weight) as usize;
                }
            }
            let cover = hits as f64 / (SS * SS) as f64;
            let tex = match style.texture {
                Texture::Flat => 0.0,
                Texture::Stripes { freq, angle } => {
                    (freq * (px as f64 * angle.cos() + py as f64 * angle.sin())).sin()
                }
                Texture::Checker { cell } => {
                    if ((px as f64 / cell).floor() + (py as f64 / cell).floor()) as i64 % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                Texture::Speckle => r.random_range(-1.0..1.0),
            } * style.texture_amp;
            let rgb: [f64; 3] =
                std::array::from_fn(|c| cover * fg[c] + (1.0 - cover) * clamp01(bg[c] + tex));
            let noise = r.random_range(-0.02..0.02);
            if cfg.channels == 1 {
                let l = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                out[py * s + px] = from_u8(to_u8(l + noise));
            } else {
                for (c, v) in rgb.iter().enumerate() {
                    out[(c * s + py) * s + px] = from_u8(to_u8(v + noise));
                }
            }
        }
    }
    out
}

/// Generates `per_domain` images of every class in each of `domains` domains,
/// so a domain holds `classes * per_domain` images. Labels cycle through the
/// classes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<MultiDomainDataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.domains * cfg.classes * cfg.per_domain);
    for k in 0..cfg.domains {
        let style = domain_style(k, cfg.domains, cfg.seed);
        for i in 0..cfg.classes * cfg.per_domain {
            let label = i % cfg.classes;
            let mut r = rng::rng_from(cfg.seed, &[rng::tag("sample"), k as u64, i as u64]);
            samples.push(Sample {
                image: render(label, &style, cfg, &mut r),
                label,
                domain: k,
            });
        }
    }
    MultiDomainDataset::new(
        ImageShape::square(cfg.channels, cfg.image_size),
        GLYPHS[..cfg.classes].iter().map(|s| s.to_string()).collect(),
        (0..cfg.domains).map(|k| format!("domain{k}")).collect(),
        samples,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 4,
            domains: 3,
            per_domain: 100,
            image_size: 16,
            channels: 3,
            seed: 1,
        }
    }

    #[test]
    fn counts_and_histogram() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.len(), 1200);
        assert_eq!(ds.domains().len(), 3);
        for d in 0..3 {
            let mut hist = [0usize; 4];
            for &i in &ds.domain_ids(d) {
                hist[ds.samples()[i].label] += 1;
            }
            let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
            assert_eq!((*lo, *hi), (100, 100), "{hist:?}");
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let other = generate_synthetic(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(generate_synthetic(&small()).unwrap(), other);
    }

    #[test]
    fn pixels_on_byte_grid() {
        let ds = generate_synthetic(&SynthConfig { channels: 1, ..small() }).unwrap();
        for s in ds.samples().iter().take(20) {
            for &v in &s.image {
                assert_eq!(from_u8(to_u8(v)), v);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { classes: 1, ..small() },
            SynthConfig { classes: 9, ..small() },
            SynthConfig { domains: 1, ..small() },
            SynthConfig { per_domain: 9, ..small() },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn glyphs_have_ink() {
        let style = DomainStyle {
            fg: [1.0; 3],
            bg: [0.0; 3],
            texture: Texture::Flat,
            texture_amp: 0.0,
            weight: 0.0,
        };
        let cfg = SynthConfig { channels: 1, ..small() };
        let masks: Vec<Vec<f64>> = (0..GLYPHS.len())
            .map(|c| render(c, &style, &cfg, &mut rng::seeded(0)))
            .collect();
        for (c, m) in masks.iter().enumerate() {
            let ink: f64 = m.iter().sum();
            assert!(ink > 10.0, "{} {}", GLYPHS[c], ink);
        }
        for a in 0..masks.len() {
            for b in a + 1..masks.len() {
                assert_ne!(masks[a], masks[b]);
            }
        }
    }
}
