//! `root/<domain>/<class>/<image>.png` directory layout.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{MultiDomainDataset, Sample};
use crate::error::{Error, Result};
use crate::pixels::{to_u8, ImageShape};

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn decode(path: &Path, image_size: usize, channels: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let size = image_size as u32;
    let img = if img.width() != size || img.height() != size {
        img.resize_exact(size, size, FilterType::Triangle)
    } else {
        img
    };
    let plane = image_size * image_size;
    let mut out = vec![0.0; channels * plane];
    match channels {
        1 => {
            for (i, p) in img.to_luma8().pixels().enumerate() {
                out[i] = p.0[0] as f64 / 255.0;
            }
        }
        3 => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = p.0[c] as f64 / 255.0;
                }
            }
        }
        c => return Err(Error::Config(format!("only 1 or 3 channels are supported, got {c}"))),
    }
    Ok(out)
}

/// Loads every png under `root/<domain>/<class>/`, resized to
/// `image_size x image_size`. Domains, classes and files are visited in
/// lexicographic order.
pub fn load_image_folder(root: &Path, image_size: usize, channels: usize) -> Result<MultiDomainDataset> {
    load_with_min(root, image_size, channels, 2)
}

/// Like [`load_image_folder`] but accepts a single domain. Used for clean
/// sources that are about to receive a corrupted second domain.
pub fn load_image_folder_any(root: &Path, image_size: usize, channels: usize) -> Result<MultiDomainDataset> {
    load_with_min(root, image_size, channels, 1)
}

fn load_with_min(root: &Path, image_size: usize, channels: usize, min_domains: usize) -> Result<MultiDomainDataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let domain_dirs = sorted_dirs(root)?;
    if domain_dirs.len() < min_domains {
        return Err(Error::Dataset(format!(
            "{} holds {} domain directories; at least {min_domains} required",
            root.display(),
            domain_dirs.len()
        )));
    }
    let class_sets: Vec<(String, BTreeSet<String>)> = domain_dirs
        .iter()
        .map(|d| Ok((name_of(d), sorted_dirs(d)?.iter().map(|c| name_of(c)).collect())))
        .collect::<Result<_>>()?;
    let all: BTreeSet<String> = class_sets.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
    let asym: Vec<String> = class_sets
        .iter()
        .filter(|(_, s)| *s != all)
        .map(|(d, s)| {
            let missing: Vec<&str> = all.difference(s).map(String::as_str).collect();
            format!("{d} lacks [{}]", missing.join(", "))
        })
        .collect();
    if !asym.is_empty() {
        return Err(Error::Dataset(format!("class sets differ across domains: {}", asym.join("; "))));
    }
    let classes: Vec<String> = all.into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Dataset("at least 2 shared classes are required".into()));
    }
    let mut samples = Vec::new();
    for (d, dir) in domain_dirs.iter().enumerate() {
        for (label, class) in classes.iter().enumerate() {
            for path in sorted_images(&dir.join(class))? {
                samples.push(Sample {
                    image: decode(&path, image_size, channels)?,
                    label,
                    domain: d,
                });
            }
        }
    }
    MultiDomainDataset::new(
        ImageShape::square(channels, image_size),
        classes,
        domain_dirs.iter().map(|d| name_of(d)).collect(),
        samples,
    )
}

/// Writes the dataset as 8-bit png files in the folder layout.
pub fn export_image_folder(dataset: &MultiDomainDataset, root: &Path) -> Result<()> {
    let shape = dataset.shape();
    let (w, h) = (shape.width as u32, shape.height as u32);
    let plane = shape.plane();
    let mut counters = vec![0usize; dataset.domains().len() * dataset.num_classes()];
    for s in dataset.samples() {
        let dir = root.join(&dataset.domains()[s.domain]).join(&dataset.classes()[s.label]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let slot = &mut counters[s.domain * dataset.num_classes() + s.label];
        let path = dir.join(format!("{:05}.png", *slot));
        *slot += 1;
        let result = match shape.channels {
            1 => image::GrayImage::from_fn(w, h, |x, y| image::Luma([to_u8(s.image[(y * w + x) as usize])]))
                .save(&path),
            3 => image::RgbImage::from_fn(w, h, |x, y| {
                let i = (y * w + x) as usize;
                image::Rgb([to_u8(s.image[i]), to_u8(s.image[plane + i]), to_u8(s.image[2 * plane + i])])
            })
            .save(&path),
            c => return Err(Error::Config(format!("cannot export {c}-channel images"))),
        };
        result.map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn fixture() -> MultiDomainDataset {
        let ds = generate_synthetic(&SynthConfig {
            classes: 3,
            domains: 2,
            per_domain: 12,
            image_size: 8,
            channels: 3,
            seed: 4,
        })
        .unwrap();
        ds
    }

    #[test]
    fn export_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture();
        export_image_folder(&ds, dir.path()).unwrap();
        let back = load_image_folder(dir.path(), 8, 3).unwrap();
        assert_eq!(back.len(), 72);
        assert_eq!(back.domains().len(), 2);
        assert_eq!(back.classes(), ds.classes().iter().cloned().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>());
        // pixels sit on the byte grid, so they survive png exactly
        let mut a: Vec<_> = ds.samples().iter().map(|s| (s.domain, s.image.clone())).collect();
        let mut b: Vec<_> = back.samples().iter().map(|s| (s.domain, s.image.clone())).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
        assert_eq!(back, load_image_folder(dir.path(), 8, 3).unwrap());
    }

    #[test]
    fn missing_class_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        export_image_folder(&fixture(), dir.path()).unwrap();
        fs::remove_dir_all(dir.path().join("domain1").join("square")).unwrap();
        let err = load_image_folder(dir.path(), 8, 3).unwrap_err().to_string();
        assert!(err.contains("domain1 lacks [square]"), "{err}");
    }

    #[test]
    fn unreadable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        export_image_folder(&fixture(), dir.path()).unwrap();
        let bad = dir.path().join("domain0").join("circle").join("zzz.png");
        fs::write(&bad, b"not a png").unwrap();
        let err = load_image_folder(dir.path(), 8, 3).unwrap_err().to_string();
        assert!(err.contains("zzz.png"), "{err}");
    }

    #[test]
    fn missing_root() {
        assert!(matches!(
            load_image_folder(Path::new("/nonexistent/xyz"), 8, 3),
            Err(Error::Io { .. })
        ));
    }
}
