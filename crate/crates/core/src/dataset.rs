//! On-disk datasets: the generated phantom layout and foreign PGM folders.
//!
//! Generated layout:
//!
//! ```text
//! <out>/manifest.json
//! <out>/<split>/<idx>/{t1,t1c,t2,flair}.pgm   (16-bit)
//! <out>/<split>/<idx>/style.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::domain::DomainLabel;
use crate::error::{io_err, Error, Result};
use crate::image::ModalityImage;
use crate::pgm::Pgm;
use crate::phantom::{Dataset, PhantomSample, StyleParams};

pub const MANIFEST: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub splits: SplitSizes,
}

#[derive(Serialize, Deserialize)]
struct SampleStyles {
    seed: u64,
    styles: Vec<StyleParams>,
}

fn sample_dir(root: &Path, split: &str, idx: usize) -> PathBuf {
    root.join(split).join(format!("{idx:04}"))
}

/// Writes `data` in the generated layout below `out`.
pub fn write_dataset(data: &Dataset, out: &Path, seed: u64) -> Result<Manifest> {
    let size = data.train.first().map(|s| s.size()).unwrap_or(0);
    let manifest = Manifest {
        n: data.train.len() + data.val.len() + data.test.len(),
        size,
        seed,
        splits: SplitSizes {
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
        },
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (split, samples) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        for (idx, sample) in samples.iter().enumerate() {
            let dir = sample_dir(out, split, idx);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for img in &sample.images {
                Pgm::from_unit(img.size(), img.size(), img.pixels())
                    .write(&dir.join(format!("{}.pgm", img.domain.file_stem())))?;
            }
            if let (Some(seed), Some(styles)) = (sample.seed, &sample.styles) {
                let record = SampleStyles {
                    seed,
                    styles: styles.to_vec(),
                };
                let path = dir.join("style.json");
                fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").map_err(io_err(&path))?;
            }
        }
    }
    let path = out.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        message: e.to_string(),
    })
}

/// Reads one split of a generated dataset without renormalizing pixels.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<PhantomSample>> {
    let manifest = read_manifest(root)?;
    let count = match split {
        "train" => manifest.splits.train,
        "val" => manifest.splits.val,
        "test" => manifest.splits.test,
        other => return Err(Error::Usage(format!("unknown split {other:?}"))),
    };
    (0..count)
        .map(|idx| {
            let dir = sample_dir(root, split, idx);
            let images = read_images(&dir, |pgm, path| {
                if pgm.width != manifest.size || pgm.height != manifest.size {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        message: format!("expected {0}x{0} image", manifest.size),
                    });
                }
                Ok(pgm.to_unit())
            })?;
            let style_path = dir.join("style.json");
            let (seed, styles) = match fs::read_to_string(&style_path) {
                Ok(text) => {
                    let rec: SampleStyles = serde_json::from_str(&text).map_err(|e| Error::Format {
                        path: style_path.clone(),
                        message: e.to_string(),
                    })?;
                    let styles: [StyleParams; 4] = rec.styles.try_into().map_err(|_| Error::Format {
                        path: style_path.clone(),
                        message: "expected 4 styles".into(),
                    })?;
                    (Some(rec.seed), Some(styles))
                }
                Err(_) => (None, None),
            };
            Ok(PhantomSample {
                seed,
                tissue: None,
                images: to_images(images, manifest.size)?,
                styles,
            })
        })
        .collect()
}

fn read_images(dir: &Path, mut convert: impl FnMut(&Pgm, &Path) -> Result<Vec<f32>>) -> Result<[Vec<f32>; 4]> {
    let mut out: [Vec<f32>; 4] = Default::default();
    for d in DomainLabel::ALL {
        let path = dir.join(format!("{}.pgm", d.file_stem()));
        let pgm = Pgm::read(&path)?;
        out[d.index()] = convert(&pgm, &path)?;
    }
    Ok(out)
}

fn to_images(pixels: [Vec<f32>; 4], size: usize) -> Result<[ModalityImage; 4]> {
    let [a, b, c, d] = pixels;
    Ok([
        ModalityImage::new(DomainLabel::T1, size, a)?,
        ModalityImage::new(DomainLabel::T1c, size, b)?,
        ModalityImage::new(DomainLabel::T2, size, c)?,
        ModalityImage::new(DomainLabel::Flair, size, d)?,
    ])
}

/// `(x - min) / (max - min)`; a constant image becomes all zeros.
pub fn min_max_normalize(values: &[f32]) -> (Vec<f32>, bool) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return (vec![0.0; values.len()], true);
    }
    let range = (hi - lo) as f64;
    let out = values
        .iter()
        .map(|&v| (((v - lo) as f64 / range) as f32).clamp(0.0, 1.0))
        .collect();
    (out, false)
}

/// Symmetric zero padding amounts `(before, after)` for one axis; an odd
/// remainder goes after.
pub fn pad_amounts(len: usize, size: usize) -> Option<(usize, usize)> {
    let total = size.checked_sub(len)?;
    Some((total / 2, total - total / 2))
}

/// Zero-pads a `height × width` raster to `size × size`.
pub fn pad_to_square(values: &[f32], height: usize, width: usize, size: usize) -> Option<Vec<f32>> {
    let (top, _) = pad_amounts(height, size)?;
    let (left, _) = pad_amounts(width, size)?;
    let mut out = vec![0.0; size * size];
    for i in 0..height {
        out[(top + i) * size + left..(top + i) * size + left + width].copy_from_slice(&values[i * width..(i + 1) * width]);
    }
    Some(out)
}

/// Loads every sample subdirectory of `dir` (sorted by name), normalizing
/// each image to `[0, 1]` and padding it to `size × size`. Subdirectories
/// missing a modality are skipped with a warning.
pub fn load_external(dir: &Path, size: usize) -> Result<Vec<PhantomSample>> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut out = Vec::new();
    for sub in subdirs {
        let missing: Vec<_> = DomainLabel::ALL
            .iter()
            .filter(|d| !sub.join(format!("{}.pgm", d.file_stem())).is_file())
            .map(|d| d.file_stem())
            .collect();
        if !missing.is_empty() {
            warn!("skipping {}: missing {}", sub.display(), missing.join(", "));
            continue;
        }
        let images = read_images(&sub, |pgm, path| {
            let (norm, constant) = min_max_normalize(&pgm.to_unit());
            if constant {
                warn!("{} is constant; using zeros", path.display());
            }
            pad_to_square(&norm, pgm.height, pgm.width, size).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: format!("{}x{} image does not fit in {size}x{size}", pgm.width, pgm.height),
            })
        })?;
        out.push(PhantomSample {
            seed: None,
            tissue: None,
            images: to_images(images, size)?,
            styles: None,
        });
    }
    Ok(out)
}

/// Train/validation/test samples of a dataset directory: the recorded splits
/// of a generated dataset, or every sample of a foreign folder in each role.
pub fn load_any(dir: &Path, size: usize, split: &str) -> Result<Vec<PhantomSample>> {
    if dir.join(MANIFEST).is_file() {
        let manifest = read_manifest(dir)?;
        if manifest.size != size {
            return Err(Error::Config(format!(
                "dataset size {} does not match model size {size}",
                manifest.size
            )));
        }
        read_split(dir, split)
    } else {
        load_external(dir, size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_splits_the_remainder() {
        assert_eq!(pad_amounts(50, 64), Some((7, 7)));
        assert_eq!(pad_amounts(60, 64), Some((2, 2)));
        assert_eq!(pad_amounts(61, 64), Some((1, 2)));
        assert_eq!(pad_amounts(65, 64), None);
    }

    #[test]
    fn constant_images_normalize_to_zero() {
        let (v, constant) = min_max_normalize(&[0.3; 6]);
        assert!(constant);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalization_spans_unit_interval() {
        let (v, constant) = min_max_normalize(&[2.0, 4.0, 3.0]);
        assert!(!constant);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
    }
}
