//! Labeled image sets: synthetic gratings, folder-per-class trees and teacher pmfs.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bitcore::RealTensor;
use crate::error::{Error, Result};
use crate::network::{load_image, preprocess, Normalization};

use super::loss::check_pmf;

/// Preprocessed network inputs with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Each image is `channels x size x size`, row-major.
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub channels: usize,
    pub size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> Result<RealTensor> {
        RealTensor::new(vec![self.channels, self.size, self.size], self.images[i].clone())
    }

    fn push(&mut self, rgb: &RealTensor, label: usize, norm: &Normalization) -> Result<()> {
        let x = preprocess(rgb, norm)?;
        self.images.push(x.values().to_vec());
        self.labels.push(label);
        Ok(())
    }

    fn empty(class_names: Vec<String>, size: usize) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            class_names,
            channels: 4,
            size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Ten classes of noisy colored sinusoidal gratings: five orientations at
/// two spatial frequencies, random phase, contrast and tint per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    /// Standard deviation of additive pixel noise on the `[0, 1]` scale.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 5000,
            test: 1000,
            size: 32,
            noise: 0.15,
            seed: 0,
        }
    }
}

pub const SYNTHETIC_CLASSES: usize = 10;
const ORIENTATIONS: usize = 5;
const FREQUENCIES: [f32; 2] = [2.0, 4.5];

fn grating(label: usize, size: usize, noise: f32, rng: &mut ChaCha8Rng) -> Result<RealTensor> {
    let theta = (label % ORIENTATIONS) as f32 * PI / ORIENTATIONS as f32 + rng.gen_range(-0.1..0.1);
    let freq = FREQUENCIES[label / ORIENTATIONS] * rng.gen_range(0.9..1.1);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let contrast = rng.gen_range(0.3..0.5);
    let base = rng.gen_range(0.35..0.65);
    let tint: [f32; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
    let gauss = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (c, s) = (theta.cos(), theta.sin());
    let hw = size * size;
    let mut v = vec![0.0f32; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let t = (x as f32 * c + y as f32 * s) / size as f32;
            let g = base + contrast * (2.0 * PI * freq * t + phase).sin();
            for (ch, k) in tint.iter().enumerate() {
                v[ch * hw + y * size + x] = (g * k + gauss.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    RealTensor::new(vec![3, size, size], v)
}

/// Balanced, deterministic synthetic split.
pub fn synthetic_gratings(spec: &SyntheticSpec) -> Result<DataSplit> {
    if spec.size < 4 || spec.train == 0 || spec.test == 0 {
        return Err(Error::InvalidArgument("synthetic set needs size >= 4 and nonempty splits".into()));
    }
    let names: Vec<String> = (0..SYNTHETIC_CLASSES)
        .map(|k| format!("orient{}_freq{}", k % ORIENTATIONS, k / ORIENTATIONS))
        .collect();
    let norm = Normalization::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |count: usize| -> Result<Dataset> {
        let mut d = Dataset::empty(names.clone(), spec.size);
        for i in 0..count {
            let label = i % SYNTHETIC_CLASSES;
            d.push(&grating(label, spec.size, spec.noise, &mut rng)?, label, &norm)?;
        }
        Ok(d)
    };
    Ok(DataSplit {
        train: make(spec.train)?,
        test: make(spec.test)?,
    })
}

/// Two classes separated by mean brightness; the mean pixel alone is a
/// perfect linear classifier.
pub fn separable_two_class(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = Normalization::default();
    let mut d = Dataset::empty(vec!["dark".into(), "bright".into()], size);
    for i in 0..count {
        let label = i % 2;
        let level = if label == 0 { rng.gen_range(0.1..0.35) } else { rng.gen_range(0.65..0.9) };
        let rgb = RealTensor::from_fn(vec![3, size, size], |_| (level + rng.gen_range(-0.1f32..0.1)).clamp(0.0, 1.0));
        d.push(&rgb, label, &norm)?;
    }
    Ok(d)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

/// `(class name, image paths)` for each subdirectory of `root`.
fn scan_classes(root: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let mut classes = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)).collect();
        classes.push((name, files));
    }
    Ok(classes)
}

fn load_tree(root: &Path, names: &[String], size: usize) -> Result<Dataset> {
    let norm = Normalization::default();
    let mut d = Dataset::empty(names.to_vec(), size);
    for (name, files) in scan_classes(root)? {
        let label = names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Data(format!("{}: class '{name}' not present in the training split", root.display())))?;
        for f in files {
            let img = load_image(&f)?;
            if img.shape()[1] != size || img.shape()[2] != size {
                return Err(Error::Data(format!(
                    "{}: expected {size}x{size}, got {}x{}",
                    f.display(),
                    img.shape()[1],
                    img.shape()[2]
                )));
            }
            d.push(&img, label, &norm)?;
        }
    }
    Ok(d)
}

/// Loads `root/<class>/<image>` trees. With `root/train` and `root/test`
/// present those are the splits; otherwise every fifth image of a seeded
/// shuffle goes to the test split.
pub fn load_folder(root: &Path, size: usize, seed: u64) -> Result<DataSplit> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{}: dataset directory not found", root.display())));
    }
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    let split = if train_dir.is_dir() && test_dir.is_dir() {
        let names: Vec<String> = scan_classes(&train_dir)?.into_iter().map(|(n, _)| n).collect();
        DataSplit {
            train: load_tree(&train_dir, &names, size)?,
            test: load_tree(&test_dir, &names, size)?,
        }
    } else {
        let all = load_tree(root, &scan_classes(root)?.into_iter().map(|(n, _)| n).collect::<Vec<_>>(), size)?;
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut train = Dataset::empty(all.class_names.clone(), size);
        let mut test = train.clone();
        for (rank, &i) in order.iter().enumerate() {
            let dst = if rank % 5 == 4 { &mut test } else { &mut train };
            dst.images.push(all.images[i].clone());
            dst.labels.push(all.labels[i]);
        }
        DataSplit { train, test }
    };
    if split.train.classes() < 2 || split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Data(format!(
            "{}: need at least two class folders and images in both splits",
            root.display()
        )));
    }
    Ok(split)
}

/// `synthetic` or a directory path.
pub fn load_dataset(name: &str, size: usize, seed: u64) -> Result<DataSplit> {
    if name == "synthetic" {
        synthetic_gratings(&SyntheticSpec {
            size,
            ..SyntheticSpec::default()
        })
    } else {
        load_folder(Path::new(name), size, seed)
    }
}

/// Reads little-endian `f32` rows of `classes` values, one per training sample.
pub fn read_teacher_pmf(path: &Path, samples: usize, classes: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = samples * classes * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {samples} rows of {classes} f32 ({expected} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    for (i, row) in values.chunks(classes).enumerate() {
        check_pmf(row).map_err(|e| Error::Data(format!("{}: row {i}: {e}", path.display())))?;
    }
    Ok(values)
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f32> {
    let mut out = vec![0.0; labels.len() * classes];
    for (row, &l) in out.chunks_mut(classes).zip(labels) {
        row[l] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            train: 40,
            test: 20,
            size: 8,
            ..Default::default()
        };
        let a = synthetic_gratings(&spec).unwrap();
        assert_eq!(a, synthetic_gratings(&spec).unwrap());
        assert_eq!(a.train.len(), 40);
        for k in 0..SYNTHETIC_CLASSES {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == k).count(), 4);
        }
        assert_eq!(a.train.images[0].len(), 4 * 64);
        let other = synthetic_gratings(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train.images, other.train.images);
    }

    #[test]
    fn folder_layout_with_split() {
        let dir = tempfile::tempdir().unwrap();
        for (class, shade) in [("a", 20u8), ("b", 200u8)] {
            std::fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..5 {
                let img = image::RgbImage::from_pixel(4, 4, image::Rgb([shade, shade, i]));
                img.save(dir.path().join(class).join(format!("{i}.png"))).unwrap();
            }
        }
        let split = load_folder(dir.path(), 4, 0).unwrap();
        assert_eq!(split.train.len() + split.test.len(), 10);
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.train.class_names, vec!["a", "b"]);
        assert!(matches!(load_folder(dir.path(), 8, 0), Err(Error::Data(_))));
        assert!(matches!(load_folder(&dir.path().join("missing"), 4, 0), Err(Error::Data(_))));
    }

    #[test]
    fn teacher_pmf_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pmf.bin");
        let rows = [[0.25f32, 0.75], [1.0, 0.0]];
        let bytes: Vec<u8> = rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(read_teacher_pmf(&path, 2, 2).unwrap(), vec![0.25, 0.75, 1.0, 0.0]);
        assert!(matches!(read_teacher_pmf(&path, 3, 2), Err(Error::Data(_))));
        let bad: Vec<u8> = [0.5f32, 0.6, 1.0, 0.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_teacher_pmf(&path, 2, 2), Err(Error::Data(_))));
    }
}
