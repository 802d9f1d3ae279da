//! Dataset ingestion and image transformations.
//!
//! Layout (one directory per object category):
//!
//! ```text
//! <root>/<category>/train/good/*.{png,jpg}
//! <root>/<category>/test/good/*.{png,jpg}
//! <root>/<category>/test/<defect_type>/*.{png,jpg}
//! ```
//!
//! `good` means flawless; every other test folder is one defect type, and
//! all defect types are merged into a single anomalous class.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;
use crate::rng;

pub const GOOD: &str = "good";
pub const SKIP_REPORT: &str = "ingest_skipped.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Flawless,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Flawless => "flawless",
            Label::Anomalous => "anomalous",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSample {
    pub path: PathBuf,
    pub label: Label,
    pub defect_type: Option<String>,
    pub category: String,
}

impl ImageSample {
    pub fn flawless(path: impl Into<PathBuf>, category: &str) -> Self {
        Self {
            path: path.into(),
            label: Label::Flawless,
            defect_type: None,
            category: category.to_string(),
        }
    }

    /// Decodes the pixels as planar RGB in `[0, 1]`.
    pub fn load(&self) -> Result<Array3<f64>> {
        imageops::decode(&self.path)
    }

    pub fn id(&self) -> String {
        self.path.display().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub category: String,
    pub train_flawless: usize,
    pub test_flawless: usize,
    pub test_anomalous: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn total_anomalous(&self) -> usize {
        self.test_anomalous.values().sum()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    train: Vec<ImageSample>,
    test: Vec<ImageSample>,
    pub skipped: Vec<PathBuf>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn require_dir(path: PathBuf) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(Error::Layout(path))
    }
}

/// Sorted image files in `dir`; undecodable headers go to `skipped`.
fn scan_images(dir: &Path, skipped: &mut Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    let (ok, bad): (Vec<_>, Vec<_>) = files.into_iter().partition(|p| readable(p));
    skipped.extend(bad);
    Ok(ok)
}

fn readable(path: &Path) -> bool {
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(image::ImageError::from)
        .and_then(|r| r.into_dimensions())
        .map(|(w, h)| w > 0 && h > 0)
        .unwrap_or(false)
}

pub fn load_dataset(root: &Path, category: &str) -> Result<Dataset> {
    let base = require_dir(root.join(category))?;
    let train_good = require_dir(base.join("train").join(GOOD))?;
    let test_dir = require_dir(base.join("test"))?;
    let test_good = require_dir(test_dir.join(GOOD))?;

    let mut skipped = Vec::new();
    let train: Vec<ImageSample> = scan_images(&train_good, &mut skipped)?
        .into_iter()
        .map(|p| ImageSample::flawless(p, category))
        .collect();

    let mut test: Vec<ImageSample> = scan_images(&test_good, &mut skipped)?
        .into_iter()
        .map(|p| ImageSample::flawless(p, category))
        .collect();

    let mut defect_dirs = Vec::new();
    for entry in fs::read_dir(&test_dir).map_err(|e| Error::io(&test_dir, e))? {
        let path = entry.map_err(|e| Error::io(&test_dir, e))?.path();
        if path.is_dir() && path.file_name().is_some_and(|n| n != GOOD) {
            defect_dirs.push(path);
        }
    }
    defect_dirs.sort();

    let mut test_anomalous = BTreeMap::new();
    for dir in defect_dirs {
        let defect = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files = scan_images(&dir, &mut skipped)?;
        test_anomalous.insert(defect.clone(), files.len());
        test.extend(files.into_iter().map(|p| ImageSample {
            path: p,
            label: Label::Anomalous,
            defect_type: Some(defect.clone()),
            category: category.to_string(),
        }));
    }

    let manifest = DatasetManifest {
        category: category.to_string(),
        train_flawless: train.len(),
        test_flawless: test.iter().filter(|s| s.label == Label::Flawless).count(),
        test_anomalous,
    };
    Ok(Dataset {
        manifest,
        train,
        test,
        skipped,
    })
}

impl Dataset {
    /// Assembles a dataset from explicit sample lists.
    pub fn from_samples(category: &str, train: Vec<ImageSample>, test: Vec<ImageSample>) -> Result<Self> {
        if let Some(bad) = train.iter().find(|s| s.label != Label::Flawless) {
            return Err(Error::Config(format!(
                "training split must be flawless only, got {}",
                bad.path.display()
            )));
        }
        let mut test_anomalous = BTreeMap::new();
        for s in test.iter().filter(|s| s.label == Label::Anomalous) {
            let key = s.defect_type.clone().unwrap_or_else(|| "anomalous".into());
            *test_anomalous.entry(key).or_insert(0) += 1;
        }
        Ok(Self {
            manifest: DatasetManifest {
                category: category.to_string(),
                train_flawless: train.len(),
                test_flawless: test.iter().filter(|s| s.label == Label::Flawless).count(),
                test_anomalous,
            },
            train,
            test,
            skipped: Vec::new(),
        })
    }

    /// Training samples in an order shuffled by `seed`.
    pub fn train_iter(&self, seed: u64) -> impl Iterator<Item = &ImageSample> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng::stream(seed, "train-order"));
        order.into_iter().map(move |i| &self.train[i])
    }

    /// Test samples: flawless first, then each defect type, each in file-name order.
    pub fn test_iter(&self) -> impl Iterator<Item = &ImageSample> {
        self.test.iter()
    }

    pub fn train_samples(&self) -> &[ImageSample] {
        &self.train
    }

    pub fn test_samples(&self) -> &[ImageSample] {
        &self.test
    }

    pub fn write_skip_report(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(SKIP_REPORT);
        let body: String = self.skipped.iter().map(|p| format!("{}\n", p.display())).collect();
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// One transformed copy of an image, preprocessed at every configured scale.
#[derive(Clone, Debug)]
pub struct TransformedImage {
    pub angle: f64,
    /// Normalized `3×s×s` inputs, one per scale.
    pub scales: Vec<Array3<f64>>,
}

/// Rotate, resize to each scale, normalize with ImageNet statistics.
pub fn preprocess(image: &Array3<f64>, angle: f64, scales: &[usize]) -> TransformedImage {
    let largest = scales.iter().copied().max().unwrap_or(0);
    let base = imageops::resize(image.view(), largest, largest);
    let rotated = imageops::rotate(base.view(), angle);
    let scales = scales
        .iter()
        .map(|&s| {
            let mut x = imageops::resize(rotated.view(), s, s);
            imageops::normalize_imagenet(&mut x);
            x
        })
        .collect();
    TransformedImage { angle, scales }
}

/// Uniform random angle in `[0, 360)` drawn from `seed`.
pub fn train_angle(seed: u64) -> f64 {
    rng::stream(seed, "train-rotation").random_range(0.0..360.0)
}

pub fn train_transform(image: &Array3<f64>, seed: u64, scales: &[usize]) -> TransformedImage {
    preprocess(image, train_angle(seed), scales)
}

/// Evenly spaced angles when `n` divides 360, seeded uniform angles otherwise.
pub fn test_angles(n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("number of test transforms must be at least 1".into()));
    }
    if 360 % n == 0 {
        let step = (360 / n) as f64;
        return Ok((0..n).map(|i| i as f64 * step).collect());
    }
    let mut rng = rng::stream(seed, "test-rotations");
    Ok((0..n).map(|_| rng.random_range(0.0..360.0)).collect())
}

pub fn test_transforms(image: &Array3<f64>, n: usize, seed: u64, scales: &[usize]) -> Result<Vec<TransformedImage>> {
    Ok(test_angles(n, seed)?
        .into_iter()
        .map(|a| preprocess(image, a, scales))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_spacing_rule() {
        assert_eq!(test_angles(1, 9).unwrap(), vec![0.0]);
        assert_eq!(test_angles(4, 9).unwrap(), vec![0.0, 90.0, 180.0, 270.0]);
        assert!(matches!(test_angles(0, 9), Err(Error::Config(_))));
        let a = test_angles(7, 3).unwrap();
        assert_eq!(a, test_angles(7, 3).unwrap());
        assert_ne!(a, test_angles(7, 4).unwrap());
        assert!(a.iter().all(|&x| (0.0..360.0).contains(&x)));
    }

    #[test]
    fn train_transform_is_deterministic() {
        let img = Array3::from_shape_fn((3, 9, 9), |(c, y, x)| ((c + y * x) % 5) as f64 / 4.0);
        let a = train_transform(&img, 11, &[8, 4]);
        let b = train_transform(&img, 11, &[8, 4]);
        assert_eq!(a.angle, b.angle);
        assert_eq!(a.scales, b.scales);
        assert_eq!(a.scales[1].dim(), (3, 4, 4));
    }

    #[test]
    fn zero_rotation_equals_plain_preprocessing() {
        let img = Array3::from_shape_fn((3, 12, 12), |(c, y, x)| ((c * 3 + y + 2 * x) % 7) as f64 / 6.0);
        let t = preprocess(&img, 0.0, &[12]);
        let mut plain = img.clone();
        imageops::normalize_imagenet(&mut plain);
        assert_eq!(t.scales[0], plain);
    }
}
