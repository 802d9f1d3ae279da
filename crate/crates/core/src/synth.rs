//! Desk-scale fixtures: a textured image dataset with blotch anomalies and a
//! Gaussian-mixture embedding set for flow-only training.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::trainer::EmbeddingSet;

pub const CATEGORY: &str = "synthetic";
pub const DEFECT: &str = "defect";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_good: usize,
    pub test_good: usize,
    pub test_defect: usize,
    pub size: u32,
    pub embed_dim: usize,
    pub embed_train: usize,
    pub embed_test: usize,
    /// Shift of the anomalous embedding component, in standard deviations.
    pub shift_sigmas: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_good: 200,
            test_good: 50,
            test_defect: 50,
            size: 64,
            embed_dim: 8,
            embed_train: 2048,
            embed_test: 512,
            shift_sigmas: 5.0,
        }
    }
}

/// Regular dot lattice on a soft gradient; dot positions and tints jitter per image.
pub fn flawless_image(size: u32, seed: u64) -> RgbImage {
    let mut r = rng::stream(seed, "synth-texture");
    let shade: f64 = r.random_range(-12.0..12.0);
    let mut img = RgbImage::from_fn(size, size, |x, y| {
        let g = 150.0 + 40.0 * (x + y) as f64 / (2 * size) as f64 + shade;
        Rgb([g as u8, (g * 0.95) as u8, (g * 0.85) as u8])
    });
    let step = 8i32;
    for gy in 0..(size as i32 / step) {
        for gx in 0..(size as i32 / step) {
            let cx = gx * step + step / 2 + r.random_range(-1..=1);
            let cy = gy * step + step / 2 + r.random_range(-1..=1);
            let tone = r.random_range(50u8..80);
            disc(&mut img, cx as f64, cy as f64, 2.0, Rgb([tone, tone / 2 + 20, tone / 3 + 40]));
        }
    }
    img
}

fn disc(img: &mut RgbImage, cx: f64, cy: f64, radius: f64, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let lo_x = (cx - radius).floor().max(0.0) as u32;
    let lo_y = (cy - radius).floor().max(0.0) as u32;
    let hi_x = ((cx + radius).ceil() as u32).min(w.saturating_sub(1));
    let hi_y = ((cy + radius).ceil() as u32).min(h.saturating_sub(1));
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= radius * radius {
                img.put_pixel(x, y, color);
            }
        }
    }
}

/// A flawless texture with one to three blotches or an occluding patch.
pub fn anomalous_image(size: u32, seed: u64) -> RgbImage {
    let mut img = flawless_image(size, seed);
    let mut r = rng::stream(seed, "synth-defect");
    let s = size as f64;
    for _ in 0..r.random_range(1..=3) {
        let color = Rgb([r.random_range(0..60), r.random_range(90..200), r.random_range(0..60)]);
        let (cx, cy) = (r.random_range(0.2 * s..0.8 * s), r.random_range(0.2 * s..0.8 * s));
        if r.random_bool(0.7) {
            disc(&mut img, cx, cy, r.random_range(0.07 * s..0.15 * s), color);
        } else {
            let half = r.random_range(0.06 * s..0.12 * s);
            for y in (cy - half).max(0.0) as u32..((cy + half) as u32).min(size) {
                for x in (cx - half).max(0.0) as u32..((cx + half) as u32).min(size) {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `<out>/synthetic/{train/good,test/good,test/defect}`; returns the category root.
pub fn write_image_dataset(out: &Path, seed: u64, cfg: &SynthConfig) -> Result<PathBuf> {
    let root = out.join(CATEGORY);
    let splits = [
        ("train/good", cfg.train_good, false),
        ("test/good", cfg.test_good, false),
        (&format!("test/{DEFECT}")[..], cfg.test_defect, true),
    ];
    for (dir, count, anomalous) in splits {
        let d = root.join(dir);
        mkdir(&d)?;
        for i in 0..count {
            let s = rng::derive_seed(seed, &format!("synth/{dir}/{i}"));
            let img = if anomalous {
                anomalous_image(cfg.size, s)
            } else {
                flawless_image(cfg.size, s)
            };
            write_png(&img, &d.join(format!("{i:03}.png")))?;
        }
    }
    Ok(root)
}

/// Two-component mixture at `±3·u` with unit variance; anomalies move by
/// `shift_sigmas` along a direction orthogonal to `u`.
pub fn gaussian_mixture(seed: u64, cfg: &SynthConfig) -> EmbeddingSet {
    let d = cfg.embed_dim;
    let norm = (d as f64).sqrt();
    let u: Vec<f64> = (0..d).map(|_| 1.0 / norm).collect();
    let v: Vec<f64> = (0..d).map(|i| (if i % 2 == 0 { 1.0 } else { -1.0 }) / norm).collect();
    let draw = |tag: &str, n: usize, shift: f64| {
        let mut r = rng::stream(seed, tag);
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            for (j, x) in row.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut r);
                *x = 3.0 * sign * u[j] + shift * v[j] + e;
            }
        }
        out
    };
    EmbeddingSet {
        train: draw("gmm/train", cfg.embed_train, 0.0),
        test_flawless: draw("gmm/test-good", cfg.embed_test, 0.0),
        test_anomalous: draw("gmm/test-shifted", cfg.embed_test, cfg.shift_sigmas),
    }
}

/// `train.csv` rows are embeddings; `test.csv` rows start with a label column.
pub fn write_embeddings(dir: &Path, set: &EmbeddingSet) -> Result<()> {
    mkdir(dir)?;
    let d = set.train.ncols();
    let cols: Vec<String> = (0..d).map(|i| format!("y{i}")).collect();
    fn csv_err(p: &Path) -> impl Fn(csv::Error) -> Error + '_ {
        move |e| Error::Ingest {
            path: p.to_path_buf(),
            detail: e.to_string(),
        }
    }

    let train = dir.join("train.csv");
    let mut w = csv::Writer::from_path(&train).map_err(csv_err(&train))?;
    w.write_record(&cols).map_err(csv_err(&train))?;
    for row in set.train.rows() {
        w.write_record(row.iter().map(|v| format!("{v:.17e}"))).map_err(csv_err(&train))?;
    }
    w.flush().map_err(|e| Error::io(&train, e))?;

    let test = dir.join("test.csv");
    let mut w = csv::Writer::from_path(&test).map_err(csv_err(&test))?;
    w.write_record(std::iter::once("label".to_string()).chain(cols.iter().cloned()))
        .map_err(csv_err(&test))?;
    for (label, m) in [("flawless", &set.test_flawless), ("anomalous", &set.test_anomalous)] {
        for row in m.rows() {
            w.write_record(std::iter::once(label.to_string()).chain(row.iter().map(|v| format!("{v:.17e}"))))
                .map_err(csv_err(&test))?;
        }
    }
    w.flush().map_err(|e| Error::io(&test, e))
}

pub fn read_embeddings(dir: &Path) -> Result<EmbeddingSet> {
    let parse = |path: &Path, labelled: bool| -> Result<Vec<(Option<String>, Vec<f64>)>> {
        let ingest = |detail: String| Error::Ingest { path: path.to_path_buf(), detail };
        if !path.is_file() {
            return Err(Error::Layout(path.to_path_buf()));
        }
        let mut rdr = csv::Reader::from_path(path).map_err(|e| ingest(e.to_string()))?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| ingest(e.to_string()))?;
            let mut it = rec.iter();
            let label = if labelled { it.next().map(str::to_string) } else { None };
            let values = it
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| ingest(format!("row {}: {e}", i + 1)))?;
            rows.push((label, values));
        }
        Ok(rows)
    };
    let to_matrix = |rows: Vec<Vec<f64>>, path: &Path| -> Result<Array2<f64>> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Ingest { path: path.to_path_buf(), detail: "ragged rows".into() });
        }
        let n = rows.len();
        Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rectangular"))
    };
    let train_path = dir.join("train.csv");
    let test_path = dir.join("test.csv");
    let train = to_matrix(parse(&train_path, false)?.into_iter().map(|r| r.1).collect(), &train_path)?;
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for (label, values) in parse(&test_path, true)? {
        match label.as_deref() {
            Some("flawless") | Some("good") => good.push(values),
            _ => bad.push(values),
        }
    }
    Ok(EmbeddingSet {
        train,
        test_flawless: to_matrix(good, &test_path)?,
        test_anomalous: to_matrix(bad, &test_path)?,
    })
}
