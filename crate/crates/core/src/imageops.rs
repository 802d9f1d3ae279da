//! Pixel-level operations on planar `3×H×W` float images in `[0, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, Rgb32FImage, RgbImage};
use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

/// ImageNet channel statistics used by the pretrained extractor.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub fn decode(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn from_rgb8(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn to_rgb8(planes: ArrayView3<f64>) -> RgbImage {
    let (_, h, w) = planes.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (planes[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn to_rgb32f(planes: ArrayView3<f64>) -> Rgb32FImage {
    let (_, h, w) = planes.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| planes[[c, y as usize, x as usize]] as f32;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Bilinear resize to `height×width`.
pub fn resize(planes: ArrayView3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (_, h, w) = planes.dim();
    if h == height && w == width {
        return planes.to_owned();
    }
    let resized = image::imageops::resize(&to_rgb32f(planes), width as u32, height as u32, FilterType::Triangle);
    Array3::from_shape_fn((3, height, width), |(c, y, x)| resized.get_pixel(x as u32, y as u32)[c] as f64)
}

/// Counter-clockwise rotation about the image centre, keeping the canvas size.
///
/// Multiples of 90° on square images (and of 180° on any image) are exact
/// pixel permutations; other angles sample bilinearly with edge replication.
pub fn rotate(planes: ArrayView3<f64>, degrees: f64) -> Array3<f64> {
    let (c, h, w) = planes.dim();
    let turns = degrees.rem_euclid(360.0);
    let quarter = (turns / 90.0).round();
    if (turns - quarter * 90.0).abs() < 1e-12 {
        let q = quarter as usize % 4;
        if q == 0 {
            return planes.to_owned();
        }
        if q == 2 {
            return Array3::from_shape_fn((c, h, w), |(ci, y, x)| planes[[ci, h - 1 - y, w - 1 - x]]);
        }
        if h == w {
            let n = h;
            return if q == 1 {
                Array3::from_shape_fn((c, n, n), |(ci, y, x)| planes[[ci, x, n - 1 - y]])
            } else {
                Array3::from_shape_fn((c, n, n), |(ci, y, x)| planes[[ci, n - 1 - x, y]])
            };
        }
    }

    let theta = turns.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (cx + dx * cos - dy * sin).clamp(0.0, (w - 1) as f64);
            let sy = (cy + dx * sin + dy * cos).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ci in 0..c {
                let top = planes[[ci, y0, x0]] * (1.0 - fx) + planes[[ci, y0, x1]] * fx;
                let bottom = planes[[ci, y1, x0]] * (1.0 - fx) + planes[[ci, y1, x1]] * fx;
                out[[ci, y, x]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn normalize_imagenet(planes: &mut Array3<f64>) {
    for (c, mut plane) in planes.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
    }
}
