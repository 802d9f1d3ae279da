//! Grad-CAM over the feature extractor, targeting the anomaly score.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::backbone::LayerHandle;
use crate::data;
use crate::error::{Error, Result};
use crate::imageops;
use crate::pipeline::AnomalyModel;

/// Raw (rectified, unnormalized) class-activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub values: Array2<f64>,
    pub layer_id: String,
    pub image_id: String,
}

/// Whether scoring keeps what is needed for gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoringMode {
    Inference,
    Gradient,
}

/// `relu(Σ_k α_k A_k)` with `α_k` the spatial mean of channel `k`'s gradient.
pub fn gradcam_from(activations: ArrayView3<f64>, gradients: ArrayView3<f64>) -> Result<Array2<f64>> {
    if activations.dim() != gradients.dim() {
        return Err(Error::Config(format!(
            "activation shape {:?} and gradient shape {:?} differ",
            activations.dim(),
            gradients.dim()
        )));
    }
    let (_, h, w) = activations.dim();
    let mut map = Array2::zeros((h, w));
    for (a, g) in activations.outer_iter().zip(gradients.outer_iter()) {
        let alpha = g.mean().unwrap_or(0.0);
        map.scaled_add(alpha, &a);
    }
    map.mapv_inplace(|v: f64| v.max(0.0));
    Ok(map)
}

fn layer_id(handle: &LayerHandle) -> String {
    format!(
        "scale{}/stage{}{}",
        handle.scale,
        handle.stage + 1,
        if handle.after_attention { "+ab3" } else { "" }
    )
}

/// Activations at `handle` and `dτ/dA` for the untransformed image, τ its anomaly score.
pub fn capture(model: &AnomalyModel, image: &Array3<f64>, handle: &LayerHandle) -> Result<(Array3<f64>, Array3<f64>)> {
    let input = data::preprocess(image, 0.0, model.scales());
    let y = model.embed(&input);
    let row = ndarray::Array2::from_shape_vec((1, y.len()), y).expect("row");
    let (_, _, dy) = model.flow.mean_nll_with_grad(row.view())?;
    let act = model.backbone.capture(&input, handle);
    let (c, h, w) = act.dim();
    let per_scale = model.backbone.config().per_scale_len();
    let dpool = dy.row(0).slice(ndarray::s![handle.scale_index * per_scale..(handle.scale_index + 1) * per_scale]).to_owned();
    let grad = (dpool / (h * w) as f64)
        .insert_axis(Axis(1))
        .insert_axis(Axis(2))
        .broadcast((c, h, w))
        .expect("broadcast")
        .to_owned();
    Ok((act, grad))
}

pub fn gradcam(
    model: &AnomalyModel,
    image: &Array3<f64>,
    image_id: &str,
    handle: &LayerHandle,
    mode: ScoringMode,
) -> Result<ActivationMap> {
    if mode == ScoringMode::Inference {
        return Err(Error::GradientUnavailable(
            "the model was prepared for inference only; rerun scoring in gradient mode to capture gradients".into(),
        ));
    }
    let (act, grad) = capture(model, image, handle)?;
    Ok(ActivationMap {
        values: gradcam_from(act.view(), grad.view())?,
        layer_id: layer_id(handle),
        image_id: image_id.to_string(),
    })
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Blue (0) to red (1).
pub fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    Rgb([(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8])
}

/// Colorized normalized map at its native resolution.
pub fn colorize(map: &Array2<f64>) -> RgbImage {
    let n = normalize(map);
    let (h, w) = n.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| colormap(n[[y as usize, x as usize]]))
}

/// Overlay of the heatmap on `image` (planar RGB in `[0, 1]`) at 50% opacity.
pub fn overlay(map: &Array2<f64>, image: &Array3<f64>) -> RgbImage {
    let (_, h, w) = image.dim();
    let n = normalize(map);
    let (mh, mw) = n.dim();
    let stacked = n.insert_axis(Axis(0)).broadcast((3, mh, mw)).expect("broadcast").to_owned();
    let up = imageops::resize(stacked.view(), h, w);
    let base = imageops::to_rgb8(image.view());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let heat = colormap(up[[0, y as usize, x as usize]]);
        let px = base.get_pixel(x, y);
        Rgb([0, 1, 2].map(|c| ((heat[c] as f64 + px[c] as f64) / 2.0).round() as u8))
    })
}

pub fn heatmap_path(out_dir: &Path, image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    out_dir.join(format!("{stem}_gradcam.png"))
}

pub fn export_heatmap(map: &ActivationMap, image: &Array3<f64>, out_path: &Path) -> Result<()> {
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("activation map has non-finite values".into()));
    }
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    overlay(&map.values, image)
        .save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(out_path, io),
            other => Error::Image(other),
        })
}
