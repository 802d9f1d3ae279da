mod common;

use std::path::Path;

use attnflow::attention::{AttentionConfig, AttentionKind};
use attnflow::backbone::{gradcam_target_layer, BackboneConfig};
use attnflow::explain::{
    capture, colorize, export_heatmap, gradcam, gradcam_from, heatmap_path, normalize, ActivationMap, ScoringMode,
};
use attnflow::flow::FlowConfig;
use attnflow::pipeline::AnomalyModel;
use attnflow::{imageops, rng, synth, Error};
use image::Rgb;
use ndarray::{Array2, Array3};
use rand::Rng;

#[test]
fn single_channel_map_is_rectified_scaled_activation() {
    let act = Array3::from_shape_vec((1, 2, 2), vec![1.0, -2.0, 3.0, 0.0]).unwrap();
    let grad = Array3::from_shape_vec((1, 2, 2), vec![0.5, 1.5, 1.0, 1.0]).unwrap();
    let map = gradcam_from(act.view(), grad.view()).unwrap();
    assert_eq!(map, Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 3.0, 0.0]).unwrap());
    let neg = gradcam_from(act.view(), (-&grad).view()).unwrap();
    assert_eq!(neg, Array2::from_shape_vec((2, 2), vec![0.0, 2.0, 0.0, 0.0]).unwrap());
}

#[test]
fn matches_loop_oracle_and_scales_linearly() {
    let mut r = rng::stream(1, "cam");
    let act = common::random_map(&mut r, 5, 4, 6);
    let grad = common::random_map(&mut r, 5, 4, 6);
    let map = gradcam_from(act.view(), grad.view()).unwrap();
    let want = common::gradcam(&common::to_map(&act), &common::to_map(&grad));
    for (got, exp) in common::to_grid(&map).iter().flatten().zip(want.iter().flatten()) {
        assert!((got - exp).abs() < 1e-12);
    }
    let scaled = gradcam_from((&act * 3.0).view(), (&grad * 0.5).view()).unwrap();
    assert!((&scaled - &(&map * 1.5)).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = Array3::zeros((2, 3, 3));
    let g = Array3::zeros((2, 3, 4));
    assert!(matches!(gradcam_from(a.view(), g.view()), Err(Error::Config(_))));
}

#[test]
fn normalization_ignores_positive_scale_and_offset() {
    let m = Array2::from_shape_vec((2, 3), vec![0.0, 1.0, 4.0, 2.0, 3.0, 0.5]).unwrap();
    let n = normalize(&m);
    assert_eq!(n[[0, 2]], 1.0);
    assert_eq!(n[[0, 0]], 0.0);
    let n2 = normalize(&(&m * 7.0 + 3.0));
    assert!((&n - &n2).iter().all(|d| d.abs() < 1e-12));
    assert!(normalize(&Array2::from_elem((2, 2), 5.0)).iter().all(|&v| v == 0.0));
}

#[test]
fn colors_run_from_blue_to_red() {
    let zero = colorize(&Array2::zeros((3, 4)));
    assert!(zero.pixels().all(|p| *p == Rgb([0, 0, 255])));

    let mut m = Array2::zeros((3, 4));
    m[[1, 2]] = 0.7;
    let img = colorize(&m);
    let red: Vec<_> = img.enumerate_pixels().filter(|(_, _, p)| **p == Rgb([255, 0, 0])).map(|(x, y, _)| (x, y)).collect();
    assert_eq!(red, vec![(2, 1)]);
    assert_eq!(img.pixels().filter(|p| **p == Rgb([0, 0, 255])).count(), 11);
}

#[test]
fn heatmap_file_name() {
    assert_eq!(heatmap_path(Path::new("out"), Path::new("data/test/crack/007.png")), Path::new("out/007_gradcam.png"));
}

fn model() -> AnomalyModel {
    let bcfg = BackboneConfig {
        scales: vec![224],
        channels: [8, 8, 8, 8, 8],
        ..Default::default()
    };
    let att = AttentionConfig {
        kind: AttentionKind::Cbam,
        reduction: 2,
        spatial_kernel: 3,
        init_std: 0.3,
        ..Default::default()
    };
    let flow = FlowConfig {
        blocks: 2,
        ..Default::default()
    };
    let mut m = AnomalyModel::new(&bcfg, &att, &flow, 1, 2).unwrap();
    let mut r = rng::stream(3, "flow");
    let n = attnflow::nn::param_count(&m.flow);
    let values: Vec<f64> = (0..n).map(|_| r.random_range(-0.2..0.2)).collect();
    attnflow::nn::unflatten(&mut m.flow, &values);
    m
}

#[test]
fn captured_gradient_matches_score_difference() {
    let m = model();
    let image = imageops::from_rgb8(&synth::anomalous_image(64, 4));
    let handle = gradcam_target_layer(m.backbone.config(), &AttentionConfig { kind: AttentionKind::Cbam, ..Default::default() })
        .unwrap()[0];
    let (act, grad) = capture(&m, &image, &handle).unwrap();
    assert_eq!(act.dim(), handle.shape);

    // perturbing one activation moves the pooled embedding by h / (H·W)
    let (c, h, w) = act.dim();
    let pooled: Vec<f64> = (0..c).map(|k| act.index_axis(ndarray::Axis(0), k).mean().unwrap()).collect();
    let nll = |y: &[f64]| attnflow::flow::nll_loss(y, &m.flow).unwrap();
    let eps = 1e-6;
    for k in 0..c {
        let mut up = pooled.clone();
        let mut down = pooled.clone();
        up[k] += eps / (h * w) as f64;
        down[k] -= eps / (h * w) as f64;
        let fd = (nll(&up) - nll(&down)) / (2.0 * eps);
        for g in grad.index_axis(ndarray::Axis(0), k).iter() {
            assert!((g - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "channel {k}: {g} vs {fd}");
        }
    }
}

#[test]
fn gradcam_requires_gradient_mode() {
    let m = model();
    let image = imageops::from_rgb8(&synth::flawless_image(64, 5));
    let handle = gradcam_target_layer(m.backbone.config(), &AttentionConfig::default()).unwrap()[0];
    let err = gradcam(&m, &image, "x", &handle, ScoringMode::Inference).unwrap_err();
    assert!(matches!(err, Error::GradientUnavailable(_)));
    assert_eq!(err.exit_code(), 2);
    let map = gradcam(&m, &image, "x", &handle, ScoringMode::Gradient).unwrap();
    assert_eq!(map.values.dim(), (handle.shape.1, handle.shape.2));
    assert!(map.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
    assert_eq!(map.image_id, "x");
    assert!(map.layer_id.contains("stage5"), "{}", map.layer_id);
}

#[test]
fn export_errors() {
    let dir = tempfile::tempdir().unwrap();
    let image = Array3::from_elem((3, 8, 8), 0.5);
    let map = ActivationMap { values: Array2::from_elem((2, 2), 1.0), layer_id: "l".into(), image_id: "i".into() };

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = export_heatmap(&map, &image, &blocker.join("out.png")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);

    let mut bad = map.clone();
    bad.values[[0, 0]] = f64::NAN;
    assert!(matches!(export_heatmap(&bad, &image, &dir.path().join("a.png")), Err(Error::InvalidInput(_))));

    let out = dir.path().join("nested/ok.png");
    export_heatmap(&map, &image, &out).unwrap();
    let written = image::open(&out).unwrap().to_rgb8();
    assert_eq!(written.dimensions(), (8, 8));
}
