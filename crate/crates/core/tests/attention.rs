mod common;

use attnflow::attention::{
    cbam_block, cbam_channel_attention, cbam_spatial_attention, se_block, AttentionBlock, AttentionConfig, AttentionKind,
    CbamBlock, FeatureMap, SeBlock,
};
use attnflow::nn;
use attnflow::rng;
use attnflow::Error;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;

fn config(kind: AttentionKind, reduction: usize, k: usize) -> AttentionConfig {
    AttentionConfig {
        kind,
        reduction,
        spatial_kernel: k,
        init_std: 0.5,
        ..Default::default()
    }
}

fn se(c: usize, reduction: usize, seed: u64) -> SeBlock {
    match AttentionBlock::init(&config(AttentionKind::Se, reduction, 3), c, &mut rng::stream(seed, "se")).unwrap() {
        Some(AttentionBlock::Se(b)) => b,
        _ => unreachable!(),
    }
}

fn cbam(c: usize, reduction: usize, k: usize, seed: u64) -> CbamBlock {
    match AttentionBlock::init(&config(AttentionKind::Cbam, reduction, k), c, &mut rng::stream(seed, "cbam")).unwrap() {
        Some(AttentionBlock::Cbam(b)) => b,
        _ => unreachable!(),
    }
}

fn zero_biases_se(b: &mut SeBlock) {
    b.mlp.fc1.bias.fill(0.0);
    b.mlp.fc2.bias.fill(0.0);
}

fn zero_biases_cbam(b: &mut CbamBlock) {
    b.mlp.fc1.bias.fill(0.0);
    b.mlp.fc2.bias.fill(0.0);
    b.spatial.bias.fill(0.0);
}

fn fm(a: Array3<f64>) -> FeatureMap {
    FeatureMap::new(a).unwrap()
}

#[test]
fn se_zero_input_is_fixed_point() {
    let mut b = se(4, 2, 1);
    zero_biases_se(&mut b);
    let y = se_block(&fm(Array3::zeros((4, 2, 2))), &b).unwrap();
    assert!(y.view().iter().all(|&v| v == 0.0));
}

#[test]
fn se_saturated_gate_is_identity() {
    let mut b = se(4, 2, 2);
    let mut block = AttentionBlock::Se(b.clone());
    block.saturate(20.0);
    if let AttentionBlock::Se(s) = block {
        b = s;
    }
    let x = common::random_map(&mut rng::stream(2, "x"), 4, 3, 3);
    let y = se_block(&fm(x.clone()), &b).unwrap().into_inner();
    assert!((&y - &x).iter().all(|d| d.abs() < 1e-7));
}

#[test]
fn se_matches_oracle_on_fixed_fixture() {
    let b = se(4, 2, 3);
    let x = common::random_map(&mut rng::stream(3, "x"), 4, 3, 3);
    let y = se_block(&fm(x.clone()), &b).unwrap().into_inner();
    let d = common::max_abs_diff(&common::to_map(&y), &common::se(&common::to_map(&x), &b));
    assert!(d <= 1e-6, "{d}");
}

#[test]
fn cbam_channel_gate_on_constant_input() {
    let b = cbam(4, 2, 3, 4);
    let x = Array3::from_elem((4, 3, 3), 0.8);
    let s = cbam_channel_attention(&fm(x.clone()), &b).unwrap();
    assert_eq!(s.dim(), (4, 1, 1));
    let m = common::mlp(&b.mlp, &[0.8; 4]);
    for c in 0..4 {
        let want = common::sigmoid(2.0 * m[c]);
        assert!((s[[c, 0, 0]] - want).abs() <= 1e-6);
        assert!((s[[c, 0, 0]] - common::cbam_channel_gate(&common::to_map(&x), &b)[c]).abs() <= 1e-6);
    }
}

#[test]
fn cbam_gates_are_half_on_zeros() {
    let mut b = cbam(4, 2, 3, 5);
    zero_biases_cbam(&mut b);
    let x = fm(Array3::zeros((4, 3, 3)));
    assert!(cbam_channel_attention(&x, &b).unwrap().iter().all(|&v| v == 0.5));
    assert!(cbam_spatial_attention(&x, &b).unwrap().iter().all(|&v| v == 0.5));
    assert!(cbam_block(&x, &b).unwrap().view().iter().all(|&v| v == 0.0));
}

/// Channel-equivariant MLP: both layers are `αI + βJ`.
#[test]
fn cbam_channel_gate_permutes_with_channels() {
    let mut b = cbam(3, 1, 3, 6);
    for (l, (a, beta)) in [(&mut b.mlp.fc1, (0.7, -0.2)), (&mut b.mlp.fc2, (1.1, 0.3))] {
        l.weight = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { a + beta } else { beta });
        l.bias.fill(0.05);
    }
    let x = common::random_map(&mut rng::stream(6, "x"), 3, 3, 4);
    let base = cbam_channel_attention(&fm(x.clone()), &b).unwrap();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for p in perms {
        let xp = Array3::from_shape_fn(x.dim(), |(c, y, w)| x[[p[c], y, w]]);
        let s = cbam_channel_attention(&fm(xp), &b).unwrap();
        for c in 0..3 {
            assert!((s[[c, 0, 0]] - base[[p[c], 0, 0]]).abs() < 1e-12, "{p:?}");
        }
    }
}

#[test]
fn cbam_spatial_gate_with_identical_channels() {
    let b = cbam(3, 1, 3, 7);
    let plane = common::random_map(&mut rng::stream(7, "x"), 1, 4, 5);
    let x = Array3::from_shape_fn((3, 4, 5), |(_, y, w)| plane[[0, y, w]]);
    let s = cbam_spatial_attention(&fm(x.clone()), &b).unwrap();
    assert_eq!(s.dim(), (1, 4, 5));
    let want = common::cbam_spatial_gate(&common::to_map(&x), &b);
    for y in 0..4 {
        for w in 0..5 {
            assert!((s[[0, y, w]] - want[y][w]).abs() <= 1e-6);
            assert!(s[[0, y, w]] > 0.0 && s[[0, y, w]] < 1.0);
        }
    }
}

#[test]
fn cbam_spatial_gate_on_single_pixel() {
    let b = cbam(2, 1, 7, 8);
    let x = Array3::from_shape_vec((2, 1, 1), vec![0.4, -1.3]).unwrap();
    let s = cbam_spatial_attention(&fm(x), &b).unwrap();
    assert_eq!(s.dim(), (1, 1, 1));
    // only the kernel centre overlaps the single pixel
    let w = &b.spatial.weight;
    let want = common::sigmoid(w[[0, 0, 3, 3]] * (0.4 - 1.3) / 2.0 + w[[0, 1, 3, 3]] * 0.4 + b.spatial.bias[0]);
    assert!((s[[0, 0, 0]] - want).abs() < 1e-12);
}

#[test]
fn cbam_saturated_is_identity_and_matches_oracle() {
    let b = cbam(2, 1, 3, 9);
    let x = common::random_map(&mut rng::stream(9, "x"), 2, 2, 2);
    let y = cbam_block(&fm(x.clone()), &b).unwrap().into_inner();
    let d = common::max_abs_diff(&common::to_map(&y), &common::cbam(&common::to_map(&x), &b));
    assert!(d <= 1e-6);

    let mut block = AttentionBlock::Cbam(b);
    block.saturate(20.0);
    let y = block.forward(x.view());
    assert!((&y - &x).iter().all(|d| d.abs() < 1e-6));
}

#[test]
fn shape_mismatch_and_non_finite_input_are_rejected() {
    let b = se(4, 2, 10);
    assert!(matches!(se_block(&fm(Array3::zeros((3, 2, 2))), &b), Err(Error::Config(_))));
    let c = cbam(4, 2, 3, 10);
    assert!(matches!(cbam_block(&fm(Array3::zeros((5, 2, 2))), &c), Err(Error::Config(_))));
    let mut bad = Array3::zeros((4, 2, 2));
    bad[[1, 1, 0]] = f64::NAN;
    assert!(matches!(FeatureMap::new(bad), Err(Error::InvalidInput(_))));
    assert!(matches!(FeatureMap::new(Array3::zeros((0, 2, 2))), Err(Error::InvalidInput(_))));
}

#[test]
fn config_validation() {
    assert!(matches!(config(AttentionKind::Se, 16, 7).validate(8), Err(Error::Config(_))));
    assert!(matches!(config(AttentionKind::Cbam, 2, 4).validate(8), Err(Error::Config(_))));
    assert!(matches!(config(AttentionKind::Se, 0, 7).validate(8), Err(Error::Config(_))));
    config(AttentionKind::None, 16, 4).validate(1).unwrap();
    assert!(AttentionBlock::init(&config(AttentionKind::None, 1, 3), 4, &mut rng::stream(0, "")).unwrap().is_none());
}

#[test]
fn default_init_has_zero_biases_and_half_gates() {
    let cfg = AttentionConfig {
        kind: AttentionKind::Se,
        reduction: 2,
        ..Default::default()
    };
    let Some(AttentionBlock::Se(b)) = AttentionBlock::init(&cfg, 8, &mut rng::stream(11, "")).unwrap() else {
        unreachable!()
    };
    assert!(b.mlp.fc1.bias.iter().chain(b.mlp.fc2.bias.iter()).all(|&v| v == 0.0));
    let y = se_block(&fm(Array3::zeros((8, 2, 2))), &b).unwrap();
    assert!(y.view().iter().all(|&v| v == 0.0));
    let x = Array3::from_elem((8, 2, 2), 1.0);
    let y = se_block(&fm(x), &b).unwrap().into_inner();
    assert!(y.iter().all(|&v| (v - 0.5).abs() < 0.05));
}

#[test]
fn backward_matches_finite_differences() {
    for kind in [AttentionKind::Se, AttentionKind::Cbam] {
        let mut r = rng::stream(12, "grad");
        let block = AttentionBlock::init(&config(kind, 2, 3), 4, &mut r).unwrap().unwrap();
        let x = common::random_map(&mut r, 4, 3, 3);
        let weights = common::random_map(&mut r, 4, 3, 3);
        let loss = |b: &AttentionBlock, x: &Array3<f64>| (b.forward(x.view()) * &weights).sum();
        let (_, trace) = block.forward_traced(x.view());
        let mut grad = block.zeros_like();
        let dx = block.backward(x.view(), &trace, weights.view(), &mut grad);

        let h = 1e-6;
        let base = nn::flatten(&block);
        let analytic = nn::flatten(&grad);
        let mut probe = block.clone();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            nn::unflatten(&mut probe, &p);
            let up = loss(&probe, &x);
            p[i] -= 2.0 * h;
            nn::unflatten(&mut probe, &p);
            let fd = (up - loss(&probe, &x)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{kind:?} param {i}: {fd} vs {}", analytic[i]);
        }
        for (idx, &g) in dx.indexed_iter() {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = loss(&block, &xp);
            xp[idx] -= 2.0 * h;
            let fd = (up - loss(&block, &xp)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6 * (1.0 + fd.abs()), "{kind:?} input {idx:?}: {fd} vs {g}");
        }
    }
}

fn arb_case() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=8, 1usize..=5, 1usize..=5, any::<u64>())
}

fn random_block(kind: AttentionKind, c: usize, seed: u64) -> AttentionBlock {
    let mut r = rng::stream(seed, "block");
    let cfg = AttentionConfig {
        kind,
        reduction: r.random_range(1..=c),
        spatial_kernel: [1, 3, 5, 7][r.random_range(0..4)],
        init_std: 0.8,
        init_gate_bias: r.random_range(-2.0..2.0),
        ..Default::default()
    };
    AttentionBlock::init(&cfg, c, &mut r).unwrap().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shape_is_preserved_and_outputs_contract((c, h, w, seed) in arb_case()) {
        let x = common::random_map(&mut rng::stream(seed, "x"), c, h, w);
        for kind in [AttentionKind::Se, AttentionKind::Cbam] {
            let y = random_block(kind, c, seed).forward(x.view());
            prop_assert_eq!(y.dim(), x.dim());
            for (a, b) in y.iter().zip(x.iter()) {
                prop_assert!(a.abs() <= b.abs());
            }
        }
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval((c, h, w, seed) in arb_case()) {
        let x = fm(common::random_map(&mut rng::stream(seed, "x"), c, h, w));
        let AttentionBlock::Cbam(b) = random_block(AttentionKind::Cbam, c, seed) else { unreachable!() };
        for g in cbam_channel_attention(&x, &b).unwrap().iter().chain(cbam_spatial_attention(&x, &b).unwrap().iter()) {
            prop_assert!(*g > 0.0 && *g < 1.0);
        }
    }

    #[test]
    fn saturated_blocks_are_identity((c, h, w, seed) in arb_case()) {
        let x = common::random_map(&mut rng::stream(seed, "x"), c, h, w);
        for kind in [AttentionKind::Se, AttentionKind::Cbam] {
            let mut b = random_block(kind, c, seed);
            b.saturate(20.0);
            let y = b.forward(x.view());
            for (a, v) in y.iter().zip(x.iter()) {
                prop_assert!((a - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn blocks_match_loop_oracle((c, h, w, seed) in arb_case()) {
        let x = common::random_map(&mut rng::stream(seed, "x"), c, h, w);
        for kind in [AttentionKind::Se, AttentionKind::Cbam] {
            let b = random_block(kind, c, seed);
            let d = common::max_abs_diff(&common::to_map(&b.forward(x.view())), &common::attention(&common::to_map(&x), &b));
            prop_assert!(d <= 1e-6);
        }
    }
}
