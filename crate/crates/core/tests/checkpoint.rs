use std::collections::HashMap;
use std::fs;
use std::path::Path;

use attnflow::backbone::{save_conv_weights, seeded_convs};
use attnflow::checkpoint::{load_flow, save_flow, Checkpoint, LoadOptions, ProbeScore, FORMAT_VERSION};
use attnflow::config::RunConfig;
use attnflow::flow::FlowConfig;
use attnflow::pipeline::AnomalyModel;
use attnflow::synth;
use attnflow::trainer::Seeds;
use attnflow::Error;
use safetensors::tensor::TensorView;
use safetensors::SafeTensors;

const SMALL: &str = r#"
[backbone]
scales = [64]
channels = [8, 16, 16, 16, 16]

[attention]
kind = "se"
reduction = 4
init_std = 0.3

[flow]
blocks = 2

[train]
seed = 11
n_test_transforms = 3
"#;

fn config(extra: &[&str]) -> RunConfig {
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    RunConfig::parse(SMALL, &overrides).unwrap()
}

fn checkpoint(cfg: RunConfig, dir: &Path) -> Checkpoint {
    let seeds = Seeds::new(cfg.train.seed);
    let mut model = AnomalyModel::new(&cfg.backbone, &cfg.attention, &cfg.flow, seeds.weights, seeds.run(0)).unwrap();
    // move the flow away from its identity initialization
    let n = attnflow::nn::param_count(&model.flow);
    let values: Vec<f64> = (0..n).map(|i| ((i % 13) as f64 - 6.0) * 0.01).collect();
    attnflow::nn::unflatten(&mut model.flow, &values);
    let probe_path = dir.join("probe.png");
    synth::anomalous_image(64, 3).save(&probe_path).unwrap();
    let pixels = attnflow::imageops::decode(&probe_path).unwrap();
    let n = cfg.train.n_test_transforms;
    let value = model.score_pixels(&pixels, n, seeds.score).unwrap();
    Checkpoint {
        model,
        config: cfg,
        epoch: 4,
        run_id: 1,
        rng_digest: "abc".into(),
        auroc: Some(0.875),
        probe: Some(ProbeScore {
            image_id: probe_path.display().to_string(),
            value,
            n_transforms: n,
            seed: seeds.score,
        }),
    }
}

/// Re-encodes an archive with `edit` applied to its metadata.
fn rewrite_metadata(path: &Path, edit: impl FnOnce(&mut HashMap<String, String>)) {
    let bytes = fs::read(path).unwrap();
    let archive = SafeTensors::deserialize(&bytes).unwrap();
    let (_, meta) = SafeTensors::read_metadata(&bytes).unwrap();
    let mut meta = meta.metadata().clone().unwrap();
    edit(&mut meta);
    let tensors: Vec<(String, TensorView<'_>)> =
        archive.tensors().into_iter().map(|(n, v)| (n.to_string(), v)).collect();
    fs::write(path, safetensors::serialize(tensors, Some(meta)).unwrap()).unwrap();
}

fn edit_header(path: &Path, edit: impl FnOnce(&mut serde_json::Value)) {
    rewrite_metadata(path, |meta| {
        let mut header: serde_json::Value = serde_json::from_str(&meta["header"]).unwrap();
        edit(&mut header);
        meta.insert("header".into(), header.to_string());
    });
}

#[test]
fn save_then_load_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(config(&[]), dir.path());
    let path = dir.path().join("model.safetensors");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model.flow, ck.model.flow);
    assert_eq!(back.model.backbone.attention, ck.model.backbone.attention);
    assert_eq!(back.model.backbone.convs, ck.model.backbone.convs);
    assert_eq!(back.config, ck.config);
    assert_eq!((back.epoch, back.run_id, back.rng_digest.as_str()), (4, 1, "abc"));
    assert_eq!(back.auroc, Some(0.875));
    assert_eq!(back.probe, ck.probe);

    let (stored, now) = back.rescore_probe().unwrap().unwrap();
    assert!((stored - now).abs() <= 1e-6, "{stored} vs {now}");
}

#[test]
fn finetuned_convs_are_stored() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = checkpoint(config(&["train.finetune_backbone=true"]), dir.path());
    ck.model.backbone.convs[2].bias.fill(0.25);
    let path = dir.path().join("ft.safetensors");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model.backbone.convs, ck.model.backbone.convs);
}

#[test]
fn missing_attention_tensors_are_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(config(&["attention.kind=\"none\""]), dir.path());
    let path = dir.path().join("plain.safetensors");
    ck.save(&path).unwrap();
    edit_header(&path, |h| h["config"]["attention"]["kind"] = "se".into());
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err}");
    assert!(err.to_string().contains("attention"), "{err}");
}

#[test]
fn newer_format_version_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.safetensors");
    checkpoint(config(&[]), dir.path()).save(&path).unwrap();
    let next = FORMAT_VERSION + 1;
    rewrite_metadata(&path, |m| {
        m.insert("format_version".into(), next.to_string());
    });
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Version { found, supported } if found == next && supported == FORMAT_VERSION));
    let msg = err.to_string();
    assert!(msg.contains(&next.to_string()) && msg.contains(&FORMAT_VERSION.to_string()), "{msg}");
}

#[test]
fn damaged_archives_are_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.safetensors");
    checkpoint(config(&[]), dir.path()).save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();

    let truncated = &bytes[..bytes.len() - 16];
    let err = Checkpoint::from_bytes(truncated, LoadOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Corrupt(_)), "{err}");
    assert_eq!(err.exit_code(), 4);

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    let err = Checkpoint::from_bytes(&flipped, LoadOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Corrupt(_)), "{err}");

    let err = Checkpoint::from_bytes(b"garbage", LoadOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Corrupt(_)), "{err}");
    assert!(matches!(Checkpoint::load(&dir.path().join("absent")), Err(Error::Io { .. })));
}

#[test]
fn changed_pretrained_weights_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("alexnet.safetensors");
    let base = config(&[]);
    save_conv_weights(&seeded_convs(&base.backbone, 1).0, &weights).unwrap();
    let cfg = config(&[&format!("backbone.pretrained_path=\"{}\"", weights.display())]);
    let ck = checkpoint(cfg, dir.path());
    let path = dir.path().join("p.safetensors");
    ck.save(&path).unwrap();
    Checkpoint::load(&path).unwrap();

    save_conv_weights(&seeded_convs(&base.backbone, 2).0, &weights).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    let Error::DigestMismatch { expected, found } = &err else {
        panic!("expected digest mismatch, got {err}");
    };
    assert_eq!(expected, &ck.model.backbone.source().digest);
    assert_ne!(expected, found);
    assert_eq!(err.exit_code(), 2);

    let loaded = Checkpoint::load_with(&path, LoadOptions { allow_digest_mismatch: true }).unwrap();
    assert_eq!(loaded.model.backbone.source().digest, *found);
    assert_eq!(loaded.model.flow, ck.model.flow);
}

#[test]
fn edited_weights_digest_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.safetensors");
    checkpoint(config(&[]), dir.path()).save(&path).unwrap();
    edit_header(&path, |h| h["weights"]["digest"] = "seeded:0000".into());
    assert!(matches!(Checkpoint::load(&path), Err(Error::DigestMismatch { .. })));
    Checkpoint::load_with(&path, LoadOptions { allow_digest_mismatch: true }).unwrap();
}

#[test]
fn flow_only_archive_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FlowConfig {
        blocks: 3,
        ..Default::default()
    };
    let mut flow = attnflow::flow::FlowModel::new(10, &cfg, &mut attnflow::rng::stream(5, "f")).unwrap();
    let n = attnflow::nn::param_count(&flow);
    attnflow::nn::unflatten(&mut flow, &(0..n).map(|i| (i as f64).sin() * 0.1).collect::<Vec<_>>());
    let path = dir.path().join("flow.safetensors");
    save_flow(&flow, &cfg, &path).unwrap();
    assert_eq!(load_flow(&path).unwrap(), flow);
    // a full checkpoint loader refuses a flow-only archive
    assert!(matches!(Checkpoint::load(&path), Err(Error::Corrupt(_))));
}
