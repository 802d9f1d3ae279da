//! Maximum-likelihood training of attention and flow parameters.
//!
//! Each run draws its own seed from the root seed, trains for a number of
//! epochs and is evaluated after every epoch; the best (run, epoch) snapshot
//! is returned as a checkpoint.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneGrads;
use crate::checkpoint::{Checkpoint, ProbeScore};
use crate::config::RunConfig;
use crate::data::{self, Dataset, Label};
use crate::error::{Error, Result};
use crate::eval;
use crate::flow::{FlowConfig, FlowModel};
use crate::nn::{self, Params};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::AnomalyModel;
use crate::rng;

pub const METRICS_HEADER: &str = "category,run_id,epoch,split,auroc,mean_nll_flawless,mean_nll_anomalous,wall_seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Pick the epoch with the best AUROC on the full test split.
    Test,
    /// Pick on a stratified held-out part of the test split, report on the rest.
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub runs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub n_test_transforms: usize,
    /// Root of every random stream in a run.
    pub seed: u64,
    pub finetune_backbone: bool,
    pub selection: Selection,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            runs: 2,
            batch_size: 24,
            learning_rate: 2e-4,
            beta1: 0.8,
            beta2: 0.8,
            eps: 1e-4,
            weight_decay: 1e-5,
            n_test_transforms: 16,
            seed: 0,
            finetune_backbone: false,
            selection: Selection::Test,
            holdout_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.epochs", self.epochs),
            ("train.runs", self.runs),
            ("train.batch_size", self.batch_size),
            ("train.n_test_transforms", self.n_test_transforms),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.eps must be positive and train.weight_decay non-negative".into()));
        }
        if self.selection == Selection::Holdout && !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("train.holdout_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Seeds derived from the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub root: u64,
    /// Seeded conv weights, shared by every run and ablation row.
    pub weights: u64,
    /// Angles of non-even test-time rotations.
    pub score: u64,
}

impl Seeds {
    pub fn new(root: u64) -> Self {
        Self {
            root,
            weights: rng::derive_seed(root, "backbone"),
            score: rng::derive_seed(root, "test-transforms"),
        }
    }

    pub fn run(&self, run: usize) -> u64 {
        rng::derive_seed(self.root, &format!("run/{run}"))
    }
}

/// One line of the metrics CSV. `auroc` and `mean_nll_anomalous` are empty on `train` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub category: String,
    pub run_id: usize,
    pub epoch: usize,
    pub split: String,
    pub auroc: Option<f64>,
    pub mean_nll_flawless: f64,
    pub mean_nll_anomalous: Option<f64>,
    pub wall_seconds: f64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.9},{},{:.3}",
            self.category,
            self.run_id,
            self.epoch,
            self.split,
            opt(self.auroc),
            self.mean_nll_flawless,
            opt(self.mean_nll_anomalous),
            self.wall_seconds
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from(METRICS_HEADER);
    body.push('\n');
    for r in rows {
        body.push_str(&r.to_csv());
        body.push('\n');
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

impl TrainOutcome {
    pub fn best_auroc(&self) -> f64 {
        self.best.auroc.unwrap_or(f64::NAN)
    }
}

fn split_scores(scores: &[f64], labels: &[Label]) -> (Vec<f64>, Vec<f64>) {
    let mut flawless = Vec::new();
    let mut anomalous = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        match l {
            Label::Flawless => flawless.push(s),
            Label::Anomalous => anomalous.push(s),
        }
    }
    (flawless, anomalous)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Indices of a stratified, seeded held-out subset.
fn holdout_indices(labels: &[Label], fraction: f64, seed: u64) -> Vec<bool> {
    let mut held = vec![false; labels.len()];
    for (class, label) in [Label::Flawless, Label::Anomalous].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng::stream(seed, &format!("holdout/{class}")));
        let take = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
        for &i in &idx[..take.min(idx.len())] {
            held[i] = true;
        }
    }
    held
}

struct Evaluation {
    scores: Vec<f64>,
    rows: Vec<(String, f64, f64, f64)>,
    selection_auroc: f64,
}

fn evaluate_split(scores: &[f64], labels: &[Label], mask: Option<(&[bool], bool)>) -> Result<(f64, f64, f64)> {
    let (s, l): (Vec<f64>, Vec<Label>) = scores
        .iter()
        .zip(labels)
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|(m, want)| m[*i] == want))
        .map(|(_, (&s, &l))| (s, l))
        .unzip();
    let (flawless, anomalous) = split_scores(&s, &l);
    let auroc = eval::auroc(&flawless, &anomalous)?;
    Ok((auroc, mean(&flawless), mean(&anomalous)))
}

fn abort(run: usize, epoch: usize, batch: usize, e: Error) -> Error {
    let detail = match e {
        Error::NumericalOverflow { block, detail } => format!("coupling block {block}: {detail}"),
        other => other.to_string(),
    };
    Error::TrainingAborted {
        run,
        epoch,
        batch,
        detail,
    }
}

/// Trains `cfg.train.runs` runs on an image dataset and returns the best snapshot.
pub fn train(dataset: &Dataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    if dataset.train_samples().is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if let Some(bad) = dataset.train_samples().iter().find(|s| s.label != Label::Flawless) {
        return Err(Error::Config(format!("training split holds anomalous sample {}", bad.id())));
    }
    let seeds = Seeds::new(tc.seed);
    let category = dataset.manifest.category.clone();

    let train_pixels: Vec<_> = dataset.train_samples().par_iter().map(|s| s.load()).collect::<Result<_>>()?;
    let test_pixels: Vec<_> = dataset.test_samples().par_iter().map(|s| s.load()).collect::<Result<_>>()?;
    let labels: Vec<Label> = dataset.test_samples().iter().map(|s| s.label).collect();
    if !labels.contains(&Label::Flawless) || !labels.contains(&Label::Anomalous) {
        return Err(Error::Metric("test split needs flawless and anomalous samples".into()));
    }
    let held = (tc.selection == Selection::Holdout)
        .then(|| holdout_indices(&labels, tc.holdout_fraction, rng::derive_seed(tc.seed, "holdout")));

    let mut metrics = Vec::new();
    let mut best: Option<Checkpoint> = None;
    // Test-time prefixes are reused across epochs and runs while the convs stay frozen.
    let mut prefix_cache: Option<Vec<Vec<Vec<ndarray::Array3<f64>>>>> = None;
    let clock = Instant::now();

    for run in 0..tc.runs {
        let run_seed = seeds.run(run);
        let mut model = AnomalyModel::new(&cfg.backbone, &cfg.attention, &cfg.flow, seeds.weights, run_seed)?;
        let finetune = tc.finetune_backbone;
        let traced = finetune || model.backbone.has_attention();
        let mut adam = {
            let mut params: Vec<&dyn Params> = vec![&model.flow, &model.backbone.attention];
            if finetune {
                params.push(&model.backbone.convs);
            }
            Adam::new(tc.adam(), &params)
        };

        for epoch in 1..=tc.epochs {
            let mut order: Vec<usize> = (0..train_pixels.len()).collect();
            order.shuffle(&mut rng::stream(run_seed, &format!("epoch/{epoch}")));
            let mut losses = Vec::new();

            for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
                let scales = model.scales().to_vec();
                let passes: Vec<_> = chunk
                    .par_iter()
                    .map(|&i| {
                        let aug_seed = rng::derive_seed(run_seed, &format!("aug/{epoch}/{i}"));
                        let input = data::train_transform(&train_pixels[i], aug_seed, &scales);
                        if traced {
                            let (y, t) = model.backbone.forward_traced(&input, finetune);
                            (y, Some(t))
                        } else {
                            (model.backbone.embed(&input), None)
                        }
                    })
                    .collect();
                let d = model.flow.dim();
                let flat: Vec<f64> = passes.iter().flat_map(|(y, _)| y.iter().copied()).collect();
                let y = Array2::from_shape_vec((chunk.len(), d), flat).expect("embedding width");
                let (loss, flow_grad, dy) = model.flow.mean_nll_with_grad(y.view()).map_err(|e| abort(run, epoch, b, e))?;
                if !loss.is_finite() {
                    return Err(abort(run, epoch, b, Error::InvalidInput(format!("loss is {loss}"))));
                }
                losses.push(loss);

                let mut bb_grad: Option<BackboneGrads> = None;
                if traced {
                    let per_sample: Vec<BackboneGrads> = passes
                        .par_iter()
                        .enumerate()
                        .map(|(k, (_, t))| {
                            let row = dy.row(k).to_vec();
                            model.backbone.backward(t.as_ref().expect("traced"), &row, finetune)
                        })
                        .collect();
                    for g in per_sample {
                        match bb_grad.as_mut() {
                            None => bb_grad = Some(g),
                            Some(acc) => {
                                nn::accumulate(&mut acc.attention, &g.attention);
                                if let (Some(a), Some(c)) = (acc.convs.as_mut(), g.convs.as_ref()) {
                                    nn::accumulate(a, c);
                                }
                            }
                        }
                    }
                }
                let empty_att = [None, None, None];
                let att_grad = bb_grad.as_ref().map(|g| &g.attention).unwrap_or(&empty_att);
                let AnomalyModel { backbone, flow } = &mut model;
                let conv_grad = bb_grad.as_ref().and_then(|g| g.convs.as_ref());
                match (finetune, conv_grad) {
                    (true, Some(cg)) => adam.step(
                        &mut [flow, &mut backbone.attention, &mut backbone.convs],
                        &[&flow_grad, att_grad, cg],
                    ),
                    _ => adam.step(&mut [flow, &mut backbone.attention], &[&flow_grad, att_grad]),
                }
            }
            if !nn::all_finite(&model.flow) || !nn::all_finite(&model.backbone.attention) {
                return Err(abort(run, epoch, 0, Error::InvalidInput("parameters became non-finite".into())));
            }

            metrics.push(MetricRow {
                category: category.clone(),
                run_id: run,
                epoch,
                split: "train".into(),
                auroc: None,
                mean_nll_flawless: mean(&losses),
                mean_nll_anomalous: None,
                wall_seconds: clock.elapsed().as_secs_f64(),
            });

            if !finetune && prefix_cache.is_none() && prefix_bytes(&model, &test_pixels, tc.n_test_transforms) <= PREFIX_CACHE_BYTES {
                prefix_cache = Some(
                    test_pixels
                        .iter()
                        .map(|p| model.prefixes(p, tc.n_test_transforms, seeds.score))
                        .collect::<Result<_>>()?,
                );
            }
            let scores: Vec<f64> = match (&prefix_cache, finetune) {
                (Some(cache), false) => cache.iter().map(|p| model.score_prefixes(p)).collect::<Result<_>>()?,
                _ => test_pixels
                    .iter()
                    .map(|p| model.score_pixels(p, tc.n_test_transforms, seeds.score))
                    .collect::<Result<_>>()?,
            };
            let ev = evaluate_epoch(scores, &labels, held.as_deref())?;
            for (split, auroc, nf, na) in &ev.rows {
                metrics.push(MetricRow {
                    category: category.clone(),
                    run_id: run,
                    epoch,
                    split: split.clone(),
                    auroc: Some(*auroc),
                    mean_nll_flawless: *nf,
                    mean_nll_anomalous: Some(*na),
                    wall_seconds: clock.elapsed().as_secs_f64(),
                });
            }
            log::info!("run {run} epoch {epoch}: loss {:.4}, auroc {:.4}", mean(&losses), ev.selection_auroc);

            if best.as_ref().is_none_or(|c| ev.selection_auroc > c.auroc.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(Checkpoint {
                    model: model.clone(),
                    config: cfg.clone(),
                    epoch,
                    run_id: run,
                    rng_digest: rng_digest(&seeds, run_seed, epoch),
                    auroc: Some(ev.selection_auroc),
                    probe: Some(ProbeScore {
                        image_id: dataset.test_samples()[0].id(),
                        value: ev.scores[0],
                        n_transforms: tc.n_test_transforms,
                        seed: seeds.score,
                    }),
                });
            }
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        metrics,
    })
}

fn rng_digest(seeds: &Seeds, run_seed: u64, epoch: usize) -> String {
    rng::sha256_hex(format!("{}:{}:{}:{}:{}", seeds.root, seeds.weights, seeds.score, run_seed, epoch).as_bytes())
}

const PREFIX_CACHE_BYTES: usize = 512 << 20;

fn prefix_bytes(model: &AnomalyModel, pixels: &[ndarray::Array3<f64>], n: usize) -> usize {
    let cut = model.backbone.cut_stage();
    let per_image: usize = model
        .scales()
        .iter()
        .filter_map(|&s| model.backbone.config().stage_shapes(s).ok())
        .map(|shapes| shapes[cut].0 * shapes[cut].1 * shapes[cut].2)
        .sum();
    per_image * n * pixels.len() * std::mem::size_of::<f64>()
}

fn evaluate_epoch(scores: Vec<f64>, labels: &[Label], held: Option<&[bool]>) -> Result<Evaluation> {
    match held {
        None => {
            let (a, nf, na) = evaluate_split(&scores, labels, None)?;
            Ok(Evaluation {
                scores,
                rows: vec![("test".into(), a, nf, na)],
                selection_auroc: a,
            })
        }
        Some(mask) => {
            let val = evaluate_split(&scores, labels, Some((mask, true)))?;
            let test = evaluate_split(&scores, labels, Some((mask, false)))?;
            Ok(Evaluation {
                scores,
                rows: vec![("val".into(), val.0, val.1, val.2), ("test".into(), test.0, test.1, test.2)],
                selection_auroc: val.0,
            })
        }
    }
}

/// Embedding-level data for flow-only training.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub train: Array2<f64>,
    pub test_flawless: Array2<f64>,
    pub test_anomalous: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct FlowOutcome {
    /// Flow of the best epoch.
    pub flow: FlowModel,
    pub best_epoch: usize,
    pub best_auroc: f64,
    /// Full-batch mean training loss before the first update.
    pub initial_train_nll: f64,
    /// Full-batch mean training loss of the final (not best) flow.
    pub final_train_nll: f64,
    pub metrics: Vec<MetricRow>,
}

fn flow_scores(flow: &FlowModel, rows: ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(flow.nll_batch(rows)?.iter().map(|v| v + flow.log_normalizer()).collect())
}

/// Trains a flow directly on embeddings, bypassing the backbone.
pub fn train_flow_only(set: &EmbeddingSet, flow_cfg: &FlowConfig, tc: &TrainConfig, category: &str) -> Result<FlowOutcome> {
    tc.validate()?;
    if set.train.nrows() == 0 {
        return Err(Error::Config("training split is empty".into()));
    }
    let d = set.train.ncols();
    if set.test_flawless.ncols() != d || set.test_anomalous.ncols() != d {
        return Err(Error::Config("embedding sets disagree on dimension".into()));
    }
    let seeds = Seeds::new(tc.seed);
    let clock = Instant::now();
    let mut metrics = Vec::new();
    let mut best: Option<(FlowModel, usize, f64)> = None;
    let mut initial = f64::NAN;
    let mut last = f64::NAN;

    for run in 0..tc.runs {
        let run_seed = seeds.run(run);
        let mut flow = FlowModel::new(d, flow_cfg, &mut rng::stream(run_seed, "flow-init"))?;
        if run == 0 {
            initial = flow.nll_batch(set.train.view())?.mean().expect("non-empty");
        }
        let mut adam = Adam::new(tc.adam(), &[&flow]);
        for epoch in 1..=tc.epochs {
            let mut order: Vec<usize> = (0..set.train.nrows()).collect();
            order.shuffle(&mut rng::stream(run_seed, &format!("epoch/{epoch}")));
            let mut losses = Vec::new();
            for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
                let y = set.train.select(ndarray::Axis(0), chunk);
                let (loss, grad, _) = flow.mean_nll_with_grad(y.view()).map_err(|e| abort(run, epoch, b, e))?;
                if !loss.is_finite() {
                    return Err(abort(run, epoch, b, Error::InvalidInput(format!("loss is {loss}"))));
                }
                losses.push(loss);
                adam.step(&mut [&mut flow], &[&grad]);
            }
            let flawless = flow_scores(&flow, set.test_flawless.view())?;
            let anomalous = flow_scores(&flow, set.test_anomalous.view())?;
            let auroc = eval::auroc(&flawless, &anomalous)?;
            let t = clock.elapsed().as_secs_f64();
            metrics.push(MetricRow {
                category: category.into(),
                run_id: run,
                epoch,
                split: "train".into(),
                auroc: None,
                mean_nll_flawless: mean(&losses),
                mean_nll_anomalous: None,
                wall_seconds: t,
            });
            metrics.push(MetricRow {
                category: category.into(),
                run_id: run,
                epoch,
                split: "test".into(),
                auroc: Some(auroc),
                mean_nll_flawless: mean(&flawless),
                mean_nll_anomalous: Some(mean(&anomalous)),
                wall_seconds: t,
            });
            if best.as_ref().is_none_or(|(_, _, a)| auroc > *a) {
                best = Some((flow.clone(), epoch, auroc));
            }
        }
        if run == 0 {
            last = flow.nll_batch(set.train.view())?.mean().expect("non-empty");
        }
    }
    let (flow, best_epoch, best_auroc) = best.expect("at least one epoch");
    Ok(FlowOutcome {
        flow,
        best_epoch,
        best_auroc,
        initial_train_nll: initial,
        final_train_nll: last,
        metrics,
    })
}
