//! Five-stage convolutional feature extractor with optional attention blocks.
//!
//! Stage geometry follows the classic AlexNet feature stack:
//!
//! | stage | conv (k / stride / pad) | after          |
//! |-------|-------------------------|----------------|
//! | 1     | 11 / 4 / 2              | ReLU, max-pool |
//! | 2     | 5 / 1 / 2               | ReLU, max-pool |
//! | 3     | 3 / 1 / 1               | ReLU           |
//! | 4     | 3 / 1 / 1               | ReLU           |
//! | 5     | 3 / 1 / 1               | ReLU, max-pool |
//!
//! Attention sites AB1, AB2, AB3 follow stages 1, 3 and 5. Each scale's final
//! map is average-pooled per channel and the per-scale vectors are
//! concatenated into the embedding.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig, AttentionTrace};
use crate::data::TransformedImage;
use crate::error::{Error, Result};
use crate::nn::{self, global_average_pool, join, Conv2d, MaxPool2d, Params};
use crate::rng;

pub const STAGES: usize = 5;
/// Stage index (0-based) each attention site follows.
pub const AB_AFTER_STAGE: [usize; 3] = [0, 2, 4];
/// Parameter names of the five convolutions in a pretrained archive.
pub const CONV_NAMES: [&str; STAGES] = ["features.0", "features.3", "features.6", "features.8", "features.10"];
pub const CACHE_ENV: &str = "ATTNFLOW_CACHE";

const GEOMETRY: [(usize, usize, usize, bool); STAGES] = [
    (11, 4, 2, true),
    (5, 1, 2, true),
    (3, 1, 1, false),
    (3, 1, 1, false),
    (3, 1, 1, true),
];
const POOL: MaxPool2d = MaxPool2d { kernel: 3, stride: 2 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Presence of AB1, AB2, AB3.
    pub ab_flags: [bool; 3],
    /// Square input resolutions, one forward pass each.
    pub scales: Vec<usize>,
    /// Output channels of the five conv stages.
    pub channels: [usize; STAGES],
    /// Optional explicit embedding length; must equal `channels[4] × scales`.
    pub embed_dim: Option<usize>,
    /// Pretrained archive path or URL; empty selects seeded initialization.
    pub pretrained_path: String,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            ab_flags: [true, true, true],
            scales: vec![448, 224, 112],
            channels: [64, 192, 384, 256, 256],
            embed_dim: None,
            pretrained_path: String::new(),
        }
    }
}

impl BackboneConfig {
    pub fn per_scale_len(&self) -> usize {
        self.channels[STAGES - 1]
    }

    pub fn embed_dim(&self) -> usize {
        self.per_scale_len() * self.scales.len()
    }

    /// Output shape `(C, H, W)` of every stage for one input resolution.
    pub fn stage_shapes(&self, scale: usize) -> Result<Vec<(usize, usize, usize)>> {
        let (mut h, mut w) = (scale, scale);
        let mut shapes = Vec::with_capacity(STAGES);
        for (i, &(k, stride, pad, pool)) in GEOMETRY.iter().enumerate() {
            let conv = Conv2d::zeros(1, 1, k, stride, pad);
            let too_small = || Error::Config(format!("input scale {scale} is too small for stage {}", i + 1));
            (h, w) = conv.output_size(h, w).ok_or_else(too_small)?;
            if pool {
                (h, w) = POOL.output_size(h, w).ok_or_else(too_small)?;
            }
            shapes.push((self.channels[i], h, w));
        }
        Ok(shapes)
    }

    pub fn validate(&self, attention: &AttentionConfig) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("backbone.scales must list at least one resolution".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("backbone.channels must be positive".into()));
        }
        for &s in &self.scales {
            self.stage_shapes(s)?;
        }
        if let Some(d) = self.embed_dim {
            if d != self.embed_dim() {
                return Err(Error::Config(format!(
                    "backbone.embed_dim = {d} but {} channels x {} scales gives {}",
                    self.per_scale_len(),
                    self.scales.len(),
                    self.embed_dim()
                )));
            }
        }
        for (ab, &on) in self.ab_flags.iter().enumerate() {
            if on {
                attention.validate(self.channels[AB_AFTER_STAGE[ab]])?;
            }
        }
        Ok(())
    }
}

/// Capture point for activation maps: the last conv stage of one scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerHandle {
    pub scale_index: usize,
    pub scale: usize,
    pub stage: usize,
    /// Whether the captured map is taken after AB3 rescaling.
    pub after_attention: bool,
    pub shape: (usize, usize, usize),
}

/// One handle per configured scale, all on the final conv stage.
pub fn gradcam_target_layer(cfg: &BackboneConfig, attention: &AttentionConfig) -> Result<Vec<LayerHandle>> {
    let ab3 = cfg.ab_flags[2] && attention.kind != crate::attention::AttentionKind::None;
    cfg.scales
        .iter()
        .enumerate()
        .map(|(i, &scale)| {
            let shapes = cfg.stage_shapes(scale)?;
            Ok(LayerHandle {
                scale_index: i,
                scale,
                stage: STAGES - 1,
                after_attention: ab3,
                shape: shapes[STAGES - 1],
            })
        })
        .collect()
}

/// Where the conv weights came from, with a digest for run metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsSource {
    pub description: String,
    pub digest: String,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    pub convs: Vec<Conv2d>,
    pub attention: [Option<AttentionBlock>; 3],
    source: WeightsSource,
}

struct StageTrace {
    input_shape: (usize, usize, usize),
    cols: Option<Array2<f64>>,
    activated: Array3<f64>,
    pool_argmax: Option<Vec<usize>>,
    attention: Option<(Array3<f64>, AttentionTrace)>,
}

pub struct BackboneTrace {
    scales: Vec<Vec<StageTrace>>,
    final_shapes: Vec<(usize, usize, usize)>,
}

/// Gradients of trainable backbone parameters.
#[derive(Clone, Debug)]
pub struct BackboneGrads {
    pub convs: Option<Vec<Conv2d>>,
    pub attention: [Option<AttentionBlock>; 3],
}

impl Backbone {
    /// Loads or seeds the conv weights, then initializes attention blocks from scratch.
    pub fn new(cfg: &BackboneConfig, attention: &AttentionConfig, seed: u64) -> Result<Self> {
        cfg.validate(attention)?;
        let (convs, source) = if cfg.pretrained_path.trim().is_empty() {
            seeded_convs(cfg, seed)
        } else {
            let path = resolve_pretrained(&cfg.pretrained_path)?;
            load_conv_weights(&path, &cfg.channels)?
        };
        let attention = init_attention(cfg, attention, seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            convs,
            attention,
            source,
        })
    }

    pub fn from_parts(
        cfg: &BackboneConfig,
        convs: Vec<Conv2d>,
        attention: [Option<AttentionBlock>; 3],
        source: WeightsSource,
    ) -> Result<Self> {
        if convs.len() != STAGES {
            return Err(Error::Config(format!("expected {STAGES} conv stages, got {}", convs.len())));
        }
        for (i, block) in attention.iter().enumerate() {
            if let Some(b) = block {
                if b.channels() != cfg.channels[AB_AFTER_STAGE[i]] {
                    return Err(Error::Config(format!("AB{} channel count does not match stage", i + 1)));
                }
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            convs,
            attention,
            source,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn source(&self) -> &WeightsSource {
        &self.source
    }

    pub fn has_attention(&self) -> bool {
        self.attention.iter().any(Option::is_some)
    }

    /// SHA-256 over the conv parameter blocks.
    pub fn conv_checksum(&self) -> String {
        let mut bytes = Vec::new();
        for conv in &self.convs {
            conv.visit("", &mut |_, _, v| {
                for x in v {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            });
        }
        rng::sha256_hex(&bytes)
    }

    pub fn saturate_attention(&mut self, value: f64) {
        for block in self.attention.iter_mut().flatten() {
            block.saturate(value);
        }
    }

    fn stage_conv(&self, i: usize, x: ArrayView3<f64>) -> Array3<f64> {
        let mut y = self.convs[i].forward(x);
        nn::relu_inplace(&mut y);
        if GEOMETRY[i].3 {
            y = POOL.forward(y.view()).0;
        }
        y
    }

    fn stage_attention(&self, i: usize, y: Array3<f64>) -> Array3<f64> {
        match AB_AFTER_STAGE.iter().position(|&s| s == i).and_then(|ab| self.attention[ab].as_ref()) {
            Some(block) => block.forward(y.view()),
            None => y,
        }
    }

    /// Final (post-AB3) activation map of one scale.
    pub fn forward_scale(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let mut y = x.to_owned();
        for i in 0..STAGES {
            y = self.stage_attention(i, self.stage_conv(i, y.view()));
        }
        y
    }

    pub fn embed(&self, input: &TransformedImage) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cfg.embed_dim());
        for x in &input.scales {
            out.extend(global_average_pool(self.forward_scale(x.view()).view()));
        }
        out
    }

    /// Stage whose output first meets an attention block (the last stage if none).
    pub fn cut_stage(&self) -> usize {
        (0..3)
            .find(|&ab| self.attention[ab].is_some())
            .map(|ab| AB_AFTER_STAGE[ab])
            .unwrap_or(STAGES - 1)
    }

    /// Conv stack output up to [`Backbone::cut_stage`], before its attention block.
    /// Depends on conv weights only, so it can be cached while they are frozen.
    pub fn frozen_prefix(&self, input: &TransformedImage) -> Vec<Array3<f64>> {
        let cut = self.cut_stage();
        input
            .scales
            .iter()
            .map(|x| {
                let mut y = x.to_owned();
                for i in 0..cut {
                    y = self.stage_conv(i, y.view());
                }
                self.stage_conv(cut, y.view())
            })
            .collect()
    }

    /// Embedding from a [`Backbone::frozen_prefix`] output.
    pub fn embed_from_prefix(&self, prefix: &[Array3<f64>]) -> Vec<f64> {
        let cut = self.cut_stage();
        let mut out = Vec::with_capacity(self.cfg.embed_dim());
        for p in prefix {
            let mut y = self.stage_attention(cut, p.clone());
            for i in cut + 1..STAGES {
                y = self.stage_attention(i, self.stage_conv(i, y.view()));
            }
            out.extend(global_average_pool(y.view()));
        }
        out
    }

    /// Activation map at a capture point.
    pub fn capture(&self, input: &TransformedImage, handle: &LayerHandle) -> Array3<f64> {
        self.forward_scale(input.scales[handle.scale_index].view())
    }

    /// Forward pass keeping what [`Backbone::backward`] needs.
    pub fn forward_traced(&self, input: &TransformedImage, conv_grads: bool) -> (Vec<f64>, BackboneTrace) {
        let mut embedding = Vec::with_capacity(self.cfg.embed_dim());
        let mut scales = Vec::with_capacity(input.scales.len());
        let mut final_shapes = Vec::with_capacity(input.scales.len());
        for x in &input.scales {
            let mut traces = Vec::with_capacity(STAGES);
            let mut y = x.clone();
            for i in 0..STAGES {
                let input_shape = y.dim();
                let (mut a, cols) = if conv_grads {
                    let (a, cols) = self.convs[i].forward_with_cols(y.view());
                    (a, Some(cols))
                } else {
                    (self.convs[i].forward(y.view()), None)
                };
                nn::relu_inplace(&mut a);
                let (mut out, pool_argmax) = if GEOMETRY[i].3 {
                    let (p, arg) = POOL.forward(a.view());
                    (p, Some(arg))
                } else {
                    (a.clone(), None)
                };
                let mut attention = None;
                if let Some(ab) = AB_AFTER_STAGE.iter().position(|&s| s == i) {
                    if let Some(block) = &self.attention[ab] {
                        let (att_out, trace) = block.forward_traced(out.view());
                        attention = Some((out, trace));
                        out = att_out;
                    }
                }
                traces.push(StageTrace {
                    input_shape,
                    cols,
                    activated: a,
                    pool_argmax,
                    attention,
                });
                y = out;
            }
            final_shapes.push(y.dim());
            embedding.extend(global_average_pool(y.view()));
            scales.push(traces);
        }
        (embedding, BackboneTrace { scales, final_shapes })
    }

    /// Backpropagates `dL/dembedding` into attention (and optionally conv) parameters.
    pub fn backward(&self, trace: &BackboneTrace, dembedding: &[f64], conv_grads: bool) -> BackboneGrads {
        let mut grads = BackboneGrads {
            convs: conv_grads.then(|| self.convs.iter().map(Conv2d::zeros_like).collect()),
            attention: [0, 1, 2].map(|i| self.attention[i].as_ref().map(AttentionBlock::zeros_like)),
        };
        let lowest = if conv_grads {
            Some(0)
        } else {
            (0..3).find(|&ab| self.attention[ab].is_some()).map(|ab| AB_AFTER_STAGE[ab])
        };
        let Some(lowest) = lowest else {
            return grads;
        };

        let per_scale = self.cfg.per_scale_len();
        for (s, (stages, &(c, h, w))) in trace.scales.iter().zip(&trace.final_shapes).enumerate() {
            let dpooled = Array1::from(dembedding[s * per_scale..(s + 1) * per_scale].to_vec()) / (h * w) as f64;
            let mut d = dpooled
                .insert_axis(Axis(1))
                .insert_axis(Axis(2))
                .broadcast((c, h, w))
                .expect("broadcast")
                .to_owned();
            for i in (lowest..STAGES).rev() {
                let t = &stages[i];
                if let Some(ab) = AB_AFTER_STAGE.iter().position(|&st| st == i) {
                    if let (Some(block), Some((x, at))) = (&self.attention[ab], &t.attention) {
                        let g = grads.attention[ab].as_mut().expect("grad slot");
                        d = block.backward(x.view(), at, d.view(), g);
                    }
                }
                if i == lowest && !conv_grads {
                    break;
                }
                if let Some(arg) = &t.pool_argmax {
                    d = POOL.backward(d.view(), arg, t.activated.dim());
                }
                nn::relu_backward_inplace(&mut d, &t.activated);
                if let (Some(cg), Some(cols)) = (grads.convs.as_mut(), &t.cols) {
                    self.convs[i].backward_params(cols, d.view(), &mut cg[i]);
                }
                if i > 0 {
                    d = self.convs[i].backward_input(d.view(), t.input_shape);
                }
            }
        }
        grads
    }
}

/// Attention sites are named `ab1`, `ab2`, `ab3`.
impl Params for [Option<AttentionBlock>; 3] {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, block) in self.iter().enumerate() {
            if let Some(b) = block {
                b.visit(&join(prefix, &format!("ab{}", i + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, block) in self.iter_mut().enumerate() {
            if let Some(b) = block {
                b.visit_mut(&join(prefix, &format!("ab{}", i + 1)), f);
            }
        }
    }
}

impl Params for Vec<Conv2d> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (conv, name) in self.iter().zip(CONV_NAMES) {
            conv.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (conv, name) in self.iter_mut().zip(CONV_NAMES) {
            conv.visit_mut(&join(prefix, name), f);
        }
    }
}

pub fn init_attention(cfg: &BackboneConfig, attention: &AttentionConfig, seed: u64) -> Result<[Option<AttentionBlock>; 3]> {
    let mut blocks: [Option<AttentionBlock>; 3] = [None, None, None];
    for ab in 0..3 {
        if cfg.ab_flags[ab] {
            let mut r = rng::stream(seed, &format!("attention-init/ab{}", ab + 1));
            blocks[ab] = AttentionBlock::init(attention, cfg.channels[AB_AFTER_STAGE[ab]], &mut r)?;
        }
    }
    Ok(blocks)
}

fn empty_convs(channels: &[usize; STAGES]) -> Vec<Conv2d> {
    let mut input = 3;
    GEOMETRY
        .iter()
        .zip(channels)
        .map(|(&(k, stride, pad, _), &out)| {
            let conv = Conv2d::zeros(input, out, k, stride, pad);
            input = out;
            conv
        })
        .collect()
}

/// Deterministic stand-in for pretrained weights.
pub fn seeded_convs(cfg: &BackboneConfig, seed: u64) -> (Vec<Conv2d>, WeightsSource) {
    let mut r = rng::stream(seed, "backbone-init");
    let convs: Vec<Conv2d> = empty_convs(&cfg.channels)
        .into_iter()
        .map(|c| Conv2d::uniform(c.in_channels(), c.out_channels(), c.kernel(), c.stride, c.padding, &mut r))
        .collect();
    let source = WeightsSource {
        description: format!("seeded:{seed}"),
        digest: format!("seeded:{:016x}", rng::derive_seed(seed, "backbone-init")),
    };
    (convs, source)
}

fn cache_dir() -> PathBuf {
    if let Ok(dir) = std::env::var(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var("XDG_CACHE_HOME") {
        return PathBuf::from(dir).join("attnflow");
    }
    std::env::var("HOME")
        .map(|h| PathBuf::from(h).join(".cache").join("attnflow"))
        .unwrap_or_else(|_| PathBuf::from(".attnflow-cache"))
}

/// Local path for a weights reference; URLs are downloaded once into the cache.
pub fn resolve_pretrained(reference: &str) -> Result<PathBuf> {
    if !(reference.starts_with("http://") || reference.starts_with("https://")) {
        let path = PathBuf::from(reference);
        if !path.is_file() {
            return Err(Error::Init(format!("pretrained weights not found at {}", path.display())));
        }
        return Ok(path);
    }
    let dir = cache_dir();
    let name = reference.rsplit('/').next().filter(|n| !n.is_empty()).unwrap_or("weights.safetensors");
    let cached = dir.join(format!("{}-{name}", &rng::sha256_hex(reference.as_bytes())[..12]));
    if cached.is_file() {
        return Ok(cached);
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    log::info!("fetching pretrained weights from {reference}");
    let bytes = ureq::get(reference)
        .call()
        .and_then(|mut r| r.body_mut().with_config().limit(1 << 31).read_to_vec())
        .map_err(|e| Error::Init(format!("cannot fetch {reference}: {e}")))?;
    let partial = cached.with_extension("partial");
    fs::write(&partial, &bytes).map_err(|e| Error::io(&partial, e))?;
    fs::rename(&partial, &cached).map_err(|e| Error::io(&cached, e))?;
    Ok(cached)
}

fn tensor_f64(view: &TensorView<'_>) -> Result<Vec<f64>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect()),
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect()),
        other => Err(Error::Init(format!("unsupported weight dtype {other:?}"))),
    }
}

/// Reads the five conv layers from a safetensors archive (torchvision naming).
pub fn load_conv_weights(path: &Path, channels: &[usize; STAGES]) -> Result<(Vec<Conv2d>, WeightsSource)> {
    let bytes = fs::read(path).map_err(|e| Error::Init(format!("cannot read {}: {e}", path.display())))?;
    let tensors = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Init(format!("{} is not a weights archive: {e}", path.display())))?;
    let mut convs = empty_convs(channels);
    for (conv, name) in convs.iter_mut().zip(CONV_NAMES) {
        let get = |suffix: &str| {
            let key = format!("{name}.{suffix}");
            tensors
                .tensor(&key)
                .map_err(|_| Error::Init(format!("{} lacks tensor {key}", path.display())))
        };
        let w = get("weight")?;
        let b = get("bias")?;
        if w.shape() != conv.weight.shape() || b.shape() != conv.bias.shape() {
            return Err(Error::Init(format!(
                "{name}: archive shape {:?} does not match configured {:?}",
                w.shape(),
                conv.weight.shape()
            )));
        }
        conv.weight = Array4::from_shape_vec(conv.weight.raw_dim(), tensor_f64(&w)?).expect("shape checked");
        conv.bias = Array1::from(tensor_f64(&b)?);
    }
    let source = WeightsSource {
        description: path.display().to_string(),
        digest: rng::sha256_hex(&bytes),
    };
    Ok((convs, source))
}

/// Writes conv layers in the archive layout [`load_conv_weights`] reads.
pub fn save_conv_weights(convs: &[Conv2d], path: &Path) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (conv, name) in convs.iter().zip(CONV_NAMES) {
        conv.visit(name, &mut |n, shape, v| {
            buffers.push((n.to_string(), shape.to_vec(), v.iter().flat_map(|x| x.to_le_bytes()).collect()));
        });
    }
    let views: Vec<(String, TensorView<'_>)> = buffers
        .iter()
        .map(|(n, shape, bytes)| (n.clone(), TensorView::new(Dtype::F64, shape.clone(), bytes).expect("valid tensor")))
        .collect();
    safetensors::serialize_to_file(views, None, path).map_err(|e| Error::Init(format!("cannot write weights: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            scales: vec![64],
            channels: [8, 8, 8, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn stage_arithmetic() {
        let cfg = BackboneConfig::default();
        let shapes = cfg.stage_shapes(224).unwrap();
        assert_eq!(shapes[0], (64, 27, 27));
        assert_eq!(shapes[1], (192, 13, 13));
        assert_eq!(shapes[4], (256, 6, 6));
        assert_eq!(cfg.stage_shapes(448).unwrap()[4], (256, 13, 13));
        assert_eq!(tiny().stage_shapes(64).unwrap()[4], (8, 1, 1));
        assert!(tiny().stage_shapes(40).is_err());
        assert_eq!(cfg.embed_dim(), 768);
    }

    #[test]
    fn target_layer_is_last_stage() {
        let mut cfg = tiny();
        cfg.scales = vec![128];
        let att = AttentionConfig {
            kind: AttentionKind::Se,
            reduction: 2,
            ..Default::default()
        };
        let handles = gradcam_target_layer(&cfg, &att).unwrap();
        assert_eq!(handles.len(), 1);
        assert_eq!(handles[0].stage, STAGES - 1);
        assert!(handles[0].after_attention);
        assert_eq!(handles[0].shape, (8, 3, 3));
    }

    #[test]
    fn missing_checkpoint_is_init_error() {
        let mut cfg = tiny();
        cfg.pretrained_path = "/nonexistent/alexnet.safetensors".into();
        assert!(matches!(
            Backbone::new(&cfg, &AttentionConfig::default(), 0),
            Err(Error::Init(_))
        ));
    }

    #[test]
    fn embed_dim_mismatch_rejected() {
        let mut cfg = tiny();
        cfg.embed_dim = Some(9);
        assert!(cfg.validate(&AttentionConfig::default()).is_err());
    }
}
