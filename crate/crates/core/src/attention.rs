//! Squeeze-and-excitation and convolutional block attention.
//!
//! Both blocks map a `C×H×W` feature map to a same-shaped map rescaled by
//! gates in `(0, 1)`. SE uses one channel gate driven by global average
//! pooling; CBAM applies a channel gate (shared MLP over average- and
//! max-pooled descriptors) followed by a spatial gate (convolution over the
//! channel-wise mean and max maps).

use ndarray::{Array1, Array3, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, global_average_pool, join, sigmoid, Conv2d, Linear, Params};

/// Identifier of the parameter initialization recorded alongside blocks.
pub const INIT_SCHEME: &str = "normal-small/zero-bias";

/// A `C×H×W` activation tensor with every element finite.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Array3<f64>);

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!("empty feature map {c}x{h}x{w}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite activation at flat index {pos}")));
        }
        Ok(Self(data))
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    None,
    Se,
    Cbam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Channel reduction factor of the bottleneck MLP.
    pub reduction: usize,
    /// Side of the CBAM spatial convolution; must be odd.
    pub spatial_kernel: usize,
    /// Whether the bottleneck MLP layers carry trainable biases.
    pub bias: bool,
    /// Standard deviation of the initial weights.
    pub init_std: f64,
    /// Initial value of every gate's output bias (0 gives gates of about 0.5).
    pub init_gate_bias: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kind: AttentionKind::None,
            reduction: 16,
            spatial_kernel: 7,
            bias: true,
            init_std: 0.05,
            init_gate_bias: 0.0,
        }
    }
}

impl AttentionConfig {
    pub fn hidden_width(&self, channels: usize) -> Result<usize> {
        if self.reduction == 0 {
            return Err(Error::Config("attention.reduction must be positive".into()));
        }
        let hidden = channels / self.reduction;
        if hidden == 0 {
            return Err(Error::Config(format!(
                "attention.reduction {} leaves no hidden units for {channels} channels",
                self.reduction
            )));
        }
        Ok(hidden)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kind == AttentionKind::None {
            return Ok(());
        }
        self.hidden_width(channels)?;
        if self.kind == AttentionKind::Cbam && self.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "attention.spatial_kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        if !(self.init_std >= 0.0) || !self.init_gate_bias.is_finite() {
            return Err(Error::Config("attention init parameters must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Bottleneck `C → C/r → C` with a rectifier in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub bias: bool,
}

struct MlpTrace {
    input: Array1<f64>,
    hidden: Array1<f64>,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, cfg.init_std).expect("finite std");
        let mut fc1 = Linear::zeros(channels, hidden);
        let mut fc2 = Linear::zeros(hidden, channels);
        fc1.weight.mapv_inplace(|_| normal.sample(rng));
        fc2.weight.mapv_inplace(|_| normal.sample(rng));
        if cfg.bias {
            fc2.bias.fill(cfg.init_gate_bias);
        }
        Self { fc1, fc2, bias: cfg.bias }
    }

    fn channels(&self) -> usize {
        self.fc1.in_features()
    }

    fn forward(&self, v: &Array1<f64>) -> (Array1<f64>, MlpTrace) {
        let hidden = self.fc1.forward_vec(v).mapv(|a| a.max(0.0));
        let out = self.fc2.forward_vec(&hidden);
        (
            out,
            MlpTrace {
                input: v.clone(),
                hidden,
            },
        )
    }

    fn backward(&self, trace: &MlpTrace, dout: &Array1<f64>, grad: &mut Mlp) -> Array1<f64> {
        let mut dh = self.fc2.backward_vec(&trace.hidden, dout, &mut grad.fc2);
        Zip::from(&mut dh).and(&trace.hidden).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        self.fc1.backward_vec(&trace.input, &dh, &mut grad.fc1)
    }

    fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            bias: self.bias,
        }
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let (p1, p2) = (join(prefix, "fc1"), join(prefix, "fc2"));
        let w1 = self.fc1.weight.as_slice().unwrap();
        let w2 = self.fc2.weight.as_slice().unwrap();
        f(&join(&p1, "weight"), self.fc1.weight.shape(), w1);
        if self.bias {
            f(&join(&p1, "bias"), self.fc1.bias.shape(), self.fc1.bias.as_slice().unwrap());
        }
        f(&join(&p2, "weight"), self.fc2.weight.shape(), w2);
        if self.bias {
            f(&join(&p2, "bias"), self.fc2.bias.shape(), self.fc2.bias.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        let (p1, p2) = (join(prefix, "fc1"), join(prefix, "fc2"));
        f(&join(&p1, "weight"), self.fc1.weight.as_slice_mut().unwrap());
        if self.bias {
            f(&join(&p1, "bias"), self.fc1.bias.as_slice_mut().unwrap());
        }
        f(&join(&p2, "weight"), self.fc2.weight.as_slice_mut().unwrap());
        if self.bias {
            f(&join(&p2, "bias"), self.fc2.bias.as_slice_mut().unwrap());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeBlock {
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbamBlock {
    pub mlp: Mlp,
    /// `1×2×k×k` convolution over the stacked (mean, max) channel maps.
    pub spatial: Conv2d,
}

/// Trainable state of one attention insertion site.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionBlock {
    Se(SeBlock),
    Cbam(CbamBlock),
}

/// Intermediate values needed by [`AttentionBlock::backward`].
pub enum AttentionTrace {
    Se {
        mlp: MlpTraceBox,
        gate: Array1<f64>,
    },
    Cbam(Box<CbamTrace>),
}

/// Opaque wrapper so the trace type stays private.
pub struct MlpTraceBox(MlpTrace);

pub struct CbamTrace {
    avg: MlpTrace,
    max: MlpTrace,
    max_at: Vec<usize>,
    channel_gate: Array1<f64>,
    refined: Array3<f64>,
    spatial_cols: ndarray::Array2<f64>,
    spatial_max_at: Vec<usize>,
    spatial_gate: ndarray::Array2<f64>,
}

impl AttentionBlock {
    /// Builds a freshly initialized block, `None` when `cfg.kind` is `None`.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, channels: usize, rng: &mut R) -> Result<Option<Self>> {
        cfg.validate(channels)?;
        let hidden = match cfg.kind {
            AttentionKind::None => return Ok(None),
            _ => cfg.hidden_width(channels)?,
        };
        let mlp = Mlp::init(channels, hidden, cfg, rng);
        Ok(Some(match cfg.kind {
            AttentionKind::Se => AttentionBlock::Se(SeBlock { mlp }),
            AttentionKind::Cbam => {
                let k = cfg.spatial_kernel;
                let mut spatial = Conv2d::zeros(2, 1, k, 1, (k - 1) / 2);
                let normal = Normal::new(0.0, cfg.init_std).expect("finite std");
                spatial.weight.mapv_inplace(|_| normal.sample(rng));
                spatial.bias.fill(cfg.init_gate_bias);
                AttentionBlock::Cbam(CbamBlock { mlp, spatial })
            }
            AttentionKind::None => unreachable!(),
        }))
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionBlock::Se(_) => AttentionKind::Se,
            AttentionBlock::Cbam(_) => AttentionKind::Cbam,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            AttentionBlock::Se(b) => b.mlp.channels(),
            AttentionBlock::Cbam(b) => b.mlp.channels(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            AttentionBlock::Se(b) => AttentionBlock::Se(SeBlock { mlp: b.mlp.zeros_like() }),
            AttentionBlock::Cbam(b) => AttentionBlock::Cbam(CbamBlock {
                mlp: b.mlp.zeros_like(),
                spatial: b.spatial.zeros_like(),
            }),
        }
    }

    /// Forces every gate pre-activation to exactly `value` for any input.
    pub fn saturate(&mut self, value: f64) {
        match self {
            AttentionBlock::Se(b) => {
                b.mlp.fc2.weight.fill(0.0);
                b.mlp.fc2.bias.fill(value);
            }
            AttentionBlock::Cbam(b) => {
                // the MLP runs twice (avg and max paths) and the outputs add
                b.mlp.fc2.weight.fill(0.0);
                b.mlp.fc2.bias.fill(value / 2.0);
                b.spatial.weight.fill(0.0);
                b.spatial.bias.fill(value);
            }
        }
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        match self {
            AttentionBlock::Se(b) => b.gate_and_scale(x).0,
            AttentionBlock::Cbam(b) => b.forward_traced(x).0,
        }
    }

    pub fn forward_traced(&self, x: ArrayView3<f64>) -> (Array3<f64>, AttentionTrace) {
        match self {
            AttentionBlock::Se(b) => {
                let (y, mlp, gate) = b.gate_and_scale(x);
                (y, AttentionTrace::Se { mlp: MlpTraceBox(mlp), gate })
            }
            AttentionBlock::Cbam(b) => {
                let (y, trace) = b.forward_traced(x);
                (y, AttentionTrace::Cbam(Box::new(trace)))
            }
        }
    }

    /// Returns `dL/dx` and accumulates parameter gradients into `grad`.
    pub fn backward(
        &self,
        x: ArrayView3<f64>,
        trace: &AttentionTrace,
        dy: ArrayView3<f64>,
        grad: &mut AttentionBlock,
    ) -> Array3<f64> {
        match (self, trace, grad) {
            (AttentionBlock::Se(b), AttentionTrace::Se { mlp, gate }, AttentionBlock::Se(g)) => {
                b.backward(x, &mlp.0, gate, dy, g)
            }
            (AttentionBlock::Cbam(b), AttentionTrace::Cbam(t), AttentionBlock::Cbam(g)) => b.backward(x, t, dy, g),
            _ => panic!("attention trace does not match block kind"),
        }
    }

    fn check(&self, x: &FeatureMap) -> Result<()> {
        let c = x.dim().0;
        if c != self.channels() {
            return Err(Error::Config(format!(
                "attention block configured for {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok(())
    }
}

impl Params for AttentionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            AttentionBlock::Se(b) => b.mlp.visit(&join(prefix, "mlp"), f),
            AttentionBlock::Cbam(b) => {
                b.mlp.visit(&join(prefix, "mlp"), f);
                b.spatial.visit(&join(prefix, "spatial"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            AttentionBlock::Se(b) => b.mlp.visit_mut(&join(prefix, "mlp"), f),
            AttentionBlock::Cbam(b) => {
                b.mlp.visit_mut(&join(prefix, "mlp"), f);
                b.spatial.visit_mut(&join(prefix, "spatial"), f);
            }
        }
    }
}

fn broadcast_channels(gate: &Array1<f64>) -> ArrayView3<'_, f64> {
    gate.view()
        .into_shape_with_order((gate.len(), 1, 1))
        .expect("channel gate reshape")
}

/// Per-channel max over the spatial plane with the flat position of the winner.
fn channel_max(x: ArrayView3<f64>) -> (Array1<f64>, Vec<usize>) {
    let (c, _, _) = x.dim();
    let mut values = Array1::zeros(c);
    let mut at = Vec::with_capacity(c);
    for (ci, plane) in x.outer_iter().enumerate() {
        let (mut best, mut pos) = (f64::NEG_INFINITY, 0);
        for (i, &v) in plane.iter().enumerate() {
            if v > best {
                best = v;
                pos = i;
            }
        }
        values[ci] = best;
        at.push(pos);
    }
    (values, at)
}

impl SeBlock {
    fn gate_and_scale(&self, x: ArrayView3<f64>) -> (Array3<f64>, MlpTrace, Array1<f64>) {
        let squeezed = global_average_pool(x);
        let (excited, trace) = self.mlp.forward(&squeezed);
        let gate = excited.mapv(sigmoid);
        let y = &x * &broadcast_channels(&gate);
        (y, trace, gate)
    }

    fn backward(
        &self,
        x: ArrayView3<f64>,
        trace: &MlpTrace,
        gate: &Array1<f64>,
        dy: ArrayView3<f64>,
        grad: &mut SeBlock,
    ) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let dgate = (&dy * &x).sum_axis(Axis(2)).sum_axis(Axis(1));
        let dexcite = Zip::from(&dgate).and(gate).map_collect(|&d, &s| d * s * (1.0 - s));
        let dsqueeze = self.mlp.backward(trace, &dexcite, &mut grad.mlp) / (h * w) as f64;
        &dy * &broadcast_channels(gate) + &broadcast_channels(&dsqueeze)
    }
}

impl CbamBlock {
    fn channel_gate(&self, x: ArrayView3<f64>) -> (Array1<f64>, MlpTrace, MlpTrace, Vec<usize>) {
        let avg = global_average_pool(x);
        let (max, max_at) = channel_max(x);
        let (oa, ta) = self.mlp.forward(&avg);
        let (om, tm) = self.mlp.forward(&max);
        ((oa + om).mapv(sigmoid), ta, tm, max_at)
    }

    /// Stacked `2×H×W` (channel mean, channel max) descriptor and the argmax channel per pixel.
    fn spatial_descriptor(x: ArrayView3<f64>) -> (Array3<f64>, Vec<usize>) {
        let (c, h, w) = x.dim();
        let mut desc = Array3::zeros((2, h, w));
        let mut at = vec![0usize; h * w];
        desc.index_axis_mut(Axis(0), 0).assign(&x.mean_axis(Axis(0)).expect("c >= 1"));
        for yy in 0..h {
            for xx in 0..w {
                let (mut best, mut pos) = (f64::NEG_INFINITY, 0);
                for ci in 0..c {
                    let v = x[[ci, yy, xx]];
                    if v > best {
                        best = v;
                        pos = ci;
                    }
                }
                desc[[1, yy, xx]] = best;
                at[yy * w + xx] = pos;
            }
        }
        (desc, at)
    }

    fn spatial_gate(&self, x: ArrayView3<f64>) -> (ndarray::Array2<f64>, ndarray::Array2<f64>, Vec<usize>) {
        let (desc, at) = Self::spatial_descriptor(x);
        let (pre, cols) = self.spatial.forward_with_cols(desc.view());
        let gate = pre.index_axis(Axis(0), 0).mapv(sigmoid);
        (gate, cols, at)
    }

    fn forward_traced(&self, x: ArrayView3<f64>) -> (Array3<f64>, CbamTrace) {
        let (channel_gate, avg, max, max_at) = self.channel_gate(x);
        let refined = &x * &broadcast_channels(&channel_gate);
        let (spatial_gate, spatial_cols, spatial_max_at) = self.spatial_gate(refined.view());
        let y = &refined * &spatial_gate.view().insert_axis(Axis(0));
        (
            y,
            CbamTrace {
                avg,
                max,
                max_at,
                channel_gate,
                refined,
                spatial_cols,
                spatial_max_at,
                spatial_gate,
            },
        )
    }

    fn backward(&self, x: ArrayView3<f64>, t: &CbamTrace, dy: ArrayView3<f64>, grad: &mut CbamBlock) -> Array3<f64> {
        let (c, h, w) = x.dim();

        // spatial gate
        let mut drefined = &dy * &t.spatial_gate.view().insert_axis(Axis(0));
        let dgate = (&dy * &t.refined).sum_axis(Axis(0));
        let dpre = Zip::from(&dgate)
            .and(&t.spatial_gate)
            .map_collect(|&d, &s| d * s * (1.0 - s))
            .insert_axis(Axis(0));
        self.spatial.backward_params(&t.spatial_cols, dpre.view(), &mut grad.spatial);
        let ddesc = self.spatial.backward_input(dpre.view(), (2, h, w));
        let dmean = ddesc.index_axis(Axis(0), 0);
        drefined += &(&dmean / c as f64).insert_axis(Axis(0));
        for yy in 0..h {
            for xx in 0..w {
                drefined[[t.spatial_max_at[yy * w + xx], yy, xx]] += ddesc[[1, yy, xx]];
            }
        }

        // channel gate
        let mut dx = &drefined * &broadcast_channels(&t.channel_gate);
        let dcg = (&drefined * &x).sum_axis(Axis(2)).sum_axis(Axis(1));
        let dexcite = Zip::from(&dcg)
            .and(&t.channel_gate)
            .map_collect(|&d, &s| d * s * (1.0 - s));
        let davg = self.mlp.backward(&t.avg, &dexcite, &mut grad.mlp) / (h * w) as f64;
        let dmax = self.mlp.backward(&t.max, &dexcite, &mut grad.mlp);
        dx += &broadcast_channels(&davg);
        for ci in 0..c {
            let at = t.max_at[ci];
            dx[[ci, at / w, at % w]] += dmax[ci];
        }
        dx
    }
}

pub fn se_block(x: &FeatureMap, state: &SeBlock) -> Result<FeatureMap> {
    let block = AttentionBlock::Se(state.clone());
    block.check(x)?;
    FeatureMap::new(state.gate_and_scale(x.view()).0)
}

/// Channel gate `sigmoid(MLP(avgpool x) + MLP(maxpool x))`, shaped `C×1×1`.
pub fn cbam_channel_attention(x: &FeatureMap, state: &CbamBlock) -> Result<Array3<f64>> {
    if x.dim().0 != state.mlp.channels() {
        return Err(Error::Config(format!(
            "attention block configured for {} channels, input has {}",
            state.mlp.channels(),
            x.dim().0
        )));
    }
    let gate = state.channel_gate(x.view()).0;
    Ok(broadcast_channels(&gate).to_owned())
}

/// Spatial gate over the channel-pooled maps, shaped `1×H×W`.
pub fn cbam_spatial_attention(x: &FeatureMap, state: &CbamBlock) -> Result<Array3<f64>> {
    Ok(state.spatial_gate(x.view()).0.insert_axis(Axis(0)))
}

pub fn cbam_block(x: &FeatureMap, state: &CbamBlock) -> Result<FeatureMap> {
    let block = AttentionBlock::Cbam(state.clone());
    block.check(x)?;
    FeatureMap::new(state.forward_traced(x.view()).0)
}

/// Applies `block` when present, the identity otherwise.
pub fn apply_optional(block: Option<&AttentionBlock>, x: Array3<f64>) -> Array3<f64> {
    match block {
        Some(b) => b.forward(x.view()),
        None => x,
    }
}

pub fn param_count(block: &AttentionBlock) -> usize {
    nn::param_count(block)
}
