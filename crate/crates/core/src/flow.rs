//! Invertible density model over feature embeddings.
//!
//! A stack of affine coupling blocks. Each block permutes its input with a
//! fixed bijection, splits it into halves `(u1, u2)` and runs two sub-steps:
//!
//! ```text
//! v2 = u2 ⊙ exp(c(s_a(u1))) + t_a(u1)
//! v1 = u1 ⊙ exp(c(s_b(v2))) + t_b(v2)
//! ```
//!
//! where `c(s) = (2α/π)·atan(s·π/(2α))` softly bounds the log-scale to
//! `(-α, α)`. The block's log-determinant is the sum of all clamped
//! log-scales, so the whole stack has an exact, cheap log |det J|.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub blocks: usize,
    /// Bound α on the clamped log-scale.
    pub clamp: f64,
    /// Hidden width of the coupling subnets; 0 means twice the flow dimension.
    pub hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            clamp: 3.0,
            hidden: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("flow.blocks must be at least 1".into()));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::Config(format!("flow.clamp must be positive, got {}", self.clamp)));
        }
        Ok(())
    }

    pub fn hidden_width(&self, dim: usize) -> usize {
        if self.hidden == 0 {
            2 * dim
        } else {
            self.hidden
        }
    }
}

/// Soft clamp `c(s) = (2α/π)·atan(s·π/(2α))`.
#[inline]
pub fn soft_clamp(s: f64, alpha: f64) -> f64 {
    (2.0 * alpha / PI) * (s * PI / (2.0 * alpha)).atan()
}

#[inline]
fn soft_clamp_grad(s: f64, alpha: f64) -> f64 {
    let u = s * PI / (2.0 * alpha);
    1.0 / (1.0 + u * u)
}

/// Two-layer rectifier network producing `[log-scale | translation]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet {
    pub l1: Linear,
    pub l2: Linear,
}

impl Subnet {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::uniform(input, hidden, rng),
            l2: Linear::zeros(hidden, 2 * output),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let hidden = self.l1.forward(x).mapv(|v| v.max(0.0));
        let out = self.l2.forward(hidden.view());
        (out, hidden)
    }

    fn backward(&self, x: ArrayView2<f64>, hidden: &Array2<f64>, dout: ArrayView2<f64>, grad: &mut Subnet) -> Array2<f64> {
        let mut dh = self.l2.backward(hidden.view(), dout, &mut grad.l2);
        Zip::from(&mut dh).and(hidden).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        self.l1.backward(x, dh.view(), &mut grad.l1)
    }

    fn zeros_like(&self) -> Self {
        Self {
            l1: self.l1.zeros_like(),
            l2: self.l2.zeros_like(),
        }
    }
}

impl Params for Subnet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.l1.visit(&join(prefix, "l1"), f);
        self.l2.visit(&join(prefix, "l2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.l1.visit_mut(&join(prefix, "l1"), f);
        self.l2.visit_mut(&join(prefix, "l2"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    permutation: Vec<usize>,
    inverse: Vec<usize>,
    clamp: f64,
    split: usize,
    /// Conditions on the first half, transforms the second.
    pub first: Subnet,
    /// Conditions on the transformed second half, transforms the first.
    pub second: Subnet,
}

struct BlockTrace {
    u1: Array2<f64>,
    u2: Array2<f64>,
    hidden_a: Array2<f64>,
    raw_a: Array2<f64>,
    scale_a: Array2<f64>,
    v2: Array2<f64>,
    hidden_b: Array2<f64>,
    raw_b: Array2<f64>,
    scale_b: Array2<f64>,
}

/// Saved activations of a traced forward pass.
pub struct FlowTrace {
    blocks: Vec<BlockTrace>,
}

fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    let mut inverse = vec![usize::MAX; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        if p >= perm.len() || inverse[p] != usize::MAX {
            return Err(Error::Config(format!("coupling permutation is not a bijection at position {i}")));
        }
        inverse[p] = i;
    }
    Ok(inverse)
}

impl CouplingBlock {
    pub fn new(permutation: Vec<usize>, clamp: f64, first: Subnet, second: Subnet) -> Result<Self> {
        let dim = permutation.len();
        let inverse = invert_permutation(&permutation)?;
        let split = dim / 2;
        let rest = dim - split;
        let shapes_ok = first.l1.in_features() == split
            && first.l2.out_features() == 2 * rest
            && second.l1.in_features() == rest
            && second.l2.out_features() == 2 * split
            && first.l1.out_features() == first.l2.in_features()
            && second.l1.out_features() == second.l2.in_features();
        if !shapes_ok {
            return Err(Error::Config(format!("coupling subnet shapes do not fit dimension {dim}")));
        }
        Ok(Self {
            permutation,
            inverse,
            clamp,
            split,
            first,
            second,
        })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn inverse_permutation(&self) -> &[usize] {
        &self.inverse
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    fn zeros_like(&self) -> Self {
        Self {
            first: self.first.zeros_like(),
            second: self.second.zeros_like(),
            ..self.clone()
        }
    }

    fn clamped(&self, raw: &Array2<f64>) -> Array2<f64> {
        let alpha = self.clamp;
        raw.mapv(|s| soft_clamp(s, alpha))
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>, BlockTrace) {
        let d1 = self.split;
        let u = x.select(Axis(1), &self.permutation);
        let u1 = u.slice(s![.., ..d1]).to_owned();
        let u2 = u.slice(s![.., d1..]).to_owned();
        let d2 = u2.ncols();

        let (out_a, hidden_a) = self.first.forward(u1.view());
        let raw_a = out_a.slice(s![.., ..d2]).to_owned();
        let scale_a = self.clamped(&raw_a);
        let v2 = &u2 * &scale_a.mapv(f64::exp) + &out_a.slice(s![.., d2..]);

        let (out_b, hidden_b) = self.second.forward(v2.view());
        let raw_b = out_b.slice(s![.., ..d1]).to_owned();
        let scale_b = self.clamped(&raw_b);
        let v1 = &u1 * &scale_b.mapv(f64::exp) + &out_b.slice(s![.., d1..]);

        let log_det = scale_a.sum_axis(Axis(1)) + scale_b.sum_axis(Axis(1));
        let out = concatenate![Axis(1), v1, v2];
        (
            out,
            log_det,
            BlockTrace {
                u1,
                u2,
                hidden_a,
                raw_a,
                scale_a,
                v2,
                hidden_b,
                raw_b,
                scale_b,
            },
        )
    }

    fn inverse(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let d1 = self.split;
        let v1 = z.slice(s![.., ..d1]);
        let v2 = z.slice(s![.., d1..]);
        let d2 = v2.ncols();

        let (out_b, _) = self.second.forward(v2);
        let scale_b = self.clamped(&out_b.slice(s![.., ..d1]).to_owned());
        let u1 = (&v1 - &out_b.slice(s![.., d1..])) * scale_b.mapv(|s| (-s).exp());

        let (out_a, _) = self.first.forward(u1.view());
        let scale_a = self.clamped(&out_a.slice(s![.., ..d2]).to_owned());
        let u2 = (&v2 - &out_a.slice(s![.., d2..])) * scale_a.mapv(|s| (-s).exp());

        concatenate![Axis(1), u1, u2].select(Axis(1), &self.inverse)
    }

    fn backward(
        &self,
        t: &BlockTrace,
        dout: ArrayView2<f64>,
        dlog_det: ArrayView2<f64>,
        grad: &mut CouplingBlock,
    ) -> Array2<f64> {
        let d1 = self.split;
        let alpha = self.clamp;
        let dv1 = dout.slice(s![.., ..d1]);
        let mut dv2 = dout.slice(s![.., d1..]).to_owned();

        // second sub-step: v1 = u1 * exp(c(raw_b)) + t_b
        let exp_b = t.scale_b.mapv(f64::exp);
        let dscale_b = &dv1 * &t.u1 * &exp_b + &dlog_det;
        let draw_b = dscale_b * t.raw_b.mapv(|s| soft_clamp_grad(s, alpha));
        let mut du1 = &dv1 * &exp_b;
        let dout_b = concatenate![Axis(1), draw_b, dv1];
        dv2 += &self
            .second
            .backward(t.v2.view(), &t.hidden_b, dout_b.view(), &mut grad.second);

        // first sub-step: v2 = u2 * exp(c(raw_a)) + t_a
        let exp_a = t.scale_a.mapv(f64::exp);
        let dscale_a = &dv2 * &t.u2 * &exp_a + &dlog_det;
        let draw_a = dscale_a * t.raw_a.mapv(|s| soft_clamp_grad(s, alpha));
        let du2 = &dv2 * &exp_a;
        let dout_a = concatenate![Axis(1), draw_a, dv2];
        du1 += &self
            .first
            .backward(t.u1.view(), &t.hidden_a, dout_a.view(), &mut grad.first);

        concatenate![Axis(1), du1, du2].select(Axis(1), &self.inverse)
    }
}

impl Params for CouplingBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

/// Result of mapping one embedding into the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub z: Vec<f64>,
    /// Accumulated log |det J| of the forward map.
    pub log_det: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    pub blocks: Vec<CouplingBlock>,
}

impl FlowModel {
    /// Fresh model: random permutations, zeroed output layers (identity density transform).
    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: &FlowConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if dim < 2 {
            return Err(Error::Config(format!("flow dimension must be at least 2, got {dim}")));
        }
        let hidden = cfg.hidden_width(dim);
        let (d1, d2) = (dim / 2, dim - dim / 2);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let mut perm: Vec<usize> = (0..dim).collect();
            perm.shuffle(rng);
            let first = Subnet::init(d1, hidden, d2, rng);
            let second = Subnet::init(d2, hidden, d1, rng);
            blocks.push(CouplingBlock::new(perm, cfg.clamp, first, second)?);
        }
        Ok(Self { dim, blocks })
    }

    pub fn from_blocks(blocks: Vec<CouplingBlock>) -> Result<Self> {
        let dim = blocks
            .first()
            .map(|b| b.permutation.len())
            .ok_or_else(|| Error::Config("flow needs at least one block".into()))?;
        if blocks.iter().any(|b| b.permutation.len() != dim) {
            return Err(Error::Config("coupling blocks disagree on dimension".into()));
        }
        Ok(Self { dim, blocks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            blocks: self.blocks.iter().map(CouplingBlock::zeros_like).collect(),
        }
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim {
            return Err(Error::Config(format!(
                "embedding length {cols} does not match flow dimension {}",
                self.dim
            )));
        }
        Ok(())
    }

    fn check_finite(block: usize, z: &Array2<f64>, log_det: &Array1<f64>) -> Result<()> {
        if z.iter().chain(log_det.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow {
                block,
                detail: "latent or log-determinant is not finite".into(),
            });
        }
        Ok(())
    }

    /// Batched forward map: rows of `y` are embeddings.
    pub fn forward_batch(&self, y: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_dim(y.ncols())?;
        let mut z = y.to_owned();
        let mut log_det = Array1::zeros(y.nrows());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, ld, _) = block.forward(z.view());
            z = out;
            log_det += &ld;
            Self::check_finite(i, &z, &log_det)?;
        }
        Ok((z, log_det))
    }

    pub fn forward_traced(&self, y: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, FlowTrace)> {
        self.check_dim(y.ncols())?;
        let mut z = y.to_owned();
        let mut log_det = Array1::zeros(y.nrows());
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, ld, trace) = block.forward(z.view());
            z = out;
            log_det += &ld;
            Self::check_finite(i, &z, &log_det)?;
            traces.push(trace);
        }
        Ok((z, log_det, FlowTrace { blocks: traces }))
    }

    /// Backpropagates `dL/dz` and `dL/dlog_det` (one per row); returns
    /// parameter gradients and `dL/dy`.
    pub fn backward(&self, trace: &FlowTrace, dz: ArrayView2<f64>, dlog_det: ArrayView2<f64>) -> (FlowModel, Array2<f64>) {
        let mut grad = self.zeros_like();
        let mut d = dz.to_owned();
        for ((block, t), g) in self
            .blocks
            .iter()
            .zip(&trace.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            d = block.backward(t, d.view(), dlog_det, g);
        }
        (grad, d)
    }

    pub fn inverse_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(z.ncols())?;
        let mut y = z.to_owned();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            y = block.inverse(y.view());
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalOverflow {
                    block: i,
                    detail: "inverse produced a non-finite value".into(),
                });
            }
        }
        Ok(y)
    }

    /// Per-row `‖z‖²/2 − log_det`.
    pub fn nll_batch(&self, y: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (z, log_det) = self.forward_batch(y)?;
        Ok(nll_from_latent(&z, &log_det))
    }

    /// Per-row `log p(y)` under the standard-normal base.
    pub fn log_likelihood_batch(&self, y: ArrayView2<f64>) -> Result<Array1<f64>> {
        let c = self.log_normalizer();
        Ok(self.nll_batch(y)?.mapv(|l| -l - c))
    }

    /// `(d/2)·log(2π)`.
    pub fn log_normalizer(&self) -> f64 {
        0.5 * self.dim as f64 * (2.0 * PI).ln()
    }

    /// Mean training loss over the batch with its gradients.
    pub fn mean_nll_with_grad(&self, y: ArrayView2<f64>) -> Result<(f64, FlowModel, Array2<f64>)> {
        let (z, log_det, trace) = self.forward_traced(y)?;
        let n = y.nrows() as f64;
        let loss = nll_from_latent(&z, &log_det).sum() / n;
        let dz = &z / n;
        let dlog_det = Array2::from_elem((y.nrows(), 1), -1.0 / n);
        let (grad, dy) = self.backward(&trace, dz.view(), dlog_det.view());
        Ok((loss, grad, dy))
    }
}

impl Params for FlowModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

fn nll_from_latent(z: &Array2<f64>, log_det: &Array1<f64>) -> Array1<f64> {
    z.map_axis(Axis(1), |row| 0.5 * row.dot(&row)) - log_det
}

fn as_row(y: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, y.len()), y).expect("row view")
}

pub fn flow_forward(y: &[f64], model: &FlowModel) -> Result<LatentVector> {
    let (z, log_det) = model.forward_batch(as_row(y))?;
    Ok(LatentVector {
        z: z.row(0).to_vec(),
        log_det: log_det[0],
    })
}

pub fn flow_inverse(z: &LatentVector, model: &FlowModel) -> Result<Vec<f64>> {
    Ok(model.inverse_batch(as_row(&z.z))?.row(0).to_vec())
}

/// `‖z‖²/2 − log_det`: negative log-likelihood without the `(d/2)·log(2π)` constant.
pub fn nll_loss(y: &[f64], model: &FlowModel) -> Result<f64> {
    let latent = flow_forward(y, model)?;
    Ok(latent_nll(&latent))
}

pub fn latent_nll(latent: &LatentVector) -> f64 {
    0.5 * latent.z.iter().map(|v| v * v).sum::<f64>() - latent.log_det
}

pub fn log_likelihood(y: &[f64], model: &FlowModel) -> Result<f64> {
    Ok(-nll_loss(y, model)? - model.log_normalizer())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(dim: usize, blocks: usize, seed: u64) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig {
            blocks,
            ..Default::default()
        };
        FlowModel::new(dim, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn identity_initialized_flow_is_a_permutation() {
        let model = small(6, 3, 0);
        let y: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 - 1.0).collect();
        let latent = flow_forward(&y, &model).unwrap();
        assert_eq!(latent.log_det, 0.0);
        let mut expected = y.clone();
        for b in &model.blocks {
            expected = b.permutation().iter().map(|&p| expected[p]).collect();
        }
        assert_eq!(latent.z, expected);
        let back = flow_inverse(&latent, &model).unwrap();
        assert_eq!(back, y);
    }

    #[test]
    fn loss_arithmetic() {
        let latent = LatentVector {
            z: vec![1.0, -1.0],
            log_det: 0.5,
        };
        assert_eq!(latent_nll(&latent), 0.5);
        let model = small(2, 1, 1);
        assert_eq!(nll_loss(&[0.0, 0.0], &model).unwrap(), 0.0);
        let lp = log_likelihood(&[0.0, 0.0], &model).unwrap();
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn permutations_compose_to_identity() {
        let model = small(9, 4, 2);
        for b in &model.blocks {
            for i in 0..9 {
                assert_eq!(b.inverse_permutation()[b.permutation()[i]], i);
            }
        }
        assert!(invert_permutation(&[0, 0, 1]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let model = small(4, 1, 3);
        assert!(matches!(flow_forward(&[1.0; 5], &model), Err(Error::Config(_))));
    }

    #[test]
    fn overflow_names_block() {
        let mut model = small(4, 2, 4);
        model.blocks[1].first.l2.bias.fill(f64::INFINITY);
        match flow_forward(&[0.1; 4], &model) {
            Err(Error::NumericalOverflow { block, .. }) => assert_eq!(block, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clamp_is_bounded() {
        for s in [-1e9, -10.0, -1.0, 0.0, 2.0, 1e12] {
            let c = soft_clamp(s, 3.0);
            assert!(c > -3.0 && c < 3.0);
        }
        assert_eq!(soft_clamp(0.0, 3.0), 0.0);
        assert!((soft_clamp(1e-6, 3.0) - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn mean_nll_gradient_wrt_input() {
        let mut model = small(5, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta: Vec<f64> = nn::flatten(&model).iter().map(|_| rng.random_range(-0.4..0.4)).collect();
        nn::unflatten(&mut model, &theta);
        let y = Array2::from_shape_simple_fn((3, 5), || rng.random_range(-1.0..1.0));
        let (_, _, dy) = model.mean_nll_with_grad(y.view()).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..5 {
                let (mut yp, mut ym) = (y.clone(), y.clone());
                yp[[r, c]] += h;
                ym[[r, c]] -= h;
                let lp = model.nll_batch(yp.view()).unwrap().mean().unwrap();
                let lm = model.nll_batch(ym.view()).unwrap().mean().unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - dy[[r, c]]).abs() < 1e-6, "{fd} vs {}", dy[[r, c]]);
            }
        }
    }
}
