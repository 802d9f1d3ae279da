//! Attention placement for residual backbones.
//!
//! The attention block wraps the non-identity branch so that it acts before
//! the summation with the identity branch:
//! `y = identity(x) + attention(transform(x))`.

use ndarray::{Array3, ArrayView3};
use rand::Rng;

use crate::attention::{apply_optional, AttentionBlock, AttentionConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d};

/// Conv layers with a rectifier between consecutive layers (none after the last).
fn conv_chain(convs: &[Conv2d], x: ArrayView3<f64>) -> Array3<f64> {
    let mut y = x.to_owned();
    for (i, conv) in convs.iter().enumerate() {
        y = conv.forward(y.view());
        if i + 1 < convs.len() {
            nn::relu_inplace(&mut y);
        }
    }
    y
}

#[derive(Clone, Debug)]
pub struct ResidualStage {
    pub transform: Vec<Conv2d>,
    /// Projection on the identity branch; `None` is a plain skip connection.
    pub shortcut: Option<Conv2d>,
}

impl ResidualStage {
    pub fn identity(&self, x: ArrayView3<f64>) -> Array3<f64> {
        match &self.shortcut {
            Some(conv) => conv.forward(x),
            None => x.to_owned(),
        }
    }

    pub fn transform(&self, x: ArrayView3<f64>) -> Array3<f64> {
        conv_chain(&self.transform, x)
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        self.identity(x) + self.transform(x)
    }

    fn out_channels(&self) -> Option<usize> {
        self.transform.last().map(Conv2d::out_channels)
    }
}

#[derive(Clone, Debug)]
pub enum Stage {
    /// Straight conv chain without a skip connection.
    Plain(Vec<Conv2d>),
    Residual(ResidualStage),
}

impl Stage {
    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        match self {
            Stage::Plain(convs) => conv_chain(convs, x),
            Stage::Residual(r) => r.forward(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentiveResidualStage {
    pub stage: ResidualStage,
    pub attention: Option<AttentionBlock>,
}

impl AttentiveResidualStage {
    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        self.stage.identity(x) + apply_optional(self.attention.as_ref(), self.stage.transform(x))
    }
}

pub fn insert_attention_residual<R: Rng + ?Sized>(
    stage: Stage,
    attention: &AttentionConfig,
    rng: &mut R,
) -> Result<AttentiveResidualStage> {
    let Stage::Residual(stage) = stage else {
        return Err(Error::Config("attention insertion needs a stage with an identity branch".into()));
    };
    let channels = stage
        .out_channels()
        .ok_or_else(|| Error::Config("residual stage has an empty transform branch".into()))?;
    let attention = AttentionBlock::init(attention, channels, rng)?;
    Ok(AttentiveResidualStage { stage, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basic_block(rng: &mut ChaCha8Rng, c: usize) -> ResidualStage {
        ResidualStage {
            transform: vec![Conv2d::uniform(c, c, 3, 1, 1, rng), Conv2d::uniform(c, c, 3, 1, 1, rng)],
            shortcut: None,
        }
    }

    fn se() -> AttentionConfig {
        AttentionConfig {
            kind: AttentionKind::Se,
            reduction: 2,
            init_std: 0.3,
            ..Default::default()
        }
    }

    #[test]
    fn plain_stage_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plain = Stage::Plain(vec![Conv2d::uniform(2, 2, 3, 1, 1, &mut rng)]);
        assert!(matches!(insert_attention_residual(plain, &se(), &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn saturated_attention_leaves_stage_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = basic_block(&mut rng, 4);
        let x = Array3::from_shape_simple_fn((4, 5, 5), || rng.random_range(-1.0..1.0));
        let plain = block.forward(x.view());
        let mut wrapped = insert_attention_residual(Stage::Residual(block), &se(), &mut rng).unwrap();
        wrapped.attention.as_mut().unwrap().saturate(40.0);
        let y = wrapped.forward(x.view());
        for (a, b) in plain.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_transform_branch_passes_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = basic_block(&mut rng, 4);
        block.shortcut = Some(Conv2d::uniform(4, 4, 1, 1, 0, &mut rng));
        for conv in &mut block.transform {
            conv.weight.fill(0.0);
            conv.bias.fill(0.0);
        }
        let x = Array3::from_shape_simple_fn((4, 3, 3), || rng.random_range(-1.0..1.0));
        let identity = block.identity(x.view());
        let wrapped = insert_attention_residual(Stage::Residual(block), &se(), &mut rng).unwrap();
        assert_eq!(wrapped.forward(x.view()), identity);
    }
}
