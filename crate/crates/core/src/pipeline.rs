//! Feature extractor and flow composed into one scoring model.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{self, ImageSample, TransformedImage};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::rng;

/// Scalar anomaly score; higher is more anomalous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub value: f64,
    pub image_id: String,
    pub n_transforms: usize,
}

#[derive(Clone, Debug)]
pub struct AnomalyModel {
    pub backbone: Backbone,
    pub flow: FlowModel,
}

impl AnomalyModel {
    /// Conv weights come from `weights_seed` (or the pretrained archive);
    /// attention and flow parameters are drawn from `init_seed`.
    pub fn new(
        backbone: &BackboneConfig,
        attention: &AttentionConfig,
        flow: &FlowConfig,
        weights_seed: u64,
        init_seed: u64,
    ) -> Result<Self> {
        let mut bb = Backbone::new(backbone, attention, weights_seed)?;
        bb.attention = crate::backbone::init_attention(backbone, attention, init_seed)?;
        let flow = FlowModel::new(backbone.embed_dim(), flow, &mut rng::stream(init_seed, "flow-init"))?;
        Ok(Self { backbone: bb, flow })
    }

    pub fn scales(&self) -> &[usize] {
        &self.backbone.config().scales
    }

    pub fn embed(&self, input: &TransformedImage) -> Vec<f64> {
        self.backbone.embed(input)
    }

    /// Mean negative log-likelihood over the test-time rotations of `image`.
    pub fn score_pixels(&self, image: &Array3<f64>, n: usize, seed: u64) -> Result<f64> {
        let angles = data::test_angles(n, seed)?;
        let embeddings: Vec<Vec<f64>> = angles
            .par_iter()
            .map(|&a| self.embed(&data::preprocess(image, a, self.scales())))
            .collect();
        mean_negative_log_likelihood(&self.flow, &embeddings)
    }

    /// Frozen-prefix activations for each test-time rotation of `image`.
    pub fn prefixes(&self, image: &Array3<f64>, n: usize, seed: u64) -> Result<Vec<Vec<Array3<f64>>>> {
        let angles = data::test_angles(n, seed)?;
        Ok(angles
            .par_iter()
            .map(|&a| self.backbone.frozen_prefix(&data::preprocess(image, a, self.scales())))
            .collect())
    }

    /// Same value as [`AnomalyModel::score_pixels`] given [`AnomalyModel::prefixes`] output.
    pub fn score_prefixes(&self, prefixes: &[Vec<Array3<f64>>]) -> Result<f64> {
        let embeddings: Vec<Vec<f64>> = prefixes.par_iter().map(|p| self.backbone.embed_from_prefix(p)).collect();
        mean_negative_log_likelihood(&self.flow, &embeddings)
    }

    pub fn score(&self, sample: &ImageSample, n: usize, seed: u64) -> Result<AnomalyScore> {
        anomaly_score(sample, self, n, seed)
    }
}

/// Mean of `-log p(y)` over the rows.
pub fn mean_negative_log_likelihood(flow: &FlowModel, embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::Config("no embeddings to score".into()));
    }
    let d = flow.dim();
    let flat: Vec<f64> = embeddings.iter().flatten().copied().collect();
    let y = Array2::from_shape_vec((embeddings.len(), d), flat)
        .map_err(|_| Error::Config(format!("embedding length does not match flow dimension {d}")))?;
    let ll = flow.log_likelihood_batch(y.view())?;
    Ok(-ll.mean().expect("non-empty"))
}

pub fn anomaly_score(sample: &ImageSample, model: &AnomalyModel, n: usize, seed: u64) -> Result<AnomalyScore> {
    let pixels = sample.load()?;
    Ok(AnomalyScore {
        value: model.score_pixels(&pixels, n, seed)?,
        image_id: sample.id(),
        n_transforms: n,
    })
}
