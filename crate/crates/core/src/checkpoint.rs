//! Single-file, format-versioned checkpoint archive.
//!
//! Parameter blocks are safetensors tensors (`flow.*`, `attention.*` and, for
//! fine-tuned backbones, `backbone.*`); flow permutations are stored as I64
//! tensors. The safetensors metadata carries the format name, its version and
//! a JSON header with the config snapshot, weight digests and a payload hash.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, WeightsSource};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::{CouplingBlock, FlowConfig, FlowModel};
use crate::nn::Params;
use crate::pipeline::AnomalyModel;
use crate::rng;
use crate::trainer::Seeds;

pub const FORMAT_NAME: &str = "attnflow-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const FLOW_FORMAT_NAME: &str = "attnflow-flow";

/// Score of one reference image recorded at save time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub image_id: String,
    pub value: f64,
    pub n_transforms: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AnomalyModel,
    pub config: RunConfig,
    pub epoch: usize,
    pub run_id: usize,
    pub rng_digest: String,
    /// Selection AUROC of this snapshot.
    pub auroc: Option<f64>,
    pub probe: Option<ProbeScore>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Load even if the backbone weights differ from the ones recorded.
    pub allow_digest_mismatch: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    weights: WeightsSource,
    conv_checksum: String,
    finetuned: bool,
    epoch: usize,
    run_id: usize,
    rng_digest: String,
    auroc: Option<f64>,
    probe: Option<ProbeScore>,
    payload_sha256: String,
}

struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn collect_f64(prefix: &str, p: &dyn Params, out: &mut BTreeMap<String, Tensor>) {
    p.visit(prefix, &mut |name, shape, values| {
        out.insert(
            name.to_string(),
            Tensor {
                dtype: Dtype::F64,
                shape: shape.to_vec(),
                bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            },
        );
    });
}

fn payload_digest<'a>(tensors: impl Iterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut bytes = Vec::new();
    for (name, data) in tensors {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(data);
    }
    rng::sha256_hex(&bytes)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = flow_tensors(&self.model.flow);
        collect_f64("attention", &self.model.backbone.attention, &mut tensors);
        let finetuned = self.config.train.finetune_backbone;
        if finetuned {
            collect_f64("backbone", &self.model.backbone.convs, &mut tensors);
        }

        let header = Header {
            config: self.config.clone(),
            weights: self.model.backbone.source().clone(),
            conv_checksum: self.model.backbone.conv_checksum(),
            finetuned,
            epoch: self.epoch,
            run_id: self.run_id,
            rng_digest: self.rng_digest.clone(),
            auroc: self.auroc,
            probe: self.probe.clone(),
            payload_sha256: payload_digest(tensors.iter().map(|(k, t)| (k.as_str(), t.bytes.as_slice()))),
        };
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT_NAME.to_string());
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("payload_sha256".to_string(), header.payload_sha256.clone());
        meta.insert("header".to_string(), serde_json::to_string(&header).expect("header serializes"));
        encode(&tensors, meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, LoadOptions::default())
    }

    pub fn load_with(path: &Path, opts: LoadOptions) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, opts)
    }

    pub fn from_bytes(bytes: &[u8], opts: LoadOptions) -> Result<Self> {
        let (archive, meta) = checked_metadata(bytes, FORMAT_NAME)?;
        let header: Header = meta
            .get("header")
            .ok_or_else(|| Error::Corrupt("missing header".into()))
            .and_then(|h| serde_json::from_str(h).map_err(|e| Error::Corrupt(format!("header: {e}"))))?;

        let cfg = header.config;
        cfg.validate().map_err(|e| Error::Schema(format!("stored config is invalid: {e}")))?;
        let seeds = Seeds::new(cfg.train.seed);
        let mut backbone = Backbone::new(&cfg.backbone, &cfg.attention, seeds.weights)?;
        if backbone.source().digest != header.weights.digest {
            let err = Error::DigestMismatch {
                expected: header.weights.digest.clone(),
                found: backbone.source().digest.clone(),
            };
            if !opts.allow_digest_mismatch {
                return Err(err);
            }
            log::warn!("{err}; continuing because the mismatch override is set");
        }
        if header.finetuned {
            read_params(&archive, "backbone", &mut backbone.convs)?;
        }
        read_params(&archive, "attention", &mut backbone.attention)?;

        let flow = rebuild_flow(&archive, cfg.backbone.embed_dim(), &cfg.flow)?;

        Ok(Checkpoint {
            model: AnomalyModel { backbone, flow },
            config: cfg,
            epoch: header.epoch,
            run_id: header.run_id,
            rng_digest: header.rng_digest,
            auroc: header.auroc,
            probe: header.probe,
        })
    }

    /// Rescoring of the probe image; `None` when no probe was recorded.
    pub fn rescore_probe(&self) -> Result<Option<(f64, f64)>> {
        let Some(p) = &self.probe else {
            return Ok(None);
        };
        let pixels = crate::imageops::decode(Path::new(&p.image_id))?;
        let now = self.model.score_pixels(&pixels, p.n_transforms, p.seed)?;
        Ok(Some((p.value, now)))
    }
}

fn flow_tensors(flow: &FlowModel) -> BTreeMap<String, Tensor> {
    let mut tensors = BTreeMap::new();
    collect_f64("flow", flow, &mut tensors);
    for (i, block) in flow.blocks.iter().enumerate() {
        tensors.insert(
            format!("flow.block{i}.permutation"),
            Tensor {
                dtype: Dtype::I64,
                shape: vec![block.permutation().len()],
                bytes: block.permutation().iter().flat_map(|&p| (p as i64).to_le_bytes()).collect(),
            },
        );
    }
    tensors
}

fn encode(tensors: &BTreeMap<String, Tensor>, meta: HashMap<String, String>, path: &Path) -> Result<()> {
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(k, t)| (k.clone(), TensorView::new(t.dtype, t.shape.clone(), &t.bytes).expect("consistent tensor")))
        .collect();
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Corrupt(format!("cannot encode: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Metadata map of an archive after format and version checks.
fn checked_metadata<'a>(bytes: &'a [u8], format: &str) -> Result<(SafeTensors<'a>, HashMap<String, String>)> {
    let archive = SafeTensors::deserialize(bytes).map_err(|e| Error::Corrupt(e.to_string()))?;
    let (_, metadata) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Corrupt(e.to_string()))?;
    let meta = metadata
        .metadata()
        .clone()
        .ok_or_else(|| Error::Corrupt("archive has no metadata".into()))?;
    if meta.get("format").map(String::as_str) != Some(format) {
        return Err(Error::Corrupt(format!("not an {format} archive")));
    }
    let version: u32 = meta
        .get("format_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Corrupt("missing or malformed format_version".into()))?;
    if version > FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let mut names: Vec<&str> = archive.names();
    names.sort_unstable();
    let digest = payload_digest(names.iter().map(|n| (*n, archive.tensor(n).expect("listed").data())));
    if meta.get("payload_sha256") != Some(&digest) {
        return Err(Error::Corrupt("payload digest does not match header".into()));
    }
    Ok((archive, meta))
}

fn rebuild_flow(archive: &SafeTensors<'_>, dim: usize, cfg: &FlowConfig) -> Result<FlowModel> {
    let template = FlowModel::new(dim, cfg, &mut rng::stream(0, "template"))?;
    let mut blocks = Vec::with_capacity(template.blocks.len());
    for (i, b) in template.blocks.iter().enumerate() {
        let perm = read_permutation(archive, &format!("flow.block{i}.permutation"), dim)?;
        blocks.push(CouplingBlock::new(perm, b.clamp(), b.first.clone(), b.second.clone()).map_err(|e| Error::Schema(e.to_string()))?);
    }
    let mut flow = FlowModel::from_blocks(blocks)?;
    read_params(archive, "flow", &mut flow)?;
    Ok(flow)
}

/// Stores a flow trained without a backbone.
pub fn save_flow(flow: &FlowModel, cfg: &FlowConfig, path: &Path) -> Result<()> {
    let tensors = flow_tensors(flow);
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FLOW_FORMAT_NAME.to_string());
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("dim".to_string(), flow.dim().to_string());
    meta.insert("flow".to_string(), serde_json::to_string(cfg).expect("config serializes"));
    meta.insert(
        "payload_sha256".to_string(),
        payload_digest(tensors.iter().map(|(k, t)| (k.as_str(), t.bytes.as_slice()))),
    );
    encode(&tensors, meta, path)
}

pub fn load_flow(path: &Path) -> Result<FlowModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (archive, meta) = checked_metadata(&bytes, FLOW_FORMAT_NAME)?;
    let dim: usize = meta
        .get("dim")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::Corrupt("missing dim".into()))?;
    let cfg: FlowConfig = meta
        .get("flow")
        .and_then(|c| serde_json::from_str(c).ok())
        .ok_or_else(|| Error::Corrupt("missing flow config".into()))?;
    rebuild_flow(&archive, dim, &cfg)
}

fn read_params(archive: &SafeTensors<'_>, prefix: &str, target: &mut dyn Params) -> Result<()> {
    let mut failure = None;
    target.visit_mut(prefix, &mut |name, values| {
        if failure.is_some() {
            return;
        }
        let view = match archive.tensor(name) {
            Ok(v) => v,
            Err(_) => {
                failure = Some(Error::Schema(format!("checkpoint lacks tensor {name} required by the stored config")));
                return;
            }
        };
        if view.dtype() != Dtype::F64 || view.data().len() != values.len() * 8 {
            failure = Some(Error::Schema(format!("tensor {name} has dtype {:?} and shape {:?}", view.dtype(), view.shape())));
            return;
        }
        for (v, b) in values.iter_mut().zip(view.data().chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    });
    failure.map_or(Ok(()), Err)
}

fn read_permutation(archive: &SafeTensors<'_>, name: &str, dim: usize) -> Result<Vec<usize>> {
    let view = archive
        .tensor(name)
        .map_err(|_| Error::Schema(format!("checkpoint lacks tensor {name}")))?;
    if view.dtype() != Dtype::I64 || view.shape() != [dim] {
        return Err(Error::Schema(format!("tensor {name} must be I64 of length {dim}")));
    }
    view.data()
        .chunks_exact(8)
        .map(|b| {
            let v = i64::from_le_bytes(b.try_into().expect("8 bytes"));
            usize::try_from(v).map_err(|_| Error::Schema(format!("{name} holds negative index {v}")))
        })
        .collect()
}
