//! Command-line front end: `train`, `score`, `eval`, `ablate`, `explain`,
//! `synth` and `report`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::backbone::gradcam_target_layer;
use crate::checkpoint::{self, Checkpoint, LoadOptions};
use crate::config::RunConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, ReportRow};
use crate::explain::{self, ScoringMode};
use crate::imageops;
use crate::rng;
use crate::synth::{self, SynthConfig};
use crate::trainer::{self, Seeds};

#[derive(Debug, Parser)]
#[command(name = "attnflow", version, about = "Attention-augmented normalizing-flow anomaly detection")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory; defaults to `./runs/<timestamp>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed (overrides `train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More log output.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root (overrides `data.root`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Category directory under the root (overrides `data.category`).
    #[arg(long)]
    pub category: Option<String>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Accept a backbone whose weights digest differs from the recorded one.
    #[arg(long)]
    pub allow_digest_mismatch: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on an image dataset, or on embeddings with `--embeddings`.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Directory with `train.csv` / `test.csv` embeddings (flow-only mode).
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Print the anomaly score of one image.
    Score {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        image: PathBuf,
    },
    /// Score a category's test split and report its AUROC.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train and evaluate all eight attention-block combinations.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write a Grad-CAM overlay `<stem>_gradcam.png`.
    Explain {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        image: PathBuf,
        /// Index into `backbone.scales` of the captured layer.
        #[arg(long, default_value_t = 0)]
        scale_index: usize,
    },
    /// Generate the synthetic image dataset and embedding fixture.
    Synth,
    /// Merge report CSVs into one table.
    Report {
        #[arg(required = false)]
        csv: Vec<PathBuf>,
    },
}

fn out_dir(global: &Global) -> PathBuf {
    global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string()))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn load_config(global: &Global, data: Option<&DataArgs>, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = global.overrides.clone();
    if let Some(seed) = global.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(d) = data {
        if let Some(root) = &d.data {
            overrides.push(format!("data.root={}", toml_string(&root.display().to_string())));
        }
        if let Some(c) = &d.category {
            overrides.push(format!("data.category={}", toml_string(c)));
        }
    }
    overrides.extend_from_slice(extra);
    RunConfig::load(global.config.as_deref(), &overrides)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.root.is_empty() || cfg.data.category.is_empty() {
        return Err(Error::Config("dataset root and category are required (--data, --category)".into()));
    }
    let root = Path::new(&cfg.data.root);
    if !root.is_dir() {
        return Err(Error::Layout(root.to_path_buf()));
    }
    data::load_dataset(root, &cfg.data.category)
}

fn open_checkpoint(args: &CheckpointArgs) -> Result<Checkpoint> {
    Checkpoint::load_with(
        &args.checkpoint,
        LoadOptions {
            allow_digest_mismatch: args.allow_digest_mismatch,
        },
    )
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(rng::sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn manifest(command: &str, cfg: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    let seeds = Seeds::new(cfg.train.seed);
    let mut m = json!({
        "command": command,
        "created": chrono::Local::now().to_rfc3339(),
        "version": env!("CARGO_PKG_VERSION"),
        "seeds": seeds,
        "config": cfg,
        "config_toml": cfg.to_toml(),
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (m.as_object_mut(), extra) {
        obj.extend(more);
    }
    m
}

fn write_manifest(dir: &Path, value: &serde_json::Value) -> Result<()> {
    write(&dir.join("run_manifest.json"), serde_json::to_string_pretty(value).expect("json"))
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let g = &cli.global;
    match &cli.command {
        Command::Train { data, embeddings } => {
            let extra: Vec<String> = embeddings
                .iter()
                .map(|e| format!("data.embeddings={}", toml_string(&e.display().to_string())))
                .collect();
            let cfg = load_config(g, Some(data), &extra)?;
            let out = out_dir(g);
            if !cfg.data.embeddings.is_empty() {
                let set = synth::read_embeddings(Path::new(&cfg.data.embeddings))?;
                let label = if cfg.data.category.is_empty() { "embeddings" } else { &cfg.data.category };
                let outcome = trainer::train_flow_only(&set, &cfg.flow, &cfg.train, label)?;
                mkdir(&out)?;
                trainer::write_metrics_csv(&out.join("metrics.csv"), &outcome.metrics)?;
                let flow_path = out.join("flow.safetensors");
                checkpoint::save_flow(&outcome.flow, &cfg.flow, &flow_path)?;
                write(&out.join("config.toml"), cfg.to_toml())?;
                write_manifest(
                    &out,
                    &manifest(
                        "train",
                        &cfg,
                        json!({
                            "mode": "flow-only",
                            "embeddings": cfg.data.embeddings,
                            "checkpoint": flow_path,
                            "checkpoint_sha256": file_digest(&flow_path)?,
                            "best": {"epoch": outcome.best_epoch, "auroc": outcome.best_auroc},
                        }),
                    ),
                )?;
                println!("best auroc {:.6} (epoch {})", outcome.best_auroc, outcome.best_epoch);
                println!("{}", out.display());
                return Ok(0);
            }
            let dataset = open_dataset(&cfg)?;
            mkdir(&out)?;
            dataset.write_skip_report(&out)?;
            let outcome = trainer::train(&dataset, &cfg)?;
            trainer::write_metrics_csv(&out.join("metrics.csv"), &outcome.metrics)?;
            let ckpt_path = out.join("model.ckpt");
            outcome.best.save(&ckpt_path)?;
            write(&out.join("config.toml"), cfg.to_toml())?;
            let src = outcome.best.model.backbone.source().clone();
            write_manifest(
                &out,
                &manifest(
                    "train",
                    &cfg,
                    json!({
                        "mode": "image",
                        "dataset": dataset.manifest,
                        "skipped_images": dataset.skipped.len(),
                        "backbone_weights": src,
                        "checkpoint": ckpt_path,
                        "checkpoint_sha256": file_digest(&ckpt_path)?,
                        "best": {"run_id": outcome.best.run_id, "epoch": outcome.best.epoch, "auroc": outcome.best.auroc},
                    }),
                ),
            )?;
            println!("best auroc {:.6} (run {}, epoch {})", outcome.best_auroc(), outcome.best.run_id, outcome.best.epoch);
            println!("{}", out.display());
            Ok(0)
        }
        Command::Score { ckpt, image } => {
            let c = open_checkpoint(ckpt)?;
            let pixels = imageops::decode(image)?;
            let n = c.config.train.n_test_transforms;
            let value = c.model.score_pixels(&pixels, n, Seeds::new(c.config.train.seed).score)?;
            println!("{value:.9}");
            Ok(0)
        }
        Command::Eval { ckpt, data } => {
            let c = open_checkpoint(ckpt)?;
            let mut cfg = c.config.clone();
            if let Some(root) = &data.data {
                cfg.data.root = root.display().to_string();
            }
            if let Some(cat) = &data.category {
                cfg.data.category = cat.clone();
            }
            let dataset = open_dataset(&cfg)?;
            let n = cfg.train.n_test_transforms;
            let (auroc, scores) = eval::evaluate_category(&c.model, &dataset, n, Seeds::new(cfg.train.seed).score)?;
            let out = out_dir(g);
            mkdir(&out)?;
            dataset.write_skip_report(&out)?;
            eval::write_scores_csv(&out.join("scores.csv"), &scores)?;
            let rendered = eval::render_report(&[ReportRow {
                category: cfg.data.category.clone(),
                method: cfg.method_label(),
                auroc_percent: 100.0 * auroc,
            }]);
            write(&out.join("report.csv"), &rendered.csv)?;
            write_manifest(
                &out,
                &manifest(
                    "eval",
                    &cfg,
                    json!({"checkpoint": ckpt.checkpoint, "checkpoint_sha256": file_digest(&ckpt.checkpoint)?, "auroc": auroc}),
                ),
            )?;
            print!("{}", rendered.text);
            Ok(0)
        }
        Command::Ablate { data } => {
            let cfg = load_config(g, Some(data), &[])?;
            let dataset = open_dataset(&cfg)?;
            let table = eval::ablation_sweep(&dataset, &cfg, cfg.eval.parallel_ablation)?;
            let out = out_dir(g);
            mkdir(&out)?;
            write(&out.join("ablation.csv"), table.to_csv())?;
            write_manifest(&out, &manifest("ablate", &cfg, json!({"dataset": dataset.manifest, "rows": table.rows})))?;
            print!("{}", table.render());
            Ok(0)
        }
        Command::Explain { ckpt, image, scale_index } => {
            let c = open_checkpoint(ckpt)?;
            let handles = gradcam_target_layer(&c.config.backbone, &c.config.attention)?;
            let handle = handles
                .get(*scale_index)
                .ok_or_else(|| Error::Config(format!("scale index {scale_index} out of range ({} scales)", handles.len())))?;
            let pixels = imageops::decode(image)?;
            let map = explain::gradcam(&c.model, &pixels, &image.display().to_string(), handle, ScoringMode::Gradient)?;
            let out = g.out.clone().unwrap_or_else(|| image.parent().map(Path::to_path_buf).unwrap_or_default());
            let path = explain::heatmap_path(&out, image);
            explain::export_heatmap(&map, &pixels, &path)?;
            println!("{}", path.display());
            Ok(0)
        }
        Command::Synth => {
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("synthetic-data"));
            let seed = g.seed.unwrap_or(0);
            let sc = SynthConfig::default();
            let root = synth::write_image_dataset(&out, seed, &sc)?;
            synth::write_embeddings(&out.join("embeddings"), &synth::gaussian_mixture(seed, &sc))?;
            println!("{}", root.display());
            println!("{}", out.join("embeddings").display());
            Ok(0)
        }
        Command::Report { csv } => {
            let mut rows = Vec::new();
            for path in csv {
                let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Ingest {
                    path: path.clone(),
                    detail: e.to_string(),
                })?;
                for rec in rdr.deserialize::<ReportRow>() {
                    let row = rec.map_err(|e| Error::Ingest {
                        path: path.clone(),
                        detail: e.to_string(),
                    })?;
                    if row.category != "Average" {
                        rows.push(row);
                    }
                }
            }
            let rendered = eval::render_report(&rows);
            print!("{}", rendered.text);
            if let Some(out) = &g.out {
                mkdir(out)?;
                write(&out.join("report.csv"), &rendered.csv)?;
            }
            Ok(if rendered.empty { 1 } else { 0 })
        }
    }
}

/// Parses `args`, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
