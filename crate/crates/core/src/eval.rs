//! AUROC, per-category evaluation, report rendering and the attention ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, ImageSample, Label};
use crate::error::{Error, Result};
use crate::pipeline::AnomalyModel;
use crate::trainer;

pub const SCORES_HEADER: &str = "image_path,label,score";
pub const REPORT_HEADER: &str = "category,method,auroc_percent";
pub const ABLATION_HEADER: &str = "ab1,ab2,ab3,auroc_percent";

/// Flag patterns in reporting order: none, singles, pairs, all three.
pub const ABLATION_ORDER: [[bool; 3]; 8] = [
    [false, false, false],
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
    [true, true, true],
];

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Metric(format!("{name} score list is empty")));
    }
    if let Some(i) = scores.iter().position(|v| v.is_nan()) {
        return Err(Error::Metric(format!("{name} score at index {i} is NaN")));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::Metric(format!("{name} score at index {i} is not finite")));
    }
    Ok(())
}

/// `P(anomalous > flawless) + ½·P(tie)` from mid-ranks (Mann-Whitney U).
pub fn auroc(flawless: &[f64], anomalous: &[f64]) -> Result<f64> {
    check_scores("flawless", flawless)?;
    check_scores("anomalous", anomalous)?;
    let mut all: Vec<(f64, bool)> = flawless
        .iter()
        .map(|&s| (s, false))
        .chain(anomalous.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the rank sum keeps tied mid-ranks integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        rank_sum2 += mid2 * all[i..=j].iter().filter(|e| e.1).count() as u128;
        i = j + 1;
    }
    let (n, m) = (flawless.len() as u128, anomalous.len() as u128);
    let u2 = rank_sum2 - m * (m + 1);
    Ok(u2 as f64 / (2 * n * m) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_path: String,
    pub label: Label,
    pub score: f64,
}

pub fn write_scores_csv(path: &Path, scores: &[ImageScore]) -> Result<()> {
    let mut body = format!("{SCORES_HEADER}\n");
    for s in scores {
        writeln!(body, "{},{},{:.9}", s.image_path, s.label, s.score).expect("string write");
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Scores every test image with `scorer` and computes the AUROC.
pub fn evaluate_with<F>(dataset: &Dataset, scorer: F) -> Result<(f64, Vec<ImageScore>)>
where
    F: Fn(&ImageSample) -> Result<f64> + Sync,
{
    let samples = dataset.test_samples();
    if !samples.iter().any(|s| s.label == Label::Flawless) || !samples.iter().any(|s| s.label == Label::Anomalous) {
        return Err(Error::Metric("test split needs at least one flawless and one anomalous sample".into()));
    }
    let values: Vec<f64> = samples.par_iter().map(&scorer).collect::<Result<_>>()?;
    let scores: Vec<ImageScore> = samples
        .iter()
        .zip(values)
        .map(|(s, score)| ImageScore {
            image_path: s.id(),
            label: s.label,
            score,
        })
        .collect();
    let pick = |l: Label| scores.iter().filter(|s| s.label == l).map(|s| s.score).collect::<Vec<_>>();
    Ok((auroc(&pick(Label::Flawless), &pick(Label::Anomalous))?, scores))
}

pub fn evaluate_category(model: &AnomalyModel, dataset: &Dataset, n: usize, seed: u64) -> Result<(f64, Vec<ImageScore>)> {
    evaluate_with(dataset, |s| Ok(model.score(s, n, seed)?.value))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub category: String,
    pub method: String,
    pub auroc_percent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub text: String,
    pub csv: String,
    pub empty: bool,
}

fn first_seen(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for it in items {
        if !out.contains(&it) {
            out.push(it);
        }
    }
    out
}

/// Per-method average over categories (plain mean).
pub fn averages(rows: &[ReportRow]) -> Vec<(String, f64)> {
    first_seen(rows.iter().map(|r| r.method.clone()))
        .into_iter()
        .map(|m| {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.auroc_percent).collect();
            let avg = v.iter().sum::<f64>() / v.len() as f64;
            (m, avg)
        })
        .collect()
}

/// Category-by-method table with an average row; `*` marks the best value per row.
pub fn render_report(rows: &[ReportRow]) -> Rendered {
    if rows.is_empty() {
        return Rendered {
            text: "no rows\n".into(),
            csv: format!("{REPORT_HEADER}\n"),
            empty: true,
        };
    }
    let methods = first_seen(rows.iter().map(|r| r.method.clone()));
    let categories = first_seen(rows.iter().map(|r| r.category.clone()));
    let avg = averages(rows);

    let mut grid: Vec<(String, Vec<Option<f64>>)> = categories
        .iter()
        .map(|c| {
            let cells = methods
                .iter()
                .map(|m| {
                    rows.iter()
                        .find(|r| &r.category == c && &r.method == m)
                        .map(|r| r.auroc_percent)
                })
                .collect();
            (c.clone(), cells)
        })
        .collect();
    grid.push(("Average".into(), avg.iter().map(|(_, v)| Some(*v)).collect()));

    let label_w = grid.iter().map(|(c, _)| c.len()).max().unwrap_or(0).max("category".len());
    let col_w = methods.iter().map(|m| m.len()).max().unwrap_or(0).max(7);
    let mut text = format!("{:<label_w$}", "category");
    for m in &methods {
        write!(text, "  {m:>col_w$}").unwrap();
    }
    text.push('\n');
    for (label, cells) in &grid {
        let best = cells.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        write!(text, "{label:<label_w$}").unwrap();
        for cell in cells {
            let s = match cell {
                Some(v) if cells.iter().flatten().count() > 1 && *v == best => format!("{v:.2}*"),
                Some(v) => format!("{v:.2}"),
                None => "-".into(),
            };
            write!(text, "  {s:>col_w$}").unwrap();
        }
        text.push('\n');
    }

    let mut csv = format!("{REPORT_HEADER}\n");
    for r in rows {
        writeln!(csv, "{},{},{:.2}", r.category, r.method, r.auroc_percent).unwrap();
    }
    for (m, v) in &avg {
        writeln!(csv, "Average,{m},{v:.2}").unwrap();
    }
    Rendered { text, csv, empty: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: [bool; 3],
    pub auroc_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub category: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "-" };
        let mut text = String::from("AB1  AB2  AB3  AUROC%\n");
        for r in &self.rows {
            writeln!(
                text,
                "{:<3}  {:<3}  {:<3}  {:.2}",
                mark(r.flags[0]),
                mark(r.flags[1]),
                mark(r.flags[2]),
                r.auroc_percent
            )
            .unwrap();
        }
        text
    }

    pub fn to_csv(&self) -> String {
        let mut csv = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            writeln!(csv, "{},{},{},{:.6}", r.flags[0], r.flags[1], r.flags[2], r.auroc_percent).unwrap();
        }
        csv
    }
}

/// Trains and evaluates every AB flag pattern with the same seeds.
pub fn ablation_sweep(dataset: &Dataset, base: &RunConfig, parallel: bool) -> Result<AblationTable> {
    let run = |flags: &[bool; 3]| -> Result<AblationRow> {
        let mut cfg = base.clone();
        cfg.backbone.ab_flags = *flags;
        let outcome = trainer::train(dataset, &cfg)?;
        Ok(AblationRow {
            flags: *flags,
            auroc_percent: 100.0 * outcome.best_auroc(),
        })
    };
    let rows = if parallel {
        ABLATION_ORDER.par_iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        ABLATION_ORDER.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    Ok(AblationTable {
        category: dataset.manifest.category.clone(),
        rows,
    })
}
