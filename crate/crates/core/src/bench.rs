//! Evaluation harness.
//!
//! Each pair is scored in both temporal orders against the selected ground
//! truth, and temporal consistency is measured between the two predictions.
//! Pairs run in parallel; results are reduced in sorted-id order, so reports
//! are byte-identical across runs for a fixed configuration.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backend;
use crate::config::{OutFormat, PipelineConfig};
use crate::data::{read_mask, write_mask, DatasetManifest, GtKind, PairRecord};
use crate::image::BinaryMask;
use crate::matching::detect_changes_detailed;
use crate::metrics::{aggregate, confusion, AverageMode, MetricRow, PairCounts};
use crate::registration::{warp_mask, RegistrationMode};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub id: String,
    pub reason: String,
}

/// Scores of one dataset in both temporal orders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetScores {
    /// `t0 → t1`.
    pub fwd: MetricRow,
    /// `t1 → t0`.
    pub bwd: MetricRow,
    pub tc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub name: String,
    pub split: String,
    pub pairs_evaluated: usize,
    pub skipped: Vec<SkippedPair>,
    /// Absent when the dataset failed or every pair was skipped.
    pub scores: Option<DatasetScores>,
    pub error: Option<String>,
}

/// Cross-dataset means. `overall` averages every (dataset, direction) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub fwd: MetricRow,
    pub bwd: MetricRow,
    pub overall: MetricRow,
    pub tc: f64,
}

impl AverageRow {
    pub fn from_scores(scores: &[DatasetScores]) -> Option<AverageRow> {
        let fwd: Vec<MetricRow> = scores.iter().map(|s| s.fwd).collect();
        let bwd: Vec<MetricRow> = scores.iter().map(|s| s.bwd).collect();
        let cells: Vec<MetricRow> = fwd.iter().chain(&bwd).copied().collect();
        Some(AverageRow {
            fwd: MetricRow::mean(&fwd)?,
            bwd: MetricRow::mean(&bwd)?,
            overall: MetricRow::mean(&cells)?,
            tc: scores.iter().map(|s| s.tc).sum::<f64>() / scores.len() as f64,
        })
    }
}

/// Everything needed to re-run the evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    /// Backend identifier, or `external` for scored prediction directories.
    pub backend_id: String,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub per_dataset: Vec<DatasetResult>,
    pub average: Option<AverageRow>,
    pub config: ConfigSnapshot,
}

impl EvalReport {
    pub fn new(per_dataset: Vec<DatasetResult>, config: ConfigSnapshot) -> Self {
        let scores: Vec<DatasetScores> = per_dataset.iter().filter_map(|d| d.scores).collect();
        EvalReport {
            schema_version: SCHEMA_VERSION,
            average: AverageRow::from_scores(&scores),
            per_dataset,
            config,
        }
    }
}

/// Predictions for one pair, both in `t0`'s frame.
#[derive(Debug, Clone)]
pub struct PairPrediction {
    pub fwd: BinaryMask,
    pub bwd: BinaryMask,
}

#[derive(Debug, Clone, Copy)]
struct PairScore {
    fwd: PairCounts,
    bwd: PairCounts,
}

fn score_pair(pred: &PairPrediction, gt: &BinaryMask) -> Result<PairScore> {
    let intersection = pred.fwd.intersection_count(&pred.bwd)? as u64;
    let union = pred.fwd.union_count(&pred.bwd)? as u64;
    Ok(PairScore {
        fwd: PairCounts {
            confusion: confusion(&pred.fwd, gt)?,
            intersection,
            union,
        },
        bwd: PairCounts {
            confusion: confusion(&pred.bwd, gt)?,
            intersection,
            union,
        },
    })
}

/// Scores every pair with `predict` in parallel and reduces in id order.
fn evaluate_with<F>(manifest: &DatasetManifest, gt: GtKind, mode: AverageMode, predict: F) -> DatasetResult
where
    F: Fn(&PairRecord) -> Result<PairPrediction> + Sync,
{
    let outcomes: Vec<(String, Result<PairScore>)> = manifest
        .records
        .par_iter()
        .map(|rec| {
            let res = rec
                .load_gt(gt, manifest.resolution)
                .and_then(|g| predict(rec).and_then(|p| score_pair(&p, &g)));
            (rec.id.clone(), res)
        })
        .collect();

    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    let mut skipped = Vec::new();
    for (id, res) in outcomes {
        match res {
            Ok(s) => {
                fwd.push(s.fwd);
                bwd.push(s.bwd);
            }
            Err(e) => {
                log::warn!("{}: skipping pair `{id}`: {e}", manifest.name);
                skipped.push(SkippedPair {
                    id,
                    reason: e.to_string(),
                });
            }
        }
    }
    let scores = match (aggregate(&fwd, mode), aggregate(&bwd, mode)) {
        (Some((f, tc)), Some((b, _))) => Some(DatasetScores { fwd: f, bwd: b, tc }),
        _ => None,
    };
    DatasetResult {
        name: manifest.name.clone(),
        split: manifest.split.clone(),
        pairs_evaluated: fwd.len(),
        error: scores.is_none().then(|| "no pair could be evaluated".to_owned()),
        skipped,
        scores,
    }
}

/// Runs the detector on one pair in both orders. The backward prediction is
/// warped into `t0`'s frame when registration produced a transform.
pub fn predict_pair(
    backend: &dyn Backend,
    rec: &PairRecord,
    resolution: (usize, usize),
    cfg: &PipelineConfig,
) -> Result<PairPrediction> {
    let (img0, img1) = rec.load_images(resolution)?;
    let fwd = detect_changes_detailed(backend, &img0, &img1, cfg)?;
    let bwd = detect_changes_detailed(backend, &img1, &img0, cfg)?;
    let bwd_mask = match (cfg.registration.mode, fwd.registration.transform()) {
        (RegistrationMode::Homography, Some(t)) => warp_mask(&bwd.change.mask, t)?,
        _ => bwd.change.mask,
    };
    Ok(PairPrediction {
        fwd: fwd.change.mask,
        bwd: bwd_mask,
    })
}

/// Evaluates the detector on one dataset. When `save_dir` is given, the
/// predictions are written there as `<id>_fwd.png` / `<id>_bwd.png`.
pub fn run_eval(
    backend: &dyn Backend,
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    save_dir: Option<&Path>,
) -> DatasetResult {
    evaluate_with(manifest, cfg.eval.gt, cfg.eval.average, |rec| {
        let pred = predict_pair(backend, rec, manifest.resolution, cfg)?;
        if let Some(dir) = save_dir {
            let (f, b) = prediction_paths(dir, &rec.id);
            write_mask(&pred.fwd, &f)?;
            write_mask(&pred.bwd, &b)?;
        }
        Ok(pred)
    })
}

/// Evaluates the detector on every dataset and averages across them.
pub fn run_protocol(
    backend: &dyn Backend,
    manifests: &[DatasetManifest],
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    if manifests.is_empty() {
        return Err(Error::InvalidInput("at least one dataset is required".into()));
    }
    cfg.validate()?;
    let per_dataset = manifests
        .iter()
        .map(|m| run_eval(backend, m, cfg, None))
        .collect();
    Ok(EvalReport::new(per_dataset, snapshot(backend.id(), cfg)))
}

pub fn snapshot(backend_id: &str, cfg: &PipelineConfig) -> ConfigSnapshot {
    ConfigSnapshot {
        backend_id: backend_id.to_owned(),
        pipeline: cfg.clone(),
    }
}

pub fn prediction_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{id}_fwd.png")),
        dir.join(format!("{id}_bwd.png")),
    )
}

/// Scores third-party predictions stored as `<id>_fwd.png` / `<id>_bwd.png`.
/// Both must already be in `t0`'s frame. Fails listing every id that lacks
/// either file.
pub fn score_external(
    pred_dir: &Path,
    manifest: &DatasetManifest,
    gt: GtKind,
    mode: AverageMode,
) -> Result<DatasetResult> {
    let missing: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| {
            let (f, b) = prediction_paths(pred_dir, &r.id);
            !f.is_file() || !b.is_file()
        })
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let (h, w) = manifest.resolution;
    Ok(evaluate_with(manifest, gt, mode, |rec| {
        let (f, b) = prediction_paths(pred_dir, &rec.id);
        Ok(PairPrediction {
            fwd: read_mask(&f)?.resized_nearest(w, h),
            bwd: read_mask(&b)?.resized_nearest(w, h),
        })
    }))
}

/// Renders a report. JSON is pretty-printed with a trailing newline.
pub fn emit_report(report: &EvalReport, format: OutFormat) -> Vec<u8> {
    match format {
        OutFormat::Json => {
            let mut v = serde_json::to_vec_pretty(report).expect("report is always serializable");
            v.push(b'\n');
            v
        }
        OutFormat::Csv => render_csv(report),
        OutFormat::Md => render_markdown(report).into_bytes(),
    }
}

const ROW_FIELDS: [&str; 6] = ["f1", "precision", "recall", "iou_change", "iou_nochange", "miou"];

fn row_values(r: &MetricRow) -> [f64; 6] {
    [r.f1, r.precision, r.recall, r.iou_change, r.iou_nochange, r.miou]
}

fn render_csv(report: &EvalReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset".to_owned(), "pairs".into(), "skipped".into()];
    for dir in ["fwd", "bwd"] {
        header.extend(ROW_FIELDS.iter().map(|f| format!("{dir}_{f}")));
    }
    header.push("tc".into());
    w.write_record(&header).expect("in-memory write");

    let cells = |fwd: Option<&MetricRow>, bwd: Option<&MetricRow>, tc: Option<f64>| {
        let mut out = Vec::new();
        for r in [fwd, bwd] {
            match r {
                Some(r) => out.extend(row_values(r).iter().map(f64::to_string)),
                None => out.extend(std::iter::repeat_n(String::new(), ROW_FIELDS.len())),
            }
        }
        out.push(tc.map(|t| t.to_string()).unwrap_or_default());
        out
    };
    for d in &report.per_dataset {
        let mut rec = vec![
            d.name.clone(),
            d.pairs_evaluated.to_string(),
            d.skipped.len().to_string(),
        ];
        let s = d.scores.as_ref();
        rec.extend(cells(s.map(|s| &s.fwd), s.map(|s| &s.bwd), s.map(|s| s.tc)));
        w.write_record(&rec).expect("in-memory write");
    }
    let total: usize = report.per_dataset.iter().map(|d| d.pairs_evaluated).sum();
    let skipped: usize = report.per_dataset.iter().map(|d| d.skipped.len()).sum();
    let mut rec = vec!["Avg.".to_owned(), total.to_string(), skipped.to_string()];
    let a = report.average.as_ref();
    rec.extend(cells(a.map(|a| &a.fwd), a.map(|a| &a.bwd), a.map(|a| a.tc)));
    w.write_record(&rec).expect("in-memory write");
    w.into_inner().expect("in-memory flush")
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn render_markdown(report: &EvalReport) -> String {
    let mut s = String::new();
    let method = format!("GeSCF ({})", report.config.backend_id);

    // F1 in both orders plus TC per dataset, then the averages.
    let mut head = vec!["Method".to_owned()];
    let mut row = vec![method];
    for d in &report.per_dataset {
        for col in ["t0→t1", "t1→t0", "TC"] {
            head.push(format!("{} {col}", d.name));
        }
        match &d.scores {
            Some(sc) => row.extend([pct(sc.fwd.f1), pct(sc.bwd.f1), format!("{:.3}", sc.tc)]),
            None => row.extend(["n/a".to_owned(), "n/a".into(), "n/a".into()]),
        }
    }
    for col in ["t0→t1", "t1→t0", "TC"] {
        head.push(format!("Avg. {col}"));
    }
    head.push("Avg.".into());
    match &report.average {
        Some(a) => row.extend([
            pct(a.fwd.f1),
            pct(a.bwd.f1),
            format!("{:.3}", a.tc),
            pct(a.overall.f1),
        ]),
        None => row.extend(std::iter::repeat_n("n/a".to_owned(), 4)),
    }
    table_row(&mut s, &head);
    table_row(&mut s, &vec!["---".to_owned(); head.len()]);
    table_row(&mut s, &row);

    s.push('\n');
    let head: Vec<String> = [
        "Dataset", "Order", "F1", "Precision", "Recall", "IoU change", "IoU no-change", "mIoU",
    ]
    .iter()
    .map(|h| (*h).to_owned())
    .collect();
    table_row(&mut s, &head);
    table_row(&mut s, &vec!["---".to_owned(); head.len()]);
    let mut detail = |name: &str, order: &str, r: &MetricRow| {
        let mut cells = vec![name.to_owned(), order.to_owned()];
        cells.extend(row_values(r).iter().map(|v| pct(*v)));
        table_row(&mut s, &cells);
    };
    for d in &report.per_dataset {
        if let Some(sc) = &d.scores {
            detail(&d.name, "t0→t1", &sc.fwd);
            detail(&d.name, "t1→t0", &sc.bwd);
        }
    }
    if let Some(a) = &report.average {
        detail("Avg.", "t0→t1", &a.fwd);
        detail("Avg.", "t1→t0", &a.bwd);
    }

    let skipped: Vec<String> = report
        .per_dataset
        .iter()
        .flat_map(|d| d.skipped.iter().map(move |p| format!("{}/{}", d.name, p.id)))
        .collect();
    if !skipped.is_empty() {
        s.push_str(&format!("\nSkipped pairs: {}\n", skipped.join(", ")));
    }
    s
}

fn table_row(s: &mut String, cells: &[String]) {
    s.push('|');
    for c in cells {
        s.push(' ');
        s.push_str(c);
        s.push_str(" |");
    }
    s.push('\n');
}
