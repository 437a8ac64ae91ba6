//! Manifest-driven benchmarking and module/range comparison reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use resclip_core::pipeline::segment_image;
use resclip_core::{
    AggregationSpec, AggregationStrategy, ClassEmbeddings, ConfusionMatrix, MiouResult,
    SurgeryConfig, WeightsBundle,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::imageio::{read_image_tensor, read_label_png};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Parses `image<TAB>label` lines. Relative paths resolve against `base`;
/// blank lines are ignored.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(image), Some(label), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Format(format!(
                "manifest line {}: expected image<TAB>label",
                n + 1
            )));
        };
        entries.push(ManifestEntry {
            image: base.join(image),
            label: base.join(label),
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new("")))
}

/// Shortest decimal form of an `f32`, so 0.7 echoes as 0.7.
fn float(v: f32) -> Value {
    v.to_string()
        .parse::<f64>()
        .map_or(Value::Null, Value::from)
}

/// JSON echo of every surgery setting.
pub fn config_json(cfg: &SurgeryConfig) -> Value {
    json!({
        "mode": cfg.base_mode.kind.name(),
        "keep_final_residual": cfg.base_mode.keep_final_residual,
        "keep_final_ffn": cfg.base_mode.keep_final_ffn,
        "prior_sigma": float(cfg.base_mode.prior_sigma),
        "lambda_rcs": float(cfg.lambda_rcs),
        "lambda_sfr": float(cfg.lambda_sfr),
        "agg": cfg.agg.strategy.name(),
        "layers": format!("{}:{}", cfg.agg.start, cfg.agg.end),
        "gauss_size": cfg.sfr.gaussian.size,
        "gauss_sigma": float(cfg.sfr.gaussian.sigma),
        "gauss_2d": cfg.sfr.gaussian.two_d,
        "connectivity": cfg.sfr.connectivity.name(),
        "gain": float(cfg.gain),
        "passes": cfg.feedback_passes,
        "head_avg": cfg.head_avg,
        "window": cfg.window,
        "stride": cfg.stride,
        "short_side": cfg.short_side,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: Value,
    pub per_class_iou: Vec<ClassIou>,
    /// `null` when no class had any pixel.
    pub miou: Option<f64>,
    pub images_evaluated: usize,
    pub skipped: usize,
    pub skipped_entries: Vec<SkippedEntry>,
    pub wall_seconds: f64,
}

fn class_ious(result: &MiouResult, classes: &ClassEmbeddings) -> Vec<ClassIou> {
    classes
        .names()
        .iter()
        .zip(&result.per_class)
        .map(|(name, iou)| ClassIou {
            class: name.clone(),
            iou: *iou,
        })
        .collect()
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| "no data".to_string(), |x| format!("{:.2}", x * 100.0))
}

impl Report {
    pub fn to_table(&self) -> String {
        let width = self
            .per_class_iou
            .iter()
            .map(|c| c.class.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  IoU (%)", "class");
        for c in &self.per_class_iou {
            let _ = writeln!(out, "{:<width$}  {}", c.class, fmt_iou(c.iou));
        }
        let _ = writeln!(out, "{:<width$}  {}", "mIoU", fmt_iou(self.miou));
        let _ = writeln!(
            out,
            "images evaluated: {}, skipped: {}, wall time: {:.2} s",
            self.images_evaluated, self.skipped, self.wall_seconds
        );
        out
    }
}

/// Confusion counts and bookkeeping for a slice of the manifest.
#[derive(Debug, Clone)]
pub struct Tally {
    pub confusion: ConfusionMatrix,
    pub evaluated: usize,
    pub skipped: Vec<(usize, SkippedEntry)>,
}

impl Tally {
    fn new(classes: usize) -> Self {
        Self {
            confusion: ConfusionMatrix::new(classes),
            evaluated: 0,
            skipped: Vec::new(),
        }
    }

    fn merge(mut self, other: Tally) -> Result<Tally> {
        self.confusion.merge(&other.confusion)?;
        self.evaluated += other.evaluated;
        self.skipped.extend(other.skipped);
        Ok(self)
    }
}

fn evaluate_entry(
    tally: &mut Tally,
    index: usize,
    entry: &ManifestEntry,
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<()> {
    let loaded = read_image_tensor(&entry.image, &bundle.meta)
        .and_then(|img| read_label_png(&entry.label).map(|gt| (img, gt)));
    let (image, gt) = match loaded {
        Ok(pair) => pair,
        Err(e) if e.is_missing_file() => {
            eprintln!("warning: skipping {}: {e}", entry.image.display());
            tally.skipped.push((
                index,
                SkippedEntry {
                    image: entry.image.clone(),
                    label: entry.label.clone(),
                    reason: e.to_string(),
                },
            ));
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    let (_, pred) = segment_image(&image, bundle, classes, cfg)?;
    tally
        .confusion
        .accumulate(&pred, &gt)
        .map_err(|e| Error::Format(format!("{}: {e}", entry.label.display())))?;
    tally.evaluated += 1;
    Ok(())
}

/// Accumulates confusion counts over the manifest on the pool. Each worker
/// keeps its own matrix; matrices are summed at the end.
pub fn tally_manifest(
    pool: &rayon::ThreadPool,
    entries: &[ManifestEntry],
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<Tally> {
    cfg.validate_for(bundle)?;
    let c = classes.len();
    let mut tally = pool.install(|| {
        entries
            .par_iter()
            .enumerate()
            .try_fold(
                || Tally::new(c),
                |mut t, (i, e)| evaluate_entry(&mut t, i, e, bundle, classes, cfg).map(|_| t),
            )
            .try_reduce(|| Tally::new(c), Tally::merge)
    })?;
    tally.skipped.sort_by_key(|(i, _)| *i);
    Ok(tally)
}

pub fn run_benchmark(
    pool: &rayon::ThreadPool,
    entries: &[ManifestEntry],
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    cfg: &SurgeryConfig,
) -> Result<Report> {
    let start = Instant::now();
    let tally = tally_manifest(pool, entries, bundle, classes, cfg)?;
    let result = tally.confusion.miou();
    Ok(Report {
        config: config_json(cfg),
        per_class_iou: class_ious(&result, classes),
        miou: result.mean,
        images_evaluated: tally.evaluated,
        skipped: tally.skipped.len(),
        skipped_entries: tally.skipped.into_iter().map(|(_, s)| s).collect(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// A named configuration in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub cfg: SurgeryConfig,
}

/// The four {RCS on/off} × {SFR on/off} combinations. RCS off sets
/// `lambda_rcs = 0`; SFR off runs no feedback pass.
pub fn module_grid(cfg: &SurgeryConfig) -> Vec<Variant> {
    let mut out = Vec::with_capacity(4);
    for (rcs, sfr) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut c = cfg.clone();
        if !rcs {
            c.lambda_rcs = 0.0;
        }
        if !sfr {
            c.feedback_passes = 0;
        }
        let name = match (rcs, sfr) {
            (false, false) => "base",
            (true, false) => "+RCS",
            (false, true) => "+SFR",
            (true, true) => "+RCS+SFR",
        };
        out.push(Variant {
            name: name.to_string(),
            cfg: c,
        });
    }
    out
}

/// One variant per inclusive layer range.
pub fn range_sweep(
    cfg: &SurgeryConfig,
    strategy: AggregationStrategy,
    ranges: &[(usize, usize)],
) -> Vec<Variant> {
    ranges
        .iter()
        .map(|&(start, end)| {
            let mut c = cfg.clone();
            c.agg = AggregationSpec {
                strategy,
                start,
                end,
            };
            Variant {
                name: format!("{} {start}\u{2192}{end}", strategy.name()),
                cfg: c,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub config: Value,
    pub miou: Option<f64>,
    pub per_class_iou: Vec<ClassIou>,
    pub images_evaluated: usize,
    pub skipped: usize,
}

/// Comparison rows; no wall time, so identical inputs give identical JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.chars().count())
            .max()
            .unwrap_or(0)
            .max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  mIoU (%)", "variant");
        for r in &self.rows {
            let pad = width - r.name.chars().count();
            let _ = writeln!(out, "{}{}  {}", r.name, " ".repeat(pad), fmt_iou(r.miou));
        }
        out
    }
}

pub fn compare_modes(
    pool: &rayon::ThreadPool,
    entries: &[ManifestEntry],
    bundle: &WeightsBundle,
    classes: &ClassEmbeddings,
    variants: &[Variant],
) -> Result<CompareReport> {
    for v in variants {
        v.cfg.validate_for(bundle)?;
    }
    let rows = variants
        .iter()
        .map(|v| {
            let tally = tally_manifest(pool, entries, bundle, classes, &v.cfg)?;
            let result = tally.confusion.miou();
            Ok(CompareRow {
                name: v.name.clone(),
                config: config_json(&v.cfg),
                miou: result.mean,
                per_class_iou: class_ious(&result, classes),
                images_evaluated: tally.evaluated,
                skipped: tally.skipped.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareReport { rows })
}
