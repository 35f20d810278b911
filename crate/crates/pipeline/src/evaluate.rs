//! Benchmark scoring of edited images: background preservation metrics per
//! scenario, plus hole error against a reference when the benchmark has one.

use std::fs;
use std::path::{Path, PathBuf};

use maskfree_core::image_io::{load_mask, load_rgb};
use maskfree_core::metrics::{
    evaluate_run, load_benchmark, mse, render_table, row_from_report, BenchmarkRecord, EvalReport, MetricContext,
    RandomConvPyramid, Region, RegionKind, DEFAULT_EXTRACTOR_SEED,
};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{PipelineError, Result};

#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub record: BenchmarkRecord,
    pub source: Array3<f64>,
    pub mask: Array2<bool>,
    pub reference: Option<Array3<f64>>,
}

pub fn load_cases(manifest: &Path) -> Result<Vec<LoadedCase>> {
    load_benchmark(manifest)?
        .into_iter()
        .map(|record| {
            Ok(LoadedCase {
                source: load_rgb(&record.source_image)?,
                mask: load_mask(&record.editing_mask)?,
                reference: record.reference_image.as_ref().map(load_rgb).transpose()?,
                record,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScores {
    pub report: EvalReport,
    /// Mean squared error inside the benchmark mask against the reference
    /// image, ×10³; absent when no case has a reference.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hole_mse_x1e3: Option<f64>,
    /// Mean IoU of the predicted edit regions against the benchmark masks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
}

pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (i, u) = a
        .iter()
        .zip(b)
        .fold((0usize, 0usize), |(i, u), (&x, &y)| (i + usize::from(x && y), u + usize::from(x || y)));
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Scores `edited[i]` against `cases[i]`. `predicted` are the regions the
/// editor chose, used only for the IoU column.
pub fn score(
    cases: &[LoadedCase],
    edited: &[Array3<f64>],
    predicted: Option<&[Array2<bool>]>,
    region: RegionKind,
) -> Result<BenchmarkScores> {
    let extractor = RandomConvPyramid::new(DEFAULT_EXTRACTOR_SEED);
    let ctx = MetricContext {
        region,
        extractor: &extractor,
        embedder: None,
    };
    let records: Vec<BenchmarkRecord> = cases.iter().map(|c| c.record.clone()).collect();
    let sources: Vec<Array3<f64>> = cases.iter().map(|c| c.source.clone()).collect();
    let masks: Vec<Array2<bool>> = cases.iter().map(|c| c.mask.clone()).collect();
    let report = evaluate_run(&records, &sources, &masks, edited, &ctx)?;

    let mut hole = Vec::new();
    for (c, e) in cases.iter().zip(edited) {
        if let Some(r) = &c.reference {
            if c.mask.iter().any(|&m| m) {
                hole.push(mse(e.view(), r.view(), Region::Inside(c.mask.view()))?);
            }
        }
    }
    let mask_iou = predicted.map(|p| {
        let total: f64 = p.iter().zip(cases).map(|(m, c)| mask_iou(m, &c.mask)).sum();
        total / cases.len().max(1) as f64
    });
    Ok(BenchmarkScores {
        report,
        hole_mse_x1e3: (!hole.is_empty()).then(|| hole.iter().sum::<f64>() / hole.len() as f64 * 1e3),
        mask_iou,
    })
}

/// Edited images are looked up in `edited_dir` under the source file's name.
pub fn evaluate_dir(manifest: &Path, edited_dir: &Path, region: RegionKind) -> Result<BenchmarkScores> {
    let cases = load_cases(manifest)?;
    let edited = cases
        .iter()
        .map(|c| {
            let name = c
                .record
                .source_image
                .file_name()
                .ok_or_else(|| PipelineError::Config(format!("bad source path {}", c.record.source_image.display())))?;
            Ok(load_rgb(edited_dir.join(name))?)
        })
        .collect::<Result<Vec<_>>>()?;
    score(&cases, &edited, None, region)
}

/// Writes `report.json` and `table.txt`; returns their paths.
pub fn write_report(out_dir: &Path, method: &str, scores: &BenchmarkScores) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let json = out_dir.join("report.json");
    let table = out_dir.join("table.txt");
    fs::write(&json, serde_json::to_string_pretty(scores)?)?;
    fs::write(&table, render_table(&[row_from_report(method, &scores.report)]))?;
    Ok((json, table))
}
