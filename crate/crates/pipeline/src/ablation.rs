//! Baseline / +ReSeg / +HyPConv comparison on one benchmark.
//!
//! The baseline takes its edit region from the plan's box, +ReSeg swaps in
//! reasoning segmentation with the same inpainter, and +HyPConv additionally
//! swaps the inpainter for the one carrying the hypergraph module.

use std::fmt::Write as _;
use std::path::PathBuf;

use maskfree_core::metrics::{render_table, row_from_report, RegionKind};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::edit::{MaskSource, Pipeline};
use crate::evaluate::{score, BenchmarkScores, LoadedCase};
use crate::{PipelineError, Result};

pub const BASELINE: &str = "Baseline";
pub const RESEG: &str = "+ReSeg";
pub const HYPCONV: &str = "+HyPConv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub scores: BenchmarkScores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Variants that could not run, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn render(&self) -> String {
        let rows: Vec<_> = self.rows.iter().map(|r| row_from_report(&r.variant, &r.scores.report)).collect();
        let mut out = render_table(&rows);
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<16} | {:>10} | {:>14}", "Variant", "mask IoU", "hole MSE×10³");
        for r in &self.rows {
            let _ = writeln!(out, "{:<16} | {:>10} | {:>14}", r.variant, cell(r.scores.mask_iou), cell(r.scores.hole_mse_x1e3));
        }
        for (name, reason) in &self.skipped {
            let _ = writeln!(out, "skipped {name}: {reason}");
        }
        out
    }
}

struct VariantSpec {
    name: &'static str,
    masks: MaskSource,
    inpainter: Option<PathBuf>,
    segmenter: Option<PathBuf>,
    needs_segmenter: bool,
}

fn specs(config: &PipelineConfig) -> [VariantSpec; 3] {
    let m = &config.models;
    [
        VariantSpec {
            name: BASELINE,
            masks: MaskSource::PlanBox,
            inpainter: m.inpainter_plain.clone(),
            segmenter: None,
            needs_segmenter: false,
        },
        VariantSpec {
            name: RESEG,
            masks: MaskSource::Routed,
            inpainter: m.inpainter_plain.clone(),
            segmenter: m.reason_seg.clone(),
            needs_segmenter: true,
        },
        VariantSpec {
            name: HYPCONV,
            masks: MaskSource::Routed,
            inpainter: m.inpainter.clone(),
            segmenter: m.reason_seg.clone(),
            needs_segmenter: true,
        },
    ]
}

fn missing(spec: &VariantSpec) -> Option<String> {
    let check = |label: &str, p: &Option<PathBuf>| match p {
        None => Some(format!("no {label} checkpoint configured")),
        Some(p) if !p.is_file() => Some(format!("{label} checkpoint {} not found", p.display())),
        Some(_) => None,
    };
    check("inpainter", &spec.inpainter).or_else(|| if spec.needs_segmenter { check("reason-seg", &spec.segmenter) } else { None })
}

/// Edits every case with each variant and scores background preservation,
/// hole error against the reference and mask IoU.
pub fn run_ablation(cases: &[LoadedCase], config: &PipelineConfig) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for spec in specs(config) {
        if let Some(reason) = missing(&spec) {
            log::warn!("skipping ablation variant {}: {reason}", spec.name);
            table.skipped.push((spec.name.to_string(), reason));
            continue;
        }
        let mut cfg = config.clone();
        cfg.models.inpainter = spec.inpainter.clone();
        cfg.models.reason_seg = spec.segmenter.clone();
        cfg.models.inpainter_plain = None;
        let pipeline = Pipeline::from_config(cfg)?;
        let mut finals = Vec::with_capacity(cases.len());
        let mut regions = Vec::with_capacity(cases.len());
        for (i, case) in cases.iter().enumerate() {
            let out = pipeline.run(case.source.view(), &case.record.instruction, spec.masks);
            match (out.final_image, out.mask, out.error) {
                (Some(f), Some(m), None) => {
                    finals.push(f);
                    regions.push(m);
                }
                (.., e) => {
                    return Err(PipelineError::Stage {
                        stage: "ablation",
                        message: format!("{} failed on case {i}: {}", spec.name, e.unwrap_or_default()),
                    })
                }
            }
        }
        let scores = score(cases, &finals, Some(&regions), RegionKind::Background)?;
        log::info!(
            "{}: mask IoU {:.3}, hole MSE×10³ {:.3}",
            spec.name,
            scores.mask_iou.unwrap_or(f64::NAN),
            scores.hole_mse_x1e3.unwrap_or(f64::NAN)
        );
        table.rows.push(AblationRow {
            variant: spec.name.to_string(),
            scores,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::load_cases;
    use maskfree_models::synth::{removal_cases, write_benchmark, CorpusConfig};
    use maskfree_models::vae::{InpaintConfig, InpaintModel};

    #[test]
    fn missing_variants_are_skipped_and_identical_checkpoints_match() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { image_size: 16, ..CorpusConfig::default() };
        let manifest = write_benchmark(&dir.path().join("bench"), &removal_cases(5, 4, &cfg)).unwrap();
        let cases = load_cases(&manifest).unwrap();
        let inp = InpaintModel::<f32>::new(
            InpaintConfig {
                image_size: 8,
                widths: [3, 4, 5],
                latent_dim: 6,
                ..InpaintConfig::default()
            },
            0,
        )
        .unwrap();
        let a = dir.path().join("a.safetensors");
        let b = dir.path().join("b.safetensors");
        inp.save(&a).unwrap();
        inp.save(&b).unwrap();

        let mut config = PipelineConfig::default();
        config.models.inpainter_plain = Some(a);
        let table = run_ablation(&cases, &config).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.skipped.len(), 2);
        assert!(table.render().contains("skipped +ReSeg"));

        config.models.inpainter_plain = Some(b);
        let again = run_ablation(&cases, &config).unwrap();
        assert_eq!(again.rows[0].scores, table.rows[0].scores);
    }
}
