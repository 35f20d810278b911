use std::fs;

use maskfree_core::image_io::{save_mask, save_rgb};
use maskfree_core::metrics::*;
use ndarray::{Array2, Array3};

pub fn reference_rows() -> Vec<TableRow> {
    let g = |p, l, s, c, i| GroupScores {
        psnr_db: Some(p),
        lpips_x1e3: Some(l),
        ssim: Some(s),
        clip_sim: Some(c),
        ins_align: Some(i),
    };
    vec![
        TableRow {
            method: "Ours".into(),
            understanding: g(28.99, 51.49, 0.92, 24.43, 0.86),
            reasoning: g(31.27, 47.00, 0.92, 21.46, 0.70),
        },
        TableRow {
            method: "no-embedder".into(),
            understanding: GroupScores { clip_sim: None, ins_align: None, ..g(25.5, 60.125, 0.875, 0.0, 0.0) },
            reasoning: GroupScores::default(),
        },
    ]
}

#[test]
fn table_matches_golden_file() {
    let golden = include_str!("fixtures/table1_golden.txt");
    assert_eq!(render_table(&reference_rows()), golden);
}

fn write_pair(dir: &std::path::Path, name: &str, h: usize, w: usize, mh: usize, mw: usize) {
    save_rgb(dir.join(format!("{name}.png")), Array3::from_elem((3, h, w), 0.5).view()).unwrap();
    save_mask(dir.join(format!("{name}_mask.png")), Array2::from_elem((mh, mw), false).view()).unwrap();
}

#[test]
fn manifest_loading_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    for n in ["a", "b", "c"] {
        write_pair(dir.path(), n, 8, 8, 8, 8);
    }
    write_pair(dir.path(), "odd", 8, 8, 8, 6);
    let line = |n: &str, tag: &str| {
        format!(
            r#"{{"source_image":"{n}.png","instruction":"remove the cat","editing_mask":"{n}_mask.png","scenario_tag":"{tag}"}}"#
        )
    };
    let good = dir.path().join("good.jsonl");
    fs::write(&good, [line("a", "left-right"), line("b", "reasoning"), line("c", "relative size")].join("\n")).unwrap();
    let records = load_benchmark(&good).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[2].scenario_tag, ScenarioTag::RelativeSize);
    assert!(records[0].source_image.is_absolute() || records[0].source_image.starts_with(dir.path()));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, [line("a", "color"), line("b", "rotation"), line("odd", "mirror")].join("\n")).unwrap();
    let err = load_benchmark(&bad).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("rotation"), "{err}");
    assert!(err.contains("line 3") && err.contains("mask size"), "{err}");

    assert!(load_benchmark(dir.path().join("missing.jsonl")).is_err());
}

#[test]
fn identity_run_reports_perfect_background() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<BenchmarkRecord> = ScenarioTag::ALL
        .iter()
        .map(|&t| BenchmarkRecord {
            source_image: dir.path().join("x.png"),
            instruction: "remove the cat".into(),
            editing_mask: dir.path().join("m.png"),
            scenario_tag: t,
            reference_image: None,
        })
        .collect();
    let sources: Vec<Array3<f64>> = (0..records.len())
        .map(|i| Array3::from_shape_fn((3, 12, 12), |(c, y, x)| ((i + c * 3 + y * 5 + x * 7) % 11) as f64 / 10.0))
        .collect();
    let masks: Vec<Array2<bool>> = (0..records.len()).map(|_| Array2::from_shape_fn((12, 12), |(y, x)| y < 4 && x < 4)).collect();
    let extractor = RandomConvPyramid::default();
    let ctx = MetricContext { region: RegionKind::Background, extractor: &extractor, embedder: None };
    let report = evaluate_run(&records, &sources, &masks, &sources, &ctx).unwrap();
    assert_eq!(report.overall.psnr_db, PSNR_CAP_DB);
    assert_eq!(report.overall.ssim, 1.0);
    assert_eq!(report.overall.mse_x1e3, 0.0);
    assert_eq!(report.overall.clip_sim, None);
    assert_eq!(report.per_scenario.len(), 7);
    assert_eq!(report.per_group["reasoning"].count, 1);
    assert_eq!(report.per_group["understanding"].count, 6);
    let json = serde_json::to_value(&report).unwrap();
    assert!(json["overall"].get("clip_sim").is_none());

    let short = &sources[..2];
    assert!(evaluate_run(&records, &sources, &masks, short, &ctx).is_err());
}
