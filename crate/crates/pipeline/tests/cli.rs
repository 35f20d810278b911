use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use maskfree_core::image_io::save_rgb;
use ndarray::Array3;

fn maskfree(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskfree"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scene(path: &Path, size: usize) {
    let img = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        if (size / 4..size / 2).contains(&y) && (size / 4..size / 2).contains(&x) {
            [0.9, 0.1, 0.1][c]
        } else {
            0.2 + 0.02 * ((x + y) % 5) as f64
        }
    });
    save_rgb(path, img.view()).unwrap();
}

const TINY: &str = r#"
seed = 3

[models]
inpainter = "models/inpainter.safetensors"

[train_inpaint]
steps = 2
batch_size = 2
dataset_size = 4

[train_inpaint.model]
image_size = 8
widths = [3, 4, 5]
latent_dim = 6
"#;

#[test]
fn inspect_hypergraph_reports_middle_grid() {
    let dir = tempfile::tempdir().unwrap();
    scene(&dir.path().join("scene.png"), 40);
    let out = maskfree(dir.path(), &["inspect-hypergraph", "scene.png"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dump: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(dump["num_nodes"], 64);
    assert_eq!(dump["num_edges"], 64);
}

#[test]
fn train_edit_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let trained = maskfree(d, &["--config", "tiny.toml", "--out", "models", "train-inpaint"]);
    assert!(trained.status.success(), "{}", String::from_utf8_lossy(&trained.stderr));
    assert!(d.join("models/inpainter.safetensors").is_file());
    assert!(fs::read_to_string(d.join("models/inpainter_loss.csv")).unwrap().starts_with("step,"));

    scene(&d.join("scene.png"), 24);
    let edited = maskfree(d, &["--config", "tiny.toml", "--out", "runs", "edit", "scene.png", "make it look like winter"]);
    assert!(edited.status.success(), "{}", String::from_utf8_lossy(&edited.stderr));
    let run = d.join("runs/scene-000");
    assert_eq!(stdout(&edited).trim(), "runs/scene-000");
    for f in ["config.toml", "request.json", "input.png", "plan.json", "mask.png", "final.png", "timings.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["plan"]["category"], "Global");

    let again = maskfree(d, &["--out", "runs", "edit", "--replay", "runs/scene-000"]);
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    let rerun = d.join("runs/scene-000-000");
    assert_eq!(fs::read(run.join("final.png")).unwrap(), fs::read(rerun.join("final.png")).unwrap());
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = maskfree(d, &["--out", "runs", "edit", "nowhere.png", "remove the cat"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(d.join("runs/nowhere-000/error.json").is_file());

    let incomplete = maskfree(d, &["edit", "scene.png"]);
    assert_eq!(incomplete.status.code(), Some(2));
    fs::write(d.join("bad.toml"), "[masks]\nblend_radius = 99\n").unwrap();
    let bad = maskfree(d, &["--config", "bad.toml", "inspect-hypergraph", "x.png"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn benchmark_generation_and_identity_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = maskfree(d, &["--out", "bench", "gen-corpus", "--n", "6", "--benchmark"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let manifest = d.join("bench/manifest.jsonl");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 6);

    let eval = maskfree(d, &["--out", "scores", "eval", "--manifest", "bench/manifest.jsonl", "--edited", "bench", "--method", "identity"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(stdout(&eval).contains("identity"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("scores/report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["overall"]["psnr_db"], 100.0);

    let corpus = maskfree(d, &["--out", "corpus", "gen-corpus", "--n", "4", "--family", "superlative"]);
    assert!(corpus.status.success(), "{}", String::from_utf8_lossy(&corpus.stderr));
    assert!(fs::read_dir(d.join("corpus")).unwrap().count() > 0);
}
