//! The edit pipeline: plan → region mask → dilation → inpainting → blending.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskfree_core::compose::{blend, dilate_mask, rasterize_bbox};
use maskfree_core::image_io::{encode_png, load_rgb, save_mask, save_rgb};
use maskfree_core::mllm::{mllm_analyze, PlanSource};
use maskfree_core::promptist::{compute_addition_region, parse_instruction, refine_prompt, spatial_box, EditCategory, EditPlan};
use maskfree_models::reason_seg::ReasonSegModel;
use maskfree_models::vae::InpaintModel;
use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::config::{BlendMode, PipelineConfig, PromptistMode};
use crate::resample::{resize_mask, resize_rgb, resize_soft};
use crate::{PipelineError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const REQUEST_FILE: &str = "request.json";
pub const INPUT_FILE: &str = "input.png";
pub const PLAN_FILE: &str = "plan.json";
pub const MASK_FILE: &str = "mask.png";
pub const DILATED_MASK_FILE: &str = "mask_dilated.png";
pub const INPAINTED_FILE: &str = "inpainted.png";
pub const FINAL_FILE: &str = "final.png";
pub const TIMINGS_FILE: &str = "timings.json";
pub const ERROR_FILE: &str = "error.json";

/// Query used to segment the scene behind the objects.
pub const BACKGROUND_OBJECT: &str = "background";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped { reason: String },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    #[serde(flatten)]
    pub status: StageStatus,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<StageRecord>,
    pub total_ms: f64,
}

impl StageTimings {
    pub fn new(stages: Vec<StageRecord>) -> Self {
        let total_ms = stages.iter().map(|s| s.millis).sum();
        Self { stages, total_ms }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub plan: EditPlan,
    pub source: PlanSource,
    /// Prompt handed to the generator.
    pub prompt: String,
}

/// Where the edit region comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskSource {
    /// Category routing: reasoning segmentation for objects and background,
    /// the region hint for additions, the whole image for global edits.
    #[default]
    Routed,
    /// The plan's region hint, or the box named by spatial words in the
    /// instruction; no segmentation.
    PlanBox,
}

/// In-memory result of one edit; fields stay `None` past a failed stage.
#[derive(Clone, Debug, Default)]
pub struct EditOutcome {
    pub plan: Option<PlanRecord>,
    pub mask: Option<Array2<bool>>,
    pub edit_mask: Option<Array2<bool>>,
    pub inpainted: Option<Array3<f64>>,
    pub final_image: Option<Array3<f64>>,
    pub stages: Vec<StageRecord>,
    pub error: Option<String>,
}

impl EditOutcome {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    fn stage<R>(&mut self, name: &str, f: impl FnOnce() -> Result<R>) -> Option<R> {
        let start = Instant::now();
        let result = f();
        let millis = start.elapsed().as_secs_f64() * 1e3;
        let (status, value) = match result {
            Ok(v) => (StageStatus::Ran, Some(v)),
            Err(e) => {
                log::error!("{name} stage failed: {e}");
                self.error = Some(format!("{name}: {e}"));
                (StageStatus::Failed { error: e.to_string() }, None)
            }
        };
        self.stages.push(StageRecord {
            stage: name.to_string(),
            status,
            millis,
        });
        value
    }

    fn skip(&mut self, name: &str, reason: &str) {
        log::info!("{name} stage skipped: {reason}");
        self.stages.push(StageRecord {
            stage: name.to_string(),
            status: StageStatus::Skipped { reason: reason.to_string() },
            millis: 0.0,
        });
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    segmenter: Option<ReasonSegModel<f32>>,
    inpainter: Option<InpaintModel<f32>>,
}

fn stage_err(stage: &'static str) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage { stage, message }
}

impl Pipeline {
    /// Loads whichever checkpoints the config names.
    pub fn from_config(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let segmenter = config.models.reason_seg.as_deref().map(ReasonSegModel::load).transpose()?;
        let inpainter = config.models.inpainter.as_deref().map(InpaintModel::load).transpose()?;
        Ok(Self::with_models(config, segmenter, inpainter))
    }

    pub fn with_models(
        config: PipelineConfig,
        segmenter: Option<ReasonSegModel<f32>>,
        mut inpainter: Option<InpaintModel<f32>>,
    ) -> Self {
        if let (Some(m), Some(t)) = (inpainter.as_mut(), config.inpaint.tau) {
            m.config.tau = Some(t);
        }
        Self {
            config,
            segmenter,
            inpainter,
        }
    }

    pub fn segmenter(&self) -> Option<&ReasonSegModel<f32>> {
        self.segmenter.as_ref()
    }

    pub fn inpainter(&self) -> Option<&InpaintModel<f32>> {
        self.inpainter.as_ref()
    }

    pub fn plan(&self, image: ArrayView3<'_, f64>, instruction: &str) -> Result<PlanRecord> {
        let err = |e: maskfree_core::promptist::PromptistError| PipelineError::Stage {
            stage: "plan",
            message: e.to_string(),
        };
        let (plan, source) = match self.config.promptist.mode {
            PromptistMode::Rules => (parse_instruction(instruction).map_err(err)?, PlanSource::Fallback("rules mode".into())),
            PromptistMode::External => {
                let png = encode_png(image)?;
                let outcome = mllm_analyze(&self.config.promptist.client, &png, instruction).map_err(err)?;
                if let PlanSource::Fallback(reason) = &outcome.source {
                    log::warn!("planner endpoint unavailable, using rules: {reason}");
                }
                (outcome.plan, outcome.source)
            }
        };
        let prompt = refine_prompt(&plan, None);
        Ok(PlanRecord { plan, source, prompt })
    }

    /// Soft segmentation of `object`, resampled to the image's size and thresholded.
    pub fn segment(&self, image: ArrayView3<'_, f64>, object: &str) -> Result<Array2<bool>> {
        let model = self
            .segmenter
            .as_ref()
            .ok_or_else(|| stage_err("segment")("no reason-seg checkpoint configured".into()))?;
        let (_, h, w) = image.dim();
        let s = model.config.image_size;
        let query = model.query(object)?;
        let small = resize_rgb(image, s, s);
        let soft = model.predict_mask(small.view(), &query)?;
        Ok(resize_soft(soft.view(), h, w).mapv(|p| p >= 0.5))
    }

    /// Generator output at the image's size; only pixels under the mask are meaningful.
    pub fn generate(&self, image: ArrayView3<'_, f64>, mask: &Array2<bool>) -> Result<Array3<f64>> {
        let model = self
            .inpainter
            .as_ref()
            .ok_or_else(|| stage_err("inpaint")("no inpainter checkpoint configured".into()))?;
        let (_, h, w) = image.dim();
        let s = model.config.image_size;
        let small = resize_rgb(image, s, s);
        let small_mask = resize_mask(mask.view(), s, s);
        let out = model.generate(small.view(), small_mask.view(), self.config.inpaint.samples, self.config.seed)?;
        Ok(resize_rgb(out.view(), h, w))
    }

    fn region(&self, image: ArrayView3<'_, f64>, record: &PlanRecord, source: MaskSource, out: &mut EditOutcome) -> Option<Array2<bool>> {
        let (_, h, w) = image.dim();
        let plan = &record.plan;
        let raster = |b: [f64; 4]| rasterize_bbox(b, h, w).map_err(|e| stage_err("segment")(e.to_string()));
        match (plan.category, source) {
            (EditCategory::Global, _) => {
                out.skip("segment", "global edit covers the whole image");
                Some(Array2::from_elem((h, w), true))
            }
            (EditCategory::Addition, _) => {
                out.skip("segment", "addition uses the plan's region hint");
                let hint = match plan.region_hint {
                    Some(b) => Ok(b),
                    None => compute_addition_region(plan, w, h).map_err(|e| stage_err("segment")(e.to_string())),
                };
                match hint.and_then(raster) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        out.error = Some(e.to_string());
                        None
                    }
                }
            }
            (_, MaskSource::PlanBox) => {
                let bbox = plan.region_hint.unwrap_or_else(|| spatial_box(&plan.instruction));
                out.stage("segment", || raster(bbox))
            }
            (EditCategory::Background, MaskSource::Routed) => out.stage("segment", || self.segment(image, BACKGROUND_OBJECT)),
            (_, MaskSource::Routed) => out.stage("segment", || self.segment(image, &plan.editing_object)),
        }
    }

    /// Runs every stage on an in-memory image. Never panics on stage
    /// failure: the outcome carries the error and whatever finished before it.
    pub fn run(&self, image: ArrayView3<'_, f64>, instruction: &str, source: MaskSource) -> EditOutcome {
        let mut out = EditOutcome::default();
        let Some(record) = out.stage("plan", || self.plan(image, instruction)) else {
            return out;
        };
        out.plan = Some(record.clone());
        let Some(mask) = self.region(image, &record, source, &mut out) else {
            return out;
        };
        out.mask = Some(mask.clone());
        let radius = self.config.masks.dilation_radius;
        let edit_mask = out.stage("dilate", || Ok(dilate_mask(mask.view(), radius))).expect("dilation is infallible");
        out.edit_mask = Some(edit_mask.clone());

        if !edit_mask.iter().any(|&m| m) {
            log::warn!("empty edit region for {instruction:?}; returning the source unchanged");
            out.skip("inpaint", "empty edit region");
            out.skip("blend", "empty edit region");
            out.inpainted = Some(image.to_owned());
            out.final_image = Some(image.to_owned());
            return out;
        }
        let Some(generated) = out.stage("inpaint", || self.generate(image, &edit_mask)) else {
            return out;
        };
        out.inpainted = Some(generated.clone());
        out.final_image = match self.config.masks.blend {
            BlendMode::Feather => {
                let r = self.config.masks.blend_radius;
                out.stage("blend", || {
                    blend(image, generated.view(), edit_mask.view(), r).map_err(|e| stage_err("blend")(e.to_string()))
                })
            }
            BlendMode::None => {
                out.skip("blend", "blending disabled");
                Some(generated)
            }
        };
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub instruction: String,
    /// File name of the source copy inside the run directory.
    pub image: String,
    /// Where the source was read from originally.
    pub origin: PathBuf,
}

/// A run directory and the outcome persisted in it.
pub struct RunArtifact {
    pub dir: PathBuf,
    pub outcome: EditOutcome,
    pub timings: StageTimings,
}

impl RunArtifact {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Config as persisted next to a run: model paths made absolute so the
/// snapshot can be replayed from anywhere.
pub fn snapshot_config(config: &PipelineConfig, run_dir: &Path) -> PipelineConfig {
    let mut snap = config.clone();
    for p in [&mut snap.models.reason_seg, &mut snap.models.inpainter, &mut snap.models.inpainter_plain]
        .into_iter()
        .flatten()
    {
        *p = absolute(p);
    }
    snap.out_dir = absolute(run_dir);
    snap
}

/// First unused `<root>/<stem>-NNN` directory.
pub fn next_run_dir(root: &Path, image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    (0..)
        .map(|i| root.join(format!("{stem}-{i:03}")))
        .find(|d| !d.exists())
        .expect("unbounded search")
}

/// Edits `image_path` and persists every stage output into `run_dir`.
/// Returns `Err` only when the run directory itself cannot be written;
/// stage failures are recorded in the artifact and `error.json`.
pub fn edit(pipeline: &Pipeline, image_path: &Path, instruction: &str, run_dir: &Path) -> Result<RunArtifact> {
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join(CONFIG_FILE), snapshot_config(&pipeline.config, run_dir).to_toml())?;
    let request = EditRequest {
        instruction: instruction.to_string(),
        image: INPUT_FILE.to_string(),
        origin: absolute(image_path),
    };
    fs::write(run_dir.join(REQUEST_FILE), serde_json::to_string_pretty(&request)?)?;

    let mut outcome = EditOutcome::default();
    let image = outcome.stage("load", || Ok(load_rgb(image_path)?));
    if let Some(image) = &image {
        save_rgb(run_dir.join(INPUT_FILE), image.view())?;
        let rest = pipeline.run(image.view(), instruction, MaskSource::Routed);
        outcome.stages.extend(rest.stages);
        outcome = EditOutcome { stages: outcome.stages, ..rest };
    }
    persist(run_dir, &outcome)
}

fn persist(run_dir: &Path, outcome: &EditOutcome) -> Result<RunArtifact> {
    if let Some(p) = &outcome.plan {
        fs::write(run_dir.join(PLAN_FILE), serde_json::to_string_pretty(p)?)?;
    }
    if let Some(m) = &outcome.mask {
        save_mask(run_dir.join(MASK_FILE), m.view())?;
    }
    if let Some(m) = &outcome.edit_mask {
        save_mask(run_dir.join(DILATED_MASK_FILE), m.view())?;
    }
    if let Some(img) = &outcome.inpainted {
        save_rgb(run_dir.join(INPAINTED_FILE), img.view())?;
    }
    if let Some(img) = &outcome.final_image {
        save_rgb(run_dir.join(FINAL_FILE), img.view())?;
    }
    let timings = StageTimings::new(outcome.stages.clone());
    fs::write(run_dir.join(TIMINGS_FILE), serde_json::to_string_pretty(&timings)?)?;
    if let Some(e) = &outcome.error {
        fs::write(run_dir.join(ERROR_FILE), serde_json::to_string_pretty(&serde_json::json!({ "error": e }))?)?;
    }
    Ok(RunArtifact {
        dir: run_dir.to_path_buf(),
        outcome: outcome.clone(),
        timings,
    })
}

/// Re-executes a persisted run from its config snapshot and input copy.
pub fn replay(run_dir: &Path, new_dir: &Path) -> Result<RunArtifact> {
    let config = PipelineConfig::load(&run_dir.join(CONFIG_FILE))?;
    let request: EditRequest = serde_json::from_str(&fs::read_to_string(run_dir.join(REQUEST_FILE))?)?;
    let pipeline = Pipeline::from_config(config)?;
    edit(&pipeline, &run_dir.join(&request.image), &request.instruction, new_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskfree_models::vae::InpaintConfig;

    fn tiny_inpainter() -> InpaintModel<f32> {
        let cfg = InpaintConfig {
            image_size: 8,
            widths: [3, 4, 5],
            latent_dim: 6,
            ..InpaintConfig::default()
        };
        InpaintModel::new(cfg, 3).unwrap()
    }

    fn scene() -> Array3<f64> {
        Array3::from_shape_fn((3, 12, 12), |(c, y, x)| ((c * 7 + y * 3 + x * 5) % 11) as f64 / 10.0)
    }

    fn pipeline() -> Pipeline {
        Pipeline::with_models(PipelineConfig::default(), None, Some(tiny_inpainter()))
    }

    fn ran(out: &EditOutcome, stage: &str) -> bool {
        out.stages.iter().any(|s| s.stage == stage && s.status == StageStatus::Ran)
    }

    #[test]
    fn global_edit_uses_full_mask() {
        let out = pipeline().run(scene().view(), "make it look like winter", MaskSource::Routed);
        assert!(out.is_ok(), "{:?}", out.error);
        assert_eq!(out.plan.as_ref().unwrap().plan.category, EditCategory::Global);
        assert!(out.mask.as_ref().unwrap().iter().all(|&m| m));
        assert!(!ran(&out, "segment"));
        assert!(ran(&out, "inpaint"));
    }

    #[test]
    fn addition_uses_region_hint() {
        let img = scene();
        let out = pipeline().run(img.view(), "add a small tree in the top left corner", MaskSource::Routed);
        assert!(out.is_ok(), "{:?}", out.error);
        let plan = &out.plan.as_ref().unwrap().plan;
        assert_eq!(plan.category, EditCategory::Addition);
        let expected = rasterize_bbox(plan.region_hint.unwrap(), 12, 12).unwrap();
        assert_eq!(out.mask.as_ref().unwrap(), &expected);
        assert!(!ran(&out, "segment"));
        let edit = out.edit_mask.unwrap();
        let fin = out.final_image.unwrap();
        let band = dilate_mask(edit.view(), 2);
        for ((c, y, x), v) in fin.indexed_iter() {
            if !band[[y, x]] {
                assert_eq!(v.to_bits(), img[[c, y, x]].to_bits());
            }
        }
    }

    #[test]
    fn missing_segmenter_fails_the_stage() {
        let out = pipeline().run(scene().view(), "remove the red square", MaskSource::Routed);
        assert!(!out.is_ok());
        assert!(out.plan.is_some());
        assert!(out.final_image.is_none());
        assert!(matches!(out.stages.last().unwrap().status, StageStatus::Failed { .. }));
    }

    #[test]
    fn plan_box_bypasses_segmentation() {
        let out = pipeline().run(scene().view(), "remove the shape on the left", MaskSource::PlanBox);
        assert!(out.is_ok(), "{:?}", out.error);
        let mask = out.mask.unwrap();
        assert!(mask[[6, 1]] && !mask[[6, 10]]);
    }

    #[test]
    fn no_blend_returns_generator_output() {
        let mut p = pipeline();
        p.config.masks.blend = BlendMode::None;
        let out = p.run(scene().view(), "make it look like winter", MaskSource::Routed);
        assert_eq!(out.final_image, out.inpainted);
    }

    #[test]
    fn run_directory_holds_every_stage_output() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("scene.png");
        save_rgb(&src, scene().view()).unwrap();
        let run = edit(&pipeline(), &src, "make it look like winter", &dir.path().join("run")).unwrap();
        assert!(run.is_ok());
        for f in [CONFIG_FILE, REQUEST_FILE, INPUT_FILE, PLAN_FILE, MASK_FILE, INPAINTED_FILE, FINAL_FILE, TIMINGS_FILE] {
            assert!(run.dir.join(f).is_file(), "{f}");
        }
        let sum: f64 = run.timings.stages.iter().map(|s| s.millis).sum();
        assert!((run.timings.total_ms - sum).abs() < 1e-9);

        let failed = edit(&pipeline(), &src, "remove the red square", &dir.path().join("bad")).unwrap();
        assert!(!failed.is_ok());
        assert!(failed.dir.join(ERROR_FILE).is_file());
        assert!(failed.dir.join(PLAN_FILE).is_file());
        assert!(!failed.dir.join(FINAL_FILE).exists());

        let missing = edit(&pipeline(), &dir.path().join("nope.png"), "remove it", &dir.path().join("m")).unwrap();
        assert!(!missing.is_ok());
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = next_run_dir(dir.path(), Path::new("x/cat.png"));
        fs::create_dir_all(&a).unwrap();
        let b = next_run_dir(dir.path(), Path::new("x/cat.png"));
        assert_ne!(a, b);
        assert!(b.ends_with("cat-001"));
    }
}
