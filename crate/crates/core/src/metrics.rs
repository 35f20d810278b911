//! Image quality metrics, benchmark manifests and report rendering.
//!
//! Images are `[C, H, W]` arrays of `f64` in `[0, 1]`; masks are `[H, W]`
//! booleans where `true` marks the edited region.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image_io;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("selected region is empty")]
    EmptyRegion,
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(usize, usize),
    #[error("{records} records but {edited} edited images")]
    Count { records: usize, edited: usize },
}

type Result<T> = std::result::Result<T, MetricError>;

/// Which pixels a metric looks at.
#[derive(Clone, Copy, Debug)]
pub enum Region<'a> {
    Full,
    /// Pixels where the mask is false.
    Outside(ArrayView2<'a, bool>),
    /// Pixels where the mask is true.
    Inside(ArrayView2<'a, bool>),
}

impl Region<'_> {
    fn selects(&self, y: usize, x: usize) -> bool {
        match self {
            Region::Full => true,
            Region::Outside(m) => !m[[y, x]],
            Region::Inside(m) => m[[y, x]],
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        match self {
            Region::Outside(m) | Region::Inside(m) if m.dim() != (h, w) => {
                Err(MetricError::Shape(m.shape().to_vec(), vec![h, w]))
            }
            _ => Ok(()),
        }
    }
}

fn check_pair(a: &ArrayView3<'_, f64>, b: &ArrayView3<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(MetricError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

pub fn mse(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, region: Region<'_>) -> Result<f64> {
    check_pair(&a, &b)?;
    let (c, h, w) = a.dim();
    region.check(h, w)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if region.selects(y, x) {
                for ch in 0..c {
                    let d = a[[ch, y, x]] - b[[ch, y, x]];
                    sum += d * d;
                }
                count += c;
            }
        }
    }
    if count == 0 {
        return Err(MetricError::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// Peak signal-to-noise ratio with peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, region: Region<'_>) -> Result<f64> {
    let e = mse(a, b, region)?;
    Ok(if e == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB)
    })
}

fn grayscale(img: ArrayView3<'_, f64>) -> Array2<f64> {
    img.mean_axis(Axis(0)).expect("at least one channel")
}

/// Summed-area table with a zero border row and column.
fn integral(values: &Array2<f64>) -> Array2<f64> {
    let (h, w) = values.dim();
    let mut out = Array2::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[[y, x]];
            out[[y + 1, x + 1]] = out[[y, x + 1]] + row;
        }
    }
    out
}

fn window_sum(table: &Array2<f64>, y: usize, x: usize, k: usize) -> f64 {
    table[[y + k, x + k]] - table[[y, x + k]] - table[[y + k, x]] + table[[y, x]]
}

/// Mean structural similarity of the channel-mean grayscale images over all
/// valid 7×7 uniform windows (population statistics).
pub fn ssim(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Result<f64> {
    check_pair(&a, &b)?;
    let (_, h, w) = a.dim();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(MetricError::TooSmall(h, w));
    }
    let ga = grayscale(a);
    let gb = grayscale(b);
    let sa = integral(&ga);
    let sb = integral(&gb);
    let saa = integral(&(&ga * &ga));
    let sbb = integral(&(&gb * &gb));
    let sab = integral(&(&ga * &gb));
    let n = (k * k) as f64;
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let mu_a = window_sum(&sa, y, x, k) / n;
            let mu_b = window_sum(&sb, y, x, k) / n;
            let var_a = window_sum(&saa, y, x, k) / n - mu_a * mu_a;
            let var_b = window_sum(&sbb, y, x, k) / n - mu_b * mu_b;
            let cov = window_sum(&sab, y, x, k) / n - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Copy of `b` whose pixels outside the region are taken from `a`, so
/// whole-image metrics only see differences inside the region.
fn restrict(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, region: Region<'_>) -> Result<Array3<f64>> {
    check_pair(&a, &b)?;
    let (_, h, w) = a.dim();
    region.check(h, w)?;
    let mut out = b.to_owned();
    for y in 0..h {
        for x in 0..w {
            if !region.selects(y, x) {
                out.slice_mut(s![.., y, x]).assign(&a.slice(s![.., y, x]));
            }
        }
    }
    Ok(out)
}

/// [`ssim`] where unselected pixels of `b` are replaced by those of `a`.
pub fn ssim_region(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, region: Region<'_>) -> Result<f64> {
    let b = restrict(a, b, region)?;
    ssim(a, b.view())
}

/// Maps an image to one or more `[C, H, W]` feature grids.
pub trait FeatureExtractor {
    fn features(&self, image: ArrayView3<'_, f64>) -> Vec<Array3<f64>>;
}

struct ConvLayer {
    weight: ndarray::Array4<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn random(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = ndarray::Array4::from_shape_simple_fn((c_out, c_in, 3, 3), || normal.sample(rng));
        let bias = (0..c_out).map(|_| normal.sample(rng) * 0.1).collect();
        Self { weight, bias }
    }

    /// 3×3, stride 1, zero padding, followed by ReLU.
    fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        let c_out = self.weight.dim().0;
        let mut out = Array3::zeros((c_out, h, w));
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..c_in {
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += self.weight[[o, i, ky, kx]] * x[[i, sy as usize, sx as usize]];
                            }
                        }
                    }
                    out[[o, y, xx]] = acc.max(0.0);
                }
            }
        }
        out
    }
}

fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
    Array3::from_shape_fn((c, oh, ow), |(ch, y, xx)| {
        let ys = (2 * y)..(2 * y + 2).min(h);
        let xs = (2 * xx)..(2 * xx + 2).min(w);
        let n = (ys.len() * xs.len()) as f64;
        ys.flat_map(|yy| xs.clone().map(move |xx2| (yy, xx2)))
            .map(|(yy, xx2)| x[[ch, yy, xx2]])
            .sum::<f64>()
            / n
    })
}

/// Default perceptual proxy: a fixed-seed random ReLU conv pyramid at three scales.
pub struct RandomConvPyramid {
    layers: Vec<ConvLayer>,
}

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed;

impl RandomConvPyramid {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, 8, 16, 16];
        let layers = widths
            .windows(2)
            .map(|p| ConvLayer::random(&mut rng, p[0], p[1]))
            .collect();
        Self { layers }
    }
}

impl Default for RandomConvPyramid {
    fn default() -> Self {
        Self::new(DEFAULT_EXTRACTOR_SEED)
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn features(&self, image: ArrayView3<'_, f64>) -> Vec<Array3<f64>> {
        // centre inputs the way pretrained perceptual nets expect
        let mut x = image.mapv(|v| 2.0 * v - 1.0);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(&x);
            }
            x = layer.apply(&x);
            out.push(x.clone());
        }
        out
    }
}

fn unit_normalise(f: &Array3<f64>) -> Array3<f64> {
    let norms = f.mapv(|v| v * v).sum_axis(Axis(0)).mapv(|v| v.sqrt() + 1e-10);
    f / &norms.insert_axis(Axis(0))
}

/// Mean over layers of the per-position squared distance between
/// channel-normalised feature vectors.
pub fn lpips_proxy(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, extractor: &dyn FeatureExtractor) -> Result<f64> {
    check_pair(&a, &b)?;
    let fa = extractor.features(a);
    let fb = extractor.features(b);
    if fa.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        if x.dim() != y.dim() {
            return Err(MetricError::Shape(x.shape().to_vec(), y.shape().to_vec()));
        }
        let d = unit_normalise(x) - unit_normalise(y);
        let per_pos = d.mapv(|v| v * v).sum_axis(Axis(0));
        total += per_pos.mean().unwrap_or(0.0);
    }
    Ok(total / fa.len() as f64)
}

pub fn lpips_region(
    a: ArrayView3<'_, f64>,
    b: ArrayView3<'_, f64>,
    region: Region<'_>,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let b = restrict(a, b, region)?;
    lpips_proxy(a, b.view(), extractor)
}

/// Joint image/text embedding model for prompt-image agreement.
pub trait JointEmbedder {
    fn embed_image(&self, image: ArrayView3<'_, f64>) -> Vec<f64>;
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity between image and text embeddings; `None` without an embedder.
pub fn clip_sim(image: ArrayView3<'_, f64>, text: &str, embedder: Option<&dyn JointEmbedder>) -> Option<f64> {
    let e = embedder?;
    Some(cosine(&e.embed_image(image), &e.embed_text(text)))
}

/// Benchmark scenario classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioTag {
    LeftRight,
    RelativeSize,
    Mirror,
    Color,
    MultipleObjects,
    Reasoning,
    Addition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioGroup {
    Understanding,
    Reasoning,
}

impl ScenarioTag {
    pub const ALL: [ScenarioTag; 7] = [
        ScenarioTag::LeftRight,
        ScenarioTag::RelativeSize,
        ScenarioTag::Mirror,
        ScenarioTag::Color,
        ScenarioTag::MultipleObjects,
        ScenarioTag::Reasoning,
        ScenarioTag::Addition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioTag::LeftRight => "left-right",
            ScenarioTag::RelativeSize => "relative-size",
            ScenarioTag::Mirror => "mirror",
            ScenarioTag::Color => "color",
            ScenarioTag::MultipleObjects => "multiple-objects",
            ScenarioTag::Reasoning => "reasoning",
            ScenarioTag::Addition => "addition",
        }
    }

    /// Accepts spaces, underscores or hyphens as separators, any case.
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == ' ' || c == '_' { '-' } else { c.to_ascii_lowercase() })
            .collect();
        Self::ALL.into_iter().find(|t| t.as_str() == norm)
    }

    pub fn group(self) -> ScenarioGroup {
        match self {
            ScenarioTag::Reasoning => ScenarioGroup::Reasoning,
            _ => ScenarioGroup::Understanding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub source_image: PathBuf,
    pub instruction: String,
    pub editing_mask: PathBuf,
    pub scenario_tag: ScenarioTag,
    /// Expected edit result, when the benchmark provides one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_image: Option<PathBuf>,
}

#[derive(Deserialize)]
struct RawRecord {
    source_image: PathBuf,
    instruction: String,
    editing_mask: PathBuf,
    scenario_tag: String,
    #[serde(default)]
    reference_image: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchmarkError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a JSON-lines manifest. Relative paths resolve against the manifest's
/// directory. All problems are collected and reported together.
pub fn load_benchmark(manifest: impl AsRef<Path>) -> std::result::Result<Vec<BenchmarkRecord>, BenchmarkError> {
    let manifest = manifest.as_ref();
    let io_err = |source| BenchmarkError::Io {
        path: manifest.display().to_string(),
        source,
    };
    let file = fs::File::open(manifest).map_err(io_err)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                issues.push(format!("line {lineno}: {e}"));
                continue;
            }
        };
        let Some(tag) = ScenarioTag::parse(&raw.scenario_tag) else {
            issues.push(format!("line {lineno}: unknown scenario tag {:?}", raw.scenario_tag));
            continue;
        };
        let source = resolve(base, &raw.source_image);
        let mask = resolve(base, &raw.editing_mask);
        let dims = |p: &Path| image_io::dimensions(p).map_err(|e| format!("line {lineno}: {e}"));
        match (dims(&source), dims(&mask)) {
            (Ok(a), Ok(b)) if a != b => {
                issues.push(format!("line {lineno}: mask size {b:?} differs from image size {a:?}"));
                continue;
            }
            (Err(e), _) | (_, Err(e)) => {
                issues.push(e);
                continue;
            }
            _ => {}
        }
        let reference = raw.reference_image.map(|p| resolve(base, &p));
        if let Some(r) = &reference {
            if !r.exists() {
                issues.push(format!("line {lineno}: reference image {} not found", r.display()));
                continue;
            }
        }
        records.push(BenchmarkRecord {
            source_image: source,
            instruction: raw.instruction,
            editing_mask: mask,
            scenario_tag: tag,
            reference_image: reference,
        });
    }
    if issues.is_empty() {
        Ok(records)
    } else {
        Err(BenchmarkError::Invalid(issues))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    #[default]
    Background,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub lpips_proxy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_sim: Option<f64>,
    pub region: RegionKind,
}

pub struct MetricContext<'a> {
    pub region: RegionKind,
    pub extractor: &'a dyn FeatureExtractor,
    pub embedder: Option<&'a dyn JointEmbedder>,
}

pub fn measure(
    source: ArrayView3<'_, f64>,
    edited: ArrayView3<'_, f64>,
    mask: ArrayView2<'_, bool>,
    prompt: &str,
    ctx: &MetricContext<'_>,
) -> Result<MetricReport> {
    let region = match ctx.region {
        RegionKind::Background => Region::Outside(mask),
        RegionKind::Full => Region::Full,
    };
    Ok(MetricReport {
        psnr_db: psnr(source, edited, region)?,
        ssim: ssim_region(source, edited, region)?,
        mse: mse(source, edited, region)?,
        lpips_proxy: lpips_region(source, edited, region, ctx.extractor)?,
        clip_sim: clip_sim(edited, prompt, ctx.embedder),
        region: ctx.region,
    })
}

/// Mean scores over a set of records. LPIPS and MSE are scaled by 10³.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse_x1e3: f64,
    pub lpips_x1e3: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_sim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ins_align: Option<f64>,
}

impl Aggregate {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Option<Self> {
        let reports: Vec<&MetricReport> = reports.into_iter().collect();
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
        let clips: Vec<f64> = reports.iter().filter_map(|r| r.clip_sim).collect();
        Some(Self {
            count: reports.len(),
            psnr_db: mean(|r| r.psnr_db),
            ssim: mean(|r| r.ssim),
            mse_x1e3: mean(|r| r.mse) * 1e3,
            lpips_x1e3: mean(|r| r.lpips_proxy) * 1e3,
            clip_sim: (!clips.is_empty()).then(|| clips.iter().sum::<f64>() / clips.len() as f64),
            ins_align: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_record: Vec<MetricReport>,
    pub per_scenario: BTreeMap<String, Aggregate>,
    pub per_group: BTreeMap<String, Aggregate>,
    pub overall: Aggregate,
}

/// Scores every edited image against its source and aggregates by scenario,
/// by group and overall.
pub fn evaluate_run(
    records: &[BenchmarkRecord],
    sources: &[Array3<f64>],
    masks: &[Array2<bool>],
    edited: &[Array3<f64>],
    ctx: &MetricContext<'_>,
) -> Result<EvalReport> {
    if records.len() != edited.len() || records.len() != sources.len() || records.len() != masks.len() {
        return Err(MetricError::Count {
            records: records.len(),
            edited: edited.len(),
        });
    }
    if records.is_empty() {
        return Err(MetricError::EmptyRegion);
    }
    let per_record = records
        .iter()
        .zip(sources.iter().zip(masks).zip(edited))
        .map(|(r, ((s, m), e))| measure(s.view(), e.view(), m.view(), &r.instruction, ctx))
        .collect::<Result<Vec<_>>>()?;
    let mut per_scenario = BTreeMap::new();
    for tag in ScenarioTag::ALL {
        let sel = records.iter().zip(&per_record).filter(|(r, _)| r.scenario_tag == tag).map(|(_, m)| m);
        if let Some(agg) = Aggregate::from_reports(sel) {
            per_scenario.insert(tag.as_str().to_string(), agg);
        }
    }
    let mut per_group = BTreeMap::new();
    for (group, name) in [(ScenarioGroup::Understanding, "understanding"), (ScenarioGroup::Reasoning, "reasoning")] {
        let sel = records
            .iter()
            .zip(&per_record)
            .filter(|(r, _)| r.scenario_tag.group() == group)
            .map(|(_, m)| m);
        if let Some(agg) = Aggregate::from_reports(sel) {
            per_group.insert(name.to_string(), agg);
        }
    }
    let overall = Aggregate::from_reports(&per_record).expect("nonempty");
    Ok(EvalReport {
        per_record,
        per_scenario,
        per_group,
        overall,
    })
}

/// One group of columns in the method comparison table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub psnr_db: Option<f64>,
    pub lpips_x1e3: Option<f64>,
    pub ssim: Option<f64>,
    /// Cosine similarity ×100.
    pub clip_sim: Option<f64>,
    pub ins_align: Option<f64>,
}

impl From<&Aggregate> for GroupScores {
    fn from(a: &Aggregate) -> Self {
        Self {
            psnr_db: Some(a.psnr_db),
            lpips_x1e3: Some(a.lpips_x1e3),
            ssim: Some(a.ssim),
            clip_sim: a.clip_sim.map(|c| c * 100.0),
            ins_align: a.ins_align,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub understanding: GroupScores,
    pub reasoning: GroupScores,
}

const METHOD_WIDTH: usize = 16;
const CELL_WIDTH: usize = 10;
const COLUMNS: [&str; 5] = ["PSNR", "LPIPS×10³", "SSIM", "CLIPSim", "Ins-align"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn group_cells(g: &GroupScores) -> String {
    [g.psnr_db, g.lpips_x1e3, g.ssim, g.clip_sim, g.ins_align]
        .into_iter()
        .map(|v| format!("{:>CELL_WIDTH$}", cell(v)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Plain-text comparison table: understanding and reasoning column groups,
/// each PSNR | LPIPS×10³ | SSIM | CLIPSim | Ins-align. Missing values print `-`.
pub fn render_table(rows: &[TableRow]) -> String {
    let group_width = COLUMNS.len() * CELL_WIDTH + COLUMNS.len() - 1;
    let header: String = COLUMNS
        .iter()
        .map(|c| format!("{c:>CELL_WIDTH$}"))
        .collect::<Vec<_>>()
        .join(" ");
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<METHOD_WIDTH$} | {:<group_width$} | {}",
        "",
        "Understanding Scenarios",
        "Reasoning Scenarios"
    );
    let _ = writeln!(out, "{:<METHOD_WIDTH$} | {header} | {header}", "Method");
    let _ = writeln!(
        out,
        "{}-+-{}-+-{}",
        "-".repeat(METHOD_WIDTH),
        "-".repeat(group_width),
        "-".repeat(group_width)
    );
    for row in rows {
        let _ = writeln!(
            out,
            "{:<METHOD_WIDTH$} | {} | {}",
            row.method,
            group_cells(&row.understanding),
            group_cells(&row.reasoning)
        );
    }
    out
}

pub fn row_from_report(method: &str, report: &EvalReport) -> TableRow {
    let pick = |k: &str| report.per_group.get(k).map(GroupScores::from).unwrap_or_default();
    TableRow {
        method: method.to_string(),
        understanding: pick("understanding"),
        reasoning: pick("reasoning"),
    }
}
