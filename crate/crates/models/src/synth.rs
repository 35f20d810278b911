//! Procedural scenes of flat-coloured shapes on smooth backgrounds, and the
//! corpora built from them: referring segmentation samples, inpainting
//! images with random holes, and object-removal benchmark cases.

use std::fs;
use std::path::{Path, PathBuf};

use maskfree_core::image_io::{save_mask, save_rgb};
use maskfree_core::metrics::{BenchmarkRecord, ScenarioTag};
use ndarray::{Array2, Array3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::vocab::{query_text, RESPONSE};
use crate::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Radius of a circle enclosing the shape, as a multiple of its size.
    fn bound(self) -> f64 {
        match self {
            ShapeKind::Circle => 1.0,
            ShapeKind::Square => std::f64::consts::SQRT_2,
            ShapeKind::Triangle => 1.12,
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 7] = [
    ("red", [0.9, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.15, 0.3, 0.9]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("purple", [0.6, 0.2, 0.75]),
    ("orange", [0.95, 0.55, 0.1]),
    ("white", [0.97, 0.97, 0.97]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Index into [`COLORS`].
    pub color: usize,
    pub cx: f64,
    pub cy: f64,
    /// Circle radius, half side of a square, half height of a triangle.
    pub size: f64,
}

impl Shape {
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    /// Pixel-centre coverage test.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let r = self.size;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    pub fn mask(&self, h: usize, w: usize) -> Array2<bool> {
        Array2::from_shape_fn((h, w), |(y, x)| self.contains(y, x))
    }

    pub fn area(&self, h: usize, w: usize) -> usize {
        self.mask(h, w).iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Colours at the top-left and bottom-right corners of a linear gradient.
    pub background: [[f64; 3]; 2],
    pub noise_seed: u64,
    pub noise_std: f64,
    pub shapes: Vec<Shape>,
}

impl Scene {
    pub fn render(&self) -> Array3<f64> {
        self.render_subset(|_| true)
    }

    /// The scene with shape `index` left out.
    pub fn render_without(&self, index: usize) -> Array3<f64> {
        self.render_subset(|i| i != index)
    }

    fn render_subset(&self, keep: impl Fn(usize) -> bool) -> Array3<f64> {
        let (h, w) = (self.height, self.width);
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("valid std");
        let span = (h + w).saturating_sub(2).max(1) as f64;
        let mut img = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let t = (y + x) as f64 / span;
                for c in 0..3 {
                    let [a, b] = self.background;
                    img[[c, y, x]] = a[c] + (b[c] - a[c]) * t + noise.sample(&mut rng);
                }
            }
        }
        for (_, s) in self.shapes.iter().enumerate().filter(|&(i, _)| keep(i)) {
            let rgb = COLORS[s.color].1;
            for y in 0..h {
                for x in 0..w {
                    if s.contains(y, x) {
                        for c in 0..3 {
                            img[[c, y, x]] = rgb[c];
                        }
                    }
                }
            }
        }
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
        img
    }

    pub fn shape_mask(&self, index: usize) -> Array2<bool> {
        self.shapes[index].mask(self.height, self.width)
    }
}

fn random_background(rng: &mut ChaCha8Rng) -> [[f64; 3]; 2] {
    let base: f64 = rng.random_range(0.25..0.6);
    let mut corner = || -> [f64; 3] { std::array::from_fn(|_| (base + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0)) };
    [corner(), corner()]
}

/// Size range in pixels for a canvas of side `side`.
fn size_range(side: usize) -> (f64, f64) {
    let s = side as f64 / 32.0;
    (2.5 * s, 6.5 * s)
}

/// Tries to drop a shape of the given kind/size without overlapping `placed`.
fn place(rng: &mut ChaCha8Rng, placed: &[Shape], kind: ShapeKind, size: f64, color: usize, h: usize, w: usize) -> Option<Shape> {
    let r = size * kind.bound();
    if 2.0 * r + 2.0 >= h.min(w) as f64 {
        return None;
    }
    for _ in 0..60 {
        let cx = rng.random_range(r + 1.0..w as f64 - r - 1.0);
        let cy = rng.random_range(r + 1.0..h as f64 - r - 1.0);
        let clear = placed.iter().all(|p| {
            let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
            d >= r + p.size * p.kind.bound() + 1.5
        });
        if clear {
            return Some(Shape { kind, color, cx, cy, size });
        }
    }
    None
}

fn random_shapes(rng: &mut ChaCha8Rng, count: usize, h: usize, w: usize) -> Vec<Shape> {
    let (lo, hi) = size_range(h.min(w));
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count * 4 {
        if shapes.len() == count {
            break;
        }
        let kind = ShapeKind::ALL[rng.random_range(0..3)];
        let size = rng.random_range(lo..hi);
        let color = rng.random_range(0..COLORS.len());
        if let Some(s) = place(rng, &shapes, kind, size, color, h, w) {
            shapes.push(s);
        }
    }
    shapes
}

fn scene_from(rng: &mut ChaCha8Rng, shapes: Vec<Shape>, h: usize, w: usize) -> Scene {
    Scene {
        height: h,
        width: w,
        background: random_background(rng),
        noise_seed: rng.random(),
        noise_std: 0.015,
        shapes,
    }
}

/// A scene with `min..=max` shapes (fewer if the canvas fills up).
pub fn random_scene(rng: &mut ChaCha8Rng, min: usize, max: usize, h: usize, w: usize) -> Scene {
    let count = rng.random_range(min..=max);
    let shapes = random_shapes(rng, count, h, w);
    scene_from(rng, shapes, h, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryFamily {
    Attribute,
    Superlative,
    Spatial,
    CountPosition,
}

impl QueryFamily {
    pub const ALL: [QueryFamily; 4] =
        [QueryFamily::Attribute, QueryFamily::Superlative, QueryFamily::Spatial, QueryFamily::CountPosition];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryFamily::Attribute => "attribute",
            QueryFamily::Superlative => "superlative",
            QueryFamily::Spatial => "spatial",
            QueryFamily::CountPosition => "count-position",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str() == s)
    }

    pub fn scenario(self) -> ScenarioTag {
        match self {
            QueryFamily::Attribute => ScenarioTag::Color,
            QueryFamily::Superlative => ScenarioTag::RelativeSize,
            QueryFamily::Spatial => ScenarioTag::LeftRight,
            QueryFamily::CountPosition => ScenarioTag::Reasoning,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub image_size: usize,
    /// Relative weights of attribute, superlative, spatial, count-position.
    pub family_weights: [f64; 4],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            family_weights: [0.25; 4],
        }
    }
}

impl CorpusConfig {
    pub fn only(family: QueryFamily) -> Self {
        let mut family_weights = [0.0; 4];
        family_weights[QueryFamily::ALL.iter().position(|&f| f == family).unwrap()] = 1.0;
        Self {
            family_weights,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.family_weights.iter().sum();
        if self.family_weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
            return Err(ModelError::Config(format!("bad family weights {:?}", self.family_weights)));
        }
        if !(16..=256).contains(&self.image_size) {
            return Err(ModelError::Config(format!("image size {} outside 16..=256", self.image_size)));
        }
        Ok(())
    }

    pub fn ratios(&self) -> [f64; 4] {
        let total: f64 = self.family_weights.iter().sum();
        self.family_weights.map(|w| w / total)
    }
}

/// A referring expression grounded in one shape of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Referral {
    pub scene: Scene,
    pub target: usize,
    /// Description without article, e.g. `"largest circle"`.
    pub object: String,
    pub family: QueryFamily,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Array3<f64>,
    pub object: String,
    pub query: String,
    pub gt_text: String,
    pub mask: Array2<bool>,
    pub family: QueryFamily,
}

impl Referral {
    pub fn sample(&self) -> SegSample {
        SegSample {
            image: self.scene.render(),
            object: self.object.clone(),
            query: query_text(&self.object).expect("generated objects are nonempty"),
            gt_text: RESPONSE.to_string(),
            mask: self.scene.shape_mask(self.target),
            family: self.family,
        }
    }
}

fn attribute(rng: &mut ChaCha8Rng, size: usize) -> Option<Referral> {
    let scene = random_scene(rng, 2, 6, size, size);
    let unique: Vec<usize> = (0..scene.shapes.len())
        .filter(|&i| {
            let s = &scene.shapes[i];
            scene.shapes.iter().filter(|o| o.kind == s.kind && o.color == s.color).count() == 1
        })
        .collect();
    let &target = unique.choose(rng)?;
    let s = &scene.shapes[target];
    let object = format!("{} {}", s.color_name(), s.kind.name());
    Some(Referral { scene, target, object, family: QueryFamily::Attribute })
}

fn superlative(rng: &mut ChaCha8Rng, size: usize) -> Option<Referral> {
    let (lo, hi) = size_range(size);
    let kind = ShapeKind::ALL[rng.random_range(0..3)];
    let same = rng.random_range(2..=3usize);
    // sizes spread so consecutive areas differ clearly
    let mut sizes: Vec<f64> = Vec::new();
    for _ in 0..40 {
        if sizes.len() == same {
            break;
        }
        let s = rng.random_range(lo..hi);
        if sizes.iter().all(|&o: &f64| (s / o).max(o / s) >= 1.3) {
            sizes.push(s);
        }
    }
    if sizes.len() < 2 {
        return None;
    }
    let mut shapes = Vec::new();
    for &s in &sizes {
        let color = rng.random_range(0..COLORS.len());
        shapes.push(place(rng, &shapes, kind, s, color, size, size)?);
    }
    let others = rng.random_range(0..=(6 - sizes.len()).min(3));
    for _ in 0..others {
        let k = ShapeKind::ALL[rng.random_range(0..3)];
        if k == kind {
            continue;
        }
        let (s, color) = (rng.random_range(lo..hi), rng.random_range(0..COLORS.len()));
        if let Some(s) = place(rng, &shapes, k, s, color, size, size) {
            shapes.push(s);
        }
    }
    shapes.shuffle(rng);
    let largest = rng.random_bool(0.5);
    let candidates = (0..shapes.len()).filter(|&i| shapes[i].kind == kind);
    let target = if largest {
        candidates.max_by(|&a, &b| shapes[a].size.total_cmp(&shapes[b].size))
    } else {
        candidates.min_by(|&a, &b| shapes[a].size.total_cmp(&shapes[b].size))
    }?;
    let object = format!("{} {}", if largest { "largest" } else { "smallest" }, kind.name());
    Some(Referral { scene: scene_from(rng, shapes, size, size), target, object, family: QueryFamily::Superlative })
}

/// Indices sorted by centre x, provided neighbours are at least `gap` apart.
fn x_order(shapes: &[Shape], gap: f64) -> Option<Vec<usize>> {
    let mut idx: Vec<usize> = (0..shapes.len()).collect();
    idx.sort_by(|&a, &b| shapes[a].cx.total_cmp(&shapes[b].cx));
    idx.windows(2).all(|p| shapes[p[1]].cx - shapes[p[0]].cx >= gap).then_some(idx)
}

fn spatial(rng: &mut ChaCha8Rng, size: usize) -> Option<Referral> {
    let scene = random_scene(rng, 2, 4, size, size);
    if scene.shapes.len() < 2 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scene.shapes.len()).collect();
    idx.sort_by(|&a, &b| scene.shapes[a].cx.total_cmp(&scene.shapes[b].cx));
    let gap = size as f64 / 8.0;
    let left = rng.random_bool(0.5);
    let (target, next) = if left { (idx[0], idx[1]) } else { (idx[idx.len() - 1], idx[idx.len() - 2]) };
    if (scene.shapes[target].cx - scene.shapes[next].cx).abs() < gap {
        return None;
    }
    let object = format!("shape on the {}", if left { "left" } else { "right" });
    Some(Referral { scene, target, object, family: QueryFamily::Spatial })
}

fn count_position(rng: &mut ChaCha8Rng, size: usize) -> Option<Referral> {
    let count = if rng.random_bool(0.7) { 3 } else { 5 };
    let scene = random_scene(rng, count, count, size, size);
    if scene.shapes.len() != count {
        return None;
    }
    let order = x_order(&scene.shapes, size as f64 / 10.0)?;
    let target = order[count / 2];
    Some(Referral { scene, target, object: "middle shape".into(), family: QueryFamily::CountPosition })
}

/// A referral of the given family; deterministic in `rng`.
pub fn referral(rng: &mut ChaCha8Rng, family: QueryFamily, size: usize) -> Referral {
    loop {
        let r = match family {
            QueryFamily::Attribute => attribute(rng, size),
            QueryFamily::Superlative => superlative(rng, size),
            QueryFamily::Spatial => spatial(rng, size),
            QueryFamily::CountPosition => count_position(rng, size),
        };
        if let Some(r) = r {
            return r;
        }
    }
}

/// Generator for sample `index` of the stream identified by `seed`; samples
/// are independent, so any prefix or partition of a corpus regenerates exactly.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn pick_family(rng: &mut ChaCha8Rng, config: &CorpusConfig) -> QueryFamily {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (f, r) in QueryFamily::ALL.iter().zip(config.ratios()) {
        acc += r;
        if u < acc {
            return *f;
        }
    }
    *QueryFamily::ALL.iter().rev().zip(config.ratios().iter().rev()).find(|(_, &r)| r > 0.0).unwrap().0
}

pub fn referrals(seed: u64, range: std::ops::Range<usize>, config: &CorpusConfig) -> Vec<Referral> {
    range
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let family = pick_family(&mut rng, config);
            referral(&mut rng, family, config.image_size)
        })
        .collect()
}

pub fn generate_synthetic_corpus(seed: u64, n: usize, config: &CorpusConfig) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Err(ModelError::Config("corpus size must be at least 1".into()));
    }
    config.validate()?;
    Ok(referrals(seed, 0..n, config).iter().map(Referral::sample).collect())
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    query: String,
    gt_text: String,
    family: QueryFamily,
}

/// Writes `{i}.png`, `{i}_mask.png` and `{i}.json` per sample.
pub fn write_corpus(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let io = |e: maskfree_core::image_io::ImageError| ModelError::Io(std::io::Error::other(e.to_string()));
        save_rgb(dir.join(format!("{i:05}.png")), s.image.view()).map_err(io)?;
        save_mask(dir.join(format!("{i:05}_mask.png")), s.mask.view()).map_err(io)?;
        let side = Sidecar { query: s.query.clone(), gt_text: s.gt_text.clone(), family: s.family };
        fs::write(dir.join(format!("{i:05}.json")), serde_json::to_string_pretty(&side).expect("serialisable"))?;
    }
    Ok(())
}

/// Hole shapes used to train and evaluate the inpainter.
pub fn random_hole(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<bool> {
    let (hf, wf) = (h as f64, w as f64);
    match rng.random_range(0..3) {
        0 => {
            let bh = rng.random_range(0.2..0.5) * hf;
            let bw = rng.random_range(0.2..0.5) * wf;
            let y0 = rng.random_range(0.0..hf - bh);
            let x0 = rng.random_range(0.0..wf - bw);
            Array2::from_shape_fn((h, w), |(y, x)| {
                let (y, x) = (y as f64 + 0.5, x as f64 + 0.5);
                y >= y0 && y < y0 + bh && x >= x0 && x < x0 + bw
            })
        }
        1 => {
            let ry = rng.random_range(0.1..0.25) * hf;
            let rx = rng.random_range(0.1..0.25) * wf;
            let cy = rng.random_range(ry..hf - ry);
            let cx = rng.random_range(rx..wf - rx);
            Array2::from_shape_fn((h, w), |(y, x)| {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            })
        }
        _ => {
            // free-form brush stroke
            let mut m = Array2::from_elem((h, w), false);
            let radius = rng.random_range(0.05..0.1) * hf.min(wf);
            let (mut py, mut px) = (rng.random_range(0.2..0.8) * hf, rng.random_range(0.2..0.8) * wf);
            let mut angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for _ in 0..rng.random_range(3..6) {
                angle += rng.random_range(-1.2..1.2);
                let len = rng.random_range(0.15..0.35) * hf.min(wf);
                let steps = (len * 2.0).ceil() as usize;
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let (cy, cx) = (py + angle.sin() * len * t, px + angle.cos() * len * t);
                    for ((y, x), v) in m.indexed_iter_mut() {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        *v |= d2 <= radius * radius;
                    }
                }
                py = (py + angle.sin() * len).clamp(0.0, hf);
                px = (px + angle.cos() * len).clamp(0.0, wf);
            }
            m
        }
    }
}

/// Structured images for inpainter training: 2 to 5 shapes per scene.
pub fn inpainting_images(seed: u64, n: usize, size: usize) -> Vec<Array3<f64>> {
    (0..n)
        .map(|i| random_scene(&mut sample_rng(seed, i as u64), 2, 5, size, size).render())
        .collect()
}

/// Fixed hole for image `index` of a held-out set.
pub fn holdout_hole(seed: u64, index: usize, size: usize) -> Array2<bool> {
    random_hole(&mut sample_rng(seed ^ 0x401e, index as u64), size, size)
}

/// One object-removal case: the source, the referenced shape's mask, and the
/// same scene re-rendered without that shape.
#[derive(Clone, Debug)]
pub struct RemovalCase {
    pub referral: Referral,
    pub instruction: String,
    pub source: Array3<f64>,
    pub mask: Array2<bool>,
    pub reference: Array3<f64>,
}

pub fn removal_cases(seed: u64, n: usize, config: &CorpusConfig) -> Vec<RemovalCase> {
    referrals(seed, 0..n, config)
        .into_iter()
        .map(|r| RemovalCase {
            instruction: format!("remove the {}", r.object),
            source: r.scene.render(),
            mask: r.scene.shape_mask(r.target),
            reference: r.scene.render_without(r.target),
            referral: r,
        })
        .collect()
}

/// Writes the cases as PNGs plus a `manifest.jsonl`; returns the manifest path.
pub fn write_benchmark(dir: &Path, cases: &[RemovalCase]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let io = |e: maskfree_core::image_io::ImageError| ModelError::Io(std::io::Error::other(e.to_string()));
    let mut lines = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let src = format!("case{i:03}.png");
        let mask = format!("case{i:03}_mask.png");
        let reference = format!("case{i:03}_ref.png");
        save_rgb(dir.join(&src), c.source.view()).map_err(io)?;
        save_mask(dir.join(&mask), c.mask.view()).map_err(io)?;
        save_rgb(dir.join(&reference), c.reference.view()).map_err(io)?;
        let record = BenchmarkRecord {
            source_image: src.into(),
            instruction: c.instruction.clone(),
            editing_mask: mask.into(),
            scenario_tag: c.referral.family.scenario(),
            reference_image: Some(reference.into()),
        };
        lines.push(serde_json::to_string(&record).expect("serialisable"));
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines.join("\n") + "\n")?;
    Ok(manifest)
}
