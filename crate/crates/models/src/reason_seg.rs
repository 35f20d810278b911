//! Segmentation-token reasoning segmenter: a causal text encoder reads
//! `<bos> query response <eos>`, the hidden state at each `<seg>` is projected
//! by an MLP and correlated with a visual feature grid, and a small decoder
//! turns the correlation maps into per-pixel logits.

use std::collections::BTreeMap;
use std::path::Path;

use maskfree_core::seg_losses::LossWeights;
use maskfree_tensor::nn::{Conv2d, Linear};
use maskfree_tensor::{checkpoint, Adam, AdamConfig, Graph, Init, ParamBuilder, ParamStore, Tensor, Var};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ops::{mask_loss_node, text_loss_node};
use crate::synth::{referrals, CorpusConfig, QueryFamily, Referral, SegSample};
use crate::vocab::{build_query, SegQuery, Vocabulary, RESPONSE};
use crate::{Float, ModelError, Result};

pub const CHECKPOINT_KIND: &str = "reason-seg";
const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonSegConfig {
    pub image_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub attention_heads: usize,
    pub max_len: usize,
    /// Visual encoder widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    /// Channels of the fused feature grid each seg head is correlated with.
    pub fusion_dim: usize,
    /// Correlation maps produced per `<seg>` embedding.
    pub heads: usize,
}

impl Default for ReasonSegConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            d_model: 64,
            layers: 2,
            attention_heads: 4,
            max_len: 32,
            widths: [16, 32, 64],
            fusion_dim: 32,
            heads: 8,
        }
    }
}

impl ReasonSegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(ModelError::Config(format!("image size {} must be a multiple of 4, at least 8", self.image_size)));
        }
        if self.d_model == 0 || self.layers == 0 || self.max_len < 4 || self.fusion_dim == 0 || self.heads == 0 {
            return Err(ModelError::Config("model dimensions must be positive".into()));
        }
        if self.attention_heads == 0 || self.d_model % self.attention_heads != 0 {
            return Err(ModelError::Config(format!(
                "{} attention heads do not divide d_model {}",
                self.attention_heads, self.d_model
            )));
        }
        if self.widths.contains(&0) {
            return Err(ModelError::Config("visual widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    up: Linear,
    down: Linear,
}

impl Block {
    fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, d: usize) -> Self {
        Self {
            q: Linear::new(&mut pb.pp("q"), d, d, true),
            k: Linear::new(&mut pb.pp("k"), d, d, true),
            v: Linear::new(&mut pb.pp("v"), d, d, true),
            out: Linear::with_init(&mut pb.pp("out"), d, d, Init::Normal { std: 0.02 }),
            up: Linear::new(&mut pb.pp("up"), d, 2 * d, true),
            down: Linear::with_init(&mut pb.pp("down"), 2 * d, d, Init::Normal { std: 0.02 }),
        }
    }

    /// `x: [B, T, D]`; `mask` is the additive causal mask `[B·heads, T, T]`.
    fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var, mask: &Tensor<T>, heads: usize) -> Var {
        let shape = g.shape(x);
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let split = |y: Var| g.reshape(g.permute(g.reshape(y, &[b, t, heads, dh]), &[0, 2, 1, 3]), &[b * heads, t, dh]);
        let h = g.layer_norm(x, 1e-5);
        let q = split(self.q.forward(g, h));
        let k = split(self.k.forward(g, h));
        let v = split(self.v.forward(g, h));
        let scores = g.scale(g.matmul_t(q, k, false, true), 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores, Some(mask));
        let merged = g.reshape(g.permute(g.reshape(g.matmul(attn, v), &[b, heads, t, dh]), &[0, 2, 1, 3]), &[b, t, d]);
        let x = g.add(x, self.out.forward(g, merged));
        let h = g.layer_norm(x, 1e-5);
        g.add(x, self.down.forward(g, g.gelu(self.up.forward(g, h))))
    }
}

#[derive(Clone, Debug)]
struct VisualEncoder {
    a1: Conv2d,
    a2: Conv2d,
    b1: Conv2d,
    b2: Conv2d,
    c1: Conv2d,
    c2: Conv2d,
    project: Conv2d,
}

#[derive(Clone, Debug)]
struct MaskDecoder {
    refine1: Conv2d,
    refine2: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    out: Conv2d,
}

pub struct ReasonSegModel<T: Float> {
    pub config: ReasonSegConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    token_embedding: maskfree_tensor::ParamId,
    position_embedding: maskfree_tensor::ParamId,
    blocks: Vec<Block>,
    lm_head: Linear,
    seg_hidden: Linear,
    seg_out: Linear,
    visual: VisualEncoder,
    decoder: MaskDecoder,
}

/// Graph handles of a batched pass.
pub struct SegForward {
    /// `[B·T, V]` next-token logits.
    pub text_logits: Var,
    /// `[S, 1, H, W]` mask logits, one per `<seg>` occurrence, batch-major.
    pub mask_logits: Var,
    /// Batch index of each mask in `mask_logits`.
    pub owners: Vec<usize>,
    pub seq_len: usize,
}

fn coord_image<T: Float>(images: &[ArrayView3<'_, f64>]) -> Tensor<T> {
    let (_, h, w) = images[0].dim();
    let mut data = Vec::with_capacity(images.len() * 5 * h * w);
    for img in images {
        data.extend(img.iter().map(|&v| T::lit(v)));
        for y in 0..h {
            for _ in 0..w {
                data.push(T::lit((y as f64 + 0.5) / h as f64 * 2.0 - 1.0));
            }
        }
        for _ in 0..h {
            for x in 0..w {
                data.push(T::lit((x as f64 + 0.5) / w as f64 * 2.0 - 1.0));
            }
        }
    }
    Tensor::new([images.len(), 5, h, w], data)
}

/// Rows of `hidden` (`[T, D]`) at `positions`, each passed through `mlp`.
pub fn extract_seg_embedding(
    hidden: ArrayView2<'_, f64>,
    positions: &[usize],
    mlp: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<Vec<f64>>> {
    positions
        .iter()
        .map(|&p| {
            if p >= hidden.nrows() {
                return Err(ModelError::Query(format!("<seg> position {p} outside sequence of {}", hidden.nrows())));
            }
            Ok(mlp(&hidden.row(p).to_vec()))
        })
        .collect()
}

impl<T: Float> ReasonSegModel<T> {
    pub fn new(config: ReasonSegConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let d = config.d_model;
        let [w1, w2, w3] = config.widths;
        let f = config.fusion_dim;
        let k = config.heads;

        let mut t = pb.pp("text");
        let token_embedding = t.var("token_embedding", &[vocab.len(), d], Init::Normal { std: 1.0 });
        let position_embedding = t.var("position_embedding", &[config.max_len, d], Init::Normal { std: 0.1 });
        let blocks = (0..config.layers).map(|i| Block::new(&mut t.pp(&format!("block{i}")), d)).collect();
        let lm_head = Linear::new(&mut t.pp("lm_head"), d, vocab.len(), true);

        let mut s = pb.pp("seg_mlp");
        let seg_hidden = Linear::new(&mut s.pp("hidden"), d, 2 * d, true);
        let seg_out = Linear::new(&mut s.pp("out"), 2 * d, k * f, true);

        let mut v = pb.pp("visual");
        let visual = VisualEncoder {
            a1: Conv2d::same3(&mut v.pp("a1"), 5, w1),
            a2: Conv2d::same3(&mut v.pp("a2"), w1, w1),
            b1: Conv2d::new(&mut v.pp("b1"), w1, w2, 3, 2, 1),
            b2: Conv2d::same3(&mut v.pp("b2"), w2, w2),
            c1: Conv2d::new(&mut v.pp("c1"), w2, w3, 3, 2, 1),
            c2: Conv2d::same3(&mut v.pp("c2"), w3, w3),
            project: Conv2d::new(&mut v.pp("project"), w3, f, 1, 1, 0),
        };

        let mut m = pb.pp("mask_decoder");
        let decoder = MaskDecoder {
            refine1: Conv2d::same3(&mut m.pp("refine1"), 2 * k + w3, w3),
            refine2: Conv2d::same3(&mut m.pp("refine2"), w3, w3),
            up1: Conv2d::same3(&mut m.pp("up1"), w3 + w2, w2),
            up2: Conv2d::same3(&mut m.pp("up2"), w2 + w1, w1),
            out: Conv2d::same3(&mut m.pp("out"), w1, 1),
        };
        Ok(Self {
            config,
            vocab,
            params,
            token_embedding,
            position_embedding,
            blocks,
            lm_head,
            seg_hidden,
            seg_out,
            visual,
            decoder,
        })
    }

    pub fn query(&self, object: &str) -> Result<SegQuery> {
        build_query(&self.vocab, object)
    }

    /// Final hidden states `[B, T, D]` of a right-padded batch.
    fn encode_text(&self, g: &Graph<'_, T>, queries: &[&SegQuery], seq_len: usize) -> Result<Var> {
        let b = queries.len();
        let pad = self.vocab.pad();
        let mut ids = Vec::with_capacity(b * seq_len);
        for q in queries {
            if q.token_ids.len() > seq_len || seq_len > self.config.max_len {
                return Err(ModelError::Query(format!(
                    "sequence of {} tokens exceeds the limit of {}",
                    q.token_ids.len().max(seq_len),
                    self.config.max_len
                )));
            }
            ids.extend(&q.token_ids);
            ids.extend(std::iter::repeat_n(pad, seq_len - q.token_ids.len()));
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..seq_len).collect();
        let tok = g.gather_rows(g.param(self.token_embedding), &ids);
        let pos = g.gather_rows(g.param(self.position_embedding), &positions);
        let mut x = g.reshape(g.add(tok, pos), &[b, seq_len, self.config.d_model]);
        let heads = self.config.attention_heads;
        let mut mask = Vec::with_capacity(b * heads * seq_len * seq_len);
        for _ in 0..b * heads {
            for i in 0..seq_len {
                mask.extend((0..seq_len).map(|j| T::lit(if j <= i { 0.0 } else { MASK_NEG })));
            }
        }
        let mask = Tensor::new([b * heads, seq_len, seq_len], mask);
        for block in &self.blocks {
            x = block.forward(g, x, &mask, heads);
        }
        Ok(g.layer_norm(x, 1e-5))
    }

    fn seg_mlp(&self, g: &Graph<'_, T>, rows: Var) -> Var {
        self.seg_out.forward(g, g.gelu(self.seg_hidden.forward(g, rows)))
    }

    /// Runs the whole model on a batch of images and their queries.
    pub fn forward(&self, g: &Graph<'_, T>, images: &[ArrayView3<'_, f64>], queries: &[&SegQuery]) -> Result<SegForward> {
        let s = self.config.image_size;
        if images.is_empty() || images.len() != queries.len() {
            return Err(ModelError::Shape(format!("{} images with {} queries", images.len(), queries.len())));
        }
        if let Some(bad) = images.iter().find(|i| i.dim() != (3, s, s)) {
            return Err(ModelError::Shape(format!("image {:?}, model expects 3x{s}x{s}", bad.dim())));
        }
        if let Some(q) = queries.iter().find(|q| q.seg_positions.is_empty()) {
            return Err(ModelError::Query(format!("query {:?} has no <seg> in its response", q.raw_text)));
        }
        let b = images.len();
        let seq_len = queries.iter().map(|q| q.token_ids.len()).max().unwrap();
        let d = self.config.d_model;
        let hidden = self.encode_text(g, queries, seq_len)?;
        let flat = g.reshape(hidden, &[b * seq_len, d]);
        let text_logits = self.lm_head.forward(g, flat);

        let mut rows = Vec::new();
        let mut owners = Vec::new();
        for (i, q) in queries.iter().enumerate() {
            for &p in &q.seg_positions {
                rows.push(i * seq_len + p);
                owners.push(i);
            }
        }
        let n_seg = rows.len();
        let (k, f) = (self.config.heads, self.config.fusion_dim);
        let seg = self.seg_mlp(g, g.gather_rows(flat, &rows));
        let seg = g.reshape(seg, &[n_seg, k, f]);

        let v = &self.visual;
        let x = g.constant(coord_image(images));
        let f1 = g.relu(v.a2.forward(g, g.relu(v.a1.forward(g, x))));
        let f2 = g.relu(v.b2.forward(g, g.relu(v.b1.forward(g, f1))));
        let f3 = g.relu(v.c2.forward(g, g.relu(v.c1.forward(g, f2))));
        // repeat per-image features for every <seg> of that image
        let pick = |t: Var| -> Var {
            if owners.iter().enumerate().all(|(i, &o)| i == o) && n_seg == b {
                t
            } else {
                let shape = g.shape(t);
                let per: usize = shape[1..].iter().product();
                let rows = g.gather_rows(g.reshape(t, &[b, per]), &owners);
                let mut out_shape = shape.clone();
                out_shape[0] = n_seg;
                g.reshape(rows, &out_shape)
            }
        };
        let (f1, f2, f3) = (pick(f1), pick(f2), pick(f3));
        let m = s / 4;
        let grid = g.reshape(v.project.forward(g, f3), &[n_seg, f, m * m]);
        let maps = g.reshape(g.matmul(seg, grid), &[n_seg, k, m, m]);
        let context = g.broadcast_spatial(g.global_max_pool(maps), m, m);

        let dec = &self.decoder;
        let y = g.concat(&[maps, context, f3], 1);
        let y = g.relu(dec.refine2.forward(g, g.relu(dec.refine1.forward(g, y))));
        let y = g.relu(dec.up1.forward(g, g.concat(&[g.upsample(y, 2), f2], 1)));
        let y = g.relu(dec.up2.forward(g, g.concat(&[g.upsample(y, 2), f1], 1)));
        let mask_logits = dec.out.forward(g, y);
        Ok(SegForward {
            text_logits,
            mask_logits,
            owners,
            seq_len,
        })
    }

    /// Soft masks in [0, 1], one per `<seg>` of the query, in order.
    pub fn predict_masks(&self, image: ArrayView3<'_, f64>, query: &SegQuery) -> Result<Vec<Array2<f64>>> {
        Ok(self.predict_batch(&[image], &[query])?.remove(0))
    }

    /// Soft mask for the first `<seg>` of the query.
    pub fn predict_mask(&self, image: ArrayView3<'_, f64>, query: &SegQuery) -> Result<Array2<f64>> {
        Ok(self.predict_masks(image, query)?.remove(0))
    }

    pub fn predict_batch(&self, images: &[ArrayView3<'_, f64>], queries: &[&SegQuery]) -> Result<Vec<Vec<Array2<f64>>>> {
        let g = Graph::with_params(&self.params);
        let fwd = self.forward(&g, images, queries)?;
        let logits = g.value(fwd.mask_logits);
        let s = self.config.image_size;
        let mut out = vec![Vec::new(); images.len()];
        for (i, &owner) in fwd.owners.iter().enumerate() {
            let m = Array2::from_shape_vec(
                (s, s),
                logits.outer(i).iter().map(|v| maskfree_tensor::sigmoid(v.to_f64().unwrap())).collect(),
            )
            .expect("mask block");
            out[owner].push(m);
        }
        Ok(out)
    }

    /// Final hidden states of one query, `[T, D]`.
    pub fn hidden_states(&self, query: &SegQuery) -> Result<Array2<f64>> {
        let g = Graph::with_params(&self.params);
        let t = query.token_ids.len();
        let h = self.encode_text(&g, &[query], t)?;
        let v = g.value(h);
        Ok(Array2::from_shape_vec((t, self.config.d_model), v.data().iter().map(|x| x.to_f64().unwrap()).collect())
            .expect("hidden block"))
    }

    /// The seg-projection MLP applied to one hidden-state row.
    pub fn project_seg(&self, row: &[f64]) -> Vec<f64> {
        let g = Graph::with_params(&self.params);
        let x = g.constant(Tensor::new([1, row.len()], row.iter().map(|&v| T::lit(v)).collect()));
        g.value(self.seg_mlp(&g, x)).data().iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": CHECKPOINT_KIND, "model": self.config, "vocab": self.vocab });
        checkpoint::save(path, &self.params, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = checkpoint::load::<T>(path)?;
        if meta["kind"] != CHECKPOINT_KIND {
            return Err(ModelError::Config(format!("{} is not a reason-seg checkpoint", path.display())));
        }
        let parse = |key: &str| meta[key].clone();
        let config: ReasonSegConfig = serde_json::from_value(parse("model")).map_err(|e| ModelError::Config(e.to_string()))?;
        let vocab: Vocabulary = serde_json::from_value(parse("vocab")).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut model = Self::new(config, vocab, 0)?;
        model.params.assign(tensors).map_err(ModelError::Config)?;
        Ok(model)
    }
}

/// Encoded training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Array3<f64>,
    pub query: SegQuery,
    pub mask: Array2<f64>,
    pub family: QueryFamily,
}

pub fn encode_samples(vocab: &Vocabulary, samples: &[SegSample]) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                image: s.image.clone(),
                query: SegQuery::new(vocab, &s.query, &s.gt_text)?,
                mask: s.mask.mapv(|m| if m { 1.0 } else { 0.0 }),
                family: s.family,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLossRecord {
    pub step: usize,
    pub text_loss: f64,
    pub mask_loss: f64,
    pub total: f64,
}

/// Where training batches come from.
#[derive(Clone, Copy, Debug)]
pub enum TrainingData<'a> {
    /// Uniform draws with replacement from a fixed set.
    Fixed(&'a [Example]),
    /// Fresh synthetic scenes: step `s` uses corpus indices `s·B .. (s+1)·B`.
    Stream { seed: u64, corpus: &'a CorpusConfig },
}

/// Optimises `λ_txt·L_txt + λ_mask·L_mask` from a freshly initialised model.
pub fn train_reason_seg(
    config: ReasonSegConfig,
    train: &SegTrainConfig,
    data: TrainingData<'_>,
) -> Result<(ReasonSegModel<f32>, Vec<SegLossRecord>)> {
    let model = ReasonSegModel::<f32>::new(config, Vocabulary::default(), train.seed)?;
    continue_training(model, train, data, |_, _| {})
}

/// Training loop over an existing model; `on_step` sees each record.
pub fn continue_training(
    mut model: ReasonSegModel<f32>,
    train: &SegTrainConfig,
    data: TrainingData<'_>,
    mut on_step: impl FnMut(&ReasonSegModel<f32>, &SegLossRecord),
) -> Result<(ReasonSegModel<f32>, Vec<SegLossRecord>)> {
    train.weights.validate()?;
    if train.batch_size == 0 || matches!(data, TrainingData::Fixed(e) if e.is_empty()) {
        return Err(ModelError::Config("empty training set or batch".into()));
    }
    if let TrainingData::Stream { corpus, .. } = data {
        corpus.validate()?;
        if corpus.image_size != model.config.image_size {
            return Err(ModelError::Config(format!(
                "corpus images are {} px, model expects {}",
                corpus.image_size, model.config.image_size
            )));
        }
    }
    let mut opt = Adam::new(AdamConfig {
        lr: train.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5e9);
    let w = &train.weights;
    let mut log = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        // cosine decay to a tenth of the base rate
        let progress = step as f64 / train.steps.max(1) as f64;
        opt.config.lr = train.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let batch: Vec<Example> = match data {
            TrainingData::Fixed(examples) => (0..train.batch_size)
                .map(|_| examples[rng.random_range(0..examples.len())].clone())
                .collect(),
            TrainingData::Stream { seed, corpus } => {
                let start = step * train.batch_size;
                let samples: Vec<SegSample> =
                    referrals(seed, start..start + train.batch_size, corpus).iter().map(Referral::sample).collect();
                encode_samples(&model.vocab, &samples)?
            }
        };
        let images: Vec<ArrayView3<'_, f64>> = batch.iter().map(|e| e.image.view()).collect();
        let queries: Vec<&SegQuery> = batch.iter().map(|e| &e.query).collect();
        let grads = {
            let g = Graph::with_params(&model.params);
            let fwd = model.forward(&g, &images, &queries)?;
            let mut targets = Vec::with_capacity(batch.len() * fwd.seq_len);
            for q in &queries {
                let mut t = q.text_targets();
                t.resize(fwd.seq_len, None);
                targets.extend(t);
            }
            let l_txt = text_loss_node(&g, fwd.text_logits, &targets)?;
            let mut total = g.scale(l_txt, w.lambda_txt);
            let mut mask_value = f64::NAN;
            if w.lambda_mask > 0.0 {
                let gt: Vec<Array2<f64>> = fwd.owners.iter().map(|&o| batch[o].mask.clone()).collect();
                let l_mask = mask_loss_node(&g, fwd.mask_logits, &gt, w)?;
                mask_value = g.value(l_mask).item() as f64;
                total = g.add(total, g.scale(l_mask, w.lambda_mask));
            }
            let record = SegLossRecord {
                step,
                text_loss: g.value(l_txt).item() as f64,
                mask_loss: mask_value,
                total: g.value(total).item() as f64,
            };
            if !record.total.is_finite() {
                return Err(ModelError::Diverged { step, loss: record.total });
            }
            if step % 100 == 0 {
                log::debug!("reason-seg step {step}: txt {:.4} mask {:.4}", record.text_loss, record.mask_loss);
            }
            on_step(&model, &record);
            log.push(record);
            g.backward(total)
        };
        opt.step(&mut model.params, &grads);
    }
    Ok((model, log))
}

pub fn binarize(soft: &Array2<f64>) -> Array2<bool> {
    soft.mapv(|p| p >= 0.5)
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (i, u) = overlap(a, b);
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn overlap(a: &Array2<bool>, b: &Array2<bool>) -> (usize, usize) {
    a.iter().zip(b).fold((0, 0), |(i, u), (&x, &y)| (i + usize::from(x && y), u + usize::from(x || y)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    pub giou: f64,
    pub ciou: f64,
    pub count: usize,
}

impl IouScores {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Array2<bool>, &'a Array2<bool>)>) -> Self {
        let (mut sum, mut inter, mut union, mut count) = (0.0, 0usize, 0usize, 0usize);
        for (p, t) in pairs {
            let (i, u) = overlap(p, t);
            sum += iou(p, t);
            inter += i;
            union += u;
            count += 1;
        }
        Self {
            giou: if count == 0 { 0.0 } else { sum / count as f64 },
            ciou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
            count,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegEvalReport {
    pub overall: IouScores,
    pub per_family: BTreeMap<String, IouScores>,
}

pub fn evaluate<T: Float>(model: &ReasonSegModel<T>, examples: &[Example]) -> Result<SegEvalReport> {
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let images: Vec<_> = chunk.iter().map(|e| e.image.view()).collect();
        let queries: Vec<_> = chunk.iter().map(|e| &e.query).collect();
        for masks in model.predict_batch(&images, &queries)? {
            preds.push(binarize(&masks[0]));
        }
    }
    let truth: Vec<Array2<bool>> = examples.iter().map(|e| e.mask.mapv(|v| v > 0.5)).collect();
    let mut per_family = BTreeMap::new();
    for f in QueryFamily::ALL {
        let pairs: Vec<_> = examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.family == f)
            .map(|(i, _)| (&preds[i], &truth[i]))
            .collect();
        if !pairs.is_empty() {
            per_family.insert(f.as_str().to_string(), IouScores::from_pairs(pairs));
        }
    }
    Ok(SegEvalReport {
        overall: IouScores::from_pairs(preds.iter().zip(&truth)),
        per_family,
    })
}

/// Response template used for every training query.
pub fn response_template() -> &'static str {
    RESPONSE
}
