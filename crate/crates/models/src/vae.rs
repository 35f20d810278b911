//! Masked-image VAE for inpainting. Encoder and decoder each run a residual
//! hypergraph block right after their middle block.

use std::fs;
use std::io::Write;
use std::path::Path;

use maskfree_core::compose::blend;
use maskfree_core::hypergraph::{Activation, Hypergraph};
use maskfree_tensor::nn::{Conv2d, Linear};
use maskfree_tensor::{checkpoint, Adam, AdamConfig, Graph, Init, ParamBuilder, ParamStore, Tensor, Var};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ops::HypergraphModule;
use crate::synth::{inpainting_images, random_hole};
use crate::{Float, ModelError, Result};

const LATENT_CHANNELS: usize = 16;
pub const CHECKPOINT_KIND: &str = "inpaint-vae";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintConfig {
    pub image_size: usize,
    pub widths: [usize; 3],
    pub latent_dim: usize,
    pub hypergraph: bool,
    /// Fixed hypergraph threshold; the per-sample median distance when absent.
    pub tau: Option<f64>,
    pub activation: Activation,
    pub beta: f64,
    pub inside_weight: f64,
}

/// 32×32 images with narrow layers, sized for CPU training.
impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            widths: [16, 32, 64],
            latent_dim: 128,
            hypergraph: true,
            tau: None,
            activation: Activation::Gelu,
            beta: 1e-3,
            inside_weight: 4.0,
        }
    }
}

impl InpaintConfig {
    /// 64×64 images with wider layers.
    pub fn large() -> Self {
        Self {
            image_size: 64,
            widths: [32, 64, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 4 || !s.is_power_of_two() {
            return Err(ModelError::Config(format!("image size {s} must be a power of two ≥ 4")));
        }
        if self.widths.contains(&0) || self.latent_dim == 0 {
            return Err(ModelError::Config("layer widths must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ModelError::Config(format!("beta {} must be ≥ 0", self.beta)));
        }
        if !(self.inside_weight >= 1.0 && self.inside_weight.is_finite()) {
            return Err(ModelError::Config(format!("inside_weight {} must be ≥ 1", self.inside_weight)));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(ModelError::Config(format!("tau {t} must be positive")));
            }
        }
        Ok(())
    }

    /// Side of the middle-block feature map.
    pub fn middle_size(&self) -> usize {
        self.image_size / 4
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        Self {
            a: Conv2d::same3(&mut pb.pp("a"), c, c),
            b: Conv2d::same3(&mut pb.pp("b"), c, c),
        }
    }

    fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let h = self.a.forward(g, g.relu(x));
        g.add(x, self.b.forward(g, g.relu(h)))
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv2d,
    res1: ResBlock,
    down1: Conv2d,
    res2: ResBlock,
    down2: Conv2d,
    middle: ResBlock,
    hyper: Option<HypergraphModule>,
    squeeze: Conv2d,
    mean: Linear,
    log_var: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    expand: Linear,
    conv_in: Conv2d,
    middle: ResBlock,
    hyper: Option<HypergraphModule>,
    up1: Conv2d,
    res1: ResBlock,
    up2: Conv2d,
    res2: ResBlock,
    conv_out: Conv2d,
}

/// Per-term values of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Reference implementation of the objective on plain arrays.
///
/// `reconstruction`/`target` are `[C, H, W]`, `mask` `[H, W]`, latents `[Z]`.
pub fn vae_inpaint_loss(
    reconstruction: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    mask: ArrayView2<'_, bool>,
    mean: &[f64],
    log_var: &[f64],
    beta: f64,
    inside_weight: f64,
) -> Result<LossBreakdown> {
    if reconstruction.dim() != target.dim() || (reconstruction.dim().1, reconstruction.dim().2) != mask.dim() {
        return Err(ModelError::Shape(format!(
            "reconstruction {:?}, target {:?}, mask {:?}",
            reconstruction.dim(),
            target.dim(),
            mask.dim()
        )));
    }
    if mean.len() != log_var.len() || mean.is_empty() {
        return Err(ModelError::Shape(format!("latent mean {} vs log-variance {}", mean.len(), log_var.len())));
    }
    if !(beta >= 0.0) || !(inside_weight >= 1.0) {
        return Err(ModelError::Config(format!("beta {beta} / inside_weight {inside_weight} out of range")));
    }
    let mut recon = 0.0;
    for ((c, y, x), &r) in reconstruction.indexed_iter() {
        let w = if mask[[y, x]] { inside_weight } else { 1.0 };
        let d = r - target[[c, y, x]];
        recon += w * d * d;
    }
    recon /= reconstruction.len() as f64;
    let kl = -0.5
        * mean
            .iter()
            .zip(log_var)
            .map(|(&m, &lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>()
        / mean.len() as f64;
    Ok(LossBreakdown {
        recon,
        kl,
        total: recon + beta * kl,
    })
}

/// Fills the hole with the mean colour of the visible pixels.
pub fn mean_color_fill(image: ArrayView3<'_, f64>, mask: ArrayView2<'_, bool>) -> Array3<f64> {
    let visible = mask.iter().filter(|&&m| !m).count().max(1) as f64;
    let mut out = image.to_owned();
    for c in 0..image.dim().0 {
        let mean = image
            .index_axis(ndarray::Axis(0), c)
            .indexed_iter()
            .filter(|(p, _)| !mask[*p])
            .map(|(_, &v)| v)
            .sum::<f64>()
            / visible;
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                out[[c, y, x]] = mean;
            }
        }
    }
    out
}

/// Mean squared error over the masked pixels of all images together.
pub fn masked_mse(predictions: &[Array3<f64>], targets: &[Array3<f64>], masks: &[Array2<bool>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, t), m) in predictions.iter().zip(targets).zip(masks) {
        for ((c, y, x), &v) in p.indexed_iter() {
            if m[[y, x]] {
                total += (v - t[[c, y, x]]).powi(2);
                count += 1;
            }
        }
    }
    total / count.max(1) as f64
}

pub struct InpaintModel<T: Float> {
    pub config: InpaintConfig,
    pub params: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub mean: Var,
    pub log_var: Var,
    pub reconstruction: Var,
    pub encoder_graphs: Vec<Hypergraph>,
    pub decoder_graphs: Vec<Hypergraph>,
}

fn batch_tensor<T: Float>(images: &[ArrayView3<'_, f64>], masks: &[ArrayView2<'_, bool>]) -> Result<Tensor<T>> {
    let (_, h, w) = images[0].dim();
    let mut data = Vec::with_capacity(images.len() * 4 * h * w);
    for (img, m) in images.iter().zip(masks) {
        if img.dim() != (3, h, w) || m.dim() != (h, w) {
            return Err(ModelError::Shape(format!("image {:?} with mask {:?}, expected 3x{h}x{w}", img.dim(), m.dim())));
        }
        if img.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("input image".into()));
        }
        for c in 0..3 {
            for ((y, x), &hole) in m.indexed_iter() {
                data.push(T::lit(if hole { 0.0 } else { img[[c, y, x]] }));
            }
        }
        data.extend(m.iter().map(|&hole| if hole { T::one() } else { T::zero() }));
    }
    Ok(Tensor::new([images.len(), 4, h, w], data))
}

impl<T: Float> InpaintModel<T> {
    pub fn new(config: InpaintConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = config.widths;
        let m = config.middle_size();
        let z = config.latent_dim;
        let mut pb = ParamBuilder::new(&mut params, &mut rng);

        let mut e = pb.pp("encoder");
        let conv_in = Conv2d::same3(&mut e.pp("conv_in"), 4, c1);
        let res1 = ResBlock::new(&mut e.pp("res1"), c1);
        let down1 = Conv2d::new(&mut e.pp("down1"), c1, c2, 3, 2, 1);
        let res2 = ResBlock::new(&mut e.pp("res2"), c2);
        let down2 = Conv2d::new(&mut e.pp("down2"), c2, c3, 3, 2, 1);
        let middle = ResBlock::new(&mut e.pp("middle"), c3);
        // drawn unconditionally so both variants share every other weight
        let mut hyper_rng = e.fork_rng();
        let hyper = config
            .hypergraph
            .then(|| HypergraphModule::new(&mut e.pp_with_rng("hypergraph", &mut hyper_rng), c3, config.activation));
        let squeeze = Conv2d::new(&mut e.pp("squeeze"), c3, LATENT_CHANNELS, 1, 1, 0);
        let flat = LATENT_CHANNELS * m * m;
        let mean = Linear::with_init(&mut e.pp("mean"), flat, z, Init::kaiming(flat));
        let log_var = Linear::with_init(&mut e.pp("log_var"), flat, z, Init::Normal { std: 1e-3 });
        let encoder = Encoder {
            conv_in,
            res1,
            down1,
            res2,
            down2,
            middle,
            hyper,
            squeeze,
            mean,
            log_var,
        };

        let mut d = pb.pp("decoder");
        let expand = Linear::new(&mut d.pp("expand"), z, flat, true);
        let conv_in = Conv2d::same3(&mut d.pp("conv_in"), LATENT_CHANNELS, c3);
        let middle = ResBlock::new(&mut d.pp("middle"), c3);
        let mut hyper_rng = d.fork_rng();
        let hyper = config
            .hypergraph
            .then(|| HypergraphModule::new(&mut d.pp_with_rng("hypergraph", &mut hyper_rng), c3, config.activation));
        let up1 = Conv2d::same3(&mut d.pp("up1"), c3, c2);
        let res1 = ResBlock::new(&mut d.pp("res1"), c2);
        let up2 = Conv2d::same3(&mut d.pp("up2"), c2, c1);
        let res2 = ResBlock::new(&mut d.pp("res2"), c1);
        let conv_out = Conv2d::same3(&mut d.pp("conv_out"), c1, 3);
        let decoder = Decoder {
            expand,
            conv_in,
            middle,
            hyper,
            up1,
            res1,
            up2,
            res2,
            conv_out,
        };
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    /// Encoder activations after the middle block and hypergraph module.
    fn encode_features(&self, g: &Graph<'_, T>, input: Var) -> Result<(Var, Vec<Hypergraph>)> {
        let e = &self.encoder;
        let mut x = e.conv_in.forward(g, input);
        x = e.res1.forward(g, x);
        x = e.down1.forward(g, g.relu(x));
        x = e.res2.forward(g, x);
        x = e.down2.forward(g, g.relu(x));
        x = e.middle.forward(g, x);
        match &e.hyper {
            Some(h) => h.forward(g, x, self.config.tau),
            None => Ok((x, Vec::new())),
        }
    }

    fn encode_graph(&self, g: &Graph<'_, T>, input: Var) -> Result<(Var, Var, Vec<Hypergraph>)> {
        let (x, graphs) = self.encode_features(g, input)?;
        let x = self.encoder.squeeze.forward(g, g.relu(x));
        let b = g.shape(x)[0];
        let flat = g.reshape(x, &[b, g.shape(x)[1..].iter().product()]);
        Ok((self.encoder.mean.forward(g, flat), self.encoder.log_var.forward(g, flat), graphs))
    }

    fn decode_graph(&self, g: &Graph<'_, T>, z: Var) -> Result<(Var, Vec<Hypergraph>)> {
        let d = &self.decoder;
        let m = self.config.middle_size();
        let b = g.shape(z)[0];
        let x = g.reshape(d.expand.forward(g, z), &[b, LATENT_CHANNELS, m, m]);
        let mut x = d.conv_in.forward(g, x);
        x = d.middle.forward(g, x);
        let graphs = match &d.hyper {
            Some(h) => {
                let (y, graphs) = h.forward(g, x, self.config.tau)?;
                x = y;
                graphs
            }
            None => Vec::new(),
        };
        x = d.up1.forward(g, g.upsample(g.relu(x), 2));
        x = d.res1.forward(g, x);
        x = d.up2.forward(g, g.upsample(g.relu(x), 2));
        x = d.res2.forward(g, x);
        let out = d.conv_out.forward(g, g.relu(x));
        Ok((g.sigmoid(out), graphs))
    }

    fn check_batch(&self, images: &[ArrayView3<'_, f64>], masks: &[ArrayView2<'_, bool>]) -> Result<()> {
        let s = self.config.image_size;
        if images.is_empty() || images.len() != masks.len() {
            return Err(ModelError::Shape(format!("{} images with {} masks", images.len(), masks.len())));
        }
        if images[0].dim() != (3, s, s) {
            return Err(ModelError::Shape(format!("image {:?}, model expects 3x{s}x{s}", images[0].dim())));
        }
        Ok(())
    }

    /// Builds the full pass; `noise` (`[B, Z]`) selects the latent sample, the mean when absent.
    pub fn forward(
        &self,
        g: &Graph<'_, T>,
        images: &[ArrayView3<'_, f64>],
        masks: &[ArrayView2<'_, bool>],
        noise: Option<&Tensor<T>>,
    ) -> Result<Forward> {
        self.check_batch(images, masks)?;
        let input = g.constant(batch_tensor(images, masks)?);
        let (mean, log_var, encoder_graphs) = self.encode_graph(g, input)?;
        let z = match noise {
            Some(eps) => {
                let std = g.exp(g.scale(log_var, 0.5));
                g.add(mean, g.mul(std, g.constant(eps.clone())))
            }
            None => mean,
        };
        let (reconstruction, decoder_graphs) = self.decode_graph(g, z)?;
        Ok(Forward {
            mean,
            log_var,
            reconstruction,
            encoder_graphs,
            decoder_graphs,
        })
    }

    /// Weighted reconstruction error plus `beta`·KL, as graph nodes.
    pub fn loss(
        &self,
        g: &Graph<'_, T>,
        fwd: &Forward,
        targets: &[ArrayView3<'_, f64>],
        masks: &[ArrayView2<'_, bool>],
    ) -> (Var, Var, Var) {
        let iw = self.config.inside_weight;
        let shape = g.shape(fwd.reconstruction);
        let mut target = Vec::with_capacity(shape.iter().product());
        let mut weight = Vec::with_capacity(target.capacity());
        for (t, m) in targets.iter().zip(masks) {
            target.extend(t.iter().map(|&v| T::lit(v)));
            for _ in 0..3 {
                weight.extend(m.iter().map(|&hole| T::lit(if hole { iw } else { 1.0 })));
            }
        }
        let diff = g.sub(fwd.reconstruction, g.constant(Tensor::new(shape.clone(), target)));
        let recon = g.mean_all(g.mul(g.square(diff), g.constant(Tensor::new(shape, weight))));
        let inner = g.sub(g.sub(g.add_scalar(fwd.log_var, 1.0), g.square(fwd.mean)), g.exp(fwd.log_var));
        let kl = g.scale(g.mean_all(inner), -0.5);
        let total = g.add(recon, g.scale(kl, self.config.beta));
        (total, recon, kl)
    }

    pub fn encode(&self, image: ArrayView3<'_, f64>, mask: ArrayView2<'_, bool>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_batch(&[image], &[mask])?;
        let g = Graph::with_params(&self.params);
        let input = g.constant(batch_tensor(&[image], &[mask])?);
        let (mean, log_var, _) = self.encode_graph(&g, input)?;
        let v = |x: Var| g.value(x).data().iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>();
        Ok((v(mean), v(log_var)))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Array3<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(ModelError::Shape(format!("latent of length {}, expected {}", z.len(), self.config.latent_dim)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("latent".into()));
        }
        let g = Graph::with_params(&self.params);
        let zv = g.constant(Tensor::new([1, z.len()], z.iter().map(|&v| T::lit(v)).collect()));
        let (out, _) = self.decode_graph(&g, zv)?;
        Ok(to_image(&g.value(out), 0))
    }

    /// Encoder features after the hypergraph stage, `[C, m, m]`.
    pub fn middle_features(&self, image: ArrayView3<'_, f64>, mask: ArrayView2<'_, bool>) -> Result<Array3<f64>> {
        self.check_batch(&[image], &[mask])?;
        let g = Graph::with_params(&self.params);
        let input = g.constant(batch_tensor(&[image], &[mask])?);
        let (x, _) = self.encode_features(&g, input)?;
        Ok(to_image(&g.value(x), 0))
    }

    /// The hypergraph built by the encoder's module for this input (`tau`
    /// overrides the configured threshold).
    pub fn encoder_hypergraph(&self, image: ArrayView3<'_, f64>, mask: ArrayView2<'_, bool>, tau: Option<f64>) -> Result<Hypergraph> {
        self.check_batch(&[image], &[mask])?;
        let g = Graph::with_params(&self.params);
        let input = g.constant(batch_tensor(&[image], &[mask])?);
        let e = &self.encoder;
        let mut x = e.conv_in.forward(&g, input);
        x = e.res1.forward(&g, x);
        x = e.down1.forward(&g, g.relu(x));
        x = e.res2.forward(&g, x);
        x = e.down2.forward(&g, g.relu(x));
        x = e.middle.forward(&g, x);
        let module = e
            .hyper
            .as_ref()
            .ok_or_else(|| ModelError::Config("model was built without hypergraph modules".into()))?;
        let (_, mut graphs) = module.forward(&g, x, tau.or(self.config.tau))?;
        Ok(graphs.remove(0))
    }

    /// Decoded mean latent for each image (averaged over `samples` draws when
    /// `samples > 1`), before compositing.
    pub fn generate(&self, image: ArrayView3<'_, f64>, mask: ArrayView2<'_, bool>, samples: usize, seed: u64) -> Result<Array3<f64>> {
        let (mean, log_var) = self.encode(image, mask)?;
        if samples <= 1 {
            return self.decode(&mean);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = Array3::zeros(image.dim());
        for _ in 0..samples {
            let z: Vec<f64> = mean
                .iter()
                .zip(&log_var)
                .map(|(&m, &lv)| m + (0.5 * lv).exp() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            acc += &self.decode(&z)?;
        }
        Ok(acc / samples as f64)
    }

    /// Generates and composites into the original through the feathered mask.
    pub fn inpaint(
        &self,
        image: ArrayView3<'_, f64>,
        mask: ArrayView2<'_, bool>,
        samples: usize,
        blend_radius: usize,
    ) -> Result<Array3<f64>> {
        if !mask.iter().any(|&m| m) {
            return Ok(image.to_owned());
        }
        let generated = self.generate(image, mask, samples, 0)?;
        blend(image, generated.view(), mask, blend_radius).map_err(|e| ModelError::Shape(e.to_string()))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn hypergraph_parameters(&self) -> usize {
        self.params.num_scalars_with_prefix("encoder.hypergraph") + self.params.num_scalars_with_prefix("decoder.hypergraph")
    }

    /// Zeroes the edge-to-node weights and biases so both hypergraph blocks
    /// pass their input through unchanged.
    pub fn set_hypergraph_identity(&mut self) {
        for h in [&self.encoder.hyper, &self.decoder.hyper].into_iter().flatten() {
            for id in [h.weight_e2v, h.bias] {
                self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": CHECKPOINT_KIND, "model": self.config });
        checkpoint::save(path, &self.params, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = checkpoint::load::<T>(path)?;
        if meta["kind"] != CHECKPOINT_KIND {
            return Err(ModelError::Config(format!("{} is not an inpainter checkpoint", path.display())));
        }
        let config: InpaintConfig =
            serde_json::from_value(meta["model"].clone()).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        model.params.assign(tensors).map_err(ModelError::Config)?;
        Ok(model)
    }
}

fn to_image<T: Float>(t: &Tensor<T>, index: usize) -> Array3<f64> {
    let s = t.shape();
    Array3::from_shape_vec((s[1], s[2], s[3]), t.outer(index).iter().map(|v| v.to_f64().unwrap()).collect())
        .expect("image block")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Number of distinct training images.
    pub dataset_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            dataset_size: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub recon_loss: f64,
    pub kl_loss: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,recon_loss,kl_loss,total")?;
    for r in log {
        writeln!(f, "{},{},{},{}", r.step, r.recon_loss, r.kl_loss, r.total)?;
    }
    Ok(())
}

/// Trains on freshly generated structured images with random holes.
pub fn train_inpainter(config: InpaintConfig, train: &TrainConfig) -> Result<(InpaintModel<f32>, Vec<LossRecord>)> {
    let images = inpainting_images(train.seed, train.dataset_size.max(1), config.image_size);
    train_inpainter_on(config, train, &images)
}

pub fn train_inpainter_on(
    config: InpaintConfig,
    train: &TrainConfig,
    images: &[Array3<f64>],
) -> Result<(InpaintModel<f32>, Vec<LossRecord>)> {
    if images.is_empty() || train.batch_size == 0 {
        return Err(ModelError::Config("empty dataset or batch".into()));
    }
    let mut model = InpaintModel::<f32>::new(config, train.seed)?;
    let mut opt = Adam::new(AdamConfig {
        lr: train.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x7a11);
    let s = model.config.image_size;
    let z = model.config.latent_dim;
    let mut log = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let picks: Vec<&Array3<f64>> = (0..train.batch_size).map(|_| &images[rng.random_range(0..images.len())]).collect();
        let masks: Vec<Array2<bool>> = (0..train.batch_size).map(|_| random_hole(&mut rng, s, s)).collect();
        let noise = Tensor::new(
            [train.batch_size, z],
            (0..train.batch_size * z).map(|_| StandardNormal.sample(&mut rng)).collect(),
        );
        let views: Vec<ArrayView3<'_, f64>> = picks.iter().map(|a| a.view()).collect();
        let mviews: Vec<ArrayView2<'_, bool>> = masks.iter().map(|m| m.view()).collect();
        let grads = {
            let g = Graph::with_params(&model.params);
            let fwd = model.forward(&g, &views, &mviews, Some(&noise))?;
            let (total, recon, kl) = model.loss(&g, &fwd, &views, &mviews);
            let record = LossRecord {
                step,
                recon_loss: g.value(recon).item() as f64,
                kl_loss: g.value(kl).item() as f64,
                total: g.value(total).item() as f64,
            };
            if !record.total.is_finite() {
                return Err(ModelError::Diverged { step, loss: record.total });
            }
            if step % 100 == 0 {
                log::debug!("inpaint step {step}: total {:.5} recon {:.5} kl {:.4}", record.total, record.recon_loss, record.kl_loss);
            }
            log.push(record);
            g.backward(total)
        };
        opt.step(&mut model.params, &grads);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn tiny(hypergraph: bool) -> InpaintConfig {
        InpaintConfig {
            image_size: 8,
            widths: [3, 4, 5],
            latent_dim: 6,
            hypergraph,
            ..InpaintConfig::default()
        }
    }

    #[test]
    fn loss_examples() {
        let t = Array3::<f64>::zeros((1, 2, 2));
        let mut r = t.clone();
        r[[0, 0, 0]] = 0.5;
        let mut m = Array2::from_elem((2, 2), false);
        m[[0, 0]] = true;
        let l = vae_inpaint_loss(r.view(), t.view(), m.view(), &[0.0], &[0.0], 1.0, 4.0).unwrap();
        assert!((l.recon - 0.25).abs() < 1e-12);
        assert_eq!(l.kl, 0.0);
        let perfect = vae_inpaint_loss(t.view(), t.view(), m.view(), &[0.0; 3], &[0.0; 3], 0.5, 4.0).unwrap();
        assert_eq!(perfect.total, 0.0);
        assert!(vae_inpaint_loss(t.view(), t.view(), m.view(), &[0.0], &[0.0], 1.0, 0.5).is_err());
    }

    #[test]
    fn graph_loss_matches_reference() {
        let model = InpaintModel::<f64>::new(tiny(true), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Array::from_shape_simple_fn((3, 8, 8), || rng.random::<f64>());
        let mask = random_hole(&mut rng, 8, 8);
        let g = Graph::with_params(&model.params);
        let fwd = model.forward(&g, &[img.view()], &[mask.view()], None).unwrap();
        let (total, _, _) = model.loss(&g, &fwd, &[img.view()], &[mask.view()]);
        let rec = to_image(&g.value(fwd.reconstruction), 0);
        let v = |x: Var| g.value(x).data().to_vec();
        let reference =
            vae_inpaint_loss(rec.view(), img.view(), mask.view(), &v(fwd.mean), &v(fwd.log_var), 1e-3, 4.0).unwrap();
        assert!((g.value(total).item() - reference.total).abs() < 1e-12);
    }

    #[test]
    fn shapes_and_degenerate_masks() {
        let model = InpaintModel::<f32>::new(tiny(true), 0).unwrap();
        let zero = Array3::zeros((3, 8, 8));
        let (m, lv) = model.encode(zero.view(), Array2::from_elem((8, 8), false).view()).unwrap();
        assert_eq!((m.len(), lv.len()), (6, 6));
        let (m, _) = model.encode(zero.view(), Array2::from_elem((8, 8), true).view()).unwrap();
        assert!(m.iter().all(|v| v.is_finite()));
        let out = model.decode(&[0.0; 6]).unwrap();
        assert_eq!(out.dim(), (3, 8, 8));
        assert_eq!(out, model.decode(&[0.0; 6]).unwrap());
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(model.decode(&[f64::NAN; 6]).is_err());
        assert!(model.encode(Array3::zeros((3, 4, 4)).view(), Array2::from_elem((4, 4), false).view()).is_err());
        let img = Array3::from_elem((3, 8, 8), 0.3);
        let none = Array2::from_elem((8, 8), false);
        assert_eq!(model.inpaint(img.view(), none.view(), 1, 2).unwrap(), img);
    }

    #[test]
    fn identity_hypergraph_reduces_to_plain_model() {
        let mut on = InpaintModel::<f32>::new(tiny(true), 5).unwrap();
        let off = InpaintModel::<f32>::new(tiny(false), 5).unwrap();
        assert_eq!(on.num_parameters() - off.num_parameters(), on.hypergraph_parameters());
        assert_eq!(on.hypergraph_parameters(), 2 * (5 * 5 * 2 + 5));
        for (name, t) in off.params.iter() {
            assert_eq!(on.params.get(on.params.id(name).unwrap()), t, "{name}");
        }
        on.set_hypergraph_identity();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array::from_shape_simple_fn((3, 8, 8), || rng.random::<f64>());
        let mask = random_hole(&mut rng, 8, 8);
        assert_eq!(on.generate(img.view(), mask.view(), 1, 0).unwrap(), off.generate(img.view(), mask.view(), 1, 0).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.safetensors");
        let model = InpaintModel::<f32>::new(tiny(true), 9).unwrap();
        model.save(&path).unwrap();
        let back = InpaintModel::<f32>::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.decode(&[0.1; 6]).unwrap(), model.decode(&[0.1; 6]).unwrap());
    }

    #[test]
    fn mean_fill_uses_visible_pixels() {
        let mut img = Array3::zeros((3, 2, 2));
        img[[0, 0, 1]] = 0.9;
        img[[0, 1, 1]] = 0.3;
        let mask = ndarray::array![[true, false], [true, false]];
        let out = mean_color_fill(img.view(), mask.view());
        assert!((out[[0, 0, 0]] - 0.6).abs() < 1e-12);
        assert_eq!(out[[0, 1, 1]], 0.3);
    }
}
