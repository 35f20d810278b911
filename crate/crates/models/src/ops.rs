//! Graph nodes whose forward and backward passes come from the core kernels:
//! hypergraph convolution and the segmentation / text losses.

use maskfree_core::hypergraph::{
    build_hypergraph, hypconv_backward, hypconv_trace, median_pairwise_distance, Activation, HyPConvLayer,
    HyPConvTrace, Hypergraph,
};
use maskfree_core::seg_losses::{mask_loss, mask_loss_grad, text_loss, text_loss_grad, LossWeights, MaskPair};
use maskfree_tensor::{sigmoid, CustomOp, Graph, Init, ParamBuilder, ParamId, Tensor, Var};
use ndarray::{Array1, Array2, ArrayView2};

use crate::{Float, ModelError, Result};

/// Smallest threshold used when the median distance collapses to zero.
pub const MIN_TAU: f64 = 1e-6;

fn to_f64<T: Float>(v: T) -> f64 {
    v.to_f64().unwrap()
}

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous block")
}

/// Threshold for a `[C, N]` feature block: fixed, or the median pairwise distance.
pub fn resolve_tau<T: Float>(features: ArrayView2<'_, T>, tau: Option<f64>) -> Result<f64> {
    match tau {
        Some(t) if t.is_finite() && t > 0.0 => Ok(t),
        Some(t) => Err(ModelError::Config(format!("tau must be positive, got {t}"))),
        None => Ok(to_f64(median_pairwise_distance(features)?).max(MIN_TAU)),
    }
}

/// Residual hypergraph block `x + hypconv(x)` over a `[B, C, H, W]` map.
/// The edge-to-node weight starts at zero, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct HypergraphModule {
    pub weight_v2e: ParamId,
    pub weight_e2v: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub activation: Activation,
}

impl HypergraphModule {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize, activation: Activation) -> Self {
        Self {
            weight_v2e: pb.var("weight_v2e", &[channels, channels], Init::kaiming(channels)),
            weight_e2v: pb.var("weight_e2v", &[channels, channels], Init::Zeros),
            bias: pb.var("bias", &[channels], Init::Zeros),
            channels,
            activation,
        }
    }

    /// Returns the output and the hypergraph built for each batch element.
    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var, tau: Option<f64>) -> Result<(Var, Vec<Hypergraph>)> {
        let wv = g.param(self.weight_v2e);
        let we = g.param(self.weight_e2v);
        let b = g.param(self.bias);
        let layer = HyPConvLayer::new(
            to_array2(&g.value(wv)),
            to_array2(&g.value(we)),
            Array1::from(g.value(b).data().to_vec()),
            self.activation,
        )?;
        let xv = g.value(x);
        let (batch, c, h, w) = xv.dims4();
        if c != self.channels {
            return Err(ModelError::Shape(format!("hypergraph block expects {} channels, got {c}", self.channels)));
        }
        let n = h * w;
        let mut graphs = Vec::with_capacity(batch);
        let mut traces = Vec::with_capacity(batch);
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..batch {
            let feats = view2(xv.outer(i), c, n);
            let t = T::lit(resolve_tau(feats, tau)?);
            let hg = build_hypergraph(feats, t)?;
            let trace = hypconv_trace(feats, &hg, &layer)?;
            out.extend(trace.output.iter().copied());
            graphs.push(hg);
            traces.push(trace);
        }
        let op = HyPConvOp {
            layer,
            graphs: graphs.clone(),
            traces,
        };
        let conv = g.custom(op, &[x, wv, we, b], Tensor::new([batch, c, h, w], out));
        Ok((g.add(x, conv), graphs))
    }
}

fn to_array2<T: Float>(t: &Tensor<T>) -> Array2<T> {
    let (r, c) = t.dims2();
    Array2::from_shape_vec((r, c), t.data().to_vec()).expect("rank-2 tensor")
}

struct HyPConvOp<T> {
    layer: HyPConvLayer<T>,
    graphs: Vec<Hypergraph>,
    traces: Vec<HyPConvTrace<T>>,
}

impl<T: Float> CustomOp<T> for HyPConvOp<T> {
    fn name(&self) -> &'static str {
        "hypconv"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (batch, c, h, w) = x.dims4();
        let n = h * w;
        let mut dx = Vec::with_capacity(x.len());
        let mut dwv = Array2::<T>::zeros(self.layer.weight_v2e.dim());
        let mut dwe = Array2::<T>::zeros(self.layer.weight_e2v.dim());
        let mut db = Array1::<T>::zeros(self.layer.bias.len());
        for i in 0..batch {
            let grads = hypconv_backward(
                view2(x.outer(i), c, n),
                &self.graphs[i],
                &self.layer,
                &self.traces[i],
                view2(grad_output.outer(i), c, n),
            )
            .expect("shapes fixed at forward time");
            dx.extend(grads.input.iter().copied());
            dwv.zip_mut_with(&grads.weight_v2e, |a, &b| *a = *a + b);
            dwe.zip_mut_with(&grads.weight_e2v, |a, &b| *a = *a + b);
            db.zip_mut_with(&grads.bias, |a, &b| *a = *a + b);
        }
        let t2 = |a: Array2<T>| {
            let shape = [a.nrows(), a.ncols()];
            Tensor::new(shape, a.as_standard_layout().iter().copied().collect())
        };
        vec![
            Some(Tensor::new(x.shape().to_vec(), dx)),
            Some(t2(dwv)),
            Some(t2(dwe)),
            Some(Tensor::new([db.len()], db.to_vec())),
        ]
    }
}

/// Mean over the batch of the weighted BCE + Dice loss of `sigmoid(logits)`.
///
/// `logits` is `[B, H, W]` or `[B, 1, H, W]`; targets are `[H, W]` in {0, 1}.
pub fn mask_loss_node<T: Float>(g: &Graph<'_, T>, logits: Var, targets: &[Array2<f64>], weights: &LossWeights) -> Result<Var> {
    let lv = g.value(logits);
    let batch = lv.dim(0);
    if targets.len() != batch {
        return Err(ModelError::Shape(format!("{} targets for batch of {batch}", targets.len())));
    }
    let (h, w) = targets[0].dim();
    if lv.len() != batch * h * w {
        return Err(ModelError::Shape(format!("logits {:?} vs targets {h}x{w}", lv.shape())));
    }
    let mut probs = Vec::with_capacity(batch);
    let mut total = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let p = Array2::from_shape_vec((h, w), lv.data()[i * h * w..(i + 1) * h * w].iter().map(|&v| sigmoid(to_f64(v))).collect())
            .expect("block shape");
        total += mask_loss(&MaskPair::new(p.view(), target.view())?, weights);
        probs.push(p);
    }
    let value = total / batch as f64;
    if !value.is_finite() {
        return Err(ModelError::NonFinite("mask loss".into()));
    }
    let op = MaskLossOp {
        probs,
        targets: targets.to_vec(),
        weights: weights.clone(),
    };
    Ok(g.custom(op, &[logits], Tensor::scalar(T::lit(value))))
}

struct MaskLossOp {
    probs: Vec<Array2<f64>>,
    targets: Vec<Array2<f64>>,
    weights: LossWeights,
}

impl<T: Float> CustomOp<T> for MaskLossOp {
    fn name(&self) -> &'static str {
        "mask_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let scale = to_f64(grad_output.item()) / self.probs.len() as f64;
        let mut grad = Vec::with_capacity(inputs[0].len());
        for (p, m) in self.probs.iter().zip(&self.targets) {
            let pair = MaskPair::new(p.view(), m.view()).expect("validated at forward time");
            let dp = mask_loss_grad(&pair, &self.weights);
            grad.extend(dp.iter().zip(p.iter()).map(|(&d, &p)| T::lit(scale * d * p * (1.0 - p))));
        }
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), grad))]
    }
}

/// Mean next-token cross-entropy over `[R, V]` logits; `None` targets are ignored.
pub fn text_loss_node<T: Float>(g: &Graph<'_, T>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let lv = g.value(logits);
    let (r, v) = lv.dims2();
    let l64 = Array2::from_shape_vec((r, v), lv.data().iter().map(|&x| to_f64(x)).collect()).expect("rank-2");
    let value = text_loss(l64.view(), targets)?;
    let op = TextLossOp {
        logits: l64,
        targets: targets.to_vec(),
    };
    Ok(g.custom(op, &[logits], Tensor::scalar(T::lit(value))))
}

struct TextLossOp {
    logits: Array2<f64>,
    targets: Vec<Option<usize>>,
}

impl<T: Float> CustomOp<T> for TextLossOp {
    fn name(&self) -> &'static str {
        "text_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let scale = to_f64(grad_output.item());
        let grad = text_loss_grad(self.logits.view(), &self.targets).expect("validated at forward time");
        vec![Some(Tensor::new(
            inputs[0].shape().to_vec(),
            grad.iter().map(|&d| T::lit(scale * d)).collect(),
        ))]
    }
}
