//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles together
//! with the forward value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every leaf that asked for
//! one (parameters and tracked inputs).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{numel, split_axis};
use crate::{ParamId, ParamStore, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation with a hand-written backward pass, used for fused kernels that
/// live outside this crate (losses, hypergraph propagation).
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in order; `None` for inputs that need none.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    AddAlong { x: Var, b: Var, axis: usize },
    MulAlong { x: Var, g: Var, axis: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Upsample { x: Var, factor: usize },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAll(Var),
    GlobalAvg(Var),
    GlobalMax { x: Var, argmax: Vec<usize> },
    BroadcastSpatial { x: Var },
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    GatherRows { x: Var, rows: Vec<usize> },
    Custom { op: Box<dyn CustomOp<T>>, inputs: Vec<Var> },
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad, None)
    }

    fn push_shared(&self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Leaf without gradient tracking.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&self, id: ParamId) -> Var {
        let store = self.params.expect("graph was built without a parameter store");
        self.push_shared(store.shared(id), Op::Leaf, true, Some(id))
    }

    /// Parameter value used as a constant (no gradient flows into it).
    pub fn param_frozen(&self, id: ParamId) -> Var {
        let store = self.params.expect("graph was built without a parameter store");
        self.push_shared(store.shared(id), Op::Leaf, false, None)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), self.ng(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), self.ng(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), self.ng(&[a, b]))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), self.ng(&[a]))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::Shift(a), self.ng(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), self.ng(&[a]))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), self.ng(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), self.ng(&[a]))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), self.ng(&[a]))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), self.ng(&[a]))
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), self.ng(&[a]))
    }

    /// `x + b` where `b` has length `x.shape[axis]` and is broadcast over the rest.
    pub fn add_along(&self, x: Var, b: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        assert_eq!(bv.len(), len, "add_along: bias length {} vs axis {len}", bv.len());
        let mut out = (*xv).clone();
        let data = out.data_mut();
        for o in 0..outer {
            for (c, &bias) in bv.data().iter().enumerate() {
                let base = (o * len + c) * inner;
                for v in &mut data[base..base + inner] {
                    *v = *v + bias;
                }
            }
        }
        self.push(out, Op::AddAlong { x, b, axis }, self.ng(&[x, b]))
    }

    /// `x * g` where `g` has length `x.shape[axis]` and is broadcast over the rest.
    pub fn mul_along(&self, x: Var, g: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let gv = self.value(g);
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        assert_eq!(gv.len(), len, "mul_along: gain length {} vs axis {len}", gv.len());
        let mut out = (*xv).clone();
        let data = out.data_mut();
        for o in 0..outer {
            for (c, &gain) in gv.data().iter().enumerate() {
                let base = (o * len + c) * inner;
                for v in &mut data[base..base + inner] {
                    *v = *v * gain;
                }
            }
        }
        self.push(out, Op::MulAlong { x, g, axis }, self.ng(&[x, g]))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Batched `op(a) · op(b)`, where `op` optionally transposes the last two
    /// axes. `b` may be rank 2, in which case it is shared across the batch.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let g = MatMulGeom::new(av.shape(), bv.shape(), ta, tb);
        let mut out = vec![T::zero(); g.batch * g.m * g.n];
        for i in 0..g.batch {
            let b_off = if g.b_batched { i * g.k * g.n } else { 0 };
            T::gemm(
                g.m,
                g.k,
                g.n,
                T::one(),
                &av.data()[i * g.m * g.k..(i + 1) * g.m * g.k],
                g.a_strides,
                &bv.data()[b_off..b_off + g.k * g.n],
                g.b_strides,
                T::zero(),
                &mut out[i * g.m * g.n..(i + 1) * g.m * g.n],
                (g.n as isize, 1),
            );
        }
        let mut shape = av.shape()[..av.rank() - 2].to_vec();
        shape.extend([g.m, g.n]);
        self.push(Tensor::new(shape, out), Op::MatMul { a, b, ta, tb }, self.ng(&[a, b]))
    }

    /// 2-D convolution, `x: [B, I, H, W]`, `w: [O, I, kh, kw]`, no bias.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let geom = ConvGeom::new(xv.shape(), wv.shape(), stride, pad);
        let mut out = Tensor::zeros([geom.batch, geom.out_c, geom.out_h, geom.out_w]);
        let mut col = vec![T::zero(); geom.k() * geom.l()];
        for b in 0..geom.batch {
            geom.im2col(xv.outer(b), &mut col);
            T::gemm(
                geom.out_c,
                geom.k(),
                geom.l(),
                T::one(),
                wv.data(),
                (geom.k() as isize, 1),
                &col,
                (geom.l() as isize, 1),
                T::zero(),
                out.outer_mut(b),
                (geom.l() as isize, 1),
            );
        }
        self.push(out, Op::Conv2d { x, w, stride, pad }, self.ng(&[x, w]))
    }

    /// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
    pub fn upsample(&self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for plane in 0..b * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        self.push(Tensor::new([b, c, oh, ow], out), Op::Upsample { x, factor }, self.ng(&[x]))
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = (*self.value(x)).clone().reshape(shape.to_vec());
        self.push(out, Op::Reshape(x), self.ng(&[x]))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let out = permute_tensor(&self.value(x), perm);
        self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            self.ng(&[x]),
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values[0].shape().to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = values
            .iter()
            .map(|v| {
                assert_eq!(v.rank(), first.len(), "concat rank mismatch");
                v.dim(axis)
            })
            .sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let chunk = v.dim(axis) * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::new(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            self.ng(parts),
        )
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (outer, full, inner) = split_axis(xv.shape(), axis);
        assert!(start + len <= full, "narrow {start}+{len} beyond {full}");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::new(shape, out), Op::Narrow { x, axis, start }, self.ng(&[x]))
    }

    /// Rows of a rank-2 tensor, in the given order (repeats allowed).
    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dims2();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < n, "row {r} out of range for {n} rows");
            out.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        self.push(
            Tensor::new([rows.len(), d], out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            self.ng(&[x]),
        )
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.ng(&[x]))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::MeanAll(x), self.ng(&[x]))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4();
        let hw = T::from_usize(h * w).unwrap();
        let out: Vec<T> = (0..b * c)
            .map(|p| xv.data()[p * h * w..(p + 1) * h * w].iter().copied().sum::<T>() / hw)
            .collect();
        self.push(Tensor::new([b, c], out), Op::GlobalAvg(x), self.ng(&[x]))
    }

    /// `[B, C, H, W] -> [B, C]` spatial maximum.
    pub fn global_max_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for p in 0..b * c {
            let plane = &xv.data()[p * hw..(p + 1) * hw];
            let (idx, &m) = plane
                .iter()
                .enumerate()
                .fold((0, &plane[0]), |best, cur| if *cur.1 > *best.1 { cur } else { best });
            out.push(m);
            argmax.push(p * hw + idx);
        }
        self.push(Tensor::new([b, c], out), Op::GlobalMax { x, argmax }, self.ng(&[x]))
    }

    /// `[B, C] -> [B, C, H, W]` by repetition.
    pub fn broadcast_spatial(&self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (b, c) = xv.dims2();
        let mut out = Vec::with_capacity(b * c * h * w);
        for &v in xv.data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        self.push(Tensor::new([b, c, h, w], out), Op::BroadcastSpatial { x }, self.ng(&[x]))
    }

    /// Softmax over the last axis. `additive_mask`, when given, is added to
    /// the logits first (use a large negative value to exclude positions).
    pub fn softmax_last(&self, x: Var, additive_mask: Option<&Tensor<T>>) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = (*xv).clone();
        if let Some(m) = additive_mask {
            out.add_assign(m);
        }
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        self.push(out, Op::Softmax(x), self.ng(&[x]))
    }

    /// Normalise the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let dt = T::from_usize(d).unwrap();
        let eps = T::lit(eps);
        let mut out = (*xv).clone();
        let mut rstd = Vec::with_capacity(out.len() / d);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::LayerNorm { x, rstd }, self.ng(&[x]))
    }

    /// Registers a node computed outside the graph with its own backward.
    pub fn custom(&self, op: impl CustomOp<T> + 'static, inputs: &[Var], output: Tensor<T>) -> Var {
        let ng = self.ng(inputs);
        self.push(
            output,
            Op::Custom {
                op: Box::new(op),
                inputs: inputs.to_vec(),
            },
            ng,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to all tracked leaves.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        let mut params: HashMap<ParamId, Tensor<T>> = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads[id].as_ref()) {
                match params.get_mut(&pid) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        params.insert(pid, g.clone());
                    }
                }
            }
        }
        Grads {
            nodes: grads,
            params,
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a tracked leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| {
                let v = x.to_f64().unwrap();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[v.0].value.shape(), "gradient shape mismatch");
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let out = &nodes[id].value;
    let val = |v: &Var| -> &Tensor<T> { &nodes[v.0].value };
    let ng = |v: &Var| nodes[v.0].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if ng(a) {
                accumulate(nodes, grads, *a, g.zip_map(val(b), |x, y| x * y));
            }
            if ng(b) {
                accumulate(nodes, grads, *b, g.zip_map(val(a), |x, y| x * y));
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(nodes, grads, *a, g.map(|x| x * s));
        }
        Op::Shift(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::AddAlong { x, b, axis } => {
            accumulate(nodes, grads, *x, g.clone());
            if ng(b) {
                let (outer, len, inner) = split_axis(g.shape(), *axis);
                let mut gb = vec![T::zero(); len];
                for o in 0..outer {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        let base = (o * len + c) * inner;
                        *acc = *acc + g.data()[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(val(b).shape().to_vec(), gb));
            }
        }
        Op::MulAlong { x, g: gain, axis } => {
            let (outer, len, inner) = split_axis(g.shape(), *axis);
            let gv = val(gain);
            let xv = val(x);
            if ng(x) {
                let mut gx = g.clone();
                let d = gx.data_mut();
                for o in 0..outer {
                    for c in 0..len {
                        let base = (o * len + c) * inner;
                        for v in &mut d[base..base + inner] {
                            *v = *v * gv.data()[c];
                        }
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            if ng(gain) {
                let mut gg = vec![T::zero(); len];
                for o in 0..outer {
                    for (c, acc) in gg.iter_mut().enumerate() {
                        let base = (o * len + c) * inner;
                        let s: T = g.data()[base..base + inner]
                            .iter()
                            .zip(&xv.data()[base..base + inner])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        *acc = *acc + s;
                    }
                }
                accumulate(nodes, grads, *gain, Tensor::new(gv.shape().to_vec(), gg));
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let av = val(a);
            let bv = val(b);
            let geo = MatMulGeom::new(av.shape(), bv.shape(), *ta, *tb);
            let (m, k, n) = (geo.m, geo.k, geo.n);
            let swap = |s: (isize, isize)| (s.1, s.0);
            if ng(a) {
                let mut ga = vec![T::zero(); av.len()];
                for i in 0..geo.batch {
                    let b_off = if geo.b_batched { i * k * n } else { 0 };
                    // dA_op = dC · op(B)^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g.data()[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &bv.data()[b_off..b_off + k * n],
                        swap(geo.b_strides),
                        T::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        geo.a_strides,
                    );
                }
                accumulate(nodes, grads, *a, Tensor::new(av.shape().to_vec(), ga));
            }
            if ng(b) {
                let mut gb = vec![T::zero(); bv.len()];
                for i in 0..geo.batch {
                    let (b_off, beta) = if geo.b_batched {
                        (i * k * n, T::zero())
                    } else {
                        (0, if i == 0 { T::zero() } else { T::one() })
                    };
                    // dB_op = op(A)^T · dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av.data()[i * m * k..(i + 1) * m * k],
                        swap(geo.a_strides),
                        &g.data()[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        beta,
                        &mut gb[b_off..b_off + k * n],
                        geo.b_strides,
                    );
                }
                accumulate(nodes, grads, *b, Tensor::new(bv.shape().to_vec(), gb));
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let xv = val(x);
            let wv = val(w);
            let geom = ConvGeom::new(xv.shape(), wv.shape(), *stride, *pad);
            let (kk, l) = (geom.k(), geom.l());
            let mut col = vec![T::zero(); kk * l];
            let mut gw = if ng(w) { Some(vec![T::zero(); wv.len()]) } else { None };
            let mut gx = if ng(x) { Some(Tensor::zeros(xv.shape().to_vec())) } else { None };
            for b in 0..geom.batch {
                let gout = g.outer(b);
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(xv.outer(b), &mut col);
                    T::gemm(
                        geom.out_c,
                        l,
                        kk,
                        T::one(),
                        gout,
                        (l as isize, 1),
                        &col,
                        (1, l as isize),
                        T::one(),
                        gw,
                        (kk as isize, 1),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    T::gemm(
                        kk,
                        geom.out_c,
                        l,
                        T::one(),
                        wv.data(),
                        (1, kk as isize),
                        gout,
                        (l as isize, 1),
                        T::zero(),
                        &mut col,
                        (l as isize, 1),
                    );
                    geom.col2im(&col, gx.outer_mut(b));
                }
            }
            if let Some(gw) = gw {
                accumulate(nodes, grads, *w, Tensor::new(wv.shape().to_vec(), gw));
            }
            if let Some(gx) = gx {
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::Upsample { x, factor } => {
            let xv = val(x);
            let (b, c, h, w) = xv.dims4();
            let (oh, ow) = (h * factor, w * factor);
            let mut gx = vec![T::zero(); xv.len()];
            for plane in 0..b * c {
                let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let t = &mut dst[(y / factor) * w + xx / factor];
                        *t = *t + src[y * ow + xx];
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::Relu(a) => {
            accumulate(
                nodes,
                grads,
                *a,
                g.zip_map(out, |gv, y| if y > T::zero() { gv } else { T::zero() }),
            );
        }
        Op::Gelu(a) => {
            accumulate(nodes, grads, *a, g.zip_map(val(a), |gv, x| gv * gelu_grad(x)));
        }
        Op::Sigmoid(a) => {
            accumulate(nodes, grads, *a, g.zip_map(out, |gv, y| gv * y * (T::one() - y)));
        }
        Op::Tanh(a) => {
            accumulate(nodes, grads, *a, g.zip_map(out, |gv, y| gv * (T::one() - y * y)));
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, g.zip_map(out, |gv, y| gv * y)),
        Op::Square(a) => {
            let two = T::lit(2.0);
            accumulate(nodes, grads, *a, g.zip_map(val(a), |gv, x| gv * two * x));
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, g.clone().reshape(val(a).shape().to_vec()));
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(nodes, grads, *x, permute_tensor(g, &inv));
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let pv = val(p);
                let len = pv.dim(*axis);
                if ng(p) {
                    let mut gp = Vec::with_capacity(pv.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    accumulate(nodes, grads, *p, Tensor::new(pv.shape().to_vec(), gp));
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xv = val(x);
            let (outer, full, inner) = split_axis(xv.shape(), *axis);
            let len = g.dim(*axis);
            let mut gx = vec![T::zero(); xv.len()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::GatherRows { x, rows } => {
            let xv = val(x);
            let d = xv.dim(1);
            let mut gx = vec![T::zero(); xv.len()];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..d {
                    gx[r * d + j] = gx[r * d + j] + g.data()[i * d + j];
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::SumAll(a) => {
            let s = g.item();
            accumulate(nodes, grads, *a, Tensor::full(val(a).shape().to_vec(), s));
        }
        Op::MeanAll(a) => {
            let n = T::from_usize(val(a).len()).unwrap();
            accumulate(nodes, grads, *a, Tensor::full(val(a).shape().to_vec(), g.item() / n));
        }
        Op::GlobalAvg(x) => {
            let xv = val(x);
            let (_, _, h, w) = xv.dims4();
            let hw = T::from_usize(h * w).unwrap();
            let mut gx = Vec::with_capacity(xv.len());
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv / hw, h * w));
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::GlobalMax { x, argmax } => {
            let xv = val(x);
            let mut gx = vec![T::zero(); xv.len()];
            for (&idx, &gv) in argmax.iter().zip(g.data()) {
                gx[idx] = gx[idx] + gv;
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::BroadcastSpatial { x } => {
            let xv = val(x);
            let hw = g.len() / xv.len();
            let gx: Vec<T> = g.data().chunks(hw).map(|c| c.iter().copied().sum()).collect();
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), gx));
        }
        Op::Softmax(x) => {
            let d = *out.shape().last().unwrap();
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(d).zip(out.data().chunks(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (gv, &y) in gr.iter_mut().zip(yr) {
                    *gv = y * (*gv - dot);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LayerNorm { x, rstd } => {
            let d = *out.shape().last().unwrap();
            let dt = T::from_usize(d).unwrap();
            let mut gx = g.clone();
            for ((gr, yr), &r) in gx.data_mut().chunks_mut(d).zip(out.data().chunks(d)).zip(rstd) {
                let mean_g = gr.iter().copied().sum::<T>() / dt;
                let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dt;
                for (gv, &y) in gr.iter_mut().zip(yr) {
                    *gv = r * (*gv - mean_g - y * mean_gy);
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Custom { op, inputs } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(v)).collect();
            let gs = op.backward(&ins, out, g);
            assert_eq!(gs.len(), inputs.len(), "custom op {} returned wrong arity", op.name());
            for (v, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    assert_eq!(gi.shape(), val(v).shape(), "custom op {} gradient shape", op.name());
                    accumulate(nodes, grads, *v, gi);
                }
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn permute_tensor<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(t.data()[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    a_strides: (isize, isize),
    b_strides: (isize, isize),
}

impl MatMulGeom {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Self {
        assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2");
        let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
        let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims: {a:?} x {b:?} (ta={ta}, tb={tb})");
        let batch = numel(&a[..a.len() - 2]);
        let b_batched = b.len() > 2;
        if b_batched {
            assert_eq!(&a[..a.len() - 2], &b[..b.len() - 2], "matmul batch dims");
        }
        let a_strides = if ta { (1, m as isize) } else { (k as isize, 1) };
        let b_strides = if tb { (1, k as isize) } else { (n as isize, 1) };
        Self {
            batch,
            m,
            k,
            n,
            b_batched,
            a_strides,
            b_strides,
        }
    }
}

struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let [batch, in_c, in_h, in_w] = x[..] else {
            panic!("conv2d input must be rank 4, got {x:?}")
        };
        let [out_c, wc, kh, kw] = w[..] else {
            panic!("conv2d weight must be rank 4, got {w:?}")
        };
        assert_eq!(in_c, wc, "conv2d channel mismatch: input {x:?} weight {w:?}");
        assert!(stride >= 1);
        assert!(in_h + 2 * pad >= kh && in_w + 2 * pad >= kw, "kernel larger than padded input");
        Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        }
    }

    fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source column for output column `ox` at kernel offset `kj`, if inside the image.
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let v = (o * self.stride + kk) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let l = self.l();
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * l..(row + 1) * l];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.src(oy, ki, self.in_h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let srow = &plane[iy * self.in_w..(iy + 1) * self.in_w];
                                for (ox, d) in line.iter_mut().enumerate() {
                                    *d = match self.src(ox, kj, self.in_w) {
                                        Some(ix) => srow[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let l = self.l();
        for c in 0..self.in_c {
            let base = c * self.in_h * self.in_w;
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * l..(row + 1) * l];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.src(oy, ki, self.in_h) else { continue };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.src(ox, kj, self.in_w) {
                                let t = &mut x[base + iy * self.in_w + ix];
                                *t = *t + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
