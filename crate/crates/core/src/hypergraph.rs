//! Hypergraphs over flattened feature maps and hypergraph convolution.
//!
//! A feature map `[C, H, W]` is viewed as `N = H·W` nodes carrying
//! `C`-dimensional vectors. [`build_hypergraph`] forms one hyperedge per node:
//! the node itself plus every node whose feature vector lies strictly within
//! Euclidean distance `tau`. [`hypconv`] then propagates features node → edge
//! → node with degree-normalised means and shared linear maps.
//!
//! Layout convention: feature matrices are `[C, N]` (channels by nodes), the
//! same order as a row-major `[B, C, H·W]` tensor.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::Scalar;

/// Largest node count accepted by [`build_hypergraph`]; pairwise distances are O(N²·C).
pub const DEFAULT_MAX_NODES: usize = 4096;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HypergraphError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("threshold must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("{nodes} nodes exceeds the cap of {cap}")]
    TooManyNodes { nodes: usize, cap: usize },
    #[error("invalid hypergraph: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, HypergraphError>;

/// Features flattened to `[B, C, N]` with the spatial extent they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FlattenedFeatures<T> {
    data: Array3<T>,
    height: usize,
    width: usize,
}

impl<T: Scalar> FlattenedFeatures<T> {
    pub fn new(data: Array3<T>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(HypergraphError::Shape("height and width must be positive".into()));
        }
        if data.dim().2 != height * width {
            return Err(HypergraphError::Shape(format!(
                "N = {} but height x width = {}",
                data.dim().2,
                height * width
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(HypergraphError::NonFinite("features"));
        }
        Ok(Self { data, height, width })
    }

    /// `[B, C, H, W] -> [B, C, H·W]`; position `(h, w)` becomes node `h·W + w`.
    pub fn from_nchw(x: &Array4<T>) -> Result<Self> {
        let (b, c, h, w) = x.dim();
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, c, h * w))
            .expect("standard layout reshapes");
        Self::new(flat, h, w)
    }

    pub fn restore_shape(&self) -> Array4<T> {
        let (b, c, _) = self.data.dim();
        self.data
            .clone()
            .into_shape_with_order((b, c, self.height, self.width))
            .expect("element count preserved")
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }

    /// `[C, N]` view of batch element `b`.
    pub fn batch(&self, b: usize) -> ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), b)
    }
}

/// Node/hyperedge incidence structure. Stored sparsely as member lists; the
/// dense `[N, E]` incidence matrix is available via [`Hypergraph::incidence`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hypergraph {
    num_nodes: usize,
    edges: Vec<Vec<usize>>,
    node_edges: Vec<Vec<usize>>,
}

/// Debug form: `{num_nodes, num_edges, incidence: [[node, ...], ...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypergraphDebug {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub incidence: Vec<Vec<usize>>,
}

impl Hypergraph {
    /// Builds from per-edge member lists. Members are sorted and deduplicated;
    /// every edge must be nonempty and every node must be covered.
    pub fn from_edges(num_nodes: usize, edges: Vec<Vec<usize>>) -> Result<Self> {
        if num_nodes == 0 || edges.is_empty() {
            return Err(HypergraphError::Invalid("need at least one node and one edge".into()));
        }
        let mut node_edges = vec![Vec::new(); num_nodes];
        let mut clean = Vec::with_capacity(edges.len());
        for (e, mut members) in edges.into_iter().enumerate() {
            members.sort_unstable();
            members.dedup();
            if members.is_empty() {
                return Err(HypergraphError::Invalid(format!("hyperedge {e} is empty")));
            }
            if let Some(&bad) = members.iter().find(|&&i| i >= num_nodes) {
                return Err(HypergraphError::Invalid(format!("hyperedge {e} references node {bad}")));
            }
            for &i in &members {
                node_edges[i].push(e);
            }
            clean.push(members);
        }
        if let Some(i) = node_edges.iter().position(Vec::is_empty) {
            return Err(HypergraphError::Invalid(format!("node {i} belongs to no hyperedge")));
        }
        Ok(Self {
            num_nodes,
            edges: clean,
            node_edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, e: usize) -> &[usize] {
        &self.edges[e]
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    /// Hyperedges containing node `i` (ε(i)), ascending.
    pub fn incident_edges(&self, i: usize) -> &[usize] {
        &self.node_edges[i]
    }

    pub fn node_degrees(&self) -> Vec<usize> {
        self.node_edges.iter().map(Vec::len).collect()
    }

    pub fn edge_degrees(&self) -> Vec<usize> {
        self.edges.iter().map(Vec::len).collect()
    }

    /// Dense binary incidence matrix `H` of shape `[N, E]`.
    pub fn incidence<T: Scalar>(&self) -> Array2<T> {
        let mut h = Array2::zeros((self.num_nodes, self.edges.len()));
        for (e, members) in self.edges.iter().enumerate() {
            for &i in members {
                h[[i, e]] = T::one();
            }
        }
        h
    }

    pub fn to_debug(&self) -> HypergraphDebug {
        HypergraphDebug {
            num_nodes: self.num_nodes,
            num_edges: self.edges.len(),
            incidence: self.edges.clone(),
        }
    }

    pub fn from_debug(d: &HypergraphDebug) -> Result<Self> {
        if d.incidence.len() != d.num_edges {
            return Err(HypergraphError::Invalid(format!(
                "num_edges {} but {} incidence lists",
                d.num_edges,
                d.incidence.len()
            )));
        }
        Self::from_edges(d.num_nodes, d.incidence.clone())
    }
}

fn check_finite<T: Scalar>(x: &ArrayView2<'_, T>, what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HypergraphError::NonFinite(what))
    }
}

/// Node feature vectors as contiguous rows (`[N, C]`).
fn node_rows<T: Scalar>(features: &ArrayView2<'_, T>) -> Array2<T> {
    features.t().as_standard_layout().into_owned()
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Euclidean threshold hypergraph with [`DEFAULT_MAX_NODES`] as the size cap.
pub fn build_hypergraph<T: Scalar>(features: ArrayView2<'_, T>, tau: T) -> Result<Hypergraph> {
    build_hypergraph_capped(features, tau, DEFAULT_MAX_NODES)
}

/// One hyperedge per node: `e_i = {j : ‖x_i − x_j‖₂ < tau} ∪ {i}`, so `E == N`.
pub fn build_hypergraph_capped<T: Scalar>(features: ArrayView2<'_, T>, tau: T, max_nodes: usize) -> Result<Hypergraph> {
    let (_, n) = features.dim();
    if n == 0 {
        return Err(HypergraphError::Shape("no nodes".into()));
    }
    if n > max_nodes {
        return Err(HypergraphError::TooManyNodes { nodes: n, cap: max_nodes });
    }
    if !(tau.is_finite() && tau > T::zero()) {
        return Err(HypergraphError::InvalidTau(tau.to_f64().unwrap_or(f64::NAN)));
    }
    check_finite(&features, "features")?;
    let rows = node_rows(&features);
    let rows = rows.as_slice().expect("standard layout");
    let c = features.dim().0;
    let tau2 = tau * tau;
    let mut edges = vec![Vec::new(); n];
    for i in 0..n {
        edges[i].push(i);
        let xi = &rows[i * c..(i + 1) * c];
        for j in i + 1..n {
            if squared_distance(xi, &rows[j * c..(j + 1) * c]) < tau2 {
                edges[i].push(j);
                edges[j].push(i);
            }
        }
    }
    Hypergraph::from_edges(n, edges)
}

/// Median of all pairwise distances `‖x_i − x_j‖₂, i < j` (mean of the two
/// middle values for an even count). A single node yields zero.
pub fn median_pairwise_distance<T: Scalar>(features: ArrayView2<'_, T>) -> Result<T> {
    check_finite(&features, "features")?;
    let (c, n) = features.dim();
    if n < 2 {
        return Ok(T::zero());
    }
    let rows = node_rows(&features);
    let rows = rows.as_slice().expect("standard layout");
    let mut d: Vec<T> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(squared_distance(&rows[i * c..(i + 1) * c], &rows[j * c..(j + 1) * c]).sqrt());
        }
    }
    d.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let m = d.len();
    Ok(if m % 2 == 1 {
        d[m / 2]
    } else {
        (d[m / 2 - 1] + d[m / 2]) / T::from_f64(2.0).unwrap()
    })
}

fn check_cols<T>(x: &ArrayView2<'_, T>, expected: usize, what: &str) -> Result<()> {
    if x.dim().1 == expected {
        Ok(())
    } else {
        Err(HypergraphError::Shape(format!("{what}: {} columns, expected {expected}", x.dim().1)))
    }
}

/// Node → edge: each edge takes the mean of its members, `[C, N] -> [C, E]`.
pub fn v2e<T: Scalar>(node_features: ArrayView2<'_, T>, hg: &Hypergraph) -> Result<Array2<T>> {
    check_cols(&node_features, hg.num_nodes(), "v2e node features")?;
    let c = node_features.dim().0;
    let mut out = Array2::zeros((c, hg.num_edges()));
    for (e, members) in hg.edges().iter().enumerate() {
        let inv = T::one() / T::from_usize(members.len()).unwrap();
        for ch in 0..c {
            let s = members.iter().fold(T::zero(), |acc, &i| acc + node_features[[ch, i]]);
            out[[ch, e]] = s * inv;
        }
    }
    Ok(out)
}

/// Edge → node: each node takes the mean of its incident edges, `[C, E] -> [C, N]`.
pub fn e2v<T: Scalar>(edge_features: ArrayView2<'_, T>, hg: &Hypergraph) -> Result<Array2<T>> {
    check_cols(&edge_features, hg.num_edges(), "e2v edge features")?;
    let c = edge_features.dim().0;
    let mut out = Array2::zeros((c, hg.num_nodes()));
    for i in 0..hg.num_nodes() {
        let inc = hg.incident_edges(i);
        let inv = T::one() / T::from_usize(inc.len()).unwrap();
        for ch in 0..c {
            let s = inc.iter().fold(T::zero(), |acc, &e| acc + edge_features[[ch, e]]);
            out[[ch, i]] = s * inv;
        }
    }
    Ok(out)
}

/// Transpose of [`v2e`] as a linear map: `[C, E] -> [C, N]`.
pub fn v2e_adjoint<T: Scalar>(edge_grad: ArrayView2<'_, T>, hg: &Hypergraph) -> Result<Array2<T>> {
    check_cols(&edge_grad, hg.num_edges(), "v2e adjoint")?;
    let c = edge_grad.dim().0;
    let mut out = Array2::zeros((c, hg.num_nodes()));
    for (e, members) in hg.edges().iter().enumerate() {
        let inv = T::one() / T::from_usize(members.len()).unwrap();
        for ch in 0..c {
            let g = edge_grad[[ch, e]] * inv;
            for &i in members {
                out[[ch, i]] = out[[ch, i]] + g;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`e2v`] as a linear map: `[C, N] -> [C, E]`.
pub fn e2v_adjoint<T: Scalar>(node_grad: ArrayView2<'_, T>, hg: &Hypergraph) -> Result<Array2<T>> {
    check_cols(&node_grad, hg.num_nodes(), "e2v adjoint")?;
    let c = node_grad.dim().0;
    let mut out = Array2::zeros((c, hg.num_edges()));
    for i in 0..hg.num_nodes() {
        let inc = hg.incident_edges(i);
        let inv = T::one() / T::from_usize(inc.len()).unwrap();
        for ch in 0..c {
            let g = node_grad[[ch, i]] * inv;
            for &e in inc {
                out[[ch, e]] = out[[ch, e]] + g;
            }
        }
    }
    Ok(out)
}

/// Elementwise nonlinearity applied after aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let half = T::from_f64(0.5).unwrap();
                let inner = T::from_f64(GELU_C).unwrap() * (x + T::from_f64(GELU_A).unwrap() * x * x * x);
                half * x * (T::one() + inner.tanh())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::from_f64(0.5).unwrap();
                let c = T::from_f64(GELU_C).unwrap();
                let a = T::from_f64(GELU_A).unwrap();
                let t = (c * (x + a * x * x * x)).tanh();
                let dinner = c * (T::one() + T::from_f64(3.0).unwrap() * a * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
            }
        }
    }
}

/// Parameters of one HyPConv application.
#[derive(Clone, Debug, PartialEq)]
pub struct HyPConvLayer<T> {
    /// `[C_in, C_mid]`, applied before node → edge aggregation.
    pub weight_v2e: Array2<T>,
    /// `[C_mid, C_out]`, applied after edge → node aggregation.
    pub weight_e2v: Array2<T>,
    /// `[C_out]`.
    pub bias: Array1<T>,
    pub activation: Activation,
}

impl<T: Scalar> HyPConvLayer<T> {
    pub fn new(weight_v2e: Array2<T>, weight_e2v: Array2<T>, bias: Array1<T>, activation: Activation) -> Result<Self> {
        if weight_v2e.dim().1 != weight_e2v.dim().0 {
            return Err(HypergraphError::Shape(format!(
                "weight_v2e {:?} does not chain into weight_e2v {:?}",
                weight_v2e.dim(),
                weight_e2v.dim()
            )));
        }
        if bias.len() != weight_e2v.dim().1 {
            return Err(HypergraphError::Shape(format!(
                "bias length {} vs C_out {}",
                bias.len(),
                weight_e2v.dim().1
            )));
        }
        let finite = weight_v2e.iter().chain(weight_e2v.iter()).chain(bias.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(HypergraphError::NonFinite("layer parameters"));
        }
        Ok(Self {
            weight_v2e,
            weight_e2v,
            bias,
            activation,
        })
    }

    /// Identity maps of width `c`, zero bias.
    pub fn identity(c: usize, activation: Activation) -> Self {
        Self {
            weight_v2e: Array2::eye(c),
            weight_e2v: Array2::eye(c),
            bias: Array1::zeros(c),
            activation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight_v2e.dim().0
    }

    pub fn out_channels(&self) -> usize {
        self.weight_e2v.dim().1
    }
}

/// Intermediate values of a forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HyPConvTrace<T> {
    /// `W_v2eᵀ · x`, `[C_mid, N]`.
    pub projected: Array2<T>,
    /// `e2v(v2e(projected))`, `[C_mid, N]`.
    pub aggregated: Array2<T>,
    /// Pre-activation output, `[C_out, N]`.
    pub pre_activation: Array2<T>,
    pub output: Array2<T>,
}

/// `σ( e2v(v2e(x·W_v2e)) · W_e2v + b )` with `x: [C_in, N]`, returning `[C_out, N]`.
pub fn hypconv<T: Scalar>(x: ArrayView2<'_, T>, hg: &Hypergraph, layer: &HyPConvLayer<T>) -> Result<Array2<T>> {
    hypconv_trace(x, hg, layer).map(|t| t.output)
}

pub fn hypconv_trace<T: Scalar>(x: ArrayView2<'_, T>, hg: &Hypergraph, layer: &HyPConvLayer<T>) -> Result<HyPConvTrace<T>> {
    if x.dim().0 != layer.in_channels() {
        return Err(HypergraphError::Shape(format!(
            "input has {} channels, layer expects {}",
            x.dim().0,
            layer.in_channels()
        )));
    }
    check_cols(&x, hg.num_nodes(), "hypconv input")?;
    let projected = layer.weight_v2e.t().dot(&x);
    let edges = v2e(projected.view(), hg)?;
    let aggregated = e2v(edges.view(), hg)?;
    let mut pre_activation = layer.weight_e2v.t().dot(&aggregated);
    for (mut row, &b) in pre_activation.axis_iter_mut(Axis(0)).zip(layer.bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    let output = pre_activation.mapv(|v| layer.activation.apply(v));
    Ok(HyPConvTrace {
        projected,
        aggregated,
        pre_activation,
        output,
    })
}

/// Gradients of a scalar objective through [`hypconv`].
#[derive(Clone, Debug)]
pub struct HyPConvGrads<T> {
    pub weight_v2e: Array2<T>,
    pub weight_e2v: Array2<T>,
    pub bias: Array1<T>,
    pub input: Array2<T>,
}

/// Back-propagates `grad_output` (`[C_out, N]`) through one HyPConv application.
/// The hypergraph is treated as constant.
pub fn hypconv_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    hg: &Hypergraph,
    layer: &HyPConvLayer<T>,
    trace: &HyPConvTrace<T>,
    grad_output: ArrayView2<'_, T>,
) -> Result<HyPConvGrads<T>> {
    if grad_output.dim() != trace.output.dim() {
        return Err(HypergraphError::Shape(format!(
            "grad_output {:?} vs output {:?}",
            grad_output.dim(),
            trace.output.dim()
        )));
    }
    let dz = ndarray::Zip::from(&grad_output)
        .and(&trace.pre_activation)
        .map_collect(|&g, &z| g * layer.activation.derivative(z));
    let weight_e2v = trace.aggregated.dot(&dz.t());
    let bias = dz.sum_axis(Axis(1));
    let d_aggregated = layer.weight_e2v.dot(&dz);
    let d_edges = e2v_adjoint(d_aggregated.view(), hg)?;
    let d_projected = v2e_adjoint(d_edges.view(), hg)?;
    let weight_v2e = x.dot(&d_projected.t());
    let input = layer.weight_v2e.dot(&d_projected);
    Ok(HyPConvGrads {
        weight_v2e,
        weight_e2v,
        bias,
        input,
    })
}

/// Pairwise graph convolution `h_i' = σ(Wᵀ · mean_{j∈N(i)} h_j + b)`, kept as
/// a reference point for [`hypconv`].
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConvReference<T> {
    /// `[N, N]`, symmetric, ones on the diagonal.
    pub adjacency: Array2<u8>,
    /// `[C_in, C_out]`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

pub fn graph_conv_reference<T: Scalar>(x: ArrayView2<'_, T>, reference: &GraphConvReference<T>) -> Result<Array2<T>> {
    let a = &reference.adjacency;
    let n = x.dim().1;
    if a.dim() != (n, n) {
        return Err(HypergraphError::Shape(format!("adjacency {:?} for {n} nodes", a.dim())));
    }
    for i in 0..n {
        if a[[i, i]] != 1 {
            return Err(HypergraphError::Invalid(format!("adjacency diagonal at {i} is not 1")));
        }
        for j in 0..i {
            if a[[i, j]] != a[[j, i]] {
                return Err(HypergraphError::Invalid(format!("adjacency not symmetric at ({i}, {j})")));
            }
            if a[[i, j]] > 1 {
                return Err(HypergraphError::Invalid(format!("adjacency not binary at ({i}, {j})")));
            }
        }
    }
    if x.dim().0 != reference.weight.dim().0 || reference.bias.len() != reference.weight.dim().1 {
        return Err(HypergraphError::Shape("weight/bias do not match input channels".into()));
    }
    let mut mean = Array2::zeros(x.dim());
    for i in 0..n {
        let nbrs: Vec<usize> = (0..n).filter(|&j| a[[i, j]] == 1).collect();
        let inv = T::one() / T::from_usize(nbrs.len()).unwrap();
        for ch in 0..x.dim().0 {
            mean[[ch, i]] = nbrs.iter().fold(T::zero(), |acc, &j| acc + x[[ch, j]]) * inv;
        }
    }
    let mut out = reference.weight.t().dot(&mean);
    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(reference.bias.iter()) {
        row.mapv_inplace(|v| reference.activation.apply(v + b));
    }
    Ok(out)
}
