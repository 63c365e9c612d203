//! AffinityNet building blocks and their composition into a model.
//!
//! A [`ModelSpec`] is a declarative layer list; [`ModelParams`] holds the
//! matching tensors. [`forward_on_tape`] records a full forward pass so the
//! training loop can differentiate it, and [`model_forward`] evaluates frozen
//! parameters.
//!
//! Graph-producing layers (feature attention and kNN pooling) compute a dense
//! affinity graph on their input, mix it with the given graph and the previous
//! graph-producing layer's node-derived graph, select neighborhoods on the
//! mixed graph, and then attend over those neighborhoods. Neighborhood choice
//! is discrete and carries no gradient; attention weights do.

use serde::{Deserialize, Serialize};

use crate::affinity::{
    kernel_scores, knn_from_kernel, knn_select, mix_graphs, tape_attention, tape_pool,
    AffinityGraph, KernelKind, KernelSpec, Neighborhoods,
};
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Tape, Var};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn cosine() -> KernelKind {
    KernelKind::Cosine
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Element-wise simplex weights followed by kNN attention pooling with
    /// the weighted-L2 kernel built from the same weights.
    FeatureAttention {
        k: usize,
        #[serde(default)]
        lambda: f64,
        #[serde(default = "one")]
        eta: f64,
        /// Keeps the weights at their initial (uniform) value.
        #[serde(default)]
        frozen: bool,
    },
    KnnPooling {
        out: usize,
        k: usize,
        #[serde(default = "cosine")]
        attention_kernel: KernelKind,
        #[serde(default = "cosine")]
        graph_kernel: KernelKind,
        #[serde(default)]
        lambda: f64,
        #[serde(default = "half")]
        eta: f64,
    },
    AffineRelu {
        out: usize,
    },
    LinearHead {
        classes: usize,
    },
    CoxHead,
}

impl LayerSpec {
    fn is_head(&self) -> bool {
        matches!(self, LayerSpec::LinearHead { .. } | LayerSpec::CoxHead)
    }

    fn output_width(&self, input: usize) -> usize {
        match self {
            LayerSpec::FeatureAttention { .. } => input,
            LayerSpec::KnnPooling { out, .. } | LayerSpec::AffineRelu { out } => *out,
            LayerSpec::LinearHead { classes } => *classes,
            LayerSpec::CoxHead => 1,
        }
    }

    fn mixing(&self) -> Option<(usize, f64, f64)> {
        match *self {
            LayerSpec::FeatureAttention { k, lambda, eta, .. }
            | LayerSpec::KnnPooling { k, lambda, eta, .. } => Some((k, lambda, eta)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classification { classes: usize },
    Cox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Feature attention → kNN pooling (cosine kernel) → linear classifier.
    pub fn affinitynet(input_dim: usize, hidden: usize, classes: usize, k: usize) -> Self {
        Self {
            input_dim,
            layers: vec![
                LayerSpec::FeatureAttention {
                    k,
                    lambda: 0.0,
                    eta: 1.0,
                    frozen: false,
                },
                LayerSpec::KnnPooling {
                    out: hidden,
                    k,
                    attention_kernel: KernelKind::Cosine,
                    graph_kernel: KernelKind::Cosine,
                    lambda: 0.0,
                    eta: 0.5,
                },
                LayerSpec::LinearHead { classes },
            ],
        }
    }

    /// The plain network with a feature attention layer in front:
    /// feature attention → affine + ReLU → linear classifier.
    pub fn feature_attention_net(input_dim: usize, hidden: usize, classes: usize, k: usize) -> Self {
        let mut spec = Self::neural_net(input_dim, hidden, classes);
        spec.layers.insert(
            0,
            LayerSpec::FeatureAttention {
                k,
                lambda: 0.0,
                eta: 1.0,
                frozen: false,
            },
        );
        spec
    }

    /// Plain two-layer network: affine + ReLU → linear classifier.
    pub fn neural_net(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input_dim,
            layers: vec![
                LayerSpec::AffineRelu { out: hidden },
                LayerSpec::LinearHead { classes },
            ],
        }
    }

    /// Same body with the head replaced by a Cox regression layer.
    pub fn with_cox_head(mut self) -> Self {
        if let Some(last) = self.layers.last_mut() {
            if last.is_head() {
                *last = LayerSpec::CoxHead;
                return self;
            }
        }
        self.layers.push(LayerSpec::CoxHead);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        let Some(last) = self.layers.last() else {
            return bad("model has no layers".into());
        };
        if !last.is_head() {
            return bad("last layer must be a head".into());
        }
        if self.layers.iter().filter(|l| l.is_head()).count() != 1 {
            return bad("exactly one head layer is allowed".into());
        }
        let mut seen_graph = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::KnnPooling { out: 0, .. } | LayerSpec::AffineRelu { out: 0 } => {
                    return bad(format!("layer {i} has zero width"))
                }
                LayerSpec::LinearHead { classes } if *classes < 1 => {
                    return bad("linear head needs at least one class".into())
                }
                _ => {}
            }
            if let Some((_, lambda, eta)) = layer.mixing() {
                if !(0.0..=1.0).contains(&lambda) || !(0.0..=1.0).contains(&eta) {
                    return bad(format!("layer {i}: lambda and eta must lie in [0, 1]"));
                }
                if !seen_graph && eta < 1.0 {
                    return bad(format!(
                        "layer {i} is the first graph layer, so eta must be 1"
                    ));
                }
                seen_graph = true;
            }
        }
        Ok(())
    }

    pub fn head(&self) -> HeadKind {
        match self.layers.last() {
            Some(LayerSpec::LinearHead { classes }) => HeadKind::Classification { classes: *classes },
            _ => HeadKind::Cox,
        }
    }

    /// Input width of every layer followed by the output width.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        for l in &self.layers {
            let next = l.output_width(*w.last().expect("nonempty"));
            w.push(next);
        }
        w
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .flatten()
            .filter(|s| s.trainable)
            .map(|s| s.rows * s.cols)
            .sum()
    }

    fn layout(&self) -> Vec<Vec<TensorSlot>> {
        let widths = self.widths();
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let (inp, out) = (widths[i], widths[i + 1]);
                let slot = |name: &'static str, rows, cols, trainable, init| TensorSlot {
                    name,
                    rows,
                    cols,
                    trainable,
                    init,
                };
                let fan = 1.0 / (inp as f64).sqrt();
                match layer {
                    LayerSpec::FeatureAttention { frozen, .. } => {
                        vec![slot("logits", 1, inp, !frozen, Init::Zeros)]
                    }
                    LayerSpec::KnnPooling {
                        attention_kernel,
                        graph_kernel,
                        ..
                    } => {
                        let mut v = vec![
                            slot("weight", out, inp, true, Init::Uniform(fan)),
                            slot("bias", 1, out, true, Init::Uniform(fan)),
                        ];
                        if let Some(len) = attention_kernel.param_len(inp) {
                            v.push(slot("attention_kernel", 1, len, true, kernel_init(*attention_kernel, len)));
                        }
                        if graph_kernel != attention_kernel {
                            if let Some(len) = graph_kernel.param_len(inp) {
                                v.push(slot("graph_kernel", 1, len, false, kernel_init(*graph_kernel, len)));
                            }
                        }
                        v
                    }
                    LayerSpec::AffineRelu { .. } | LayerSpec::LinearHead { .. } => vec![
                        slot("weight", out, inp, true, Init::Uniform(fan)),
                        slot("bias", 1, out, true, Init::Uniform(fan)),
                    ],
                    LayerSpec::CoxHead => vec![slot("beta", 1, inp, true, Init::Uniform(fan))],
                }
            })
            .collect()
    }
}

fn kernel_init(kind: KernelKind, len: usize) -> Init {
    match kind {
        KernelKind::WeightedL2 => Init::Ones,
        _ => Init::Uniform(1.0 / (len as f64).sqrt()),
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

#[derive(Clone, Debug)]
struct TensorSlot {
    name: &'static str,
    rows: usize,
    cols: usize,
    trainable: bool,
    init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub trainable: bool,
}

/// Learned tensors for every layer of a [`ModelSpec`], plus the optimizer step count.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<Vec<Param<T>>>,
    pub step: u64,
}

impl<T: Scalar> ModelParams<T> {
    /// Affine weights and biases ~ U(−1/√fan_in, 1/√fan_in); feature-attention
    /// logits start at zero (uniform weights); weighted-L2 kernel weights at one.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::stream(seed, 0x1a7e5);
        let layers = spec
            .layout()
            .into_iter()
            .map(|slots| {
                slots
                    .into_iter()
                    .map(|s| {
                        let value = match s.init {
                            Init::Zeros => Matrix::zeros(s.rows, s.cols),
                            Init::Ones => Matrix::filled(s.rows, s.cols, T::one()),
                            Init::Uniform(a) => Matrix::from_fn(s.rows, s.cols, |_, _| {
                                T::of(rng.uniform_range(-a, a))
                            }),
                        };
                        Param {
                            name: s.name.to_string(),
                            value,
                            trainable: s.trainable,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { layers, step: 0 })
    }

    pub fn get(&self, layer: usize, name: &str) -> Option<&Matrix<T>> {
        self.layers
            .get(layer)?
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    /// Every tensor in layer order.
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flatten()
    }

    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Simplex weights of the first feature-attention layer, if any.
    pub fn feature_weights(&self, spec: &ModelSpec) -> Option<Vec<T>> {
        let idx = spec
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::FeatureAttention { .. }))?;
        let logits = self.get(idx, "logits")?;
        Some(logits.row_softmax().ok()?.into_vec())
    }

    fn check_layout(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.layout();
        let ok = layout.len() == self.layers.len()
            && layout.iter().zip(&self.layers).all(|(slots, params)| {
                slots.len() == params.len()
                    && slots.iter().zip(params).all(|(s, p)| {
                        s.name == p.name && p.value.shape() == (s.rows, s.cols)
                    })
            });
        if ok {
            Ok(())
        } else {
            Err(Error::SpecInvalid("parameters do not match the model spec".into()))
        }
    }
}

/// Learnable weights of a feature attention layer: `w = softmax(logits)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAttentionParams<T> {
    pub logits: Matrix<T>,
}

impl<T: Scalar> FeatureAttentionParams<T> {
    pub fn uniform(p: usize) -> Self {
        Self {
            logits: Matrix::zeros(1, p),
        }
    }

    /// Weights on the probability simplex.
    pub fn weights(&self) -> Result<Matrix<T>> {
        self.logits.row_softmax()
    }
}

/// Neighborhood and graph-mixing settings of one pooling step.
#[derive(Clone, Copy, Debug)]
pub struct PoolingContext<'a, T> {
    pub k: usize,
    pub lambda: T,
    pub eta: T,
    pub given: Option<&'a Matrix<T>>,
    pub previous: Option<&'a Matrix<T>>,
}

impl<T: Scalar> PoolingContext<'_, T> {
    /// kNN pooling on the layer's own graph only.
    pub fn knn(k: usize) -> Self {
        Self {
            k,
            lambda: T::zero(),
            eta: T::one(),
            given: None,
            previous: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingLayerParams<T> {
    /// out×in
    pub weight: Matrix<T>,
    /// 1×out
    pub bias: Matrix<T>,
    pub attention_kernel: KernelSpec<T>,
    pub graph_kernel: KernelSpec<T>,
    pub k: usize,
    pub lambda: T,
    pub eta: T,
}

/// Graph threading state across graph-producing layers.
struct GraphState<T> {
    /// Node-derived graph of the previous graph layer, when something reads it.
    previous: Option<Matrix<T>>,
    /// Mixed graph (when different from the node graph) and neighborhoods of the last layer.
    last: Option<(Option<Matrix<T>>, Neighborhoods)>,
    /// Per graph layer, in order: whether its dense node graph must be kept.
    keep_dense: Vec<bool>,
    layer: usize,
}

impl<T> GraphState<T> {
    fn new(spec: &ModelSpec, keep_graph: bool) -> Self {
        let etas: Vec<f64> = spec
            .layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::FeatureAttention { eta, .. } | LayerSpec::KnnPooling { eta, .. } => {
                    Some(eta)
                }
                _ => None,
            })
            .collect();
        let keep_dense = (0..etas.len())
            .map(|g| match etas.get(g + 1) {
                Some(&next) => next != 1.0,
                None => keep_graph,
            })
            .collect();
        Self {
            previous: None,
            last: None,
            keep_dense,
            layer: 0,
        }
    }

    /// A single layer run on its own; it always keeps its dense graph.
    fn standalone(previous: Option<Matrix<T>>) -> Self {
        Self {
            previous,
            last: None,
            keep_dense: Vec::new(),
            layer: 0,
        }
    }
}

fn select_neighbors<T: Scalar>(
    h: &Matrix<T>,
    graph_spec: &KernelSpec<T>,
    given: Option<&Matrix<T>>,
    state: &mut GraphState<T>,
    k: usize,
    lambda: T,
    eta: T,
) -> Result<Neighborhoods> {
    let n = h.rows();
    let k = k.min(n.saturating_sub(1));
    let keep = state.keep_dense.get(state.layer).copied().unwrap_or(true);
    state.layer += 1;
    let trivial = lambda == T::zero() && eta == T::one();
    let (current, mixed, nbrs) = if trivial {
        let nbrs = knn_from_kernel(h, graph_spec, k)?;
        let current = if keep { Some(kernel_scores(h, graph_spec)?) } else { None };
        (current, None, nbrs)
    } else {
        let current = kernel_scores(h, graph_spec)?;
        let mixed = mix_graphs(given, &current, state.previous.as_ref(), lambda, eta)?;
        let nbrs = knn_select(&mixed, k)?;
        (Some(current), Some(mixed), nbrs)
    };
    state.previous = current;
    state.last = Some((mixed, nbrs.clone()));
    Ok(nbrs)
}

fn feature_attention_layer<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    logits: Var,
    ctx: (usize, T, T),
    given: Option<&Matrix<T>>,
    state: &mut GraphState<T>,
) -> Result<Var> {
    let p = tape.value(h).cols();
    if tape.value(logits).shape() != (1, p) {
        return Err(Error::ShapeMismatch {
            op: "feature_attention",
            left: tape.value(h).shape(),
            right: tape.value(logits).shape(),
        });
    }
    let w = tape.row_softmax(logits)?;
    let weighted = tape.mul(h, w)?;
    let graph_spec = KernelSpec::weighted_l2(tape.value(w).data());
    let nbrs = select_neighbors(tape.value(h), &graph_spec, given, state, ctx.0, ctx.1, ctx.2)?;
    let att = tape_attention(tape, h, KernelKind::WeightedL2, Some(w), &nbrs)?;
    tape_pool(tape, weighted, att, &nbrs)
}

#[allow(clippy::too_many_arguments)]
fn pooling_layer<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    weight: Var,
    bias: Var,
    attention: (KernelKind, Option<Var>),
    graph_spec: &KernelSpec<T>,
    ctx: (usize, T, T),
    given: Option<&Matrix<T>>,
    state: &mut GraphState<T>,
) -> Result<Var> {
    let nbrs = select_neighbors(tape.value(h), graph_spec, given, state, ctx.0, ctx.1, ctx.2)?;
    let att = tape_attention(tape, h, attention.0, attention.1, &nbrs)?;
    let pooled = tape_pool(tape, h, att, &nbrs)?;
    affine(tape, pooled, weight, bias, true)
}

fn affine<T: Scalar>(tape: &mut Tape<T>, h: Var, weight: Var, bias: Var, relu: bool) -> Result<Var> {
    let z = tape.matmul_t(h, weight)?;
    let z = tape.add(z, bias)?;
    Ok(if relu { tape.relu(z) } else { z })
}

/// Handles produced by [`forward_on_tape`].
pub struct TapeForward<T> {
    /// Logits (n×classes) or risks (n×1).
    pub output: Var,
    /// Representation fed into the head.
    pub hidden: Var,
    pub layer_outputs: Vec<Var>,
    /// Leaf handle for every parameter, in [`ModelParams`] order.
    pub param_vars: Vec<Vec<Var>>,
    /// Final mixed affinity graph and neighborhoods, when requested.
    pub graph: Option<AffinityGraph<T>>,
}

/// Records a forward pass of all rows of `h` on `tape`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    params: &ModelParams<T>,
    h: &Matrix<T>,
    given: Option<&Matrix<T>>,
    keep_graph: bool,
) -> Result<TapeForward<T>> {
    spec.validate()?;
    params.check_layout(spec)?;
    if h.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            left: h.shape(),
            right: (h.rows(), spec.input_dim),
        });
    }
    if let Some(g) = given {
        if g.shape() != (h.rows(), h.rows()) {
            return Err(Error::ShapeMismatch {
                op: "given graph",
                left: g.shape(),
                right: (h.rows(), h.rows()),
            });
        }
    }
    let mut x = tape.constant(h.clone());
    let mut state = GraphState::new(spec, keep_graph);
    let mut layer_outputs = Vec::with_capacity(spec.layers.len());
    let mut param_vars = Vec::with_capacity(spec.layers.len());
    let mut hidden = x;
    for (layer, lp) in spec.layers.iter().zip(&params.layers) {
        let vars: Vec<Var> = lp
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect();
        if layer.is_head() {
            hidden = x;
        }
        x = match *layer {
            LayerSpec::FeatureAttention { k, lambda, eta, .. } => feature_attention_layer(
                tape,
                x,
                vars[0],
                (k, T::of(lambda), T::of(eta)),
                given,
                &mut state,
            )?,
            LayerSpec::KnnPooling {
                k,
                attention_kernel,
                graph_kernel,
                lambda,
                eta,
                ..
            } => {
                let att_param = attention_kernel.param_len(1).map(|_| vars[2]);
                let graph_params = if graph_kernel == attention_kernel {
                    att_param.map(|v| tape.value(v).clone())
                } else {
                    graph_kernel.param_len(1).map(|_| lp[lp.len() - 1].value.clone())
                };
                let graph_spec = KernelSpec::new(graph_kernel, graph_params)?;
                pooling_layer(
                    tape,
                    x,
                    vars[0],
                    vars[1],
                    (attention_kernel, att_param),
                    &graph_spec,
                    (k, T::of(lambda), T::of(eta)),
                    given,
                    &mut state,
                )?
            }
            LayerSpec::AffineRelu { .. } => affine(tape, x, vars[0], vars[1], true)?,
            LayerSpec::LinearHead { .. } => affine(tape, x, vars[0], vars[1], false)?,
            LayerSpec::CoxHead => tape.matmul_t(x, vars[0])?,
        };
        layer_outputs.push(x);
        param_vars.push(vars);
    }
    let graph = match (keep_graph, state.last) {
        (true, Some((mixed, neighborhoods))) => Some(AffinityGraph {
            scores: mixed.or(state.previous).expect("graph layer ran"),
            neighborhoods,
        }),
        _ => None,
    };
    Ok(TapeForward {
        output: x,
        hidden,
        layer_outputs,
        param_vars,
        graph,
    })
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub output: Matrix<T>,
    /// Representation fed into the head (the last hidden layer).
    pub hidden: Matrix<T>,
    pub layers: Vec<Matrix<T>>,
    /// Affinity graph and neighborhoods of the last graph-producing layer.
    pub graph: Option<AffinityGraph<T>>,
}

pub fn model_forward<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    h: &Matrix<T>,
    given: Option<&Matrix<T>>,
) -> Result<ModelOutput<T>> {
    let mut tape = Tape::new();
    let fwd = forward_on_tape(&mut tape, spec, params, h, given, true)?;
    Ok(ModelOutput {
        output: tape.value(fwd.output).clone(),
        hidden: tape.value(fwd.hidden).clone(),
        layers: fwd
            .layer_outputs
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        graph: fwd.graph,
    })
}

/// Row-wise argmax (first maximum wins).
pub fn predict_classes<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `out_i = Σ_{j∈N(i)} a_ij · (w ⊙ h_j)` with weighted-L2 attention under `w`.
pub fn feature_attention_forward<T: Scalar>(
    h: &Matrix<T>,
    params: &FeatureAttentionParams<T>,
    ctx: &PoolingContext<'_, T>,
) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let logits = tape.constant(params.logits.clone());
    let mut state = GraphState::standalone(ctx.previous.cloned());
    let out = feature_attention_layer(
        &mut tape,
        x,
        logits,
        (ctx.k, ctx.lambda, ctx.eta),
        ctx.given,
        &mut state,
    )?;
    Ok(tape.value(out).clone())
}

/// One kNN attention pooling layer. Returns the output and this layer's
/// node-derived affinity graph (the previous-layer graph for the next layer).
pub fn knn_pool_forward<T: Scalar>(
    h: &Matrix<T>,
    params: &PoolingLayerParams<T>,
    given: Option<&Matrix<T>>,
    previous: Option<&Matrix<T>>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if params.weight.cols() != h.cols() || params.bias.shape() != (1, params.weight.rows()) {
        return Err(Error::ShapeMismatch {
            op: "knn_pool_forward",
            left: h.shape(),
            right: params.weight.shape(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let w = tape.constant(params.weight.clone());
    let b = tape.constant(params.bias.clone());
    let att_param = params
        .attention_kernel
        .params()
        .map(|p| tape.constant(p.clone()));
    let mut state = GraphState::standalone(previous.cloned());
    let out = pooling_layer(
        &mut tape,
        x,
        w,
        b,
        (params.attention_kernel.kind(), att_param),
        &params.graph_kernel,
        (params.k, params.lambda, params.eta),
        given,
        &mut state,
    )?;
    Ok((
        tape.value(out).clone(),
        state.previous.expect("graph computed"),
    ))
}

/// `logits = H·Wᵀ + b`.
pub fn linear_head_forward<T: Scalar>(h: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    h.matmul_t(w)?.add(b)
}

/// `risk_i = h_i · β`.
pub fn cox_head_forward<T: Scalar>(h: &Matrix<T>, beta: &[T]) -> Result<Vec<T>> {
    Ok(h.matmul_t(&Matrix::row_vector(beta))?.into_vec())
}

const CHECKPOINT_FORMAT: &str = "affinitynet-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointTensor {
    layer: usize,
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    scalar: String,
    step: u64,
    spec: ModelSpec,
    tensors: Vec<CheckpointTensor>,
}

/// Serializes a model as versioned JSON. Float values round-trip bit-exactly.
pub fn write_checkpoint<T: Scalar>(spec: &ModelSpec, params: &ModelParams<T>) -> Result<String> {
    params.check_layout(spec)?;
    let tensors = params
        .layers
        .iter()
        .enumerate()
        .flat_map(|(layer, ps)| {
            ps.iter().map(move |p| CheckpointTensor {
                layer,
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                trainable: p.trainable,
                data: p.value.data().iter().map(|v| v.to_f64_lossy()).collect(),
            })
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        scalar: std::any::type_name::<T>().into(),
        step: params.step,
        spec: spec.clone(),
        tensors,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn read_checkpoint<T: Scalar>(text: &str) -> Result<(ModelSpec, ModelParams<T>)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    file.spec.validate()?;
    let mut layers: Vec<Vec<Param<T>>> = vec![Vec::new(); file.spec.layers.len()];
    for t in file.tensors {
        let slot = layers
            .get_mut(t.layer)
            .ok_or_else(|| Error::Parse(format!("tensor for missing layer {}", t.layer)))?;
        let data = t
            .data
            .iter()
            .map(|&v| T::from_f64(v).ok_or(Error::NonFinite("checkpoint")))
            .collect::<Result<Vec<T>>>()?;
        slot.push(Param {
            name: t.name,
            value: Matrix::from_vec(t.rows, t.cols, data)?,
            trainable: t.trainable,
        });
    }
    let params = ModelParams {
        layers,
        step: file.step,
    };
    params.check_layout(&file.spec)?;
    Ok((file.spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::compare_gradient;

    fn random(n: usize, p: usize, seed: u64) -> Matrix<f64> {
        let mut r = SplitMix64::new(seed);
        Matrix::from_fn(n, p, |_, _| r.normal())
    }

    #[test]
    fn kidney_layout_parameter_counts() {
        assert_eq!(ModelSpec::affinitynet(1000, 100, 3, 2).param_count(), 101_403);
        assert_eq!(ModelSpec::neural_net(1000, 100, 3).param_count(), 100_403);
        assert_eq!(ModelSpec::affinitynet(1000, 100, 2, 3).param_count(), 101_302);
        assert_eq!(ModelSpec::neural_net(1000, 100, 2).param_count(), 100_302);
        let p = ModelParams::<f64>::init(&ModelSpec::affinitynet(1000, 100, 3, 2), 0).unwrap();
        assert_eq!(p.trainable_count(), 101_403);
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::neural_net(4, 3, 2);
        s.layers.pop();
        assert!(matches!(s.validate(), Err(Error::SpecInvalid(_))));
        let mut s = ModelSpec::affinitynet(4, 3, 2, 1);
        s.layers.swap(0, 1);
        assert!(s.validate().is_err(), "first graph layer with eta < 1");
        let s = ModelSpec::neural_net(4, 3, 2).with_cox_head();
        assert_eq!(s.head(), HeadKind::Cox);
        assert_eq!(s.widths(), vec![4, 3, 1]);
    }

    #[test]
    fn feature_attention_examples() {
        let h = random(5, 4, 1);
        let out = feature_attention_forward(&h, &FeatureAttentionParams::uniform(4), &PoolingContext::knn(0)).unwrap();
        assert!(out.max_abs_diff(&h.scale(0.25)) < 1e-15);

        // Weight (1, 0): column 2 contributes nothing.
        let h = random(6, 2, 2);
        let params = FeatureAttentionParams {
            logits: Matrix::row_vector(&[0.0, -800.0]),
        };
        let out = feature_attention_forward(&h, &params, &PoolingContext::knn(2)).unwrap();
        assert!((0..6).all(|i| out[(i, 1)] == 0.0));

        // Weighted distance ignores a zero-weight feature.
        let w = [1.0, 0.0];
        let pts = Matrix::from_rows(&[[0.0, 5.0], [0.0, 9.0]]).unwrap();
        let d = kernel_scores(&pts, &KernelSpec::weighted_l2(&w)).unwrap();
        assert_eq!(d[(0, 1)], 0.0);
    }

    fn pool_params(inp: usize, out: usize, k: usize) -> PoolingLayerParams<f64> {
        PoolingLayerParams {
            weight: random(out, inp, 3),
            bias: random(1, out, 4),
            attention_kernel: KernelSpec::cosine(),
            graph_kernel: KernelSpec::cosine(),
            k,
            lambda: 0.0,
            eta: 1.0,
        }
    }

    #[test]
    fn pooling_examples() {
        let h = random(5, 3, 7);
        let mut p = pool_params(3, 3, 0);
        p.weight = Matrix::identity(3);
        p.bias = Matrix::zeros(1, 3);
        let (out, graph) = knn_pool_forward(&h, &p, None, None).unwrap();
        assert_eq!(out, h.relu());
        assert_eq!(graph.shape(), (5, 5));

        let mut h = random(4, 3, 8);
        let dup = h.row(1).to_vec();
        h.row_mut(2).copy_from_slice(&dup);
        let (out, _) = knn_pool_forward(&h, &pool_params(3, 2, 1), None, None).unwrap();
        assert_eq!(out.row(1), out.row(2));

        // n = 2, k = 1, equal attention: both pooled inputs are the mean row.
        let h = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        let mut p = pool_params(2, 2, 1);
        p.weight = Matrix::identity(2);
        p.bias = Matrix::zeros(1, 2);
        let (out, _) = knn_pool_forward(&h, &p, None, None).unwrap();
        for i in 0..2 {
            assert!((out[(i, 0)] - 1.5).abs() < 1e-12 && (out[(i, 1)] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_examples() {
        let h = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let logits = linear_head_forward(&h, &Matrix::identity(2), &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(logits.data(), &[1.0, 2.0]);
        let h = random(3, 2, 1);
        let b = Matrix::row_vector(&[0.5, -1.0]);
        let logits = linear_head_forward(&h, &Matrix::zeros(2, 2), &b).unwrap();
        assert!((0..3).all(|i| logits.row(i) == b.row(0)));

        assert_eq!(cox_head_forward(&random(3, 2, 1), &[0.0, 0.0]).unwrap(), vec![0.0; 3]);
        let h = Matrix::col_vector(&[1.0, 3.0]);
        assert_eq!(cox_head_forward(&h, &[2.0]).unwrap(), vec![2.0, 6.0]);
    }

    #[test]
    fn single_head_model_equals_head() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![LayerSpec::LinearHead { classes: 2 }],
        };
        let params = ModelParams::<f64>::init(&spec, 5).unwrap();
        let h = random(4, 3, 9);
        let out = model_forward(&spec, &params, &h, None).unwrap();
        let direct = linear_head_forward(&h, params.get(0, "weight").unwrap(), params.get(0, "bias").unwrap()).unwrap();
        assert_eq!(out.output, direct);
        assert!(out.graph.is_none());
    }

    #[test]
    fn permutation_equivariance() {
        let spec = ModelSpec::affinitynet(4, 5, 3, 2);
        let params = ModelParams::<f64>::init(&spec, 11).unwrap();
        let h = random(9, 4, 12);
        let perm = [3, 0, 8, 1, 5, 2, 7, 4, 6];
        let hp = h.gather_rows(&perm);
        let a = model_forward(&spec, &params, &h, None).unwrap().output;
        let b = model_forward(&spec, &params, &hp, None).unwrap().output;
        assert!(a.gather_rows(&perm).max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn given_graph_controls_neighborhoods() {
        let mut spec = ModelSpec::affinitynet(3, 4, 2, 1);
        if let LayerSpec::FeatureAttention { lambda, .. } = &mut spec.layers[0] {
            *lambda = 1.0;
        }
        if let LayerSpec::KnnPooling { lambda, .. } = &mut spec.layers[1] {
            *lambda = 1.0;
        }
        let params = ModelParams::<f64>::init(&spec, 3).unwrap();
        let h = random(4, 3, 5);
        let mut ge = Matrix::zeros(4, 4);
        for (a, b) in [(0, 3), (1, 2)] {
            ge[(a, b)] = 1.0;
            ge[(b, a)] = 1.0;
        }
        let out = model_forward(&spec, &params, &h, Some(&ge)).unwrap();
        let g = out.graph.unwrap();
        assert_eq!(g.neighborhoods.of(0), &[0, 3]);
        assert_eq!(g.neighborhoods.of(2), &[2, 1]);
        assert_eq!(g.scores, ge);
        assert!(matches!(
            model_forward(&spec, &params, &h, None),
            Err(Error::MissingGraph(_))
        ));
    }

    fn model_loss(spec: &ModelSpec, params: &ModelParams<f64>, h: &Matrix<f64>) -> f64 {
        let out = model_forward(spec, params, h, None).unwrap().output;
        out.data().iter().map(|v| v * v).sum()
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let h = random(6, 4, 31);
        for (attention_kernel, graph_kernel) in [
            (KernelKind::Cosine, KernelKind::Cosine),
            (KernelKind::InnerProduct, KernelKind::Cosine),
            (KernelKind::Perceptron, KernelKind::Perceptron),
            (KernelKind::WeightedL2, KernelKind::InnerProduct),
        ] {
            let spec = ModelSpec {
                input_dim: 4,
                layers: vec![
                    LayerSpec::FeatureAttention { k: 2, lambda: 0.0, eta: 1.0, frozen: false },
                    LayerSpec::KnnPooling { out: 3, k: 2, attention_kernel, graph_kernel, lambda: 0.0, eta: 0.5 },
                    LayerSpec::LinearHead { classes: 2 },
                ],
            };
            let mut params = ModelParams::<f64>::init(&spec, 17).unwrap();
            params.layers[0][0].value = random(1, 4, 40).scale(0.3);
            let mut tape = Tape::new();
            let fwd = forward_on_tape(&mut tape, &spec, &params, &h, None, false).unwrap();
            let sq = tape.square(fwd.output);
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            for layer in 0..params.layers.len() {
                for slot in 0..params.layers[layer].len() {
                    if !params.layers[layer][slot].trainable {
                        continue;
                    }
                    let theta = params.layers[layer][slot].value.clone();
                    let analytic = tape.grad(fwd.param_vars[layer][slot]).unwrap().clone();
                    let err = compare_gradient(
                        |m: &Matrix<f64>| {
                            let mut p = params.clone();
                            p.layers[layer][slot].value = m.clone();
                            Ok(model_loss(&spec, &p, &h))
                        },
                        &theta,
                        &analytic,
                        1e-5,
                    )
                    .unwrap();
                    assert!(err <= 1e-4, "{attention_kernel:?} layer {layer} slot {slot}: {err}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = ModelSpec::affinitynet(5, 4, 3, 2);
        let mut params = ModelParams::<f64>::init(&spec, 99).unwrap();
        params.step = 17;
        params.layers[0][0].value = random(1, 5, 1).scale(1.0 / 3.0);
        let text = write_checkpoint(&spec, &params).unwrap();
        let (spec2, params2) = read_checkpoint::<f64>(&text).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(params2.step, 17);
        for (a, b) in params.iter().zip(params2.iter()) {
            let bits = |m: &Matrix<f64>| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert!(read_checkpoint::<f64>(&text.replace("\"version\": 1", "\"version\": 9")).is_err());
    }
}
