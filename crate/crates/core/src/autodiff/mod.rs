//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records operations eagerly (define-by-run). Every node keeps its value
//! until the forward pass ends; [`Tape::release`] then drops whatever backward does
//! not need. Reversible segments ([`Tape::reversible`]) record only their outputs:
//! their inputs are dropped when a later segment can reconstruct them, and during
//! backward each segment rebuilds its inputs through [`Reversible::inverse`] and
//! re-executes itself on a local tape to obtain gradients.

pub mod kernels;

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Real, Shape, Tensor};

pub use kernels::ConvSpec;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a tape treats reversible segments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapeMode {
    /// Run segments reversibly. When false they are inlined as ordinary ops.
    pub reversible: bool,
    /// Debug mode: keep every activation and check reconstructed segment inputs
    /// against the stored copies with this relative L∞ bound.
    pub verify_bound: Option<f64>,
}

impl TapeMode {
    pub fn full_storage() -> Self {
        Self {
            reversible: false,
            verify_bound: None,
        }
    }

    pub fn reversible() -> Self {
        Self {
            reversible: true,
            verify_bound: None,
        }
    }

    pub fn debug(bound: f64) -> Self {
        Self {
            reversible: true,
            verify_bound: Some(bound),
        }
    }
}

/// A computation whose `state` inputs can be recomputed from its outputs.
///
/// `context` inputs are needed by both directions and are always retained.
pub trait Reversible<T: Real> {
    fn forward(&self, tape: &mut Tape<'_, T>, state: &[Var], context: &[Var]) -> Result<Vec<Var>>;

    fn inverse(
        &self,
        store: &ParamStore<T>,
        outputs: &[&Tensor<T>],
        context: &[&Tensor<T>],
    ) -> Result<Vec<Tensor<T>>>;
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulBcast(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        eps: f64,
    },
    Gelu(Var),
    SimpleGate(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    PixelShuffle(Var, usize),
    Rfft2(Var),
    Irfft2(Var),
    Sum(Var),
    Mean(Var),
    L1Loss(Var, Var),
    FftL1Loss(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    SegmentOutput {
        segment: usize,
        index: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulBcast(..) => "mul_bcast",
            Op::Conv { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::SimpleGate(_) => "simple_gate",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::PixelShuffle(..) => "pixel_shuffle",
            Op::Rfft2(_) => "rfft2",
            Op::Irfft2(_) => "irfft2",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L1Loss(..) => "l1_loss",
            Op::FftL1Loss(..) => "fft_l1_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SegmentOutput { .. } => "segment_output",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) | Op::SegmentOutput { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulBcast(a, b) => vec![*a, *b],
            Op::L1Loss(a, b) | Op::FftL1Loss(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::SimpleGate(x)
            | Op::Slice { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::PixelShuffle(x, _)
            | Op::Rfft2(x)
            | Op::Irfft2(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Inputs whose values backward reads.
    fn saved(&self) -> Vec<Var> {
        match self {
            Op::Mul(a, b) | Op::MulBcast(a, b) | Op::L1Loss(a, b) | Op::FftL1Loss(a, b) => {
                vec![*a, *b]
            }
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::LayerNorm { x, w, .. } => vec![*x, *w],
            Op::Gelu(x) | Op::SimpleGate(x) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            _ => vec![],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    shape: Shape,
    value: Option<Tensor<T>>,
    requires_grad: bool,
    /// Index of the last node whose backward reads this value.
    last_saver: Option<usize>,
    consumed: bool,
}

struct Segment<'a, T: Real> {
    func: Rc<dyn Reversible<T> + 'a>,
    state: Vec<Var>,
    context: Vec<Var>,
    outputs: Vec<Var>,
}

/// Bytes held for backward after [`Tape::release`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryReport {
    /// Activations retained by ordinary ops.
    pub interior_bytes: usize,
    /// Segment outputs retained as reconstruction anchors.
    pub boundary_bytes: usize,
    /// Boundary bytes per reversible segment, in creation order.
    pub per_segment: Vec<usize>,
}

impl MemoryReport {
    pub fn total(&self) -> usize {
        self.interior_bytes + self.boundary_bytes
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Real> {
    inputs: HashMap<Var, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    fn new() -> Self {
        Self {
            inputs: HashMap::new(),
            params: BTreeMap::new(),
        }
    }

    /// Gradient of a leaf created with [`Tape::leaf`] and `requires_grad = true`.
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    fn add_param(&mut self, id: ParamId, g: Tensor<T>) {
        match self.params.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.params.insert(id, g);
            }
        }
    }

    /// Add every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in &self.params {
            store.accumulate(*id, g)?;
        }
        Ok(())
    }
}

/// Operation record for one forward pass.
pub struct Tape<'a, T: Real> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    segments: Vec<Segment<'a, T>>,
    mode: TapeMode,
    grad_enabled: bool,
    released: bool,
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: TapeMode) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            segments: Vec::new(),
            mode,
            grad_enabled: true,
            released: false,
        }
    }

    /// A tape that records nothing for backward; used for inference and inverses.
    pub fn no_grad(store: &'a ParamStore<T>) -> Self {
        let mut t = Self::new(store, TapeMode::full_storage());
        t.grad_enabled = false;
        t
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let idx = self.nodes.len();
        let inputs = op.inputs();
        let requires_grad = self.grad_enabled
            && match op {
                Op::Param(id) => !self.store.get(id).frozen,
                Op::Input => false,
                _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
            };
        for v in &inputs {
            self.nodes[v.0].consumed = true;
        }
        if requires_grad {
            for v in op.saved() {
                self.nodes[v.0].last_saver = Some(idx);
            }
        }
        self.nodes.push(Node {
            shape: value.shape(),
            value: if matches!(op, Op::Param(_)) {
                None
            } else {
                Some(value)
            },
            op,
            requires_grad,
            last_saver: None,
            consumed: false,
        });
        Ok(Var(idx))
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false).expect("input must be finite")
    }

    /// Leaf node; with `requires_grad` its gradient is reported by [`Gradients::input`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push(Op::Input, value)?;
        self.nodes[v.0].requires_grad = requires_grad && self.grad_enabled;
        Ok(v)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.store.value(id).shape();
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Param(id),
            shape,
            value: None,
            requires_grad: self.grad_enabled && !self.store.get(id).frozen,
            last_saver: None,
            consumed: false,
        });
        Var(idx)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Current value of a node. Released values yield [`Error::MissingValue`].
    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => Ok(self.store.value(*id)),
            (_, Some(t)) => Ok(t),
            (op, None) => Err(Error::MissingValue {
                node: v.0,
                op: op.name(),
            }),
        }
    }

    /// Remove and return a node's value (for scratch tapes).
    pub fn take_value(&mut self, v: Var) -> Result<Tensor<T>> {
        if let Op::Param(id) = self.nodes[v.0].op {
            return Ok(self.store.value(id).clone());
        }
        let op = self.nodes[v.0].op.name();
        self.nodes[v.0]
            .value
            .take()
            .ok_or(Error::MissingValue { node: v.0, op })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a)?.zip_map(self.value(b)?, |x, y| x + y)?;
        self.push(Op::Add(a, b), y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a)?.zip_map(self.value(b)?, |x, y| x - y)?;
        self.push(Op::Sub(a, b), y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a)?.zip_map(self.value(b)?, |x, y| x * y)?;
        self.push(Op::Mul(a, b), y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let y = self.value(x)?.map(|v| v * s);
        self.push(Op::Scale(x, s), y)
    }

    /// `x * s` where `s` is (1|b, 1|c, 1, 1), broadcast over the remaining axes.
    pub fn mul_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape(x);
        let [sb, sc, sh, sw] = self.shape(s);
        if (sb != 1 && sb != b) || (sc != 1 && sc != c) || sh != 1 || sw != 1 {
            return Err(Error::shape(
                "mul_bcast",
                format!("{:?} by {:?}", self.shape(x), self.shape(s)),
            ));
        }
        let xv = self.value(x)?;
        let sv = self.value(s)?;
        let mut y = xv.clone();
        let hw = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let f = sv.data()[(if sb == 1 { 0 } else { bi }) * sc + if sc == 1 { 0 } else { ci }];
                for v in &mut y.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    *v = *v * f;
                }
            }
        }
        self.push(Op::MulBcast(x, s), y)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let bias = match b {
            Some(b) => Some(self.value(b)?),
            None => None,
        };
        let y = kernels::conv2d(self.value(x)?, self.value(w)?, bias, spec)?;
        self.push(Op::Conv { x, w, b, spec }, y)
    }

    pub fn layer_norm(&mut self, x: Var, w: Var, b: Var, eps: f64) -> Result<Var> {
        let y = kernels::layer_norm(self.value(x)?, self.value(w)?, self.value(b)?, eps)?;
        self.push(Op::LayerNorm { x, w, b, eps }, y)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x)?.map(kernels::gelu);
        self.push(Op::Gelu(x), y)
    }

    /// Product of the two channel halves.
    pub fn simple_gate(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape(x);
        if c % 2 != 0 {
            return Err(Error::shape("simple_gate", format!("{c} channels")));
        }
        let half = c / 2;
        let plane = h * w;
        let xv = self.value(x)?;
        let mut y = Tensor::zeros([b, half, h, w]);
        for bi in 0..b {
            let a = &xv.data()[bi * c * plane..(bi * c + half) * plane];
            let g = &xv.data()[(bi * c + half) * plane..(bi + 1) * c * plane];
            for (i, o) in y.data_mut()[bi * half * plane..(bi + 1) * half * plane]
                .iter_mut()
                .enumerate()
            {
                *o = a[i] * g[i];
            }
        }
        self.push(Op::SimpleGate(x), y)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let [b, _, h, w] = self.shape(first);
        let mut c_total = 0;
        for &v in xs {
            let [vb, vc, vh, vw] = self.shape(v);
            if vb != b || vh != h || vw != w {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(v), self.shape(first)),
                ));
            }
            c_total += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * c_total * plane);
        for bi in 0..b {
            for &v in xs {
                let t = self.value(v)?;
                let c = t.channels();
                data.extend_from_slice(&t.data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let y = Tensor::from_vec([b, c_total, h, w], data)?;
        self.push(Op::Concat(xs.to_vec()), y)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = self.shape(x);
        if start + len > c || len == 0 {
            return Err(Error::shape("slice", format!("{start}+{len} of {c}")));
        }
        let plane = h * w;
        let xv = self.value(x)?;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            data.extend_from_slice(
                &xv.data()[(bi * c + start) * plane..(bi * c + start + len) * plane],
            );
        }
        let y = Tensor::from_vec([b, len, h, w], data)?;
        self.push(Op::Slice { x, start }, y)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.shape(x);
        let plane = h * w;
        let xv = self.value(x)?;
        let inv = 1.0 / plane as f64;
        let data: Vec<T> = (0..b * c)
            .map(|p| {
                let s: f64 = xv.data()[p * plane..(p + 1) * plane]
                    .iter()
                    .map(|v| v.f64())
                    .sum();
                T::c(s * inv)
            })
            .collect();
        let y = Tensor::from_vec([b, c, 1, 1], data)?;
        self.push(Op::GlobalAvgPool(x), y)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = kernels::pixel_shuffle(self.value(x)?, r)?;
        self.push(Op::PixelShuffle(x, r), y)
    }

    /// (b, c, h, w) → (b, 2c, h, w/2+1): real parts then imaginary parts.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::rfft2_planes(self.value(x)?);
        self.push(Op::Rfft2(x), y)
    }

    /// (b, 2c, h, w/2+1) → (b, c, h, width).
    pub fn irfft2(&mut self, x: Var, width: usize) -> Result<Var> {
        let y = kernels::irfft2_planes(self.value(x)?, width)?;
        self.push(Op::Irfft2(x), y)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.sum();
        self.push(Op::Sum(x), Tensor::scalar(T::c(s)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.mean();
        self.push(Op::Mean(x), Tensor::scalar(T::c(s)))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x.f64() - y.f64()).abs())
            .sum();
        let y = Tensor::scalar(T::c(s / av.len() as f64));
        self.push(Op::L1Loss(a, b), y)
    }

    /// Mean absolute difference of the real and imaginary parts of the unnormalized 2-D FFTs.
    pub fn fft_l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("fft_l1_loss", a, b)?;
        let v = kernels::fft_l1(self.value(a)?, self.value(b)?);
        self.push(Op::FftL1Loss(a, b), Tensor::scalar(T::c(v)))
    }

    /// Batch-mean softmax cross-entropy; labels are 0-based.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, _) = kernels::cross_entropy(self.value(logits)?, labels)?;
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(T::c(loss)),
        )
    }

    /// Run `func` as a reversible segment (or inline it when the mode is not reversible).
    pub fn reversible(
        &mut self,
        func: Rc<dyn Reversible<T> + 'a>,
        state: &[Var],
        context: &[Var],
    ) -> Result<Vec<Var>> {
        if !self.mode.reversible || !self.grad_enabled {
            return func.forward(self, state, context);
        }
        let values = {
            let mut scratch = Tape::no_grad(self.store);
            let mut leaf = |t: &Self, v: Var| -> Result<Var> { scratch.leaf(t.value(v)?.clone(), false) };
            let s = state.iter().map(|&v| leaf(self, v)).collect::<Result<Vec<_>>>()?;
            let c = context.iter().map(|&v| leaf(self, v)).collect::<Result<Vec<_>>>()?;
            let outs = func.forward(&mut scratch, &s, &c)?;
            outs.into_iter()
                .map(|v| scratch.take_value(v))
                .collect::<Result<Vec<_>>>()?
        };
        let segment = self.segments.len();
        let first = self.nodes.len();
        let mut outputs = Vec::with_capacity(values.len());
        for (index, value) in values.into_iter().enumerate() {
            let v = self.push(Op::SegmentOutput { segment, index }, value)?;
            self.nodes[v.0].requires_grad = true;
            self.nodes[v.0].last_saver = Some(first);
            outputs.push(v);
        }
        for &v in state.iter().chain(context) {
            self.nodes[v.0].consumed = true;
        }
        for &v in context {
            let ls = &mut self.nodes[v.0].last_saver;
            *ls = Some(ls.map_or(first, |x| x.max(first)));
        }
        self.segments.push(Segment {
            func,
            state: state.to_vec(),
            context: context.to_vec(),
            outputs: outputs.clone(),
        });
        Ok(outputs)
    }

    /// Drop every value backward will not read. Segment inputs that a later segment
    /// can reconstruct are dropped too, unless the tape is in debug mode.
    pub fn release(&mut self) {
        if self.released {
            return;
        }
        self.released = true;
        if self.mode.verify_bound.is_some() {
            return;
        }
        let n = self.nodes.len();
        let mut reconstructed_at: Vec<Option<usize>> = vec![None; n];
        if self.mode.reversible {
            for seg in &self.segments {
                let s0 = seg.outputs[0].0;
                for v in &seg.state {
                    let slot = &mut reconstructed_at[v.0];
                    *slot = Some(slot.map_or(s0, |x| x.max(s0)));
                }
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.value.is_none() {
                continue;
            }
            let sink = !node.consumed;
            let needed = node.last_saver.is_some();
            let reconstructable = match (reconstructed_at[i], node.last_saver) {
                (Some(s0), Some(ls)) => ls < s0,
                (Some(_), None) => true,
                _ => false,
            };
            if (!needed && !sink) || reconstructable {
                node.value = None;
            }
        }
    }

    /// Retained activation bytes, split into interior and segment-boundary storage.
    pub fn memory_report(&mut self) -> MemoryReport {
        self.release();
        let mut report = MemoryReport {
            per_segment: vec![0; self.segments.len()],
            ..Default::default()
        };
        for node in &self.nodes {
            let Some(v) = &node.value else { continue };
            match node.op {
                Op::SegmentOutput { segment, .. } => {
                    report.boundary_bytes += v.bytes();
                    report.per_segment[segment] += v.bytes();
                }
                Op::Param(_) => {}
                _ => report.interior_bytes += v.bytes(),
            }
        }
        report
    }

    /// Backward pass from a scalar loss.
    pub fn backward_scalar(&mut self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::shape("backward", format!("loss shape {shape:?}")));
        }
        self.backward(&[(loss, Tensor::full(shape, T::one()))])
    }

    /// Backward pass seeded with `(output, gradient)` pairs.
    pub fn backward(&mut self, roots: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        self.release();
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        for (v, g) in roots {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape(
                    "backward",
                    format!("seed {:?} for output {:?}", g.shape(), self.shape(*v)),
                ));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        let mut out = Gradients::new();
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input => {
                    if let Some(g) = grads[i].take() {
                        out.inputs.insert(Var(i), g);
                    }
                }
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        out.add_param(*id, g);
                    }
                }
                Op::SegmentOutput { segment, index } => {
                    if *index == 0 {
                        let segment = *segment;
                        self.segment_backward(segment, &mut grads, &mut out)?;
                    }
                }
                _ => {
                    if let Some(g) = grads[i].take() {
                        self.op_backward(i, g, &mut grads)?;
                    }
                }
            }
        }
        Ok(out)
    }

    fn segment_backward(
        &mut self,
        segment: usize,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let seg = &self.segments[segment];
        let func = Rc::clone(&seg.func);
        let (state, context, outputs) = (seg.state.clone(), seg.context.clone(), seg.outputs.clone());

        let recon = {
            let outs = outputs
                .iter()
                .map(|&v| self.value(v))
                .collect::<Result<Vec<_>>>()?;
            let ctx = context
                .iter()
                .map(|&v| self.value(v))
                .collect::<Result<Vec<_>>>()?;
            func.inverse(self.store, &outs, &ctx)?
        };
        if recon.len() != state.len() {
            return Err(Error::shape(
                "segment_inverse",
                format!("{} tensors for {} inputs", recon.len(), state.len()),
            ));
        }
        for (&v, r) in state.iter().zip(recon) {
            if r.shape() != self.shape(v) {
                return Err(Error::shape(
                    "segment_inverse",
                    format!("{:?} vs {:?}", r.shape(), self.shape(v)),
                ));
            }
            let node = &mut self.nodes[v.0];
            match (&node.value, self.mode.verify_bound) {
                (Some(stored), Some(bound)) => {
                    let error = r.rel_linf(stored);
                    if error > bound {
                        return Err(Error::Reconstruction {
                            segment,
                            error,
                            bound,
                        });
                    }
                }
                (Some(_), None) => {}
                (None, _) => node.value = Some(r),
            }
        }

        let roots_needed = outputs.iter().any(|v| grads[v.0].is_some());
        if !roots_needed {
            return Ok(());
        }
        let mut local = Tape::new(self.store, TapeMode::full_storage());
        let map_leaf = |local: &mut Tape<'a, T>, v: Var| -> Result<Var> {
            local.leaf(self.value(v)?.clone(), self.nodes[v.0].requires_grad)
        };
        let ls = state
            .iter()
            .map(|&v| map_leaf(&mut local, v))
            .collect::<Result<Vec<_>>>()?;
        let lc = context
            .iter()
            .map(|&v| map_leaf(&mut local, v))
            .collect::<Result<Vec<_>>>()?;
        let louts = func.forward(&mut local, &ls, &lc)?;
        let roots: Vec<(Var, Tensor<T>)> = louts
            .iter()
            .zip(&outputs)
            .filter_map(|(&lo, o)| grads[o.0].take().map(|g| (lo, g)))
            .collect();
        let lg = local.backward(&roots)?;
        for (lv, &v) in ls.iter().chain(&lc).zip(state.iter().chain(&context)) {
            if let Some(g) = lg.inputs.get(lv) {
                accumulate(grads, v, g.clone());
            }
        }
        for (id, g) in lg.params {
            out.add_param(id, g);
        }
        Ok(())
    }

    fn op_backward(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if rg(v) {
                accumulate(grads, v, t);
            }
        };
        match &node.op {
            Op::Add(a, b) => {
                send(*b, g.clone(), grads);
                send(*a, g, grads);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|v| -v), grads);
                send(*a, g, grads);
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, g.zip_map(self.value(*b)?, |x, y| x * y)?, grads);
                }
                if rg(*b) {
                    send(*b, g.zip_map(self.value(*a)?, |x, y| x * y)?, grads);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                send(*x, g.map(|v| v * s), grads);
            }
            Op::MulBcast(x, s) => {
                let xv = self.value(*x)?;
                let sv = self.value(*s)?;
                let [b, c, h, w] = xv.shape();
                let [sb, sc, _, _] = sv.shape();
                let hw = h * w;
                let sidx = |bi: usize, ci: usize| {
                    (if sb == 1 { 0 } else { bi }) * sc + if sc == 1 { 0 } else { ci }
                };
                if rg(*x) {
                    let mut gx = g.clone();
                    for bi in 0..b {
                        for ci in 0..c {
                            let f = sv.data()[sidx(bi, ci)];
                            for v in &mut gx.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                                *v = *v * f;
                            }
                        }
                    }
                    send(*x, gx, grads);
                }
                if rg(*s) {
                    let mut gs = Tensor::zeros(sv.shape());
                    for bi in 0..b {
                        for ci in 0..c {
                            let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                            let dot: T = g.data()[r.clone()]
                                .iter()
                                .zip(&xv.data()[r])
                                .map(|(&a, &b)| a * b)
                                .sum();
                            let k = sidx(bi, ci);
                            gs.data_mut()[k] = gs.data()[k] + dot;
                        }
                    }
                    send(*s, gs, grads);
                }
            }
            Op::Conv { x, w, b, spec } => {
                let need = [rg(*x), rg(*w), b.is_some_and(rg)];
                let cg = kernels::conv2d_backward(self.value(*x)?, self.value(*w)?, &g, *spec, need)?;
                if let Some(dx) = cg.dx {
                    send(*x, dx, grads);
                }
                if let Some(dw) = cg.dw {
                    send(*w, dw, grads);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    let shape = self.shape(*b);
                    send(*b, db.reshape(shape)?, grads);
                }
            }
            Op::LayerNorm { x, w, b, eps } => {
                let wv = self.value(*w)?;
                let (dx, dw, db) = kernels::layer_norm_backward(self.value(*x)?, wv, &g, *eps);
                send(*x, dx, grads);
                send(*w, dw, grads);
                send(*b, db, grads);
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x)?, |d, v| d * kernels::gelu_grad(v))?;
                send(*x, gx, grads);
            }
            Op::SimpleGate(x) => {
                let xv = self.value(*x)?;
                let [b, c, h, w] = xv.shape();
                let half = c / 2;
                let plane = h * w;
                let mut gx = Tensor::zeros([b, c, h, w]);
                for bi in 0..b {
                    for i in 0..half * plane {
                        let gy = g.data()[bi * half * plane + i];
                        let a = xv.data()[bi * c * plane + i];
                        let z = xv.data()[(bi * c + half) * plane + i];
                        gx.data_mut()[bi * c * plane + i] = gy * z;
                        gx.data_mut()[(bi * c + half) * plane + i] = gy * a;
                    }
                }
                send(*x, gx, grads);
            }
            Op::Concat(xs) => {
                let [b, c_total, h, w] = node.shape;
                let plane = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if rg(v) {
                        let mut data = Vec::with_capacity(b * c * plane);
                        for bi in 0..b {
                            let start = (bi * c_total + offset) * plane;
                            data.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        send(v, Tensor::from_vec([b, c, h, w], data)?, grads);
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let [b, c, h, w] = self.shape(*x);
                let len = node.shape[1];
                let plane = h * w;
                let mut gx = Tensor::zeros([b, c, h, w]);
                for bi in 0..b {
                    let dst = (bi * c + start) * plane;
                    gx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[bi * len * plane..(bi + 1) * len * plane]);
                }
                send(*x, gx, grads);
            }
            Op::GlobalAvgPool(x) => {
                let [b, c, h, w] = self.shape(*x);
                let plane = h * w;
                let inv = T::c(1.0 / plane as f64);
                let mut gx = Tensor::zeros([b, c, h, w]);
                for p in 0..b * c {
                    let v = g.data()[p] * inv;
                    gx.data_mut()[p * plane..(p + 1) * plane]
                        .iter_mut()
                        .for_each(|o| *o = v);
                }
                send(*x, gx, grads);
            }
            Op::PixelShuffle(x, r) => send(*x, kernels::pixel_unshuffle(&g, *r), grads),
            Op::Rfft2(x) => {
                let w = self.shape(*x)[3];
                send(*x, kernels::rfft2_planes_adjoint(&g, w)?, grads);
            }
            Op::Irfft2(x) => send(*x, kernels::irfft2_planes_adjoint(&g), grads),
            Op::Sum(x) => {
                let v = g.data()[0];
                send(*x, Tensor::full(self.shape(*x), v), grads);
            }
            Op::Mean(x) => {
                let shape = self.shape(*x);
                let v = g.data()[0] * T::c(1.0 / numel(shape) as f64);
                send(*x, Tensor::full(shape, v), grads);
            }
            Op::L1Loss(a, b) => {
                let scale = g.data()[0] * T::c(1.0 / numel(self.shape(*a)) as f64);
                let ga = self.value(*a)?.zip_map(self.value(*b)?, |x, y| {
                    let d = x - y;
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })?;
                send(*b, ga.map(|v| -v), grads);
                send(*a, ga, grads);
            }
            Op::FftL1Loss(a, b) => {
                let s = g.data()[0];
                let ga = kernels::fft_l1_grad(self.value(*a)?, self.value(*b)?).map(|v| v * s);
                send(*b, ga.map(|v| -v), grads);
                send(*a, ga, grads);
            }
            Op::CrossEntropy { logits, labels } => {
                let (_, gl) = kernels::cross_entropy(self.value(*logits)?, labels)?;
                let s = g.data()[0];
                send(*logits, gl.map(|v| v * s), grads);
            }
            Op::Input | Op::Param(_) | Op::SegmentOutput { .. } => unreachable!(),
        }
        Ok(())
    }
}

