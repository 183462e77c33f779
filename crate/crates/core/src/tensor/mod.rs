//! Dense f64 tensors recorded on a reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every node created through it; a [`Tensor`] is a cheap
//! handle (tape + node id). Nodes are immutable once created and the tape is
//! strictly append-only, so replaying the same forward with the same inputs
//! is bit-identical. Gradients live in per-node accumulators filled by
//! [`Tape::backward`]; repeated backward calls without [`Tape::zero_grads`]
//! accumulate.
//!
//! Subgradient conventions (fixed for determinism): `relu` and
//! `max_scalar` propagate zero at the kink, `sqrt` propagates zero at zero.

mod gradcheck;
pub(crate) mod linalg;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use linalg::ConvDims;

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    ScalarAdd(usize),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose2d { x: usize, rows: usize, cols: usize },
    Conv2d { x: usize, kernel: usize, dims: ConvDims, cols: Vec<f64> },
    BiasAddChan { x: usize, bias: usize, batch: usize, chan: usize, hw: usize },
    BiasAddRow { x: usize, bias: usize, rows: usize, cols: usize },
    MeanPool2x2 { x: usize, batch_ch: usize, h: usize, w: usize },
    Upsample2x { x: usize, batch_ch: usize, h: usize, w: usize },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    MaxScalar { x: usize, threshold: f64 },
    MeanAll(usize),
    SumAll(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    L2NormRows { x: usize, rows: usize, cols: usize, norms: Vec<f64> },
    SoftmaxXent { logits: usize, labels: Vec<usize>, probs: Vec<f64>, rows: usize, cols: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _) | Op::ScalarAdd(a) => vec![*a],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Transpose2d { x, .. } => vec![*x],
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::BiasAddChan { x, bias, .. } | Op::BiasAddRow { x, bias, .. } => vec![*x, *bias],
            Op::MeanPool2x2 { x, .. } | Op::Upsample2x { x, .. } => vec![*x],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a) => vec![*a],
            Op::MaxScalar { x, .. } => vec![*x],
            Op::MeanAll(a) | Op::SumAll(a) | Op::Reshape(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::L2NormRows { x, .. } => vec![*x],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording tape. Single-threaded by construction (`Rc` interior).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a node on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        Tensor { tape: self.clone(), id }
    }

    /// Differentiable leaf (parameter or input we want gradients for).
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.check_len("leaf", &data, shape)?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    /// Non-differentiable constant.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.check_len("constant", &data, shape)?;
        Ok(self.push(shape.to_vec(), data, Op::Constant, false))
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.push(vec![1], vec![value], Op::Constant, false)
    }

    fn check_len(&self, op: &'static str, data: &[f64], shape: &[usize]) -> Result<()> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                op,
                format!("shape {:?} implies {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(())
    }

    /// Clears every gradient accumulator on the tape.
    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse pass from a scalar loss. Accumulates into the `grad` buffer of
    /// every differentiable node reachable from `loss`.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(Error::TapeMismatch);
        }
        let mut inner = self.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        if numel(&nodes[loss.id].shape) != 1 {
            return Err(Error::NonScalarLoss { shape: nodes[loss.id].shape.clone() });
        }

        // Per-call adjoints; merged into persistent accumulators at the end.
        let mut adj: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        adj[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            // All consumers of `id` have higher ids, so its adjoint is final
            // here; fold it into the persistent accumulator before fanning
            // out to the inputs.
            let Some(go) = adj[id].take() else { continue };
            {
                let node = &mut nodes[id];
                let len = node.data.len();
                let grad = node.grad.get_or_insert_with(|| vec![0.0; len]);
                for (g, &v) in grad.iter_mut().zip(&go) {
                    *g += v;
                }
            }

            macro_rules! acc {
                ($target:expr, $len:expr, $f:expr) => {{
                    let target: usize = $target;
                    if nodes[target].needs_grad {
                        let buf = adj[target].get_or_insert_with(|| vec![0.0; $len]);
                        #[allow(clippy::redundant_closure_call)]
                        ($f)(buf.as_mut_slice());
                    }
                }};
            }

            match &nodes[id].op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for (g, &v) in buf.iter_mut().zip(&go) {
                            *g += v;
                        }
                    });
                    acc!(b, go.len(), |buf: &mut [f64]| {
                        for (g, &v) in buf.iter_mut().zip(&go) {
                            *g += v;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for (g, &v) in buf.iter_mut().zip(&go) {
                            *g += v;
                        }
                    });
                    acc!(b, go.len(), |buf: &mut [f64]| {
                        for (g, &v) in buf.iter_mut().zip(&go) {
                            *g -= v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bdata = nodes[b].data.clone();
                    let adata = nodes[a].data.clone();
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            buf[i] += go[i] * bdata[i];
                        }
                    });
                    acc!(b, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            buf[i] += go[i] * adata[i];
                        }
                    });
                }
                Op::ScalarMul(a, c) => {
                    let (a, c) = (*a, *c);
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            buf[i] += go[i] * c;
                        }
                    });
                }
                Op::ScalarAdd(a) => {
                    let a = *a;
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for (g, &v) in buf.iter_mut().zip(&go) {
                            *g += v;
                        }
                    });
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    let adata = nodes[a].data.clone();
                    let bdata = nodes[b].data.clone();
                    acc!(a, m * k, |buf: &mut [f64]| {
                        linalg::matmul_nt(&go, &bdata, buf, m, n, k);
                    });
                    acc!(b, k * n, |buf: &mut [f64]| {
                        linalg::matmul_tn(&adata, &go, buf, k, m, n);
                    });
                }
                Op::Transpose2d { x, rows, cols } => {
                    let (x, rows, cols) = (*x, *rows, *cols);
                    acc!(x, rows * cols, |buf: &mut [f64]| {
                        // go has shape [cols, rows]
                        for j in 0..cols {
                            for i in 0..rows {
                                buf[i * cols + j] += go[j * rows + i];
                            }
                        }
                    });
                }
                Op::Conv2d { x, kernel, dims, cols } => {
                    let (x, kernel) = (*x, *kernel);
                    let need_x = nodes[x].needs_grad;
                    let need_k = nodes[kernel].needs_grad;
                    let kdata = nodes[kernel].data.clone();
                    let mut dx = if need_x { Some(vec![0.0; nodes[x].data.len()]) } else { None };
                    let mut dk =
                        if need_k { Some(vec![0.0; nodes[kernel].data.len()]) } else { None };
                    linalg::conv2d_backward(
                        &go,
                        &kdata,
                        cols,
                        dims,
                        dx.as_deref_mut(),
                        dk.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        acc!(x, dx.len(), |buf: &mut [f64]| {
                            for (g, v) in buf.iter_mut().zip(&dx) {
                                *g += v;
                            }
                        });
                    }
                    if let Some(dk) = dk {
                        acc!(kernel, dk.len(), |buf: &mut [f64]| {
                            for (g, v) in buf.iter_mut().zip(&dk) {
                                *g += v;
                            }
                        });
                    }
                }
                Op::BiasAddChan { x, bias, batch, chan, hw } => {
                    let (x, bias, batch, chan, hw) = (*x, *bias, *batch, *chan, *hw);
                    acc!(x, go.len(), |buf: &mut [f64]| {
                        for (g, &v) in buf.iter_mut().zip(&go) {
                            *g += v;
                        }
                    });
                    acc!(bias, chan, |buf: &mut [f64]| {
                        for b in 0..batch {
                            for c in 0..chan {
                                let base = (b * chan + c) * hw;
                                let mut s = 0.0;
                                for i in 0..hw {
                                    s += go[base + i];
                                }
                                buf[c] += s;
                            }
                        }
                    });
                }
                Op::BiasAddRow { x, bias, rows, cols } => {
                    let (x, bias, rows, cols) = (*x, *bias, *rows, *cols);
                    acc!(x, go.len(), |buf: &mut [f64]| {
                        for (g, &v) in buf.iter_mut().zip(&go) {
                            *g += v;
                        }
                    });
                    acc!(bias, cols, |buf: &mut [f64]| {
                        for r in 0..rows {
                            for c in 0..cols {
                                buf[c] += go[r * cols + c];
                            }
                        }
                    });
                }
                Op::MeanPool2x2 { x, batch_ch, h, w } => {
                    let (x, batch_ch, h, w) = (*x, *batch_ch, *h, *w);
                    let (oh, ow) = (h / 2, w / 2);
                    acc!(x, batch_ch * h * w, |buf: &mut [f64]| {
                        for bc in 0..batch_ch {
                            let src = &go[bc * oh * ow..(bc + 1) * oh * ow];
                            let dst = &mut buf[bc * h * w..(bc + 1) * h * w];
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = src[oy * ow + ox] * 0.25;
                                    dst[(2 * oy) * w + 2 * ox] += g;
                                    dst[(2 * oy) * w + 2 * ox + 1] += g;
                                    dst[(2 * oy + 1) * w + 2 * ox] += g;
                                    dst[(2 * oy + 1) * w + 2 * ox + 1] += g;
                                }
                            }
                        }
                    });
                }
                Op::Upsample2x { x, batch_ch, h, w } => {
                    let (x, batch_ch, h, w) = (*x, *batch_ch, *h, *w);
                    let (oh, ow) = (2 * h, 2 * w);
                    acc!(x, batch_ch * h * w, |buf: &mut [f64]| {
                        for bc in 0..batch_ch {
                            let src = &go[bc * oh * ow..(bc + 1) * oh * ow];
                            let dst = &mut buf[bc * h * w..(bc + 1) * h * w];
                            for iy in 0..h {
                                for ix in 0..w {
                                    dst[iy * w + ix] += src[(2 * iy) * ow + 2 * ix]
                                        + src[(2 * iy) * ow + 2 * ix + 1]
                                        + src[(2 * iy + 1) * ow + 2 * ix]
                                        + src[(2 * iy + 1) * ow + 2 * ix + 1];
                                }
                            }
                        }
                    });
                }
                Op::Relu(a) => {
                    let a = *a;
                    let xdata = nodes[a].data.clone();
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            if xdata[i] > 0.0 {
                                buf[i] += go[i];
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let y = nodes[id].data.clone();
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            buf[i] += go[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Exp(a) => {
                    let a = *a;
                    let y = nodes[id].data.clone();
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            buf[i] += go[i] * y[i];
                        }
                    });
                }
                Op::Log(a) => {
                    let a = *a;
                    let xdata = nodes[a].data.clone();
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            buf[i] += go[i] / xdata[i];
                        }
                    });
                }
                Op::Square(a) => {
                    let a = *a;
                    let xdata = nodes[a].data.clone();
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            buf[i] += go[i] * 2.0 * xdata[i];
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let y = nodes[id].data.clone();
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            // subgradient 0 at x == 0
                            if y[i] > 0.0 {
                                buf[i] += go[i] / (2.0 * y[i]);
                            }
                        }
                    });
                }
                Op::MaxScalar { x, threshold } => {
                    let (x, t) = (*x, *threshold);
                    let xdata = nodes[x].data.clone();
                    acc!(x, go.len(), |buf: &mut [f64]| {
                        for i in 0..buf.len() {
                            // adjoint 0 at exact equality
                            if xdata[i] > t {
                                buf[i] += go[i];
                            }
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let n = nodes[a].data.len();
                    let g = go[0] / n as f64;
                    acc!(a, n, |buf: &mut [f64]| {
                        for v in buf.iter_mut() {
                            *v += g;
                        }
                    });
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let n = nodes[a].data.len();
                    let g = go[0];
                    acc!(a, n, |buf: &mut [f64]| {
                        for v in buf.iter_mut() {
                            *v += g;
                        }
                    });
                }
                Op::Reshape(a) => {
                    let a = *a;
                    acc!(a, go.len(), |buf: &mut [f64]| {
                        for (g, &v) in buf.iter_mut().zip(&go) {
                            *g += v;
                        }
                    });
                }
                Op::Concat { inputs, axis } => {
                    let inputs = inputs.clone();
                    let axis = *axis;
                    let out_shape = nodes[id].shape.clone();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total_axis = out_shape[axis];
                    let mut axis_off = 0;
                    for &inp in &inputs {
                        let ext = nodes[inp].shape[axis];
                        let len = nodes[inp].data.len();
                        let start = axis_off;
                        acc!(inp, len, |buf: &mut [f64]| {
                            for o in 0..outer {
                                let src =
                                    &go[(o * total_axis + start) * inner..][..ext * inner];
                                let dst = &mut buf[o * ext * inner..(o + 1) * ext * inner];
                                for (g, &v) in dst.iter_mut().zip(src) {
                                    *g += v;
                                }
                            }
                        });
                        axis_off += ext;
                    }
                }
                Op::L2NormRows { x, rows, cols, norms } => {
                    let (x, rows, cols) = (*x, *rows, *cols);
                    let norms = norms.clone();
                    let y = nodes[id].data.clone();
                    acc!(x, rows * cols, |buf: &mut [f64]| {
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &go[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let br = &mut buf[r * cols..(r + 1) * cols];
                            for i in 0..cols {
                                br[i] += (gr[i] - yr[i] * dot) / norms[r];
                            }
                        }
                    });
                }
                Op::SoftmaxXent { logits, labels, probs, rows, cols } => {
                    let (logits, rows, cols) = (*logits, *rows, *cols);
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let g = go[0] / rows as f64;
                    acc!(logits, rows * cols, |buf: &mut [f64]| {
                        for r in 0..rows {
                            for c in 0..cols {
                                let ind = if c == labels[r] { 1.0 } else { 0.0 };
                                buf[r * cols + c] += g * (probs[r * cols + c] - ind);
                            }
                        }
                    });
                }
            }
        }

        Ok(())
    }
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        debug_assert_eq!(inner.nodes[self.id].data.len(), 1);
        inner.nodes[self.id].data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    /// Transitive closure of the node ids feeding this tensor (inclusive).
    pub fn ancestor_ids(&self) -> Vec<usize> {
        let inner = self.tape.inner.borrow();
        let mut seen = vec![false; self.id + 1];
        let mut stack = vec![self.id];
        while let Some(id) = stack.pop() {
            if seen[id] {
                continue;
            }
            seen[id] = true;
            for inp in inner.nodes[id].op.inputs() {
                if !seen[inp] {
                    stack.push(inp);
                }
            }
        }
        (0..=self.id).filter(|&i| seen[i]).collect()
    }

    fn same_tape(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::TapeMismatch)
        }
    }

    fn binary_elementwise(
        &self,
        other: &Tensor,
        opname: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.same_tape(other)?;
        let (shape, data, needs) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    op: opname,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let data: Vec<f64> =
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(shape, data, op(self.id, other.id), needs))
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Tensor {
        let (shape, data, needs) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            (a.shape.clone(), a.data.iter().map(|&x| f(x)).collect(), a.needs_grad)
        };
        self.tape.push(shape, data, op(self.id), needs)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "subtract", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "multiply", |a, b| a * b, Op::Mul)
    }

    pub fn scalar_mul(&self, c: f64) -> Tensor {
        self.unary(|x| x * c, |a| Op::ScalarMul(a, c))
    }

    pub fn scalar_add(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, Op::ScalarAdd)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid,
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, Op::Square)
    }

    /// Elementwise absolute value, composed as `relu(x) + relu(-x)` so the
    /// subgradient at 0 is the fixed relu convention (0).
    pub fn abs(&self) -> Result<Tensor> {
        self.relu().add(&self.scalar_mul(-1.0).relu())
    }

    pub fn log(&self) -> Result<Tensor> {
        {
            let inner = self.tape.inner.borrow();
            if let Some(&bad) =
                inner.nodes[self.id].data.iter().find(|&&x| x <= 0.0)
            {
                return Err(Error::invalid("log", format!("non-positive value {bad}")));
            }
        }
        Ok(self.unary(f64::ln, Op::Log))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        {
            let inner = self.tape.inner.borrow();
            if let Some(&bad) = inner.nodes[self.id].data.iter().find(|&&x| x < 0.0) {
                return Err(Error::invalid("sqrt", format!("negative value {bad}")));
            }
        }
        Ok(self.unary(f64::sqrt, Op::Sqrt))
    }

    /// Elementwise `max(x, threshold)`; adjoint is 0 on the inactive branch
    /// and at exact equality.
    pub fn max_scalar(&self, threshold: f64) -> Tensor {
        self.unary(|x| x.max(threshold), |x| Op::MaxScalar { x, threshold })
    }

    /// Elementwise `min(x, c)`, composed as `-max(-x, -c)`.
    pub fn min_scalar(&self, c: f64) -> Tensor {
        self.scalar_mul(-1.0).max_scalar(-c).scalar_mul(-1.0)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let (data, needs) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if a.data.is_empty() {
                return Err(Error::invalid("mean-reduce", "empty tensor"));
            }
            (a.data.iter().sum::<f64>() / a.data.len() as f64, a.needs_grad)
        };
        Ok(self.tape.push(vec![1], vec![data], Op::MeanAll(self.id), needs))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let (data, needs) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            (a.data.iter().sum::<f64>(), a.needs_grad)
        };
        Ok(self.tape.push(vec![1], vec![data], Op::SumAll(self.id), needs))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let (data, needs, old) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            (a.data.clone(), a.needs_grad, a.shape.clone())
        };
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: old, rhs: shape.to_vec() });
        }
        Ok(self.tape.push(shape.to_vec(), data, Op::Reshape(self.id), needs))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (m, k, n, data, needs) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = vec![0.0; m * n];
            linalg::matmul_nn(&a.data, &b.data, &mut data, m, k, n);
            (m, k, n, data, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(
            vec![m, n],
            data,
            Op::Matmul { a: self.id, b: other.id, m, k, n },
            needs,
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (rows, cols, data, needs) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::invalid("transpose", format!("need 2-d, got {:?}", a.shape)));
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    data[j * rows + i] = a.data[i * cols + j];
                }
            }
            (rows, cols, data, a.needs_grad)
        };
        Ok(self.tape.push(
            vec![cols, rows],
            data,
            Op::Transpose2d { x: self.id, rows, cols },
            needs,
        ))
    }

    /// 2-D convolution, stride 1, zero padding, odd kernel extents.
    /// `self` is `[batch, c_in, h, w]`, `kernel` is `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        self.same_tape(kernel)?;
        let (dims, out, cols, needs) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let k = &inner.nodes[kernel.id];
            if x.shape.len() != 4 || k.shape.len() != 4 || x.shape[1] != k.shape[1] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape.clone(),
                    rhs: k.shape.clone(),
                });
            }
            if k.shape[2] % 2 == 0 || k.shape[3] % 2 == 0 {
                return Err(Error::invalid(
                    "conv2d",
                    format!("kernel extents must be odd, got {:?}", k.shape),
                ));
            }
            let dims = ConvDims {
                batch: x.shape[0],
                c_in: x.shape[1],
                h: x.shape[2],
                w: x.shape[3],
                c_out: k.shape[0],
                kh: k.shape[2],
                kw: k.shape[3],
            };
            let (out, cols) = linalg::conv2d_forward(&x.data, &k.data, &dims);
            (dims, out, cols, x.needs_grad || k.needs_grad)
        };
        let shape = vec![dims.batch, dims.c_out, dims.h, dims.w];
        Ok(self.tape.push(
            shape,
            out,
            Op::Conv2d { x: self.id, kernel: kernel.id, dims, cols },
            needs,
        ))
    }

    /// Adds a per-channel bias to a `[batch, c, h, w]` tensor.
    pub fn bias_add_chan(&self, bias: &Tensor) -> Result<Tensor> {
        self.same_tape(bias)?;
        let (shape, data, meta, needs) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let b = &inner.nodes[bias.id];
            if x.shape.len() != 4 || b.shape.len() != 1 || b.shape[0] != x.shape[1] {
                return Err(Error::ShapeMismatch {
                    op: "bias-add-channel",
                    lhs: x.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (batch, chan) = (x.shape[0], x.shape[1]);
            let hw = x.shape[2] * x.shape[3];
            let mut data = x.data.clone();
            for bi in 0..batch {
                for c in 0..chan {
                    let off = (bi * chan + c) * hw;
                    for i in 0..hw {
                        data[off + i] += b.data[c];
                    }
                }
            }
            (x.shape.clone(), data, (batch, chan, hw), x.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::BiasAddChan {
                x: self.id,
                bias: bias.id,
                batch: meta.0,
                chan: meta.1,
                hw: meta.2,
            },
            needs,
        ))
    }

    /// Adds a length-`c` bias to every row of a `[r, c]` tensor.
    pub fn bias_add_row(&self, bias: &Tensor) -> Result<Tensor> {
        self.same_tape(bias)?;
        let (shape, data, meta, needs) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            let b = &inner.nodes[bias.id];
            if x.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != x.shape[1] {
                return Err(Error::ShapeMismatch {
                    op: "bias-add-row",
                    lhs: x.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (rows, cols) = (x.shape[0], x.shape[1]);
            let mut data = x.data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += b.data[c];
                }
            }
            (x.shape.clone(), data, (rows, cols), x.needs_grad || b.needs_grad)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::BiasAddRow { x: self.id, bias: bias.id, rows: meta.0, cols: meta.1 },
            needs,
        ))
    }

    /// 2x2 mean pooling with stride 2 on a `[batch, c, h, w]` tensor.
    pub fn mean_pool2x2(&self) -> Result<Tensor> {
        let (shape, data, meta, needs) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            if x.shape.len() != 4 || x.shape[2] % 2 != 0 || x.shape[3] % 2 != 0 {
                return Err(Error::invalid(
                    "mean-pool-2x2",
                    format!("need 4-d with even spatial extents, got {:?}", x.shape),
                ));
            }
            let (h, w) = (x.shape[2], x.shape[3]);
            let batch_ch = x.shape[0] * x.shape[1];
            let (oh, ow) = (h / 2, w / 2);
            let mut data = vec![0.0; batch_ch * oh * ow];
            for bc in 0..batch_ch {
                let src = &x.data[bc * h * w..(bc + 1) * h * w];
                let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = 0.25
                            * (src[(2 * oy) * w + 2 * ox]
                                + src[(2 * oy) * w + 2 * ox + 1]
                                + src[(2 * oy + 1) * w + 2 * ox]
                                + src[(2 * oy + 1) * w + 2 * ox + 1]);
                    }
                }
            }
            let shape = vec![x.shape[0], x.shape[1], oh, ow];
            (shape, data, (batch_ch, h, w), x.needs_grad)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::MeanPool2x2 { x: self.id, batch_ch: meta.0, h: meta.1, w: meta.2 },
            needs,
        ))
    }

    /// Nearest-neighbor 2x upsampling on a `[batch, c, h, w]` tensor.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let (shape, data, meta, needs) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            if x.shape.len() != 4 {
                return Err(Error::invalid(
                    "upsample-2x",
                    format!("need 4-d, got {:?}", x.shape),
                ));
            }
            let (h, w) = (x.shape[2], x.shape[3]);
            let batch_ch = x.shape[0] * x.shape[1];
            let (oh, ow) = (2 * h, 2 * w);
            let mut data = vec![0.0; batch_ch * oh * ow];
            for bc in 0..batch_ch {
                let src = &x.data[bc * h * w..(bc + 1) * h * w];
                let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
                for iy in 0..h {
                    for ix in 0..w {
                        let v = src[iy * w + ix];
                        dst[(2 * iy) * ow + 2 * ix] = v;
                        dst[(2 * iy) * ow + 2 * ix + 1] = v;
                        dst[(2 * iy + 1) * ow + 2 * ix] = v;
                        dst[(2 * iy + 1) * ow + 2 * ix + 1] = v;
                    }
                }
            }
            let shape = vec![x.shape[0], x.shape[1], oh, ow];
            (shape, data, (batch_ch, h, w), x.needs_grad)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::Upsample2x { x: self.id, batch_ch: meta.0, h: meta.1, w: meta.2 },
            needs,
        ))
    }

    /// L2-normalizes along the last axis. Rejects rows with (near-)zero norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (shape, data, norms, meta, needs) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            if x.shape.is_empty() {
                return Err(Error::invalid("l2-normalize", "need at least 1-d"));
            }
            let cols = *x.shape.last().unwrap();
            let rows = x.data.len() / cols;
            let mut data = vec![0.0; x.data.len()];
            let mut norms = vec![0.0; rows];
            for r in 0..rows {
                let src = &x.data[r * cols..(r + 1) * cols];
                let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    return Err(Error::invalid(
                        "l2-normalize",
                        format!("row {r} has zero norm"),
                    ));
                }
                for c in 0..cols {
                    data[r * cols + c] = src[c] / norm;
                }
                norms[r] = norm;
            }
            (x.shape.clone(), data, norms, (rows, cols), x.needs_grad)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::L2NormRows { x: self.id, rows: meta.0, cols: meta.1, norms },
            needs,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`. Scalar output.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (loss, probs, meta, needs) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id];
            if x.shape.len() != 2 || x.shape[0] != labels.len() {
                return Err(Error::invalid(
                    "cross-entropy",
                    format!("logits {:?} vs {} labels", x.shape, labels.len()),
                ));
            }
            let (rows, cols) = (x.shape[0], x.shape[1]);
            if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
                return Err(Error::invalid(
                    "cross-entropy",
                    format!("label {bad} out of range for {cols} classes"),
                ));
            }
            let mut probs = vec![0.0; rows * cols];
            let mut loss = 0.0;
            for r in 0..rows {
                let row = &x.data[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for c in 0..cols {
                    let e = (row[c] - m).exp();
                    probs[r * cols + c] = e;
                    s += e;
                }
                for c in 0..cols {
                    probs[r * cols + c] /= s;
                }
                loss -= row[labels[r]] - m - s.ln();
            }
            loss /= rows as f64;
            (loss, probs, (rows, cols), x.needs_grad)
        };
        Ok(self.tape.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
                rows: meta.0,
                cols: meta.1,
            },
            needs,
        ))
    }
}

/// Concatenates tensors of equal rank along `axis`.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    for p in parts.iter().skip(1) {
        first.same_tape(p)?;
    }
    let (shape, data, needs) = {
        let inner = first.tape.inner.borrow();
        let base = inner.nodes[first.id].shape.clone();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total_axis = 0;
        let mut needs = false;
        for p in parts {
            let n = &inner.nodes[p.id];
            if n.shape.len() != base.len()
                || n.shape
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: n.shape.clone(),
                });
            }
            total_axis += n.shape[axis];
            needs |= n.needs_grad;
        }
        let mut shape = base.clone();
        shape[axis] = total_axis;
        let outer: usize = shape[..axis].iter().product();
        let inner_sz: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&shape)];
        let mut axis_off = 0;
        for p in parts {
            let n = &inner.nodes[p.id];
            let ext = n.shape[axis];
            for o in 0..outer {
                let src = &n.data[o * ext * inner_sz..(o + 1) * ext * inner_sz];
                let dst = &mut data[(o * total_axis + axis_off) * inner_sz..][..ext * inner_sz];
                dst.copy_from_slice(src);
            }
            axis_off += ext;
        }
        (shape, data, needs)
    };
    Ok(first.tape.push(
        shape,
        data,
        Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis },
        needs,
    ))
}
