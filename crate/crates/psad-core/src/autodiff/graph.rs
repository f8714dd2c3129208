//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass into a
//! linear tape, then replays the tape in reverse to accumulate exact analytic
//! gradients. Graphs are rebuilt per forward pass: block-wise generation feeds
//! selections back into the decoder, so the tape is dynamic by design.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(pub(crate) usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The primitive set, chosen to cover embeddings, attention, gating,
/// personalized position bias, block-wise decoding and every loss term.
#[derive(Debug, Clone)]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    Scale(f64),
    ConcatLastDim,
    Hadamard,
    RowSoftmax,
    Sigmoid,
    Tanh,
    Gelu,
    Log,
    Exp,
    Sum,
    Mean,
    Max,
    Min,
    GatherRows(Vec<usize>),
    MaskedFill { mask: Vec<bool>, value: f64 },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Scale(_) => "scale",
            Primitive::ConcatLastDim => "concat-last-dim",
            Primitive::Hadamard => "hadamard",
            Primitive::RowSoftmax => "row-softmax",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Gelu => "gelu",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Max => "max",
            Primitive::Min => "min",
            Primitive::GatherRows(_) => "gather-rows",
            Primitive::MaskedFill { .. } => "masked-fill",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Prim { kind: Primitive, inputs: Vec<usize> },
    StopGradient,
    Reshape { input: usize },
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the graph's requires-grad
/// leaves. Every trainable leaf present in the graph appears exactly once;
/// leaves a stop-gradient severed from the loss carry an all-zero tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<usize, Vec<f64>>,
}

impl GradientMap {
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(&t.0).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Tensor, &[f64])> {
        self.grads.iter().map(|(id, g)| (Tensor(*id), g.as_slice()))
    }
}

/// Recorded stop-gradient outputs, used by the gradient checker to pin those
/// branches to their base values while it perturbs parameters.
pub type SgBank = Vec<Vec<f64>>;

enum SgMode {
    Off,
    Record(SgBank),
    Playback { bank: Rc<SgBank>, cursor: usize },
}

/// A dynamic computation tape. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    sg: SgMode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            sg: SgMode::Off,
        }
    }

    /// Values-only graph: leaves never require grad, backward is unused.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            sg: SgMode::Off,
        }
    }

    /// Record every stop-gradient output so a later playback graph can reuse it.
    pub fn record_stop_gradients(&mut self) {
        self.sg = SgMode::Record(Vec::new());
    }

    /// Replay stop-gradient outputs from a recorded bank (in recording order).
    pub fn playback_stop_gradients(&mut self, bank: Rc<SgBank>) {
        self.sg = SgMode::Playback { bank, cursor: 0 };
    }

    pub fn take_sg_bank(&mut self) -> SgBank {
        match std::mem::replace(&mut self.sg, SgMode::Off) {
            SgMode::Record(bank) => bank,
            other => {
                self.sg = other;
                Vec::new()
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.0].values.len(), 1);
        self.nodes[t.0].values[0]
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            values,
            shape,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Tensor(id)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(values.len(), numel(&shape), "constant: values/shape mismatch");
        self.push(values, shape, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.constant(vec![v], vec![1])
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        self.constant(vec![0.0; n], shape)
    }

    /// A trainable leaf (ignored when the graph was built with `inference()`).
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(values.len(), numel(&shape), "leaf: values/shape mismatch");
        self.push(values, shape, Op::Leaf, true)
    }

    /// Identity forward; contributes exactly zero gradient upstream.
    pub fn stop_gradient(&mut self, x: Tensor) -> Tensor {
        let shape = self.nodes[x.0].shape.clone();
        let mut values = self.nodes[x.0].values.clone();
        match &mut self.sg {
            SgMode::Off => {}
            SgMode::Record(bank) => bank.push(values.clone()),
            SgMode::Playback { bank, cursor } => {
                let pinned = &bank[*cursor];
                debug_assert_eq!(pinned.len(), values.len(), "sg playback shape drift");
                values.copy_from_slice(pinned);
                *cursor += 1;
            }
        }
        self.push(values, shape, Op::StopGradient, false)
    }

    /// Reinterpret row-major data under a new shape (no computation).
    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let node = &self.nodes[x.0];
        if numel(&shape) != node.values.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", node.shape, shape),
            ));
        }
        let values = node.values.clone();
        let rg = node.requires_grad;
        Ok(self.push(values, shape, Op::Reshape { input: x.0 }, rg))
    }

    // ── primitive application ───────────────────────────────────────────

    pub fn apply_primitive(&mut self, kind: Primitive, inputs: &[Tensor]) -> Result<Tensor> {
        let (values, shape) = self.eval_primitive(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|t| self.nodes[t.0].requires_grad);
        let ids = inputs.iter().map(|t| t.0).collect();
        Ok(self.push(values, shape, Op::Prim { kind, inputs: ids }, requires_grad))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Transpose, &[a])
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Add, &[a, b])
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Result<Tensor> {
        self.apply_primitive(Primitive::Scale(factor), &[a])
    }

    /// `a - b`, as `add(a, scale(b, -1))`.
    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn concat_last_dim(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        self.apply_primitive(Primitive::ConcatLastDim, parts)
    }

    pub fn hadamard(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Hadamard, &[a, b])
    }

    pub fn row_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::RowSoftmax, &[a])
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Tanh, &[a])
    }

    pub fn gelu(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Gelu, &[a])
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Log, &[a])
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Exp, &[a])
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Mean, &[a])
    }

    pub fn max(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Max, &[a])
    }

    pub fn min(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Min, &[a])
    }

    pub fn gather_rows(&mut self, a: Tensor, indices: Vec<usize>) -> Result<Tensor> {
        self.apply_primitive(Primitive::GatherRows(indices), &[a])
    }

    pub fn masked_fill(&mut self, a: Tensor, mask: Vec<bool>, value: f64) -> Result<Tensor> {
        self.apply_primitive(Primitive::MaskedFill { mask, value }, &[a])
    }

    /// Stack 1×d row tensors into an n×d tensor (transpose / concat / transpose).
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::shape("stack-rows", "no rows given"));
        }
        if rows.len() == 1 {
            return Ok(rows[0]);
        }
        let cols: Vec<Tensor> = rows
            .iter()
            .map(|&r| self.transpose(r))
            .collect::<Result<_>>()?;
        let wide = self.concat_last_dim(&cols)?;
        self.transpose(wide)
    }

    /// Clamp values into `[lo, hi]`; clamped entries get zero gradient.
    pub fn clamp(&mut self, x: Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        let below: Vec<bool> = self.values(x).iter().map(|&v| v < lo).collect();
        let above: Vec<bool> = self.values(x).iter().map(|&v| v > hi).collect();
        let mut out = x;
        if below.iter().any(|&b| b) {
            out = self.masked_fill(out, below, lo)?;
        }
        if above.iter().any(|&b| b) {
            out = self.masked_fill(out, above, hi)?;
        }
        Ok(out)
    }

    // ── forward evaluation ──────────────────────────────────────────────

    fn arity(&self, kind: &Primitive, inputs: &[Tensor], expected: usize) -> Result<()> {
        if inputs.len() != expected {
            return Err(Error::shape(
                kind.name(),
                format!("expected {} inputs, got {}", expected, inputs.len()),
            ));
        }
        Ok(())
    }

    fn eval_primitive(&self, kind: &Primitive, inputs: &[Tensor]) -> Result<(Vec<f64>, Vec<usize>)> {
        match kind {
            Primitive::MatMul => {
                self.arity(kind, inputs, 2)?;
                let (a, b) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                let (m, k) = as_2d(kind.name(), &a.shape)?;
                let (k2, n) = as_2d(kind.name(), &b.shape)?;
                if k != k2 {
                    return Err(Error::shape(
                        kind.name(),
                        format!("inner dims differ: {m}x{k} vs {k2}x{n}"),
                    ));
                }
                Ok((matmul_nn(&a.values, &b.values, m, k, n), vec![m, n]))
            }
            Primitive::Transpose => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                let (r, c) = as_2d(kind.name(), &a.shape)?;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = a.values[i * c + j];
                    }
                }
                Ok((out, vec![c, r]))
            }
            Primitive::Add | Primitive::Hadamard => {
                self.arity(kind, inputs, 2)?;
                let (a, b) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                let plan = broadcast_plan(kind.name(), &a.shape, &b.shape)?;
                let out_n = numel(&plan.out_shape);
                let mut out = vec![0.0; out_n];
                let is_add = matches!(kind, Primitive::Add);
                for i in 0..out_n {
                    let av = a.values[plan.index_a(i)];
                    let bv = b.values[plan.index_b(i)];
                    out[i] = if is_add { av + bv } else { av * bv };
                }
                Ok((out, plan.out_shape))
            }
            Primitive::Scale(factor) => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                Ok((a.values.iter().map(|v| v * factor).collect(), a.shape.clone()))
            }
            Primitive::ConcatLastDim => {
                if inputs.is_empty() {
                    return Err(Error::shape(kind.name(), "no inputs"));
                }
                let first = &self.nodes[inputs[0].0];
                let rank = first.shape.len();
                let rows = if rank == 2 { first.shape[0] } else { 1 };
                let mut widths = Vec::with_capacity(inputs.len());
                for t in inputs {
                    let n = &self.nodes[t.0];
                    if n.shape.len() != rank {
                        return Err(Error::shape(
                            kind.name(),
                            format!("mixed ranks {:?} vs {:?}", first.shape, n.shape),
                        ));
                    }
                    let (r, w) = if rank == 2 {
                        (n.shape[0], n.shape[1])
                    } else {
                        (1, n.shape[0])
                    };
                    if r != rows {
                        return Err(Error::shape(
                            kind.name(),
                            format!("row counts differ: {rows} vs {r}"),
                        ));
                    }
                    widths.push(w);
                }
                let total: usize = widths.iter().sum();
                let mut out = vec![0.0; rows * total];
                let mut offset = 0;
                for (t, w) in inputs.iter().zip(&widths) {
                    let n = &self.nodes[t.0];
                    for r in 0..rows {
                        out[r * total + offset..r * total + offset + w]
                            .copy_from_slice(&n.values[r * w..(r + 1) * w]);
                    }
                    offset += w;
                }
                let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
                Ok((out, shape))
            }
            Primitive::RowSoftmax => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                let (r, c) = as_2d(kind.name(), &a.shape)?;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let row = &a.values[i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..c {
                        let e = (row[j] - m).exp();
                        out[i * c + j] = e;
                        s += e;
                    }
                    for j in 0..c {
                        out[i * c + j] /= s;
                    }
                }
                Ok((out, a.shape.clone()))
            }
            Primitive::Sigmoid => self.unary(inputs, kind, |x| 1.0 / (1.0 + (-x).exp())),
            Primitive::Tanh => self.unary(inputs, kind, f64::tanh),
            Primitive::Gelu => self.unary(inputs, kind, gelu),
            Primitive::Exp => self.unary(inputs, kind, f64::exp),
            Primitive::Log => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                for (i, &v) in a.values.iter().enumerate() {
                    if v <= 0.0 {
                        return Err(Error::LogDomain { value: v, index: i });
                    }
                }
                Ok((a.values.iter().map(|v| v.ln()).collect(), a.shape.clone()))
            }
            Primitive::Sum => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                Ok((vec![a.values.iter().sum()], vec![1]))
            }
            Primitive::Mean => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                let n = a.values.len() as f64;
                Ok((vec![a.values.iter().sum::<f64>() / n], vec![1]))
            }
            Primitive::Max => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                Ok((vec![a.values[first_extreme(&a.values, true)]], vec![1]))
            }
            Primitive::Min => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                Ok((vec![a.values[first_extreme(&a.values, false)]], vec![1]))
            }
            Primitive::GatherRows(indices) => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                let (r, c) = as_2d(kind.name(), &a.shape)?;
                for &ix in indices {
                    if ix >= r {
                        return Err(Error::shape(
                            kind.name(),
                            format!("row index {ix} out of range for {r} rows"),
                        ));
                    }
                }
                let mut out = vec![0.0; indices.len() * c];
                for (o, &ix) in indices.iter().enumerate() {
                    out[o * c..(o + 1) * c].copy_from_slice(&a.values[ix * c..(ix + 1) * c]);
                }
                Ok((out, vec![indices.len(), c]))
            }
            Primitive::MaskedFill { mask, value } => {
                self.arity(kind, inputs, 1)?;
                let a = &self.nodes[inputs[0].0];
                if mask.len() != a.values.len() {
                    return Err(Error::shape(
                        kind.name(),
                        format!("mask length {} vs tensor numel {}", mask.len(), a.values.len()),
                    ));
                }
                let out = a
                    .values
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { *value } else { v })
                    .collect();
                Ok((out, a.shape.clone()))
            }
        }
    }

    fn unary(
        &self,
        inputs: &[Tensor],
        kind: &Primitive,
        f: impl Fn(f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        self.arity(kind, inputs, 1)?;
        let a = &self.nodes[inputs[0].0];
        Ok((a.values.iter().map(|&v| f(v)).collect(), a.shape.clone()))
    }

    /// True if any entry of `t` is NaN.
    pub fn has_nan(&self, t: Tensor) -> bool {
        self.nodes[t.0].values.iter().any(|v| v.is_nan())
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// requires-grad leaf in the graph (zero-filled when no gradient flows).
    pub fn backward(&self, loss: Tensor) -> Result<GradientMap> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.values.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_node.shape.clone(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad && id != loss.0 {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::StopGradient => {
                    // severed: nothing flows upstream
                }
                Op::Reshape { input } => {
                    self.accumulate(&mut grads, *input, &g);
                }
                Op::Prim { kind, inputs } => {
                    self.backward_prim(kind, inputs, id, &g, &mut grads);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; node.values.len()]);
                out.insert(id, g);
            }
        }
        Ok(GradientMap { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot => *slot = Some(g.to_vec()),
        }
    }

    fn backward_prim(
        &self,
        kind: &Primitive,
        inputs: &[usize],
        out_id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        match kind {
            Primitive::MatMul => {
                let (a, b) = (&self.nodes[inputs[0]], &self.nodes[inputs[1]]);
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                if self.nodes[inputs[0]].requires_grad {
                    // dA = G @ B^T
                    let da = matmul_nt(g, &b.values, m, n, k);
                    self.accumulate(grads, inputs[0], &da);
                }
                if self.nodes[inputs[1]].requires_grad {
                    // dB = A^T @ G
                    let db = matmul_tn(&a.values, g, m, k, n);
                    self.accumulate(grads, inputs[1], &db);
                }
            }
            Primitive::Transpose => {
                let a = &self.nodes[inputs[0]];
                let (r, c) = (a.shape[0], a.shape[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::Add => {
                let (a, b) = (&self.nodes[inputs[0]], &self.nodes[inputs[1]]);
                let plan = broadcast_plan("add", &a.shape, &b.shape).expect("checked at forward");
                if a.requires_grad {
                    let da = plan.reduce_to_a(g);
                    self.accumulate(grads, inputs[0], &da);
                }
                if b.requires_grad {
                    let db = plan.reduce_to_b(g);
                    self.accumulate(grads, inputs[1], &db);
                }
            }
            Primitive::Hadamard => {
                let (a, b) = (&self.nodes[inputs[0]], &self.nodes[inputs[1]]);
                let plan = broadcast_plan("hadamard", &a.shape, &b.shape).expect("checked at forward");
                let out_n = g.len();
                if a.requires_grad {
                    let mut full = vec![0.0; out_n];
                    for i in 0..out_n {
                        full[i] = g[i] * b.values[plan.index_b(i)];
                    }
                    let da = plan.reduce_to_a(&full);
                    self.accumulate(grads, inputs[0], &da);
                }
                if b.requires_grad {
                    let mut full = vec![0.0; out_n];
                    for i in 0..out_n {
                        full[i] = g[i] * a.values[plan.index_a(i)];
                    }
                    let db = plan.reduce_to_b(&full);
                    self.accumulate(grads, inputs[1], &db);
                }
            }
            Primitive::Scale(factor) => {
                let da: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::ConcatLastDim => {
                let first = &self.nodes[inputs[0]];
                let rank = first.shape.len();
                let rows = if rank == 2 { first.shape[0] } else { 1 };
                let total: usize = inputs
                    .iter()
                    .map(|&i| last_dim(&self.nodes[i].shape))
                    .sum();
                let mut offset = 0;
                for &input in inputs {
                    let n = &self.nodes[input];
                    let w = last_dim(&n.shape);
                    if n.requires_grad {
                        let mut da = vec![0.0; rows * w];
                        for r in 0..rows {
                            da[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, input, &da);
                    }
                    offset += w;
                }
            }
            Primitive::RowSoftmax => {
                let out = &self.nodes[out_id].values;
                let a = &self.nodes[inputs[0]];
                let (r, c) = (a.shape[0], a.shape[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let s = &out[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                    for j in 0..c {
                        da[i * c + j] = s[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::Sigmoid => {
                let out = &self.nodes[out_id].values;
                let da: Vec<f64> = out.iter().zip(g).map(|(&s, &gi)| s * (1.0 - s) * gi).collect();
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::Tanh => {
                let out = &self.nodes[out_id].values;
                let da: Vec<f64> = out.iter().zip(g).map(|(&t, &gi)| (1.0 - t * t) * gi).collect();
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::Gelu => {
                let a = &self.nodes[inputs[0]];
                let da: Vec<f64> = a
                    .values
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| gelu_deriv(x) * gi)
                    .collect();
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::Exp => {
                let out = &self.nodes[out_id].values;
                let da: Vec<f64> = out.iter().zip(g).map(|(&e, &gi)| e * gi).collect();
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::Log => {
                let a = &self.nodes[inputs[0]];
                let da: Vec<f64> = a.values.iter().zip(g).map(|(&x, &gi)| gi / x).collect();
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::Sum => {
                let a = &self.nodes[inputs[0]];
                let da = vec![g[0]; a.values.len()];
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::Mean => {
                let a = &self.nodes[inputs[0]];
                let n = a.values.len() as f64;
                let da = vec![g[0] / n; a.values.len()];
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::Max | Primitive::Min => {
                let a = &self.nodes[inputs[0]];
                let ix = first_extreme(&a.values, matches!(kind, Primitive::Max));
                let mut da = vec![0.0; a.values.len()];
                da[ix] = g[0];
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::GatherRows(indices) => {
                let a = &self.nodes[inputs[0]];
                let c = a.shape[1];
                let mut da = vec![0.0; a.values.len()];
                for (o, &ix) in indices.iter().enumerate() {
                    for j in 0..c {
                        da[ix * c + j] += g[o * c + j];
                    }
                }
                self.accumulate(grads, inputs[0], &da);
            }
            Primitive::MaskedFill { mask, .. } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(mask)
                    .map(|(&gi, &m)| if m { 0.0 } else { gi })
                    .collect();
                self.accumulate(grads, inputs[0], &da);
            }
        }
    }
}

// ── shape helpers ───────────────────────────────────────────────────────

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn as_2d(prim: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(prim, format!("expected 2-D tensor, got {other:?}"))),
    }
}

/// Limited broadcasting for add/hadamard: identical shapes, a 1-element
/// scalar against anything, or a row (1×c) / column (r×1) against an r×c
/// matrix, in either argument position.
struct BroadcastPlan {
    out_shape: Vec<usize>,
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
    a_kind: BroadcastKind,
    b_kind: BroadcastKind,
}

#[derive(Clone, Copy, PartialEq)]
enum BroadcastKind {
    Full,
    Scalar,
    Row,
    Col,
}

fn broadcast_plan(prim: &str, a: &[usize], b: &[usize]) -> Result<BroadcastPlan> {
    let kind_for = |s: &[usize], out: &[usize]| -> Option<BroadcastKind> {
        if s == out {
            return Some(BroadcastKind::Full);
        }
        if numel(s) == 1 {
            return Some(BroadcastKind::Scalar);
        }
        if let ([r, c], [sr, sc]) = (out, s) {
            if *sr == 1 && *sc == *c {
                return Some(BroadcastKind::Row);
            }
            if *sr == *r && *sc == 1 {
                return Some(BroadcastKind::Col);
            }
        }
        None
    };
    let out_shape: Vec<usize> = if numel(a) >= numel(b) { a.to_vec() } else { b.to_vec() };
    let (a_kind, b_kind) = match (kind_for(a, &out_shape), kind_for(b, &out_shape)) {
        (Some(x), Some(y)) => (x, y),
        _ => {
            return Err(Error::shape(
                prim,
                format!("incompatible shapes {a:?} vs {b:?}"),
            ))
        }
    };
    Ok(BroadcastPlan {
        out_shape,
        a_shape: a.to_vec(),
        b_shape: b.to_vec(),
        a_kind,
        b_kind,
    })
}

impl BroadcastPlan {
    fn cols(&self) -> usize {
        last_dim(&self.out_shape)
    }

    fn index(&self, kind: BroadcastKind, flat: usize) -> usize {
        match kind {
            BroadcastKind::Full => flat,
            BroadcastKind::Scalar => 0,
            BroadcastKind::Row => flat % self.cols(),
            BroadcastKind::Col => flat / self.cols(),
        }
    }

    fn index_a(&self, flat: usize) -> usize {
        self.index(self.a_kind, flat)
    }

    fn index_b(&self, flat: usize) -> usize {
        self.index(self.b_kind, flat)
    }

    fn reduce(&self, kind: BroadcastKind, shape: &[usize], g: &[f64]) -> Vec<f64> {
        if kind == BroadcastKind::Full {
            return g.to_vec();
        }
        let mut out = vec![0.0; numel(shape)];
        for (flat, &gv) in g.iter().enumerate() {
            out[self.index(kind, flat)] += gv;
        }
        out
    }

    fn reduce_to_a(&self, g: &[f64]) -> Vec<f64> {
        self.reduce(self.a_kind, &self.a_shape, g)
    }

    fn reduce_to_b(&self, g: &[f64]) -> Vec<f64> {
        self.reduce(self.b_kind, &self.b_shape, g)
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] @ B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] @ B[k,n]^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T @ B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn first_extreme(values: &[f64], want_max: bool) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let better = if want_max { v > values[best] } else { v < values[best] };
        if better {
            best = i;
        }
    }
    best
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
