//! Tape-based computation graph over [`Tensor`] with reverse-mode backprop.
//!
//! Forward values are computed eagerly as ops are recorded, so node ids are
//! already in topological order and the backward pass is a single reverse
//! sweep. Trainable parameters live outside the graph in an [`Arena`] of
//! named collections; a `Param` leaf copies the current value in and routes
//! gradients back out.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tensor::Tensor;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Handle to one parameter collection (one network's weights).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SetId(usize);

impl SetId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(index: usize) -> SetId {
        SetId(index)
    }
}

/// One named parameter array with its gradient accumulator.
///
/// `value` and `grad` always have identical shape.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// A named collection of parameters, e.g. all of one network's weights.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub name: String,
    pub params: Vec<ParamTensor>,
}

impl ParamSet {
    /// Total number of scalar parameters in the collection.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Global L2 norm of the gradient across the whole collection.
    pub fn grad_l2(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Clone the current gradients, one tensor per parameter.
    pub fn grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    /// Overwrite gradients from a snapshot taken with [`ParamSet::grads`].
    pub fn set_grads(&mut self, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.params.len(), "grad snapshot length mismatch");
        for (p, g) in self.params.iter_mut().zip(grads) {
            assert_eq!(p.grad.shape(), g.shape(), "grad snapshot shape mismatch");
            p.grad = g.clone();
        }
    }

    /// `grad += c * g` for a snapshot `g`.
    pub fn add_scaled_grads(&mut self, grads: &[Tensor], c: f64) {
        assert_eq!(grads.len(), self.params.len(), "grad snapshot length mismatch");
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += c * b;
            }
        }
    }
}

/// Owns every parameter collection in a system.
#[derive(Debug, Clone, Default)]
pub struct Arena {
    sets: Vec<ParamSet>,
}

impl Arena {
    pub fn new() -> Self {
        Arena::default()
    }

    pub fn add_set(&mut self, name: impl Into<String>) -> SetId {
        self.sets.push(ParamSet {
            name: name.into(),
            params: Vec::new(),
        });
        SetId(self.sets.len() - 1)
    }

    /// Registers a parameter; its gradient starts at zero. Returns the index
    /// within the set.
    pub fn add_param(&mut self, set: SetId, name: impl Into<String>, value: Tensor) -> usize {
        let grad = Tensor::zeros(value.shape());
        let params = &mut self.sets[set.0].params;
        params.push(ParamTensor {
            name: name.into(),
            value,
            grad,
        });
        params.len() - 1
    }

    pub fn set(&self, id: SetId) -> &ParamSet {
        &self.sets[id.0]
    }

    pub fn set_mut(&mut self, id: SetId) -> &mut ParamSet {
        &mut self.sets[id.0]
    }

    pub fn sets(&self) -> &[ParamSet] {
        &self.sets
    }

    pub fn zero_all_grads(&mut self) {
        for s in &mut self.sets {
            s.zero_grads();
        }
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    /// Zero-pad so the output length equals the input length (stride 1 only).
    Same,
    /// No padding; output length is `(len - kernel) / stride + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: PaddingMode,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel < 1 || self.stride < 1 {
            return Err(Error::Config(format!(
                "conv1d requires kernel >= 1 and stride >= 1, got kernel {} stride {}",
                self.kernel, self.stride
            )));
        }
        if self.padding == PaddingMode::Same && self.stride != 1 {
            return Err(Error::Config(
                "conv1d 'same' padding requires stride 1".into(),
            ));
        }
        Ok(())
    }

    pub fn out_len(&self, in_len: usize) -> Result<usize> {
        match self.padding {
            PaddingMode::Same => Ok(in_len),
            PaddingMode::Valid => {
                if in_len < self.kernel {
                    return Err(Error::Config(format!(
                        "conv1d 'valid' padding needs length >= kernel ({} < {})",
                        in_len, self.kernel
                    )));
                }
                Ok((in_len - self.kernel) / self.stride + 1)
            }
        }
    }

    fn pad_left(&self) -> usize {
        match self.padding {
            PaddingMode::Same => (self.kernel - 1) / 2,
            PaddingMode::Valid => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    /// Leaf holding fixed data; receives no gradient routing.
    Const,
    /// Leaf bound to `arena.set(set).params[index]`; gradients accumulate there.
    Param { set: SetId, index: usize },
    /// inputs `[x, w, b]`: `y = x . w + b` with x `(batch, in)`, w `(in, out)`.
    Dense,
    /// inputs `[x, w, b]`: cross-correlation, x `(batch, ch, len)`, w `(filters, ch, kernel)`.
    Conv1d(ConvSpec),
    Relu,
    Tanh,
    Sigmoid,
    /// Forward `x >= 0 -> +1, x < 0 -> -1`; backward passes gradients through
    /// unchanged (straight-through estimator).
    SteSign,
    /// Same data, new shape (the node's value carries the target shape).
    Reshape,
    /// Elementwise sum of two equal-shape tensors.
    Add,
    /// `y = c * x`.
    Scale(f64),
    /// Concatenate two rank-2 tensors along axis 1.
    Concat,
    /// inputs `[pred, target]`, both `(batch, w)`: mean over rows of the
    /// per-row L1 distance. Scalar output.
    L1Loss,
    /// `(batch,)` or `(batch, 1)` -> scalar mean.
    BatchMean,
    /// `(batch,)` or `(batch, 1)` -> scalar `log((1/b) sum exp(t_i))`,
    /// computed max-shifted.
    LogMeanExp,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// The computation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("forward output of {:?}", op)));
        }
        Ok(self.push(op, inputs, value))
    }

    // -- leaves ------------------------------------------------------------

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_checked(Op::Const, vec![], value)
    }

    /// Binds the current value of `arena.set(set).params[index]` as a leaf.
    pub fn param(&mut self, arena: &Arena, set: SetId, index: usize) -> NodeId {
        let value = arena.set(set).params[index].value.clone();
        debug_assert!(value.all_finite(), "parameter {} holds non-finite values", index);
        self.push(Op::Param { set, index }, vec![], value)
    }

    // -- layers ------------------------------------------------------------

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, in_w) = self.value(x).dims2();
        let (w_in, w_out) = self.value(w).dims2();
        if in_w != w_in || self.value(b).shape() != [w_out] {
            return Err(Error::Config(format!(
                "dense shape mismatch: input (_, {in_w}), weights ({w_in}, {w_out}), bias {:?}",
                self.value(b).shape()
            )));
        }
        let mut out = Tensor::zeros(&[batch, w_out]);
        gemm(
            1.0,
            self.value(x).data(),
            (batch, in_w),
            false,
            self.value(w).data(),
            (w_in, w_out),
            false,
            0.0,
            out.data_mut(),
            (batch, w_out),
        );
        let bias = self.value(b).data();
        for row in 0..batch {
            let slice = &mut out.data_mut()[row * w_out..(row + 1) * w_out];
            for (o, bv) in slice.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push_checked(Op::Dense, vec![x, w, b], out)
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec) -> Result<NodeId> {
        spec.validate()?;
        let (batch, ch, len) = self.value(x).dims3();
        let (filters, w_ch, kernel) = self.value(w).dims3();
        if ch != spec.in_channels || w_ch != spec.in_channels {
            return Err(Error::Config(format!(
                "conv1d channel mismatch: input has {ch}, weights have {w_ch}, spec expects {}",
                spec.in_channels
            )));
        }
        if filters != spec.out_filters || kernel != spec.kernel {
            return Err(Error::Config("conv1d weight shape disagrees with spec".into()));
        }
        if self.value(b).shape() != [filters] {
            return Err(Error::Config("conv1d bias shape mismatch".into()));
        }
        let out_len = spec.out_len(len)?;
        let pad_left = spec.pad_left() as isize;

        let mut out = Tensor::zeros(&[batch, filters, out_len]);
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bs = self.value(b).data();
            let os = out.data_mut();
            for bi in 0..batch {
                for f in 0..filters {
                    for t in 0..out_len {
                        let mut acc = bs[f];
                        for c in 0..ch {
                            let wrow = &ws[(f * ch + c) * kernel..(f * ch + c + 1) * kernel];
                            let xrow = &xs[(bi * ch + c) * len..(bi * ch + c + 1) * len];
                            for (j, &wj) in wrow.iter().enumerate() {
                                let pos = (t * spec.stride + j) as isize - pad_left;
                                if pos >= 0 && (pos as usize) < len {
                                    acc += wj * xrow[pos as usize];
                                }
                            }
                        }
                        os[(bi * filters + f) * out_len + t] = acc;
                    }
                }
            }
        }
        self.push_checked(Op::Conv1d(spec), vec![x, w, b], out)
    }

    // -- activations ---------------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.map_unary(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu, vec![x], value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.map_unary(x, f64::tanh);
        self.push(Op::Tanh, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.map_unary(x, sigmoid);
        self.push(Op::Sigmoid, vec![x], value)
    }

    /// `x >= 0 -> +1, x < 0 -> -1` forward; identity Jacobian backward.
    pub fn ste_sign(&mut self, x: NodeId) -> NodeId {
        let value = self.map_unary(x, |v| if v >= 0.0 { 1.0 } else { -1.0 });
        self.push(Op::SteSign, vec![x], value)
    }

    fn map_unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        Tensor::from_vec(src.shape(), data).expect("unary op preserves length")
    }

    // -- shape ops -----------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self
            .value(x)
            .reshaped(shape)
            .map_err(|_| Error::Config(format!(
                "reshape from {:?} to {:?} changes element count",
                self.value(x).shape(),
                shape
            )))?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Collapse all trailing axes into one: `(b, ...) -> (b, prod(...))`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        if shape.is_empty() {
            return Err(Error::Contract("flatten needs rank >= 1".into()));
        }
        let rest: usize = shape[1..].iter().product();
        let batch = shape[0];
        self.reshape(x, &[batch, rest])
    }

    // -- arithmetic ----------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Contract(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_in_place(self.value(b));
        self.push_checked(Op::Add, vec![a, b], out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        out.scale_in_place(c);
        self.push_checked(Op::Scale(c), vec![x], out)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows_a, cols_a) = self.value(a).dims2();
        let (rows_b, cols_b) = self.value(b).dims2();
        if rows_a != rows_b {
            return Err(Error::Contract(format!(
                "concat row mismatch: {rows_a} vs {rows_b}"
            )));
        }
        let mut data = Vec::with_capacity(rows_a * (cols_a + cols_b));
        for r in 0..rows_a {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let out = Tensor::from_vec(&[rows_a, cols_a + cols_b], data)?;
        Ok(self.push(Op::Concat, vec![a, b], out))
    }

    // -- reductions ----------------------------------------------------------

    /// Batch-averaged L1 distance: `(1/b) sum_rows sum_i |pred - target|`.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (batch, w) = self.value(pred).dims2();
        if self.value(target).shape() != [batch, w] {
            return Err(Error::Contract(format!(
                "l1 width mismatch: {:?} vs {:?}",
                self.value(pred).shape(),
                self.value(target).shape()
            )));
        }
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let out = Tensor::scalar(total / batch as f64);
        self.push_checked(Op::L1Loss, vec![pred, target], out)
    }

    pub fn batch_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = column_len(self.value(x))?;
        let mean = self.value(x).data().iter().sum::<f64>() / n as f64;
        self.push_checked(Op::BatchMean, vec![x], Tensor::scalar(mean))
    }

    /// `log((1/b) sum exp(t_i))`, max-shifted so large statistics cannot
    /// overflow.
    pub fn log_mean_exp(&mut self, x: NodeId) -> Result<NodeId> {
        let n = column_len(self.value(x))?;
        let vals = self.value(x).data();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = vals.iter().map(|&v| (v - max).exp()).sum();
        let out = Tensor::scalar(max + sum.ln() - (n as f64).ln());
        self.push_checked(Op::LogMeanExp, vec![x], out)
    }

    // -- backward ------------------------------------------------------------

    /// Accumulates `d loss / d param` into the grad field of every parameter
    /// the loss depends on. `loss` must be a scalar node. Gradients add onto
    /// whatever the arena already holds; zero first for a fresh pass.
    pub fn backward(&self, loss: NodeId, arena: &mut Arena) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !gy.all_finite() {
                return Err(Error::NonFinite(format!(
                    "backward gradient of {:?}",
                    self.nodes[i].op
                )));
            }
            let node = &self.nodes[i];
            match node.op {
                Op::Const => {}
                Op::Param { set, index } => {
                    let p = &mut arena.set_mut(set).params[index];
                    assert_eq!(p.grad.shape(), gy.shape(), "param grad shape mismatch");
                    p.grad.add_in_place(&gy);
                }
                Op::Dense => self.backward_dense(node, &gy, &mut grads),
                Op::Conv1d(spec) => self.backward_conv1d(node, &spec, &gy, &mut grads),
                Op::Relu => {
                    let x = self.value(node.inputs[0]);
                    let gx = self.ensure(&mut grads, node.inputs[0]);
                    for (g, (&xv, &gv)) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(x.data().iter().zip(gy.data()))
                    {
                        if xv > 0.0 {
                            *g += gv;
                        }
                    }
                }
                Op::Tanh => {
                    let y = &node.value;
                    let gx = self.ensure(&mut grads, node.inputs[0]);
                    for (g, (&yv, &gv)) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(y.data().iter().zip(gy.data()))
                    {
                        *g += gv * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    let gx = self.ensure(&mut grads, node.inputs[0]);
                    for (g, (&yv, &gv)) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(y.data().iter().zip(gy.data()))
                    {
                        *g += gv * yv * (1.0 - yv);
                    }
                }
                Op::SteSign => {
                    // Straight-through: the sign's own derivative is ignored.
                    let gx = self.ensure(&mut grads, node.inputs[0]);
                    gx.add_in_place(&gy);
                }
                Op::Reshape => {
                    let in_shape = self.value(node.inputs[0]).shape().to_vec();
                    let gx = self.ensure(&mut grads, node.inputs[0]);
                    let reshaped = gy.reshaped(&in_shape).expect("reshape grad");
                    gx.add_in_place(&reshaped);
                }
                Op::Add => {
                    for &inp in &node.inputs {
                        let gx = self.ensure(&mut grads, inp);
                        gx.add_in_place(&gy);
                    }
                }
                Op::Scale(c) => {
                    let gx = self.ensure(&mut grads, node.inputs[0]);
                    for (g, &gv) in gx.data_mut().iter_mut().zip(gy.data()) {
                        *g += c * gv;
                    }
                }
                Op::Concat => {
                    let (rows, cols_a) = self.value(node.inputs[0]).dims2();
                    let (_, cols_b) = self.value(node.inputs[1]).dims2();
                    let ga = self.ensure(&mut grads, node.inputs[0]);
                    for r in 0..rows {
                        let src = &gy.data()[r * (cols_a + cols_b)..r * (cols_a + cols_b) + cols_a];
                        let dst = &mut ga.data_mut()[r * cols_a..(r + 1) * cols_a];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    let gb = self.ensure(&mut grads, node.inputs[1]);
                    for r in 0..rows {
                        let src = &gy.data()
                            [r * (cols_a + cols_b) + cols_a..(r + 1) * (cols_a + cols_b)];
                        let dst = &mut gb.data_mut()[r * cols_b..(r + 1) * cols_b];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::L1Loss => {
                    let g = gy.item();
                    let batch = self.value(node.inputs[0]).dims2().0 as f64;
                    {
                        let (pred, target) =
                            (self.value(node.inputs[0]), self.value(node.inputs[1]));
                        let gp = self.ensure(&mut grads, node.inputs[0]);
                        for (gv, (&p, &t)) in gp
                            .data_mut()
                            .iter_mut()
                            .zip(pred.data().iter().zip(target.data()))
                        {
                            *gv += g * sign(p - t) / batch;
                        }
                    }
                    {
                        let (pred, target) =
                            (self.value(node.inputs[0]), self.value(node.inputs[1]));
                        let gt = self.ensure(&mut grads, node.inputs[1]);
                        for (gv, (&p, &t)) in gt
                            .data_mut()
                            .iter_mut()
                            .zip(pred.data().iter().zip(target.data()))
                        {
                            *gv -= g * sign(p - t) / batch;
                        }
                    }
                }
                Op::BatchMean => {
                    let g = gy.item() / self.value(node.inputs[0]).len() as f64;
                    let gx = self.ensure(&mut grads, node.inputs[0]);
                    for gv in gx.data_mut() {
                        *gv += g;
                    }
                }
                Op::LogMeanExp => {
                    // d/dt_i = softmax(t)_i
                    let g = gy.item();
                    let x = self.value(node.inputs[0]);
                    let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = x.data().iter().map(|&v| (v - max).exp()).sum();
                    let gx = self.ensure(&mut grads, node.inputs[0]);
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                        *gv += g * (xv - max).exp() / denom;
                    }
                }
            }
        }
        Ok(())
    }

    fn ensure<'a>(&self, grads: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut Tensor {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape()));
        }
        slot.as_mut().unwrap()
    }

    fn backward_dense(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
        let (batch, in_w) = self.value(x).dims2();
        let (_, out_w) = self.value(w).dims2();

        // dX += dY . W^T
        {
            let gx = self.ensure(grads, x);
            gemm(
                1.0,
                gy.data(),
                (batch, out_w),
                false,
                self.value(w).data(),
                (in_w, out_w),
                true,
                1.0,
                gx.data_mut(),
                (batch, in_w),
            );
        }
        // dW += X^T . dY
        {
            let gw = self.ensure(grads, w);
            gemm(
                1.0,
                self.value(x).data(),
                (batch, in_w),
                true,
                gy.data(),
                (batch, out_w),
                false,
                1.0,
                gw.data_mut(),
                (in_w, out_w),
            );
        }
        // db += column sums of dY
        {
            let gb = self.ensure(grads, b);
            for r in 0..batch {
                let row = &gy.data()[r * out_w..(r + 1) * out_w];
                for (g, v) in gb.data_mut().iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
    }

    fn backward_conv1d(
        &self,
        node: &Node,
        spec: &ConvSpec,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
        let (batch, ch, len) = self.value(x).dims3();
        let (filters, _, kernel) = self.value(w).dims3();
        let out_len = gy.dims3().2;
        let pad_left = spec.pad_left() as isize;

        {
            let wv = self.value(w).data();
            let gx = self.ensure(grads, x);
            let gxd = gx.data_mut();
            for bi in 0..batch {
                for f in 0..filters {
                    for t in 0..out_len {
                        let g = gy.data()[(bi * filters + f) * out_len + t];
                        for c in 0..ch {
                            for j in 0..kernel {
                                let pos = (t * spec.stride + j) as isize - pad_left;
                                if pos >= 0 && (pos as usize) < len {
                                    gxd[(bi * ch + c) * len + pos as usize] +=
                                        g * wv[(f * ch + c) * kernel + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        {
            let xv = self.value(x).data();
            let gw = self.ensure(grads, w);
            let gwd = gw.data_mut();
            for bi in 0..batch {
                for f in 0..filters {
                    for t in 0..out_len {
                        let g = gy.data()[(bi * filters + f) * out_len + t];
                        for c in 0..ch {
                            for j in 0..kernel {
                                let pos = (t * spec.stride + j) as isize - pad_left;
                                if pos >= 0 && (pos as usize) < len {
                                    gwd[(f * ch + c) * kernel + j] +=
                                        g * xv[(bi * ch + c) * len + pos as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        {
            let gb = self.ensure(grads, b);
            let gbd = gb.data_mut();
            for bi in 0..batch {
                for f in 0..filters {
                    for t in 0..out_len {
                        gbd[f] += gy.data()[(bi * filters + f) * out_len + t];
                    }
                }
            }
        }
    }
}

fn column_len(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        [n, 1] => Ok(*n),
        other => Err(Error::Contract(format!(
            "expected a (batch,) or (batch, 1) tensor, got {:?}",
            other
        ))),
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `C = alpha * A . B` for plain row-major slices.
pub fn gemm_slices(
    alpha: f64,
    a: &[f64],
    a_dims: (usize, usize),
    b: &[f64],
    b_dims: (usize, usize),
    c: &mut [f64],
) {
    gemm(alpha, a, a_dims, false, b, b_dims, false, 0.0, c, (a_dims.0, b_dims.1));
}

/// `C = alpha * A . B + beta * C` with optional transposes, via ndarray's GEMM.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    a_dims: (usize, usize),
    a_t: bool,
    b: &[f64],
    b_dims: (usize, usize),
    b_t: bool,
    beta: f64,
    c: &mut [f64],
    c_dims: (usize, usize),
) {
    let av = ArrayView2::from_shape(a_dims, a).expect("gemm A shape");
    let bv = ArrayView2::from_shape(b_dims, b).expect("gemm B shape");
    let av = if a_t { av.reversed_axes() } else { av };
    let bv = if b_t { bv.reversed_axes() } else { bv };
    let mut cv = ArrayViewMut2::from_shape(c_dims, c).expect("gemm C shape");
    debug_assert_eq!(av.ncols(), bv.nrows(), "gemm inner dimension");
    debug_assert_eq!((av.nrows(), bv.ncols()), c_dims, "gemm output dimension");
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
}
