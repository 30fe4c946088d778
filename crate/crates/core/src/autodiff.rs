//! Tape-based reverse-mode differentiation.
//!
//! Every op executed through a recording [`Tape`] appends a node holding its inputs,
//! output and whatever the adjoint needs. [`Tape::backward`] walks the nodes in
//! reverse order, which is a reverse topological order because nodes are only ever
//! appended after their inputs.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::metrics::FlopLedger;
use crate::msa::{self, AttentionSaved, SparsityConfig};
use crate::ops::activation::{gelu, gelu_backward, prelu, prelu_backward, sigmoid, sigmoid_backward, softmax, softmax_backward};
use crate::ops::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::ops::layout::{
    concat_channels, crop, crop_backward, pad_reflect, pad_reflect_backward, slice_channels, slice_channels_backward,
};
use crate::ops::loss::{l1_loss, l1_loss_backward};
use crate::ops::norm::{layer_norm, layer_norm_backward, NormStats, LAYER_NORM_EPS};
use crate::ops::resize::{bilinear_resize, bilinear_resize_backward, upsample_nearest2x, upsample_nearest2x_backward};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Differentiable operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    LayerNorm,
    Gelu,
    Sigmoid,
    Prelu,
    Softmax,
    BilinearResize,
    L1Loss,
    Add,
    Mul,
    Sum,
    Concat,
    Slice,
    Reshape,
    Upsample,
    PadReflect,
    Crop,
    SparseAttention,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Conv2d,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Prelu,
        OpKind::Softmax,
        OpKind::BilinearResize,
        OpKind::L1Loss,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Sum,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Upsample,
        OpKind::PadReflect,
        OpKind::Crop,
        OpKind::SparseAttention,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Prelu => "prelu",
            OpKind::Softmax => "softmax",
            OpKind::BilinearResize => "bilinear_resize",
            OpKind::L1Loss => "l1_loss",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Upsample => "upsample",
            OpKind::PadReflect => "pad_reflect",
            OpKind::Crop => "crop",
            OpKind::SparseAttention => "sparse_attention",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Conv2d(ConvSpec),
    LayerNorm(NormStats),
    Gelu,
    Sigmoid,
    Prelu,
    Softmax(usize),
    BilinearResize,
    L1Loss,
    Add,
    Mul,
    Sum,
    Concat,
    Slice(usize),
    Reshape,
    Upsample,
    PadReflect,
    Crop,
    SparseAttention(Box<AttentionSaved>),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::LayerNorm(_) => OpKind::LayerNorm,
            Op::Gelu => OpKind::Gelu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Prelu => OpKind::Prelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::BilinearResize => OpKind::BilinearResize,
            Op::L1Loss => OpKind::L1Loss,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Sum => OpKind::Sum,
            Op::Concat => OpKind::Concat,
            Op::Slice(_) => OpKind::Slice,
            Op::Reshape => OpKind::Reshape,
            Op::Upsample => OpKind::Upsample,
            Op::PadReflect => OpKind::PadReflect,
            Op::Crop => OpKind::Crop,
            Op::SparseAttention(_) => OpKind::SparseAttention,
        })
    }
}

/// A value produced on a tape. Values without an id are constants.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Arc<Tensor>,
    param: Option<ParamId>,
}

/// How sparse-attention ops obtain their masks.
#[derive(Clone, Debug, Default)]
enum MaskState {
    #[default]
    Compute,
    Record(Vec<Vec<bool>>),
    Replay(Vec<Vec<bool>>, usize),
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    ledger: Cell<FlopLedger>,
    masks: RefCell<MaskState>,
    fault: Cell<Option<(OpKind, f32)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            ledger: Cell::new(FlopLedger::default()),
            masks: RefCell::new(MaskState::Compute),
            fault: Cell::new(None),
        }
    }

    /// A tape that records nothing; every op returns constants.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ledger(&self) -> FlopLedger {
        self.ledger.get()
    }

    fn charge(&self, extra: FlopLedger) {
        self.ledger.set(self.ledger.get() + extra);
    }

    /// Scales every gradient produced by ops of `kind` by `factor` (fault injection).
    pub fn inject_fault(&self, kind: OpKind, factor: f32) {
        self.fault.set(Some((kind, factor)));
    }

    /// Starts collecting the masks chosen by sparse-attention ops.
    pub fn record_masks(&self) {
        *self.masks.borrow_mut() = MaskState::Record(Vec::new());
    }

    /// Returns the masks collected since [`Tape::record_masks`].
    pub fn take_masks(&self) -> Vec<Vec<bool>> {
        match std::mem::take(&mut *self.masks.borrow_mut()) {
            MaskState::Record(m) => m,
            _ => Vec::new(),
        }
    }

    /// Makes sparse-attention ops reuse `masks` in order instead of computing them.
    pub fn replay_masks(&self, masks: Vec<Vec<bool>>) {
        *self.masks.borrow_mut() = MaskState::Replay(masks, 0);
    }

    fn push(&self, op: Op, inputs: &[&Var], value: Tensor) -> Var {
        let value = Arc::new(value);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs.iter().map(|&v| v.clone()).collect(),
            value: value.clone(),
            param: None,
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    fn push_leaf(&self, value: Arc<Tensor>, param: Option<ParamId>) -> Var {
        if !self.recording {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: value.clone(),
            param,
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), None)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            id: None,
            value: Arc::new(t),
        }
    }

    /// A parameter leaf whose gradient [`Gradients::apply_to`] routes back to the store.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push_leaf(store.get(id).value.clone(), Some(id))
    }

    pub fn conv2d(&self, x: &Var, w: &Var, b: &Var, spec: ConvSpec) -> Result<Var> {
        let out = conv2d(&x.value, &w.value, &b.value, spec)?;
        let (bs, cin, _, _) = x.value.dims();
        let (_, cout, ho, wo) = out.dims();
        self.charge(FlopLedger {
            conv_macs: spec.macs(bs, cin, cout, ho, wo),
            ..Default::default()
        });
        Ok(self.push(Op::Conv2d(spec), &[x, w, b], out))
    }

    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let (out, stats) = layer_norm(&x.value, &gamma.value, &beta.value, LAYER_NORM_EPS)?;
        Ok(self.push(Op::LayerNorm(stats), &[x, gamma, beta], out))
    }

    pub fn gelu(&self, x: &Var) -> Var {
        self.push(Op::Gelu, &[x], gelu(&x.value))
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        self.push(Op::Sigmoid, &[x], sigmoid(&x.value))
    }

    /// PReLU with a `[1,1,1,1]` slope.
    pub fn prelu(&self, x: &Var, alpha: &Var) -> Result<Var> {
        if alpha.shape() != [1, 1, 1, 1] {
            return Err(Error::InvalidArgument(format!("prelu: slope must be a scalar, got {:?}", alpha.shape())));
        }
        Ok(self.push(Op::Prelu, &[x, alpha], prelu(&x.value, alpha.value.data()[0])))
    }

    pub fn softmax(&self, x: &Var, axis: usize) -> Result<Var> {
        Ok(self.push(Op::Softmax(axis), &[x], softmax(&x.value, axis)?))
    }

    pub fn bilinear_resize(&self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        Ok(self.push(Op::BilinearResize, &[x], bilinear_resize(&x.value, out_h, out_w)?))
    }

    pub fn l1_loss(&self, pred: &Var, target: &Var) -> Result<Var> {
        let v = l1_loss(&pred.value, &target.value)?;
        Ok(self.push(Op::L1Loss, &[pred, target], Tensor::scalar(v)))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        a.value.check_same_shape(&b.value, "add")?;
        let out = zip(&a.value, &b.value, |x, y| x + y);
        Ok(self.push(Op::Add, &[a, b], out))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        a.value.check_same_shape(&b.value, "mul")?;
        let out = zip(&a.value, &b.value, |x, y| x * y);
        Ok(self.push(Op::Mul, &[a, b], out))
    }

    /// Sum of all entries as a `[1,1,1,1]` scalar.
    pub fn sum(&self, x: &Var) -> Var {
        self.push(Op::Sum, &[x], Tensor::scalar(x.value.sum() as f32))
    }

    pub fn concat(&self, a: &Var, b: &Var) -> Result<Var> {
        Ok(self.push(Op::Concat, &[a, b], concat_channels(&a.value, &b.value)?))
    }

    pub fn slice_channels(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        Ok(self.push(Op::Slice(start), &[x], slice_channels(&x.value, start, len)?))
    }

    pub fn reshape(&self, x: &Var, shape: Shape) -> Result<Var> {
        let out = (*x.value).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, &[x], out))
    }

    pub fn upsample2x(&self, x: &Var) -> Var {
        self.push(Op::Upsample, &[x], upsample_nearest2x(&x.value))
    }

    pub fn pad_reflect(&self, x: &Var, bottom: usize, right: usize) -> Result<Var> {
        if bottom == 0 && right == 0 {
            return Ok(x.clone());
        }
        Ok(self.push(Op::PadReflect, &[x], pad_reflect(&x.value, bottom, right)?))
    }

    pub fn crop(&self, x: &Var, h: usize, w: usize) -> Result<Var> {
        if x.shape()[2] == h && x.shape()[3] == w {
            return Ok(x.clone());
        }
        Ok(self.push(Op::Crop, &[x], crop(&x.value, h, w)?))
    }

    /// Frequency-domain sparse attention; the mask is treated as a constant.
    pub fn sparse_attention(&self, q: &Var, k: &Var, v: &Var, cfg: &SparsityConfig, patch_size: usize) -> Result<Var> {
        let replay = {
            let mut state = self.masks.borrow_mut();
            match &mut *state {
                MaskState::Replay(masks, cursor) => {
                    let m = masks.get(*cursor).cloned().ok_or_else(|| {
                        Error::Consistency(format!("no recorded attention mask for call {}", *cursor))
                    })?;
                    *cursor += 1;
                    Some(m)
                }
                _ => None,
            }
        };
        let res = msa::sparse_attention(&q.value, &k.value, &v.value, cfg, patch_size, replay.as_deref())?;
        if let MaskState::Record(masks) = &mut *self.masks.borrow_mut() {
            masks.push(res.saved.mask.clone());
        }
        self.charge(res.ledger);
        Ok(self.push(Op::SparseAttention(Box::new(res.saved)), &[q, k, v], res.output))
    }

    /// Gradients of a scalar loss.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        self.backward_with(loss, &Tensor::full(loss.shape(), 1.0))
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_with(&self, output: &Var, seed: &Tensor) -> Result<Gradients> {
        let root = output
            .id
            .ok_or_else(|| Error::InvalidArgument("backward: output is not recorded on this tape".into()))?;
        output.value.check_same_shape(seed, "backward")?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(seed.clone());
        let fault = self.fault.get();

        for i in (0..=root).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut input_grads = node_backward(node, &g)?;
            if let (Some((kind, factor)), Some(k)) = (fault, node.op.kind()) {
                if kind == k {
                    for t in input_grads.iter_mut().flatten() {
                        t.data_mut().iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
            for (input, dg) in node.inputs.iter().zip(input_grads) {
                if let (Some(id), Some(dg)) = (input.id, dg) {
                    match &mut grads[id] {
                        Some(acc) => acc.add_assign(&dg),
                        slot => *slot = Some(dg),
                    }
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

fn node_backward(node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let inp = |i: usize| -> &Tensor { &node.inputs[i].value };
    let needs = |i: usize| node.inputs[i].id.is_some();
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv2d(spec) => {
            let cg = conv2d_backward(inp(0), inp(1), *spec, g, [needs(0), needs(1), needs(2)]);
            vec![cg.input, cg.weight, cg.bias]
        }
        Op::LayerNorm(stats) => {
            let (dx, dg, db) = layer_norm_backward(inp(0), inp(1), stats, g);
            vec![Some(dx), Some(dg), Some(db)]
        }
        Op::Gelu => vec![Some(gelu_backward(inp(0), g))],
        Op::Sigmoid => vec![Some(sigmoid_backward(&node.value, g))],
        Op::Prelu => {
            let (dx, da) = prelu_backward(inp(0), inp(1).data()[0], g);
            vec![Some(dx), Some(Tensor::scalar(da))]
        }
        Op::Softmax(axis) => vec![Some(softmax_backward(&node.value, *axis, g))],
        Op::BilinearResize => vec![Some(bilinear_resize_backward(inp(0).shape(), g))],
        Op::L1Loss => {
            let dp = l1_loss_backward(inp(0), inp(1), g.data()[0]);
            let dt = needs(1).then(|| dp.map(|v| -v));
            vec![Some(dp), dt]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Mul => vec![
            needs(0).then(|| zip(g, inp(1), |a, b| a * b)),
            needs(1).then(|| zip(g, inp(0), |a, b| a * b)),
        ],
        Op::Sum => vec![Some(Tensor::full(inp(0).shape(), g.data()[0]))],
        Op::Concat => {
            let ca = inp(0).shape()[1];
            let cb = inp(1).shape()[1];
            vec![
                Some(slice_channels(g, 0, ca)?),
                Some(slice_channels(g, ca, cb)?),
            ]
        }
        Op::Slice(start) => vec![Some(slice_channels_backward(inp(0).shape(), *start, g))],
        Op::Reshape => vec![Some(g.clone().reshape(inp(0).shape())?)],
        Op::Upsample => vec![Some(upsample_nearest2x_backward(g))],
        Op::PadReflect => vec![Some(pad_reflect_backward(inp(0).shape(), g))],
        Op::Crop => vec![Some(crop_backward(inp(0).shape(), g))],
        Op::SparseAttention(saved) => {
            let [dq, dk, dv] =
                msa::sparse_attention_backward(inp(0), inp(1), inp(2), saved, g, [needs(0), needs(1), needs(2)])?;
            vec![dq, dk, dv]
        }
    };
    Ok(out)
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` when the leaf did not influence the output.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        v.id.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn apply_to(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_gradient_is_input() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 2, 2], |_, c, y, x| (c * 4 + y * 2 + x) as f32));
        let w = tape.leaf(Tensor::full([1, 2, 2, 2], 0.5));
        let loss = tape.sum(&tape.mul(&w, &x).unwrap());
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&w).unwrap(), x.value());
    }

    #[test]
    fn unused_parameter_keeps_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::full([1, 1, 2, 2], 2.0)).unwrap();
        let unused = store.add("unused", Tensor::full([1, 1, 2, 2], 3.0)).unwrap();
        let tape = Tape::new();
        let a = tape.param(&store, used);
        let _b = tape.param(&store, unused);
        let loss = tape.sum(&a);
        tape.backward(&loss).unwrap().apply_to(&mut store);
        assert!(store.grad(used).data().iter().all(|&v| v == 1.0));
        assert!(store.grad(unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.backward(&tape.gelu(&x)).is_err());
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::no_grad();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        let y = tape.gelu(&x);
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn fault_injection_scales_named_op() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 1, 2], 1.0));
        let loss = tape.sum(&tape.add(&x, &x).unwrap());
        tape.inject_fault(OpKind::Add, 3.0);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[6.0, 6.0]);
    }
}
