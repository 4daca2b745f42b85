//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and the ids of its
//! inputs, so node ids are already in topological order. [`Tape::backward`]
//! walks the nodes once in reverse and then clears the tape; a second call
//! is a state error.
//!
//! A recorded tape can also be re-evaluated after changing one leaf
//! ([`Tape::replay_perturbed`]): only nodes downstream of that leaf are
//! recomputed, with the same kernels as the original forward pass.

mod ops;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Reshape(Var, Vec<usize>),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    /// `(x, axis, start, len)`
    Narrow(Var, usize, usize, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AdaptivePool(Var, usize),
    Upsample(Var, usize, usize),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        ignore: u8,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow(..) => "narrow",
            Op::Conv2d { .. } => "conv2d",
            Op::AdaptivePool(..) => "adaptive_avg_pool2d",
            Op::Upsample(..) => "bilinear_upsample",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Reshape(a, _)
            | Op::Permute(a, _)
            | Op::Narrow(a, ..)
            | Op::AdaptivePool(a, _)
            | Op::Upsample(a, ..)
            | Op::Softmax(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Forward by-products that the backward pass reuses.
#[derive(Debug, Clone, Default)]
pub(crate) enum Aux {
    #[default]
    None,
    Norm {
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Probs {
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    aux: Aux,
    inputs: Vec<Var>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Parameter handles bound onto a tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_names: HashMap<ParamId, String>,
    cleared: bool,
}

/// Result of a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    params: BTreeMap<String, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Grads {
    /// Gradient of a trainable parameter by its dotted name.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradient of a free leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            aux: Aux::None,
            inputs: vec![],
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on the current input values and records it.
    pub(crate) fn record(&mut self, op: Op) -> Result<Var> {
        let (value, aux) = self.eval(&op)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            aux,
            inputs,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A free input whose gradient is reported through [`Grads::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Binds every parameter of `store` as a leaf. Frozen parameters are
    /// recorded as constants and get no gradient entry.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let v = self.push_leaf(p.tensor.clone(), p.trainable);
                self.nodes[v.0].param = Some(ParamId(i));
                if p.trainable {
                    self.param_names.insert(ParamId(i), p.name.clone());
                }
                v
            })
            .collect();
        Bound { vars }
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate in tape order,
    /// so repeated runs are bit-identical. Clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        let grads = self.gradients(loss)?;
        self.nodes.clear();
        self.param_names.clear();
        self.cleared = true;
        Ok(grads)
    }

    /// Reverse pass that leaves the tape intact.
    pub(crate) fn gradients(&self, loss: Var) -> Result<Grads> {
        if self.cleared {
            return Err(Error::TapeState("backward called on a cleared tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::TapeState(format!("loss node {} is not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::TapeState(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let t = Tensor::from_parts(self.nodes[id].value.shape().to_vec(), g);
                match self.nodes[id].param {
                    Some(pid) => {
                        let name = self.param_names[&pid].clone();
                        out.params.insert(name, t);
                    }
                    None => {
                        out.leaves.insert(id, t);
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        // trainable parameters the loss never reached get explicit zeros
        for node in &self.nodes {
            if let Some(name) = node.param.and_then(|pid| self.param_names.get(&pid)) {
                out.params
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    /// Nodes after `leaf` (up to `out`) whose value depends on it, in order.
    pub(crate) fn downstream(&self, leaf: Var, out: Var) -> Vec<usize> {
        let mut dirty = vec![false; out.0 + 1];
        dirty[leaf.0] = true;
        let mut order = Vec::new();
        for id in leaf.0 + 1..=out.0 {
            if self.nodes[id].inputs.iter().any(|v| dirty[v.0]) {
                dirty[id] = true;
                order.push(id);
            }
        }
        order
    }

    /// Value of the scalar `out` with element `index` of `leaf` set to
    /// `value`, recomputing only the nodes listed in `downstream` (see
    /// [`downstream`](Self::downstream)). The tape is restored afterwards.
    pub(crate) fn replay_perturbed(
        &mut self,
        leaf: Var,
        index: usize,
        value: f64,
        downstream: &[usize],
        out: Var,
    ) -> Result<f64> {
        let original_leaf = self.nodes[leaf.0].value.clone();
        self.nodes[leaf.0].value.data_mut()[index] = value;
        let mut saved = Vec::with_capacity(downstream.len());
        let mut result = Ok(());
        for &id in downstream {
            match self.eval(&self.nodes[id].op) {
                Ok((v, aux)) if v.is_finite() => {
                    let node = &mut self.nodes[id];
                    saved.push((
                        id,
                        std::mem::replace(&mut node.value, v),
                        std::mem::replace(&mut node.aux, aux),
                    ));
                }
                Ok(_) => {
                    result = Err(Error::NonFinite {
                        op: self.nodes[id].op.name(),
                    });
                    break;
                }
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        let f = result.and_then(|_| self.nodes[out.0].value.item());
        for (id, v, aux) in saved {
            self.nodes[id].value = v;
            self.nodes[id].aux = aux;
        }
        self.nodes[leaf.0].value = original_leaf;
        f
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate_b = matches!(node.op, Op::Sub(..));
                if self.requires_grad(*a) {
                    let ga = ops::reduce_broadcast(g, out_shape, self.shape(*a));
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = ops::reduce_broadcast(g, out_shape, self.shape(*b));
                    if negate_b {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (oa, ob) = ops::broadcast_offsets(ta.shape(), tb.shape(), out_shape);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; ta.numel()];
                    for (i, &gv) in g.iter().enumerate() {
                        ga[oa[i]] += gv * tb.data()[ob[i]];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[ob[i]] += gv * ta.data()[oa[i]];
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(
                    self.value(*a),
                    self.value(*b),
                    g,
                    self.requires_grad(*a),
                    self.requires_grad(*b),
                );
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(a, _) => self.accumulate(grads, *a, g.to_vec()),
            Op::Permute(a, perm) => {
                let inv = ops::inverse_permutation(perm);
                let gx = ops::permute_data(g, out_shape, &inv);
                self.accumulate(grads, *a, gx);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = kernels::split_axis(out_shape, *axis);
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, axis, start, len) => {
                let src = self.shape(*a);
                let (outer, total, inner) = kernels::split_axis(src, *axis);
                let mut gx = vec![0.0; outer * total * inner];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.requires_grad(*x),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *w, gw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AdaptivePool(x, bins) => {
                let s = self.shape(*x);
                let gx = kernels::adaptive_pool_backward(g, s[0] * s[1], s[2], s[3], *bins);
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample(x, oh, ow) => {
                let s = self.shape(*x);
                let gx = kernels::bilinear_backward(g, s[0] * s[1], (s[2], s[3]), (*oh, *ow));
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x, axis) => {
                let split = kernels::split_axis(out_shape, *axis);
                let gx = kernels::softmax_backward(node.value.data(), g, split);
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let Aux::Norm { xhat, rstd } = &node.aux else {
                    unreachable!("layer norm node without statistics")
                };
                let c = *out_shape.last().expect("rank >= 1");
                let gam = self.value(*gamma).data();
                let rows = xhat.len() / c;
                let inv_c = 1.0 / c as f64;
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        gg[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                        let d = gr[j] * gam[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                    }
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        gx[r * c + j] = rstd[r] * (d - inv_c * sum_d - xh[j] * inv_c * sum_dx);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gbeta);
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let gx = xs.iter().zip(g).map(|(&v, &gv)| gv * kernels::gelu_grad(v)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                let gx = ys.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let gx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, labels, ignore } => {
                let Aux::Probs { probs, count } = &node.aux else {
                    unreachable!("cross-entropy node without probabilities")
                };
                let s = self.shape(*logits);
                let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = g[0] / *count as f64;
                let mut gx = vec![0.0; probs.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        let lab = labels[bi * hw + p];
                        if lab == *ignore {
                            continue;
                        }
                        for c in 0..n {
                            let idx = (bi * n + c) * hw + p;
                            let target = if c == lab as usize { 1.0 } else { 0.0 };
                            gx[idx] = scale * (probs[idx] - target);
                        }
                    }
                }
                self.accumulate(grads, *logits, gx);
            }
        }
    }
}
