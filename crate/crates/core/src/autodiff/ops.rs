//! Forward definitions of the recorded ops.

use super::{Aux, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat offset into an operand of shape `src` for every element of `out`.
fn operand_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let pad = rank - src.len();
    let src_strides = Tensor::strides(src);
    // stride per output axis, zero where broadcast
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < pad || src[i - pad] == 1 {
                0
            } else {
                src_strides[i - pad]
            }
        })
        .collect();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offs
}

pub(crate) fn broadcast_offsets(a: &[usize], b: &[usize], out: &[usize]) -> (Vec<usize>, Vec<usize>) {
    (operand_offsets(a, out), operand_offsets(b, out))
}

/// Sums an output-shaped gradient back down to a broadcast operand.
pub(crate) fn reduce_broadcast(g: &[f64], out: &[usize], src: &[usize]) -> Vec<f64> {
    if src == out {
        return g.to_vec();
    }
    let offs = operand_offsets(src, out);
    let mut r = vec![0.0; src.iter().product()];
    for (gv, &o) in g.iter().zip(&offs) {
        r[o] += gv;
    }
    r
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Output shape of permuting `shape` by `perm`.
fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// Permutes row-major data of shape `shape` so that output axis `i` is input
/// axis `perm[i]`.
pub(crate) fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape = permuted_shape(shape, perm);
    let in_strides = Tensor::strides(shape);
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

struct MatmulDims {
    m: usize,
    k: usize,
    n: usize,
    /// Flat batch offsets (in matrices) into `a` and `b` per output batch.
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    out_shape: Vec<usize>,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatmulDims> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2 operands, got {sa:?} x {sb:?}"
        )));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::shape(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
    }
    let ba = &sa[..sa.len() - 2];
    let bb = &sb[..sb.len() - 2];
    let batch = broadcast_shape(ba, bb)
        .ok_or_else(|| Error::shape(format!("matmul batch dims not broadcastable: {sa:?} x {sb:?}")))?;
    let (a_batch, b_batch) = if batch.is_empty() {
        (vec![0], vec![0])
    } else {
        (operand_offsets(ba, &batch), operand_offsets(bb, &batch))
    };
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulDims {
        m,
        k,
        n,
        a_batch,
        b_batch,
        out_shape,
    })
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (d.m, d.k, d.n);
    let mut ga = need_a.then(|| vec![0.0; a.numel()]);
    let mut gb = need_b.then(|| vec![0.0; b.numel()]);
    for (bi, (&oa, &ob)) in d.a_batch.iter().zip(&d.b_batch).enumerate() {
        let gs = &g[bi * m * n..(bi + 1) * m * n];
        if let Some(ga) = &mut ga {
            let b_m = &b.data()[ob * k * n..(ob + 1) * k * n];
            kernels::matmul_a_bt_acc(gs, b_m, &mut ga[oa * m * k..(oa + 1) * m * k], m, k, n);
        }
        if let Some(gb) = &mut gb {
            let a_m = &a.data()[oa * m * k..(oa + 1) * m * k];
            kernels::matmul_at_b_acc(a_m, gs, &mut gb[ob * k * n..(ob + 1) * k * n], m, k, n);
        }
    }
    (ga, gb)
}

fn check_nchw(shape: &[usize], op: &str) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("{op} expects [B,C,H,W], got {shape:?}")));
    }
    Ok(())
}

/// How a broadcast operand is laid out relative to the output.
enum Layout {
    Same,
    /// Operand repeats every `n` output elements (e.g. a bias over `[.., C]`).
    Cycle(usize),
    /// Each operand element covers `n` consecutive output elements (e.g. a
    /// gate `[B, C, 1, 1]` over `[B, C, H, W]`).
    Block(usize),
    General,
}

fn layout(src: &[usize], out: &[usize]) -> Layout {
    if src == out {
        return Layout::Same;
    }
    let numel: usize = src.iter().product();
    let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return Layout::Cycle(numel);
    }
    let pad = out.len() - src.len();
    let kept = src.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if src[..kept] == out[pad..pad + kept] && out[..pad].iter().all(|&d| d == 1) {
        return Layout::Block(out.iter().product::<usize>() / numel);
    }
    Layout::General
}

fn elementwise(ta: &Tensor, tb: &Tensor, out: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (a, b) = (ta.data(), tb.data());
    let n: usize = out.iter().product();
    let data: Vec<f64> = match (layout(ta.shape(), &out), layout(tb.shape(), &out)) {
        (Layout::Same, Layout::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Cycle(m)) => a.iter().enumerate().map(|(i, &x)| f(x, b[i % m])).collect(),
        (Layout::Same, Layout::Block(m)) => a.iter().enumerate().map(|(i, &x)| f(x, b[i / m])).collect(),
        (Layout::Cycle(m), Layout::Same) => b.iter().enumerate().map(|(i, &y)| f(a[i % m], y)).collect(),
        (Layout::Block(m), Layout::Same) => b.iter().enumerate().map(|(i, &y)| f(a[i / m], y)).collect(),
        _ => {
            let (oa, ob) = broadcast_offsets(ta.shape(), tb.shape(), &out);
            (0..n).map(|i| f(a[oa[i]], b[ob[i]])).collect()
        }
    };
    Tensor::from_parts(out, data)
}

impl Tape {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcast_shape(sa, sb).is_none() {
            return Err(Error::shape(format!(
                "{name}: shapes {sa:?} and {sb:?} do not broadcast"
            )));
        }
        self.record(op)
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch
    /// dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        matmul_dims(self.shape(a), self.shape(b))?;
        self.record(Op::MatMul(a, b))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.value(a).reshape(shape)?;
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        self.record(Op::Permute(a, perm.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        for (i, p) in parts.iter().enumerate() {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(ax, (x, y))| ax == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat part {i} has shape {s:?}, incompatible with {base:?} on axis {axis}"
                )));
            }
        }
        self.record(Op::Concat(parts.to_vec(), axis))
    }

    /// `len` entries of axis `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) on axis {axis} out of range for {s:?}",
                start + len
            )));
        }
        self.record(Op::Narrow(x, axis, start, len))
    }

    /// 2-D cross-correlation. `w` is `[O, C/groups, k, k]`; output extent is
    /// `floor((H + 2*pad - k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        check_nchw(&xs, "conv2d input")?;
        check_nchw(&ws, "conv2d weight")?;
        let (o, cg, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if k != k2 {
            return Err(Error::shape(format!("conv2d kernel must be square, got {ws:?}")));
        }
        if stride == 0 || groups == 0 || !xs[1].is_multiple_of(groups) || o % groups != 0 || xs[1] / groups != cg {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input {xs:?}, weight {ws:?}, groups {groups}, stride {stride}"
            )));
        }
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d kernel {k} larger than padded input {xs:?} (pad {pad})"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?} does not match {o} output channels",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: o,
            in_h: xs[2],
            in_w: xs[3],
            kernel: k,
            stride,
            pad,
            groups,
        };
        self.record(Op::Conv2d { x, w, b, geom })
    }

    /// Average pooling to a `bins x bins` grid using floor/ceil windows.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, bins: usize) -> Result<Var> {
        let s = self.shape(x);
        check_nchw(s, "adaptive_avg_pool2d")?;
        if bins == 0 || bins > s[2] || bins > s[3] {
            return Err(Error::shape(format!(
                "adaptive_avg_pool2d: {bins} bins do not fit spatial extent {}x{}",
                s[2], s[3]
            )));
        }
        self.record(Op::AdaptivePool(x, bins))
    }

    /// Bilinear resize with half-pixel centers (align-corners = false).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        check_nchw(s, "bilinear_upsample")?;
        if out_h < s[2] || out_w < s[3] {
            return Err(Error::shape(format!(
                "bilinear_upsample cannot shrink {}x{} to {out_h}x{out_w}",
                s[2], s[3]
            )));
        }
        self.record(Op::Upsample(x, out_h, out_w))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {s:?}")));
        }
        self.record(Op::Softmax(x, axis))
    }

    /// Normalises over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().expect("tensors have rank >= 1");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match channel dim {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::shape(format!("layer_norm eps must be positive, got {eps}")));
        }
        self.record(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Mean(x))
    }

    /// Mean pixel cross-entropy of `[B,N,H,W]` logits against flat labels
    /// (`B*H*W`, row-major), skipping `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let s = self.shape(logits);
        check_nchw(s, "cross_entropy logits")?;
        let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
        if labels.len() != b * hw {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for logits {s:?}",
                labels.len()
            )));
        }
        for (i, &lab) in labels.iter().enumerate() {
            if lab != ignore && lab as usize >= n {
                return Err(Error::Data(format!(
                    "label {lab} at batch {}, pixel {} is outside 0..{n}",
                    i / hw,
                    i % hw
                )));
            }
        }
        if labels.iter().all(|&l| l == ignore) {
            return Err(Error::DegenerateBatch);
        }
        self.record(Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            ignore,
        })
    }

    /// Computes the output of `op` from the current input values.
    pub(super) fn eval(&self, op: &Op) -> Result<(Tensor, Aux)> {
        let v = |x: &Var| self.value(*x);
        let t = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (v(a), v(b));
                let out = broadcast_shape(ta.shape(), tb.shape()).expect("validated when recorded");
                match op {
                    Op::Add(..) => elementwise(ta, tb, out, |x, y| x + y),
                    Op::Sub(..) => elementwise(ta, tb, out, |x, y| x - y),
                    _ => elementwise(ta, tb, out, |x, y| x * y),
                }
            }
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(a), v(b));
                let d = matmul_dims(ta.shape(), tb.shape())?;
                let (m, k, n) = (d.m, d.k, d.n);
                let mut out = vec![0.0; d.a_batch.len() * m * n];
                for (bi, (&oa, &ob)) in d.a_batch.iter().zip(&d.b_batch).enumerate() {
                    kernels::matmul_acc(
                        &ta.data()[oa * m * k..(oa + 1) * m * k],
                        &tb.data()[ob * k * n..(ob + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::from_parts(d.out_shape, out)
            }
            Op::Reshape(a, shape) => v(a).reshape(shape)?,
            Op::Permute(a, perm) => {
                let ta = v(a);
                let data = permute_data(ta.data(), ta.shape(), perm);
                Tensor::from_parts(permuted_shape(ta.shape(), perm), data)
            }
            Op::Concat(parts, axis) => {
                let base = v(&parts[0]).shape();
                let total: usize = parts.iter().map(|p| v(p).shape()[*axis]).sum();
                let (outer, _, inner) = kernels::split_axis(base, *axis);
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for p in parts {
                        let len = v(p).shape()[*axis];
                        data.extend_from_slice(&v(p).data()[o * len * inner..(o + 1) * len * inner]);
                    }
                }
                let mut shape = base.to_vec();
                shape[*axis] = total;
                Tensor::from_parts(shape, data)
            }
            Op::Narrow(x, axis, start, len) => {
                let src = v(x);
                let (outer, total, inner) = kernels::split_axis(src.shape(), *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let at = (o * total + start) * inner;
                    data.extend_from_slice(&src.data()[at..at + len * inner]);
                }
                let mut shape = src.shape().to_vec();
                shape[*axis] = *len;
                Tensor::from_parts(shape, data)
            }
            Op::Conv2d { x, w, b, geom } => {
                let data = kernels::conv2d_forward(v(x).data(), v(w).data(), b.as_ref().map(|b| v(b).data()), geom);
                Tensor::from_parts(vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], data)
            }
            Op::AdaptivePool(x, bins) => {
                let s = v(x).shape();
                let data = kernels::adaptive_pool_forward(v(x).data(), s[0] * s[1], s[2], s[3], *bins);
                Tensor::from_parts(vec![s[0], s[1], *bins, *bins], data)
            }
            Op::Upsample(x, oh, ow) => {
                let s = v(x).shape();
                let data = kernels::bilinear_forward(v(x).data(), s[0] * s[1], (s[2], s[3]), (*oh, *ow));
                Tensor::from_parts(vec![s[0], s[1], *oh, *ow], data)
            }
            Op::Softmax(x, axis) => {
                let s = v(x).shape();
                let data = kernels::softmax_forward(v(x).data(), kernels::split_axis(s, *axis));
                Tensor::from_parts(s.to_vec(), data)
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let s = v(x).shape();
                let c = *s.last().expect("rank >= 1");
                let (xhat, rstd) = kernels::layer_norm_stats(v(x).data(), c, *eps);
                let (gm, bt) = (v(gamma).data(), v(beta).data());
                let data = xhat
                    .iter()
                    .enumerate()
                    .map(|(i, &h)| gm[i % c] * h + bt[i % c])
                    .collect();
                return Ok((Tensor::from_parts(s.to_vec(), data), Aux::Norm { xhat, rstd }));
            }
            Op::Gelu(x) => v(x).map(kernels::gelu),
            Op::Sigmoid(x) => v(x).map(kernels::sigmoid),
            Op::Relu(x) => v(x).map(|a| a.max(0.0)),
            Op::Sum(x) => Tensor::scalar(v(x).sum()),
            Op::Mean(x) => Tensor::scalar(v(x).mean()),
            Op::CrossEntropy { logits, labels, ignore } => {
                let s = v(logits).shape();
                let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
                let x = v(logits).data();
                let probs = kernels::softmax_forward(x, (b, n, hw));
                let mut terms = Vec::with_capacity(labels.len());
                for bi in 0..b {
                    for p in 0..hw {
                        let lab = labels[bi * hw + p];
                        if lab == *ignore {
                            continue;
                        }
                        // log-sum-exp form keeps saturated logits exact
                        let at = |c: usize| (bi * n + c) * hw + p;
                        let max = (0..n).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + (0..n).map(|c| (x[at(c)] - max).exp()).sum::<f64>().ln();
                        terms.push(lse - x[at(lab as usize)]);
                    }
                }
                let count = terms.len();
                let loss = kernels::compensated_sum(terms) / count as f64;
                return Ok((Tensor::scalar(loss), Aux::Probs { probs, count }));
            }
        };
        Ok((t, Aux::None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn offsets_for_channel_gate() {
        // [1,2,1,1] gate broadcast over [1,2,2,2]
        let offs = operand_offsets(&[1, 2, 1, 1], &[1, 2, 2, 2]);
        assert_eq!(offs, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn layouts() {
        assert!(matches!(layout(&[3], &[2, 3]), Layout::Cycle(3)));
        assert!(matches!(layout(&[1, 2, 1, 1], &[1, 2, 2, 2]), Layout::Block(4)));
        assert!(matches!(layout(&[2, 1], &[2, 3]), Layout::Block(3)));
        assert!(matches!(layout(&[2, 1, 4], &[2, 3, 4]), Layout::General));
    }

    #[test]
    fn permute_roundtrip() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let y = permute_data(&x, &[2, 3, 4], &perm);
        let back = permute_data(&y, &[4, 2, 3], &inverse_permutation(&perm));
        assert_eq!(x, back);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(y[6 + 2], x[(2 * 4) + 1]);
    }
}
