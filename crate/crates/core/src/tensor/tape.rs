//! Per-step computation tape.
//!
//! Forward ops append one record each; `backward` consumes the tape in
//! reverse topological order (records are appended in creation order, so the
//! vector order is already topological). A tape lives for one training step
//! and is freed by `backward`.

use super::kernels::{self, ConvAxis};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

struct Node<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    op: Op<E>,
}

enum Op<E> {
    Leaf,
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Conv2d { input: usize, filters: usize, f_axis: ConvAxis, t_axis: ConvAxis },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { x: usize },
    Affine { x: usize, scale: E },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Relu { x: usize },
    Sqrt { x: usize },
    Softmax { x: usize, axis: usize, mask: Option<Vec<bool>> },
    LogSoftmax { x: usize, axis: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Permute { x: usize, perm: Vec<usize> },
    Reshape { x: usize },
    SumAxes { x: usize },
    SumAll { x: usize },
    Embed { table: usize, ids: Vec<usize> },
    TakePerRow { x: usize, ids: Vec<usize> },
    ReverseTime { x: usize, axis: usize, lengths: Vec<usize> },
}

/// Gradients indexed by the [`Var`]s of the consumed tape.
pub struct Grads<E> {
    grads: Vec<Option<Vec<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        let data = self.grads[v.0].take()?;
        Some(Tensor::new(self.shapes[v.0].clone(), data).expect("grad shape"))
    }
}

pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Op<E>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameters enter the tape through here).
    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), requires_grad, Op::Leaf)
    }

    /// A non-differentiable input (features, masks).
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).expect("shape")
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── elementwise and broadcast arithmetic ─────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Var> {
        let out_shape = kernels::broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| self.shape_err(name, a, b))?;
        let data = kernels::broadcast_zip(
            self.value(a),
            self.shape(a),
            self.value(b),
            self.shape(b),
            &out_shape,
            f,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, data, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| -v).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, data, rg, Op::Neg { x: x.0 })
    }

    /// `scale * x + shift`, elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, scale: E, shift: E) -> Var {
        let data = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, data, rg, Op::Affine { x: x.0, scale })
    }

    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op<E>) -> Var {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, data, rg, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| E::one() / (E::one() + (-v).exp()),
            Op::Sigmoid { x: x.0 },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > E::zero() { v } else { E::zero() },
            Op::Relu { x: x.0 },
        )
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt { x: x.0 })
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![E::zero(); m * n];
        kernels::mm_nn(self.value(a), self.value(b), &mut data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], data, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// Batched matmul: `(B,m,k) x (B,k,n) -> (B,m,n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(self.shape_err("bmm", a, b));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![E::zero(); bs * m * n];
        for i in 0..bs {
            kernels::mm_nn(
                &self.value(a)[i * m * k..(i + 1) * m * k],
                &self.value(b)[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![bs, m, n], data, rg, Op::Bmm { a: a.0, b: b.0 }))
    }

    /// 2-D convolution. Input `(batch, in_ch, freq, time)`, filters
    /// `(out_ch, in_ch, kf, kt)`. Output extent per axis is
    /// `ceil(in/stride)` for same padding, `floor((in-k)/stride)+1` for valid.
    pub fn conv2d(
        &mut self,
        input: Var,
        filters: Var,
        stride_f: usize,
        stride_t: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(filters));
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(self.shape_err("conv2d", input, filters));
        }
        let (batch, in_ch, fi, ti) = (si[0], si[1], si[2], si[3]);
        let (out_ch, kf, kt) = (sw[0], sw[2], sw[3]);
        let (f_axis, t_axis) = match padding {
            Padding::Same => (
                ConvAxis::same(fi, kf, stride_f),
                ConvAxis::same(ti, kt, stride_t),
            ),
            Padding::Valid => (
                ConvAxis::valid(fi, kf, stride_f)
                    .ok_or_else(|| self.shape_err("conv2d(valid)", input, filters))?,
                ConvAxis::valid(ti, kt, stride_t)
                    .ok_or_else(|| self.shape_err("conv2d(valid)", input, filters))?,
            ),
        };
        let out_shape = vec![batch, out_ch, f_axis.output, t_axis.output];
        let mut data = vec![E::zero(); out_shape.iter().product()];
        kernels::conv2d(
            self.value(input),
            self.value(filters),
            &mut data,
            batch,
            in_ch,
            out_ch,
            f_axis,
            t_axis,
        );
        let rg = self.rg(input) || self.rg(filters);
        Ok(self.push(
            out_shape,
            data,
            rg,
            Op::Conv2d { input: input.0, filters: filters.0, f_axis, t_axis },
        ))
    }

    // ── shape ops ────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape { x: x.0 }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArg(format!(
                "permute: {perm:?} is not a permutation of 0..{nd}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.value(x), &shape, perm, &out_shape);
        let rg = self.rg(x);
        Ok(self.push(out_shape, data, rg, Op::Permute { x: x.0, perm: perm.to_vec() }))
    }

    /// Slice `len` elements starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidArg(format!(
                "narrow: axis {axis} range {start}..{} out of bounds for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.value(x);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, data, rg, Op::Narrow { x: x.0, axis, start }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| {
            Error::InvalidArg("concat: need at least one input".into())
        })?;
        let mut out_shape = self.shape(first).to_vec();
        if axis >= out_shape.len() {
            return Err(Error::InvalidArg(format!(
                "concat: axis {axis} out of bounds for {out_shape:?}"
            )));
        }
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != out_shape.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != out_shape[i])
            {
                return Err(self.shape_err("concat", first, v));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let src = &self.nodes[v.0].data;
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out_shape,
            data,
            rg,
            Op::Concat { inputs: inputs.iter().map(|v| v.0).collect(), axis },
        ))
    }

    // ── reductions and normalizers ───────────────────────────────────────

    /// Sum over `axes`, keeping reduced axes as extent 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::InvalidArg(format!(
                "sum_axes: axes {axes:?} out of bounds for {shape:?}"
            )));
        }
        let mut out_shape = shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let data = kernels::reduce_to_shape(self.value(x), &shape, &out_shape);
        let rg = self.rg(x);
        Ok(self.push(out_shape, data, rg, Op::SumAxes { x: x.0 }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: E = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![total], rg, Op::SumAll { x: x.0 })
    }

    /// Mean over `axes` (keepdims).
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.affine(s, E::from_f64(1.0 / count as f64), E::zero()))
    }

    /// Biased variance over `axes` (keepdims), `E[(x - E[x])^2]`.
    pub fn var_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let mean = self.mean_axes(x, axes)?;
        let centered = self.sub(x, mean)?;
        let sq = self.mul(centered, centered)?;
        self.mean_axes(sq, axes)
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax over positions where `mask` is true; masked outputs are exactly
    /// zero and receive no gradient. Errors if a lane is fully masked.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.numel(x) {
            return Err(Error::InvalidArg(format!(
                "masked_softmax: mask has {} entries for {} elements",
                mask.len(),
                self.numel(x)
            )));
        }
        self.softmax_impl(x, axis, Some(mask.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArg(format!(
                "softmax: axis {axis} out of bounds for {shape:?}"
            )));
        }
        let src = self.value(x);
        let mut data = vec![E::zero(); src.len()];
        for (lane, base) in lanes(&shape, axis) {
            let live = |i: usize| mask.as_ref().map_or(true, |m| m[base + i * lane.stride]);
            let mut max = E::neg_infinity();
            for i in 0..lane.len {
                if live(i) {
                    max = max.max(src[base + i * lane.stride]);
                }
            }
            if max == E::neg_infinity() {
                return Err(Error::InvalidArg(
                    "softmax: lane has no unmasked positions".into(),
                ));
            }
            let mut denom = E::zero();
            for i in 0..lane.len {
                if live(i) {
                    let e = (src[base + i * lane.stride] - max).exp();
                    data[base + i * lane.stride] = e;
                    denom += e;
                }
            }
            for i in 0..lane.len {
                if live(i) {
                    data[base + i * lane.stride] /= denom;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, data, rg, Op::Softmax { x: x.0, axis, mask }))
    }

    /// Log-softmax along `axis` (max subtraction).
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArg(format!(
                "log_softmax: axis {axis} out of bounds for {shape:?}"
            )));
        }
        let src = self.value(x);
        let mut data = vec![E::zero(); src.len()];
        for (lane, base) in lanes(&shape, axis) {
            let mut max = E::neg_infinity();
            for i in 0..lane.len {
                max = max.max(src[base + i * lane.stride]);
            }
            let mut denom = E::zero();
            for i in 0..lane.len {
                denom += (src[base + i * lane.stride] - max).exp();
            }
            let log_denom = denom.ln();
            for i in 0..lane.len {
                let idx = base + i * lane.stride;
                data[idx] = src[idx] - max - log_denom;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, data, rg, Op::LogSoftmax { x: x.0, axis }))
    }

    // ── lookups ──────────────────────────────────────────────────────────

    /// Row lookup: `table (V,H)`, `ids (n)` -> `(n,H)`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::InvalidArg(format!(
                "embed: table must be 2-D, got {ts:?}"
            )));
        }
        let (v, h) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab(format!("token id {bad} out of range (|V| = {v})")));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            data.extend_from_slice(&src[i * h..(i + 1) * h]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), h],
            data,
            rg,
            Op::Embed { table: table.0, ids: ids.to_vec() },
        ))
    }

    /// Per-row gather: `x (N,V)`, `ids (N)` -> `(N)` with `out[i] = x[i, ids[i]]`.
    pub fn take_per_row(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || ids.len() != s[0] {
            return Err(Error::InvalidArg(format!(
                "take_per_row: {} ids for shape {s:?}",
                ids.len()
            )));
        }
        let v = s[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab(format!("token id {bad} out of range (|V| = {v})")));
        }
        let src = self.value(x);
        let data: Vec<E> = ids.iter().enumerate().map(|(r, &i)| src[r * v + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![ids.len()],
            data,
            rg,
            Op::TakePerRow { x: x.0, ids: ids.to_vec() },
        ))
    }

    /// Reverse each sequence along `axis` within its own valid length;
    /// padded positions are left in place. `lengths` has one entry per
    /// batch item (axis 0).
    pub fn reverse_time(&mut self, x: Var, axis: usize, lengths: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis == 0 || axis >= shape.len() || lengths.len() != shape[0] {
            return Err(Error::InvalidArg(format!(
                "reverse_time: axis {axis}, {} lengths for {shape:?}",
                lengths.len()
            )));
        }
        let t = shape[axis];
        if let Some(&bad) = lengths.iter().find(|&&l| l > t || l == 0) {
            return Err(Error::InvalidArg(format!(
                "reverse_time: length {bad} invalid for extent {t}"
            )));
        }
        let data = reverse_time_data(self.value(x), &shape, axis, lengths);
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            data,
            rg,
            Op::ReverseTime { x: x.0, axis, lengths: lengths.to_vec() },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Consumes the tape; gradients of
    /// all `requires_grad` leaves reachable from `loss` are in the result.
    pub fn backward(self, loss: Var) -> Result<Grads<E>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArg("backward: empty tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);

        let nodes = &self.nodes;
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep: this is a result
                }
                Op::Reshape { x } => accumulate(&mut grads, nodes, *x, g),
                Op::Neg { x } => {
                    let gx: Vec<E> = g.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::Affine { x, scale } => {
                    let gx: Vec<E> = g.iter().map(|&v| v * *scale).collect();
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::Add { a, b } => {
                    for &inp in &[*a, *b] {
                        if nodes[inp].requires_grad {
                            let gi =
                                kernels::reduce_to_shape(&g, &node.shape, &nodes[inp].shape);
                            accumulate(&mut grads, nodes, inp, gi);
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if nodes[*a].requires_grad {
                        let gi = kernels::reduce_to_shape(&g, &node.shape, &nodes[*a].shape);
                        accumulate(&mut grads, nodes, *a, gi);
                    }
                    if nodes[*b].requires_grad {
                        let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                        let gi = kernels::reduce_to_shape(&neg, &node.shape, &nodes[*b].shape);
                        accumulate(&mut grads, nodes, *b, gi);
                    }
                }
                Op::Mul { a, b } => {
                    if nodes[*a].requires_grad {
                        let gb = kernels::broadcast_zip(
                            &g,
                            &node.shape,
                            &nodes[*b].data,
                            &nodes[*b].shape,
                            &node.shape,
                            |x, y| x * y,
                        );
                        let gi = kernels::reduce_to_shape(&gb, &node.shape, &nodes[*a].shape);
                        accumulate(&mut grads, nodes, *a, gi);
                    }
                    if nodes[*b].requires_grad {
                        let ga = kernels::broadcast_zip(
                            &g,
                            &node.shape,
                            &nodes[*a].data,
                            &nodes[*a].shape,
                            &node.shape,
                            |x, y| x * y,
                        );
                        let gi = kernels::reduce_to_shape(&ga, &node.shape, &nodes[*b].shape);
                        accumulate(&mut grads, nodes, *b, gi);
                    }
                }
                Op::Div { a, b } => {
                    if nodes[*a].requires_grad {
                        let gb = kernels::broadcast_zip(
                            &g,
                            &node.shape,
                            &nodes[*b].data,
                            &nodes[*b].shape,
                            &node.shape,
                            |x, y| x / y,
                        );
                        let gi = kernels::reduce_to_shape(&gb, &node.shape, &nodes[*a].shape);
                        accumulate(&mut grads, nodes, *a, gi);
                    }
                    if nodes[*b].requires_grad {
                        // d/db (a/b) = -a / b^2 = -out / b
                        let gout = kernels::broadcast_zip(
                            &g,
                            &node.shape,
                            &node.data,
                            &node.shape,
                            &node.shape,
                            |x, y| x * y,
                        );
                        let gb = kernels::broadcast_zip(
                            &gout,
                            &node.shape,
                            &nodes[*b].data,
                            &nodes[*b].shape,
                            &node.shape,
                            |x, y| -(x / y),
                        );
                        let gi = kernels::reduce_to_shape(&gb, &node.shape, &nodes[*b].shape);
                        accumulate(&mut grads, nodes, *b, gi);
                    }
                }
                Op::Sigmoid { x } => {
                    let gx: Vec<E> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(&gv, &y)| gv * y * (E::one() - y))
                        .collect();
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::Tanh { x } => {
                    let gx: Vec<E> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(&gv, &y)| gv * (E::one() - y * y))
                        .collect();
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::Relu { x } => {
                    // Subgradient 0 at exactly 0.
                    let gx: Vec<E> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(&gv, &y)| if y > E::zero() { gv } else { E::zero() })
                        .collect();
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::Sqrt { x } => {
                    let half = E::from_f64(0.5);
                    let gx: Vec<E> = g
                        .iter()
                        .zip(&node.data)
                        .map(|(&gv, &y)| gv * half / y)
                        .collect();
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    if nodes[*a].requires_grad {
                        let mut ga = vec![E::zero(); m * k];
                        kernels::mm_nt(&g, &nodes[*b].data, &mut ga, m, n, k);
                        accumulate(&mut grads, nodes, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![E::zero(); k * n];
                        kernels::mm_tn(&nodes[*a].data, &g, &mut gb, m, k, n);
                        accumulate(&mut grads, nodes, *b, gb);
                    }
                }
                Op::Bmm { a, b } => {
                    let (bs, m, k) = (nodes[*a].shape[0], nodes[*a].shape[1], nodes[*a].shape[2]);
                    let n = nodes[*b].shape[2];
                    if nodes[*a].requires_grad {
                        let mut ga = vec![E::zero(); bs * m * k];
                        for i in 0..bs {
                            kernels::mm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &nodes[*b].data[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        accumulate(&mut grads, nodes, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![E::zero(); bs * k * n];
                        for i in 0..bs {
                            kernels::mm_tn(
                                &nodes[*a].data[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        accumulate(&mut grads, nodes, *b, gb);
                    }
                }
                Op::Conv2d { input, filters, f_axis, t_axis } => {
                    let si = &nodes[*input].shape;
                    let sw = &nodes[*filters].shape;
                    let mut gi = vec![E::zero(); nodes[*input].data.len()];
                    let mut gw = vec![E::zero(); nodes[*filters].data.len()];
                    kernels::conv2d_backward(
                        &nodes[*input].data,
                        &nodes[*filters].data,
                        &g,
                        &mut gi,
                        &mut gw,
                        si[0],
                        si[1],
                        sw[0],
                        *f_axis,
                        *t_axis,
                    );
                    if nodes[*input].requires_grad {
                        accumulate(&mut grads, nodes, *input, gi);
                    }
                    if nodes[*filters].requires_grad {
                        accumulate(&mut grads, nodes, *filters, gw);
                    }
                }
                Op::Softmax { x, axis, mask } => {
                    let mut gx = vec![E::zero(); node.data.len()];
                    for (lane, base) in lanes(&node.shape, *axis) {
                        let mut dot = E::zero();
                        for i in 0..lane.len {
                            let idx = base + i * lane.stride;
                            dot += g[idx] * node.data[idx];
                        }
                        for i in 0..lane.len {
                            let idx = base + i * lane.stride;
                            let live = mask.as_ref().map_or(true, |m| m[idx]);
                            if live {
                                gx[idx] = node.data[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::LogSoftmax { x, axis } => {
                    let mut gx = vec![E::zero(); node.data.len()];
                    for (lane, base) in lanes(&node.shape, *axis) {
                        let mut gsum = E::zero();
                        for i in 0..lane.len {
                            gsum += g[base + i * lane.stride];
                        }
                        for i in 0..lane.len {
                            let idx = base + i * lane.stride;
                            gx[idx] = g[idx] - node.data[idx].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::Concat { inputs, axis } => {
                    let outer: usize = node.shape[..*axis].iter().product();
                    let inner: usize = node.shape[*axis + 1..].iter().product();
                    let total_d = node.shape[*axis];
                    let mut offset = 0usize;
                    for &inp in inputs {
                        let d = nodes[inp].shape[*axis];
                        if nodes[inp].requires_grad {
                            let mut gi = Vec::with_capacity(outer * d * inner);
                            for o in 0..outer {
                                let base = (o * total_d + offset) * inner;
                                gi.extend_from_slice(&g[base..base + d * inner]);
                            }
                            accumulate(&mut grads, nodes, inp, gi);
                        }
                        offset += d;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let src_shape = &nodes[*x].shape;
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[*axis + 1..].iter().product();
                    let d = src_shape[*axis];
                    let len = node.shape[*axis];
                    let mut gx = vec![E::zero(); nodes[*x].data.len()];
                    for o in 0..outer {
                        let dst = (o * d + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            gx[dst + i] = g[src + i];
                        }
                    }
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let gx = permute_data(&g, &node.shape, &inv, &nodes[*x].shape);
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::SumAxes { x } => {
                    let gx = broadcast_expand(&g, &node.shape, &nodes[*x].shape);
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::SumAll { x } => {
                    let gx = vec![g[0]; nodes[*x].data.len()];
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::Embed { table, ids } => {
                    let h = nodes[*table].shape[1];
                    let mut gt = vec![E::zero(); nodes[*table].data.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..h {
                            gt[i * h + j] += g[r * h + j];
                        }
                    }
                    accumulate(&mut grads, nodes, *table, gt);
                }
                Op::TakePerRow { x, ids } => {
                    let v = nodes[*x].shape[1];
                    let mut gx = vec![E::zero(); nodes[*x].data.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        gx[r * v + i] = g[r];
                    }
                    accumulate(&mut grads, nodes, *x, gx);
                }
                Op::ReverseTime { x, axis, lengths } => {
                    // The reversal is an involutive permutation, so the
                    // adjoint is the same reversal applied to the gradient.
                    let gx = reverse_time_data(&g, &node.shape, *axis, lengths);
                    accumulate(&mut grads, nodes, *x, gx);
                }
            }
        }

        Ok(Grads {
            grads,
            shapes: self.nodes.into_iter().map(|n| n.shape).collect(),
        })
    }
}

fn accumulate<E: Element>(
    grads: &mut [Option<Vec<E>>],
    nodes: &[Node<E>],
    target: usize,
    g: Vec<E>,
) {
    if !nodes[target].requires_grad {
        return;
    }
    match &mut grads[target] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

struct Lane {
    len: usize,
    stride: usize,
}

/// Iterate `(lane, base_offset)` pairs covering every 1-D lane along `axis`.
fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (Lane, usize)> + '_ {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let d = shape[axis];
    (0..outer).flat_map(move |o| {
        (0..inner).map(move |r| (Lane { len: d, stride: inner }, o * d * inner + r))
    })
}

fn permute_data<E: Element>(
    src: &[E],
    in_shape: &[usize],
    perm: &[usize],
    out_shape: &[usize],
) -> Vec<E> {
    let nd = in_shape.len();
    let mut out_strides_in_order = vec![0usize; nd];
    {
        // stride of output axis j, mapped back onto input axis perm[j]
        let mut acc = 1usize;
        for j in (0..nd).rev() {
            out_strides_in_order[perm[j]] = acc;
            acc *= out_shape[j];
        }
    }
    let n = src.len();
    let mut out = vec![E::zero(); n];
    let mut coords = vec![0usize; nd];
    let mut out_idx = 0usize;
    for &v in src {
        out[out_idx] = v;
        for d in (0..nd).rev() {
            coords[d] += 1;
            out_idx += out_strides_in_order[d];
            if coords[d] < in_shape[d] {
                break;
            }
            coords[d] = 0;
            out_idx -= out_strides_in_order[d] * in_shape[d];
        }
    }
    out
}

fn broadcast_expand<E: Element>(src: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    let strides = kernels::broadcast_strides(from, to);
    let nd = to.len();
    let n: usize = to.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; nd];
    let mut idx = 0usize;
    for _ in 0..n {
        out.push(src[idx]);
        for d in (0..nd).rev() {
            coords[d] += 1;
            idx += strides[d];
            if coords[d] < to[d] {
                break;
            }
            coords[d] = 0;
            idx -= strides[d] * to[d];
        }
    }
    out
}

fn reverse_time_data<E: Element>(
    src: &[E],
    shape: &[usize],
    axis: usize,
    lengths: &[usize],
) -> Vec<E> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let t = shape[axis];
    let per_batch = outer / shape[0];
    let mut out = src.to_vec();
    for o in 0..outer {
        let len = lengths[o / per_batch];
        for i in 0..len {
            let dst = (o * t + i) * inner;
            let from = (o * t + (len - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape.constant(t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.constant(t64(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
    }

    #[test]
    fn conv_all_ones_sums() {
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0f64));
        let filt = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0f64));
        let out = tape.conv2d(input, filt, 1, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 1, 1]);
        assert_eq!(tape.value(out), &[9.0]);
    }

    #[test]
    fn conv_same_stride2_halves_time() {
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::full(&[1, 1, 4, 8], 1.0f64));
        let filt = tape.constant(Tensor::full(&[2, 1, 3, 3], 0.5f64));
        let out = tape.conv2d(input, filt, 1, 2, Padding::Same).unwrap();
        assert_eq!(tape.shape(out), &[1, 2, 4, 4]);
    }

    #[test]
    fn conv_delta_filter_is_identity() {
        let mut tape = Tape::new();
        let x = Tensor::from_init(&[1, 1, 5, 7], Init::Uniform { lo: -1.0, hi: 1.0 }, 9).unwrap();
        let input = tape.constant(x.clone());
        // 3x3 filter with a single 1 in the center
        let mut f = Tensor::zeros(&[1, 1, 3, 3]);
        f.data_mut()[4] = 1.0f64;
        let filt = tape.constant(f);
        let out = tape.conv2d(input, filt, 1, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(out), x.data());
    }

    #[test]
    fn softmax_symmetry_and_normalization() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[4], &[2.5, 2.5, 2.5, 2.5]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeros_masked_positions() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[1, 4], &[1.0, 2.0, 3.0, 100.0]));
        let y = tape
            .masked_softmax(x, 1, &[true, true, true, false])
            .unwrap();
        let v = tape.value(y);
        assert_eq!(v[3], 0.0);
        assert!((v[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let loss = tape.sum_all(x);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[1., 2., 3.]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[1., 2., 3.]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"));
    }

    #[test]
    fn reverse_time_respects_lengths() {
        let mut tape = Tape::new();
        // batch 2, time 3, dim 1; second sequence has length 2
        let x = tape.constant(t64(&[2, 3, 1], &[1., 2., 3., 10., 20., 99.]));
        let y = tape.reverse_time(x, 1, &[3, 2]).unwrap();
        assert_eq!(tape.value(y), &[3., 2., 1., 20., 10., 99.]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let bias = tape.leaf(t64(&[3], &[10., 20., 30.]), true);
        let y = tape.add(x, bias).unwrap();
        assert_eq!(tape.value(y), &[11., 22., 33., 14., 25., 36.]);
        let loss = tape.sum_all(y);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(bias).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let xt = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(xt), &[3, 2]);
        assert_eq!(tape.value(xt), &[1., 4., 2., 5., 3., 6.]);
        let back = tape.permute(xt, &[1, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t64(&[2, 1], &[5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), &[1., 2., 5., 3., 4., 6.]);
        let a2 = tape.narrow(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        let b2 = tape.narrow(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(b2), tape.value(b));
    }
}
