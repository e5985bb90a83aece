use std::collections::HashMap;

use super::{axis_split, gemm_acc, Float, MatView, Parameters, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Recording of a computation. Nodes are appended in evaluation order, so
/// every parent precedes its children and the graph is acyclic by
/// construction.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads<F> {
    by_node: HashMap<usize, Tensor<F>>,
    by_param: HashMap<usize, Tensor<F>>,
}

impl<F: Float> Grads<F> {
    /// Gradient of a leaf created with [`Graph::leaf`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.by_node.get(&v.0)
    }

    /// Gradient of parameter `index` (position in [`Parameters`]).
    pub fn param(&self, index: usize) -> Option<&Tensor<F>> {
        self.by_param.get(&index)
    }

    pub fn into_param_map(self) -> HashMap<usize, Tensor<F>> {
        self.by_param
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf whose gradient is reported by [`Grads::wrt`].
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to parameter `index`; its gradient lands in [`Grads::param`].
    pub fn param(&mut self, index: usize, t: Tensor<F>) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].param = Some(index);
        v
    }

    /// Binds every tensor of `params` as a parameter leaf, in order.
    pub fn bind(&mut self, params: &Parameters<F>) -> Vec<Var> {
        params
            .iter()
            .enumerate()
            .map(|(i, (_, t))| self.param(i, t.clone()))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(
            self.data(a),
            MatView::row_major(m, k),
            self.data(b),
            MatView::row_major(k, n),
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `[m,k] @ [n,k]^T -> [m,n]` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(
            self.data(a),
            MatView::row_major(m, k),
            self.data(b),
            MatView::transposed(n, k),
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulNT(a, b), &[a, b]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis of `x` (bias broadcast).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > F::zero() { v } else { F::zero() });
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.ln());
        self.push(t, Op::Log(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(src[i * c + j]);
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis` where entries with `mask == false` get weight 0.
    /// A slice with no allowed entry is an error.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax axis", &shape, &[axis]));
        }
        if let Some(m) = mask {
            if m.len() != self.value(x).numel() {
                return Err(Error::shape("softmax mask", &shape, &[m.len()]));
            }
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let allowed = |i: usize| mask.is_none_or(|m| m[idx(i)]);
                let mut max = F::neg_infinity();
                for i in (0..len).filter(|&i| allowed(i)) {
                    max = max.max(src[idx(i)]);
                }
                if max == F::neg_infinity() {
                    return Err(Error::Numeric(format!(
                        "softmax slice {o}/{j} of shape {shape:?} has no unmasked entry"
                    )));
                }
                let mut total = F::zero();
                for i in (0..len).filter(|&i| allowed(i)) {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] = out[idx(i)] / total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = src.len() / d.max(1);
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); src.len()];
        let dn = F::from_usize(d).unwrap();
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat axis", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Columns `start..start+width` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + width > c {
            return Err(Error::Index {
                what: "column slice end",
                index: start + width,
                size: c,
            });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let t = Tensor::new(vec![r, width], out)?;
        Ok(self.push(t, Op::SliceLast { x, start }, &[x]))
    }

    /// Per-row `-log softmax(logits)[target]` for `[n, V]` logits; returns `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy targets", &[n, v], &[targets.len()]));
        }
        let src = self.data(logits);
        let mut probs = vec![F::zero(); n * v];
        let mut out = Vec::with_capacity(n);
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    size: v,
                });
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for c in 0..v {
                let e = (row[c] - max).exp();
                probs[r * v + c] = e;
                total += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / total;
            }
            out.push(total.ln() + max - row[t]);
        }
        let t = Tensor::new(vec![n], out)?;
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Selects elements by flat index, giving a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            out.push(*src.get(i).ok_or(Error::Index {
                what: "pick",
                index: i,
                size: src.len(),
            })?);
        }
        let t = Tensor::new(vec![idx.len()], out)?;
        Ok(self.push(
            t,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_usize(self.value(x).numel().max(1)).unwrap();
        let s = self.sum(x);
        self.scale(s, F::one() / n)
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(mut self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward on non-scalar", self.shape(loss), &[]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut result = Grads {
            by_node: HashMap::new(),
            by_param: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = std::mem::replace(
                &mut self.nodes[i],
                Node {
                    value: Tensor::zeros(&[0]),
                    op: Op::Leaf,
                    requires_grad: false,
                    param: None,
                },
            );
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                if let Some(p) = node.param {
                    result.by_param.insert(p, t.clone());
                }
                result.by_node.insert(i, t);
                continue;
            }
            self.propagate(&node, &g, &mut grads);
        }
        Ok(result)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); numel]))
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_acc(
                        g,
                        MatView::row_major(m, n),
                        bd,
                        MatView::transposed(k, n),
                        ga,
                    );
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_acc(
                        ad,
                        MatView::transposed(m, k),
                        g,
                        MatView::row_major(m, n),
                        gb,
                    );
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_acc(
                        g,
                        MatView::row_major(m, n),
                        bd,
                        MatView::row_major(n, k),
                        ga,
                    );
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_acc(
                        g,
                        MatView::transposed(m, n),
                        ad,
                        MatView::row_major(m, k),
                        gb,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &d), &w) in ga.iter_mut().zip(g).zip(bd) {
                        *o += d * w;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &d), &w) in gb.iter_mut().zip(g).zip(ad) {
                        *o += d * w;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                let d = self.shape(*bias)[0];
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(d.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &d) in gx.iter_mut().zip(g) {
                        *o += d * *c;
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > F::zero() {
                            *o += d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &d), &s) in gx.iter_mut().zip(g).zip(y) {
                        *o += d * s * (F::one() - s);
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *o += d / v;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: F = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                gx[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gd = self.data(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for (row_g, row_xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += row_g[c] * row_xh[c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let dn = F::from_usize(d).unwrap();
                    let mut dxhat = vec![F::zero(); d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row_g = &g[r * d..(r + 1) * d];
                        let row_xh = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = row_g[c] * gd[c];
                        }
                        let m1 = dxhat.iter().copied().sum::<F>() / dn;
                        let m2 = dxhat
                            .iter()
                            .zip(row_xh)
                            .map(|(&a, &b)| a * b)
                            .sum::<F>()
                            / dn;
                        for c in 0..d {
                            gx[r * d + c] += rs * (dxhat[c] - m1 - row_xh[c] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.acc(grads, p) {
                        let chunk = len * inner;
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceLast { x, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = node.value.shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        add_into(
                            &mut gx[i * c + start..i * c + start + w],
                            &g[i * w..(i + 1) * w],
                        );
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let d = g[r];
                        for c in 0..v {
                            gl[r * v + c] += d * probs[r * v + c];
                        }
                        gl[r * v + t] -= d;
                    }
                }
            }
            Op::Pick { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&i, &d) in idx.iter().zip(g) {
                        gx[i] += d;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

pub(crate) fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(sum(w * f(x)))/dx against central differences, for a random weighting w.
    fn check_grad(
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut g = Graph::new();
            let vs: Vec<_> = inputs.iter().map(|x| g.constant(x.clone())).collect();
            let out = f(&mut g, &vs).unwrap();
            random(g.shape(out), &mut rng)
        };
        let eval = |xs: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vs: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let out = f(&mut g, &vs).unwrap();
            g.value(out)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut g = Graph::new();
        let vs: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vs).unwrap();
        let w = g.constant(probe.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vs[k]).unwrap();
            for i in 0..x.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < tol, "input {k} elem {i}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_gradient_is_row_broadcast_of_b_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut g = Graph::new();
        let av = g.leaf(a.clone());
        let bv = g.constant(b.clone());
        let c = g.matmul(av, bv).unwrap();
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        let ga = grads.wrt(av).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let row_sum = b.at2(k, 0) + b.at2(k, 1);
                assert_abs_diff_eq!(ga.at2(i, k), row_sum, epsilon = 1e-12);
            }
        }
        check_grad(vec![a, b], |g, v| g.matmul(v[0], v[1]), 1e-6);
    }

    #[test]
    fn matmul_nt_matches_matmul_with_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[3, 5], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let direct = g.matmul_nt(av, bv).unwrap();
        let bt = g.transpose(bv).unwrap();
        let via_t = g.matmul(av, bt).unwrap();
        for (x, y) in g.value(direct).data().iter().zip(g.value(via_t).data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        check_grad(vec![a, b], |g, v| g.matmul_nt(v[0], v[1]), 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.softmax(x, 0).unwrap();
        let expected = [0.09003, 0.24473, 0.66524];
        for (v, e) in g.value(s).data().iter().zip(expected) {
            assert_abs_diff_eq!(*v, e, epsilon = 1e-5);
        }
    }

    #[test]
    fn softmax_along_leading_axis_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 3, 2], &mut rng);
        for axis in 0..3 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let s = g.softmax(xv, axis).unwrap();
            let shape = g.shape(s).to_vec();
            let (outer, len, inner) = axis_split(&shape, axis);
            let d = g.value(s).data();
            for o in 0..outer {
                for j in 0..inner {
                    let total: f64 = (0..len).map(|i| d[(o * len + i) * inner + j]).sum();
                    assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
                }
            }
            check_grad(vec![x.clone()], move |g, v| g.softmax(v[0], axis), 1e-6);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries_and_rejects_empty_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let mask = [true, false, true, false, false, false];
        assert!(g.masked_softmax(x, 1, Some(&mask)).is_err());
        let mask = [true, false, true, false, true, false];
        let s = g.masked_softmax(x, 1, Some(&mask)).unwrap();
        let d = g.value(s).data();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[4], 1.0);
        assert_abs_diff_eq!(d[0] + d[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(t(&[4], &[1.0; 4]));
        let bias = g.constant(t(&[4], &[0.0; 4]));
        let x = g.constant(t(&[4], &[5.0; 4]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let gain = g.constant(t(&[2], &[1.0; 2]));
        let bias = g.constant(t(&[2], &[0.0; 2]));
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-15).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y).data()[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // var/(var+eps) must be within 1e-6 of 1, so keep the input variance well above 1.
        let x = random(&[5, 16], &mut rng);
        let x = Tensor::new(vec![5, 16], x.data().iter().map(|v| 5.0 * v).collect()).unwrap();
        let mut g = Graph::new();
        let gain = g.constant(t(&[16], &[1.0; 16]));
        let bias = g.constant(t(&[16], &[0.0; 16]));
        let xv = g.constant(x.clone());
        let y = g.layer_norm(xv, gain, bias, 1e-6).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
        let gain = random(&[16], &mut rng);
        let bias = random(&[16], &mut rng);
        check_grad(
            vec![x, gain, bias],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            1e-6,
        );
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let logits = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let ce = g.cross_entropy(logits, &[0]).unwrap();
        assert_abs_diff_eq!(g.value(ce).item(), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn gather_rejects_out_of_vocabulary_ids() {
        let mut g = Graph::<f64>::new();
        let table = g.constant(Tensor::zeros(&[5, 2]));
        assert!(matches!(
            g.gather(table, &[1, 5]),
            Err(Error::Index { index: 5, .. })
        ));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let pos = Tensor::new(
            vec![3, 4],
            a.data().iter().map(|v| v.abs() + 0.5).collect(),
        )
        .unwrap();
        let bias = random(&[4], &mut rng);
        check_grad(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), 1e-6);
        check_grad(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), 1e-6);
        check_grad(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]), 1e-6);
        check_grad(vec![a.clone(), bias], |g, v| g.add_row(v[0], v[1]), 1e-6);
        check_grad(vec![a.clone()], |g, v| Ok(g.scale(v[0], 0.7)), 1e-6);
        check_grad(vec![a.clone()], |g, v| Ok(g.relu(v[0])), 1e-6);
        check_grad(vec![a.clone()], |g, v| Ok(g.sigmoid(v[0])), 1e-6);
        check_grad(vec![pos], |g, v| Ok(g.log(v[0])), 1e-6);
        check_grad(vec![a.clone()], |g, v| g.transpose(v[0]), 1e-6);
        check_grad(vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 2), 1e-6);
        check_grad(vec![a.clone(), b.clone()], |g, v| g.concat(&[v[0], v[1]], 0), 1e-6);
        check_grad(vec![a.clone(), b.clone()], |g, v| g.concat(&[v[0], v[1]], 1), 1e-6);
        check_grad(vec![a.clone()], |g, v| g.gather(v[0], &[2, 0, 2]), 1e-6);
        check_grad(vec![a.clone()], |g, v| g.cross_entropy(v[0], &[1, 3, 0]), 1e-6);
        check_grad(vec![a.clone()], |g, v| g.pick(v[0], &[0, 5, 5]), 1e-6);
        check_grad(vec![a], |g, v| Ok(g.sum(v[0])), 1e-6);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[0.3, -2.0, 7.0]));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_an_error() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn two_branches_accumulate() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let a = g.scale(w, 3.0);
        let b = g.relu(w);
        let c = g.add(a, b).unwrap();
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, 2.0]);
    }
}
