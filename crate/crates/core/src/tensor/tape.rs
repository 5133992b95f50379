use std::sync::Arc;

use super::{matmul_raw, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Softmax { src: Var },
    LayerNorm { src: Var, inv_std: Vec<T> },
    Gelu(Var),
    Silu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Mean(Var),
    Mse(Var, Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::Embedding { .. } => "embedding",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Linear record of primitive ops. Nodes are appended in evaluation order,
/// which is already a topological order, so backward is a single reverse
/// sweep visiting each node once.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: T::VERIFY,
        }
    }

    /// Toggle the per-op NaN/inf check (on by default in `f64`).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_raw(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            false,
            false,
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    fn row_operand(&self, a: Var, row: Var, op: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.dims2(a, op)?;
        if self.value(row).len() != c {
            return Err(Error::shape(op, &[self.shape(a), self.shape(row)]));
        }
        Ok((r, c))
    }

    /// `a + row` with `row` (length = columns of `a`) broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.row_operand(a, row, "add_row")?;
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % c])
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// `a * row` with `row` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.row_operand(a, row, "mul_row")?;
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * rv[i % c])
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(v, Op::Scale(a, s), &[a])
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Precondition(format!(
                "concat needs at least one part and axis 0 or 1 (got {} parts, axis {axis})",
                parts.len()
            )));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2(p, "concat"))
            .collect::<Result<_>>()?;
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let value = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape("concat", &shapes));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, c], data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape("concat", &shapes));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![r, cols], data)?
        };
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Contiguous window `[start, start + len)` of a rank-2 tensor along `axis`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(src, "slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::Shape {
                op: "slice",
                shapes: vec![vec![r, c], vec![axis, start, len]],
            });
        }
        let s = self.value(src);
        let value = if axis == 0 {
            Tensor::new(vec![len, c], s.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&s.row(i)[start..start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        self.push(value, Op::Slice { src, axis, start }, &[src])
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, src: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(src, axis, start, len)?);
            start += len;
        }
        let (r, c) = self.dims2(src, "split")?;
        if start != if axis == 0 { r } else { c } {
            return Err(Error::Shape {
                op: "split",
                shapes: vec![vec![r, c], sizes.to_vec()],
            });
        }
        Ok(out)
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(src).clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape(src), &[src])
    }

    pub fn transpose(&mut self, src: Var) -> Result<Var> {
        let (r, c) = self.dims2(src, "transpose")?;
        let value = Tensor::new(vec![c, r], transpose_raw(self.value(src).data(), r, c))?;
        self.push(value, Op::Transpose(src), &[src])
    }

    /// Row-wise softmax of `scores + mask`, where `mask` holds `0` or `-inf`.
    ///
    /// A row whose entries are all masked is rejected.
    pub fn softmax_masked(&mut self, src: Var, mask: Option<&Arc<Tensor<T>>>) -> Result<Var> {
        let (r, c) = self.dims2(src, "softmax")?;
        if let Some(m) = mask {
            if m.shape() != [r, c] {
                return Err(Error::shape("softmax", &[self.shape(src), m.shape()]));
            }
        }
        let s = self.value(src).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &s[i * c..(i + 1) * c];
            let mrow = mask.map(|m| m.row(i));
            let o = &mut out[i * c..(i + 1) * c];
            let mut max = T::neg_infinity();
            for j in 0..c {
                let add = match mrow {
                    Some(mr) => {
                        let mv = mr[j];
                        if mv != T::zero() && mv != T::neg_infinity() {
                            return Err(Error::Precondition(format!(
                                "softmax mask entries must be 0 or -inf (row {i}, col {j})"
                            )));
                        }
                        mv
                    }
                    None => T::zero(),
                };
                o[j] = row[j] + add;
                if o[j] > max {
                    max = o[j];
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Precondition(format!(
                    "softmax row {i} is fully masked"
                )));
            }
            let mut sum = T::zero();
            for v in o.iter_mut() {
                *v = if *v == T::neg_infinity() {
                    T::zero()
                } else {
                    (*v - max).exp()
                };
                sum += *v;
            }
            let inv = T::one() / sum;
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(value, Op::Softmax { src }, &[src])
    }

    /// Normalise each row to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, src: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims2(src, "layernorm")?;
        let s = self.value(src).data();
        let n = T::of(c as f64);
        let mut out = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &s[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(value, Op::LayerNorm { src, inv_std }, &[src])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, src: Var) -> Result<Var> {
        let c = T::of(GELU_C);
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let data = self
            .value(src)
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let value = Tensor::new(self.shape(src).to_vec(), data)?;
        self.push(value, Op::Gelu(src), &[src])
    }

    pub fn silu(&mut self, src: Var) -> Result<Var> {
        let data = self
            .value(src)
            .data()
            .iter()
            .map(|&x| x / (T::one() + (-x).exp()))
            .collect();
        let value = Tensor::new(self.shape(src).to_vec(), data)?;
        self.push(value, Op::Silu(src), &[src])
    }

    /// Gather rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::OutOfRange(format!(
                "embedding id {bad} >= table size {rows}"
            )));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn mean(&mut self, src: Var) -> Result<Var> {
        let s = self.value(src);
        if s.is_empty() {
            return Err(Error::shape("mean", &[s.shape()]));
        }
        let m = s.data().iter().copied().sum::<T>() / T::of(s.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(src), &[src])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mse", &[self.shape(a)]));
        }
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mse(a, b), &[a, b])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::Precondition(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out).to_vec(), T::one()));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a, "matmul")?;
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    // dA = dC * B^T
                    let acc = slot(grads, *a, self.shape(*a));
                    matmul_raw(gd, self.value(*b).data(), m, n, k, false, true, acc, true);
                }
                if self.wants(*b) {
                    // dB = A^T * dC
                    let acc = slot(grads, *b, self.shape(*b));
                    matmul_raw(self.value(*a).data(), gd, k, m, n, true, false, acc, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, self.shape(v)), gd);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, self.shape(*a)), gd);
                }
                if self.wants(*row) {
                    let c = self.value(*row).len();
                    let acc = slot(grads, *row, self.shape(*row));
                    for (i, &x) in gd.iter().enumerate() {
                        acc[i % c] += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let acc = slot(grads, *a, self.shape(*a));
                    for ((o, &x), &y) in acc.iter_mut().zip(gd).zip(bv) {
                        *o += x * y;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let acc = slot(grads, *b, self.shape(*b));
                    for ((o, &x), &y) in acc.iter_mut().zip(gd).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).data();
                let c = rv.len();
                if self.wants(*a) {
                    let acc = slot(grads, *a, self.shape(*a));
                    for (i, (o, &x)) in acc.iter_mut().zip(gd).enumerate() {
                        *o += x * rv[i % c];
                    }
                }
                if self.wants(*row) {
                    let av = self.value(*a).data();
                    let acc = slot(grads, *row, self.shape(*row));
                    for (i, (&x, &y)) in gd.iter().zip(av).enumerate() {
                        acc[i % c] += x * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let acc = slot(grads, *a, self.shape(*a));
                    for (o, &x) in acc.iter_mut().zip(gd) {
                        *o += x * *s;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (r, c) = g.dims2("concat")?;
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.dims2(p, "concat")?;
                    if self.wants(p) {
                        let acc = slot(grads, p, self.shape(p));
                        if *axis == 0 {
                            add_into(acc, &gd[offset * c..(offset + pr) * c]);
                        } else {
                            for i in 0..r {
                                add_into(
                                    &mut acc[i * pc..(i + 1) * pc],
                                    &gd[i * c + offset..i * c + offset + pc],
                                );
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { src, axis, start } => {
                if self.wants(*src) {
                    let (_, c) = self.dims2(*src, "slice")?;
                    let (gr, gc) = g.dims2("slice")?;
                    let acc = slot(grads, *src, self.shape(*src));
                    if *axis == 0 {
                        add_into(&mut acc[start * c..(start + gr) * c], gd);
                    } else {
                        for i in 0..gr {
                            add_into(
                                &mut acc[i * c + start..i * c + start + gc],
                                &gd[i * gc..(i + 1) * gc],
                            );
                        }
                    }
                }
            }
            Op::Reshape(src) => {
                if self.wants(*src) {
                    add_into(slot(grads, *src, self.shape(*src)), gd);
                }
            }
            Op::Transpose(src) => {
                if self.wants(*src) {
                    let (r, c) = g.dims2("transpose")?;
                    let t = transpose_raw(gd, r, c);
                    add_into(slot(grads, *src, self.shape(*src)), &t);
                }
            }
            Op::Softmax { src } => {
                if self.wants(*src) {
                    let (r, c) = node.value.dims2("softmax")?;
                    let p = node.value.data();
                    let acc = slot(grads, *src, self.shape(*src));
                    for i in 0..r {
                        let pr = &p[i * c..(i + 1) * c];
                        let gr = &gd[i * c..(i + 1) * c];
                        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            acc[i * c + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { src, inv_std } => {
                if self.wants(*src) {
                    let (r, c) = node.value.dims2("layernorm")?;
                    let y = node.value.data();
                    let n = T::of(c as f64);
                    let acc = slot(grads, *src, self.shape(*src));
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &gd[i * c..(i + 1) * c];
                        let mg = gr.iter().copied().sum::<T>() / n;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..c {
                            acc[i * c + j] += inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Gelu(src) => {
                if self.wants(*src) {
                    let c = T::of(GELU_C);
                    let k = T::of(0.044715);
                    let half = T::of(0.5);
                    let three = T::of(3.0);
                    let xs = self.value(*src).data();
                    let acc = slot(grads, *src, self.shape(*src));
                    for ((o, &x), &gv) in acc.iter_mut().zip(xs).zip(gd) {
                        let u = c * (x + k * x * x * x);
                        let th = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        let d = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
                        *o += gv * d;
                    }
                }
            }
            Op::Silu(src) => {
                if self.wants(*src) {
                    let xs = self.value(*src).data();
                    let acc = slot(grads, *src, self.shape(*src));
                    for ((o, &x), &gv) in acc.iter_mut().zip(xs).zip(gd) {
                        let s = T::one() / (T::one() + (-x).exp());
                        *o += gv * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let c = self.shape(*table)[1];
                    let acc = slot(grads, *table, self.shape(*table));
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut acc[id * c..(id + 1) * c], &gd[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Mean(src) => {
                if self.wants(*src) {
                    let n = self.value(*src).len();
                    let d = gd[0] / T::of(n as f64);
                    for o in slot(grads, *src, self.shape(*src)).iter_mut() {
                        *o += d;
                    }
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len();
                let two = T::of(2.0) * gd[0] / T::of(n as f64);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let acc = slot(grads, *a, self.shape(*a));
                    for ((o, &x), &y) in acc.iter_mut().zip(av).zip(bv) {
                        *o += two * (x - y);
                    }
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, self.shape(*b));
                    for ((o, &x), &y) in acc.iter_mut().zip(av).zip(bv) {
                        *o -= two * (x - y);
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
        .data_mut()
}

fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (o, &x) in acc.iter_mut().zip(src) {
        *o += x;
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_raw<T: Scalar>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}
