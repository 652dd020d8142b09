//! Operation tape for reverse-mode differentiation.
//!
//! Every forward op appends one node holding its output value and enough
//! information to push gradients to its inputs. Node ids are assigned in
//! creation order, so the node list is already topologically sorted and the
//! backward sweep is a single reverse pass.

use std::collections::HashMap;

use rand::Rng;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Axis along which softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Rows,
    /// Each column sums to one.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var),
    Tanh(Var),
    Sigmoid(Var),
    Embedding(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    MeanRows(Var),
    Select(Var, Vec<usize>),
    SumSquares(Var),
    Norm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Confined to one thread for its lifetime.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("{op} produced a non-finite value")))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn shape2(r: usize, c: usize) -> Vec<usize> {
    vec![r, c]
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    /// Gradient of the last backward pass with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input or constant node. Rank-1 inputs become rows.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_finite("leaf", &t)?;
        let (r, c) = t.dims();
        let t = Tensor::new(shape2(r, c), t.into_data())?;
        Ok(self.push(t, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.leaf(Tensor::scalar(v))
    }

    /// Node for a stored parameter. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let t = store.get(id);
        check_finite("param", t)?;
        let (r, c) = t.dims();
        let t = Tensor::new(shape2(r, c), t.data().to_vec())?;
        let v = self.push(t, Op::Param);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.val(a).matmul(self.val(b))?;
        check_finite("matmul", &t)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Elementwise sum. A `1 × n` right operand broadcasts over the rows of
    /// an `m × n` left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, n) = ta.dims();
        if ta.dims() == tb.dims() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let t = Tensor::new(shape2(m, n), data)?;
            check_finite("add", &t)?;
            Ok(self.push(t, Op::Add(a, b)))
        } else if tb.dims() == (1, n) {
            let bd = tb.data();
            let data = ta
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
                .collect();
            let t = Tensor::new(shape2(m, n), data)?;
            check_finite("add", &t)?;
            Ok(self.push(t, Op::AddRow(a, b)))
        } else {
            Err(Error::dim("add", ta.shape(), tb.shape()))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite("sub", &t)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite("mul", &t)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ta = self.val(a);
        let data = ta.data().iter().map(|x| scale * x + shift).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite("affine", &t)?;
        Ok(self.push(t, Op::Affine(a, scale)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.affine(a, k, 0.0)
    }

    /// Concatenates along `axis`: `Axis::Cols` joins side by side (equal row
    /// counts), `Axis::Rows` stacks vertically (equal column counts).
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("concat of zero tensors"))?;
        match axis {
            Axis::Cols => {
                let rows = self.val(*first).rows();
                let mut cols = 0;
                for &p in parts {
                    let t = self.val(p);
                    if t.rows() != rows {
                        return Err(Error::dim("concat", self.val(*first).shape(), t.shape()));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.val(p).row_slice(r));
                    }
                }
                let t = Tensor::new(shape2(rows, cols), data)?;
                Ok(self.push(t, Op::Concat(parts.to_vec())))
            }
            Axis::Rows => {
                let cols = self.val(*first).cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let t = self.val(p);
                    if t.cols() != cols {
                        return Err(Error::dim("stack", self.val(*first).shape(), t.shape()));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                let t = Tensor::new(shape2(rows, cols), data)?;
                Ok(self.push(t, Op::Stack(parts.to_vec())))
            }
        }
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.val(a);
        let (m, n) = ta.dims();
        if start + len > n {
            return Err(Error::dim("slice_cols", ta.shape(), &[start, len]));
        }
        let data = (0..m)
            .flat_map(|r| ta.row_slice(r)[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(shape2(m, len), data)?;
        Ok(self.push(t, Op::SliceCols(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let (m, n) = ta.dims();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let t = Tensor::new(shape2(n, m), data)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ta = self.val(a);
        let (m, n) = ta.dims();
        let mut out = ta.data().to_vec();
        let (count, len, stride, step) = match axis {
            Axis::Rows => (m, n, 1, n),
            Axis::Cols => (n, m, n, 1),
        };
        for g in 0..count {
            let base = g * step;
            let idx = |k: usize| base + k * stride;
            let max = (0..len).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (out[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
        let t = Tensor::new(shape2(m, n), out)?;
        check_finite("softmax", &t)?;
        Ok(self.push(t, Op::Softmax(a, axis)))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let (m, n) = ta.dims();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = ta.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor::new(shape2(m, n), out)?;
        check_finite("log_softmax", &t)?;
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sigmoid(a)))
    }

    /// Gathers rows of `table` (one per id) into a `ids.len() × cols` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        let (rows, cols) = tt.dims();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::dim("embedding", tt.shape(), &[id]));
            }
            data.extend_from_slice(tt.row_slice(id));
        }
        let t = Tensor::new(shape2(ids.len(), cols), data)?;
        Ok(self.push(t, Op::Embedding(table, ids.to_vec())))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::input(format!("dropout rate {rate} outside [0, 1)")));
        }
        let ta = self.val(a);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout(a, mask)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    /// Column means over the rows: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let (m, n) = ta.dims();
        if m == 0 {
            return Err(Error::input("mean over zero rows"));
        }
        let mut data = vec![0.0; n];
        for r in 0..m {
            for (d, x) in data.iter_mut().zip(ta.row_slice(r)) {
                *d += x;
            }
        }
        for d in &mut data {
            *d /= m as f64;
        }
        let t = Tensor::new(shape2(1, n), data)?;
        Ok(self.push(t, Op::MeanRows(a)))
    }

    /// Picks the listed `(row, col)` entries into a `1 × k` row.
    pub fn select(&mut self, a: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let ta = self.val(a);
        let (m, n) = ta.dims();
        let mut flat = Vec::with_capacity(positions.len());
        for &(r, c) in positions {
            if r >= m || c >= n {
                return Err(Error::dim("select", ta.shape(), &[r, c]));
            }
            flat.push(r * n + c);
        }
        let data = flat.iter().map(|&i| ta.data()[i]).collect();
        let t = Tensor::new(shape2(1, flat.len()), data)?;
        Ok(self.push(t, Op::Select(a, flat)))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().map(|x| x * x).sum();
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(a)))
    }

    /// Frobenius norm. The subgradient at zero is taken to be zero.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.val(a).data().iter().map(|x| x * x).sum();
        Ok(self.push(Tensor::scalar(s.sqrt()), Op::Norm(a)))
    }

    /// Clears gradients so `backward` may run again on the same tape.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.val(loss).len() != 1 {
            return Err(Error::dim("backward", self.val(loss).shape(), &[1]));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            let v = |x: Var| &nodes[x.0].value;
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    let (m, k) = ta.dims();
                    let n = tb.cols();
                    {
                        let ga = acc(grads, *a, m * k);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &tb.data()[p * n..(p + 1) * n];
                                ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    let gb = acc(grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = ta.data()[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for x in [a, b] {
                        for (o, y) in acc(grads, *x, g.len()).iter_mut().zip(&g) {
                            *o += y;
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    for (o, y) in acc(grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += y;
                    }
                    let n = v(*b).len();
                    let gb = acc(grads, *b, n);
                    for row in g.chunks(n) {
                        for (o, y) in gb.iter_mut().zip(row) {
                            *o += y;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (o, y) in acc(grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += y;
                    }
                    for (o, y) in acc(grads, *b, g.len()).iter_mut().zip(&g) {
                        *o -= y;
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (v(*a), v(*b));
                    for (o, (y, x)) in acc(grads, *a, g.len()).iter_mut().zip(g.iter().zip(tb.data())) {
                        *o += y * x;
                    }
                    for (o, (y, x)) in acc(grads, *b, g.len()).iter_mut().zip(g.iter().zip(ta.data())) {
                        *o += y * x;
                    }
                }
                Op::Affine(a, k) => {
                    for (o, y) in acc(grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += k * y;
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let cols = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pc = v(*p).cols();
                        let gp = acc(grads, *p, rows * pc);
                        for r in 0..rows {
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            for (o, y) in gp[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *o += y;
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Stack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = v(*p).len();
                        for (o, y) in acc(grads, *p, len).iter_mut().zip(&g[offset..offset + len]) {
                            *o += y;
                        }
                        offset += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = v(*a).dims();
                    let len = node.value.cols();
                    let ga = acc(grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..len {
                            ga[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = v(*a).dims();
                    let ga = acc(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::Softmax(a, axis) => {
                    let y = node.value.data();
                    let (m, n) = node.value.dims();
                    let (count, len, stride, step) = match axis {
                        Axis::Rows => (m, n, 1, n),
                        Axis::Cols => (n, m, n, 1),
                    };
                    let ga = acc(grads, *a, m * n);
                    for grp in 0..count {
                        let base = grp * step;
                        let dot: f64 = (0..len).map(|k| g[base + k * stride] * y[base + k * stride]).sum();
                        for k in 0..len {
                            let idx = base + k * stride;
                            ga[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let (m, n) = node.value.dims();
                    let ga = acc(grads, *a, m * n);
                    for r in 0..m {
                        let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                        for c in 0..n {
                            let idx = r * n + c;
                            ga[idx] += g[idx] - y[idx].exp() * gs;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    for (o, (gy, yy)) in acc(grads, *a, g.len()).iter_mut().zip(g.iter().zip(y)) {
                        *o += gy * (1.0 - yy * yy);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    for (o, (gy, yy)) in acc(grads, *a, g.len()).iter_mut().zip(g.iter().zip(y)) {
                        *o += gy * yy * (1.0 - yy);
                    }
                }
                Op::Embedding(table, ids) => {
                    let (rows, cols) = v(*table).dims();
                    let gt = acc(grads, *table, rows * cols);
                    for (k, &id) in ids.iter().enumerate() {
                        for (o, y) in gt[id * cols..(id + 1) * cols].iter_mut().zip(&g[k * cols..(k + 1) * cols]) {
                            *o += y;
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    for (o, (y, m)) in acc(grads, *a, g.len()).iter_mut().zip(g.iter().zip(mask)) {
                        *o += y * m;
                    }
                }
                Op::Sum(a) => {
                    let len = v(*a).len();
                    for o in acc(grads, *a, len).iter_mut() {
                        *o += g[0];
                    }
                }
                Op::MeanRows(a) => {
                    let (m, n) = v(*a).dims();
                    let ga = acc(grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c] / m as f64;
                        }
                    }
                }
                Op::Select(a, flat) => {
                    let len = v(*a).len();
                    let ga = acc(grads, *a, len);
                    for (k, &i) in flat.iter().enumerate() {
                        ga[i] += g[k];
                    }
                }
                Op::SumSquares(a) => {
                    let x = v(*a).data();
                    for (o, xx) in acc(grads, *a, x.len()).iter_mut().zip(x) {
                        *o += 2.0 * xx * g[0];
                    }
                }
                Op::Norm(a) => {
                    let norm = node.value.item();
                    let x = v(*a).data();
                    let ga = acc(grads, *a, x.len());
                    if norm > 0.0 {
                        for (o, xx) in ga.iter_mut().zip(x) {
                            *o += g[0] * xx / norm;
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        for g in self.grads.iter().flatten() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric("backward produced a non-finite gradient"));
            }
        }
        Ok(())
    }

    /// Copies parameter gradients from the last backward pass into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Gradients) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                out.accumulate(id, g);
            }
        }
    }

    /// Gradients for every parameter in `store`, zero where unreached.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        self.accumulate_param_grads(&mut out);
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
