//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Values are computed eagerly as operations are recorded. `backward` walks
//! the tape in reverse and adds `∂loss/∂param` into each bound parameter's
//! gradient slot; slots keep accumulating until the store is zeroed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{sigmoid, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Relu,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    SubRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Unary(Unary, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows { base: Var, rows: Var, index: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    RowSums(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick(Var, usize),
    AddN(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if !a.is_matrix() {
        return Err(Error::Shape {
            shape: a.shape().to_vec(),
            reason: format!("{op} needs a matrix"),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Number of parameters bound to this tape so far.
    pub fn bound_params(&self) -> usize {
        self.bound.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Binds a store parameter as a leaf. Binding the same id twice returns the same var.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// Elementwise sum; `b` may also be a `1 x m` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let value = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(value, Op::Add(a, b)));
        }
        let value = broadcast_row(ta, tb, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    /// Elementwise difference with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
            let value = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(value, Op::Sub(a, b)));
        }
        let value = broadcast_row(ta, tb, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::SubRow(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Scales row `i` of `a` (`n x m`) by `c[i]` where `c` is `n x 1`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(c));
        require_matrix("mul_col", ta)?;
        if tc.shape() != [ta.rows(), 1] {
            return Err(Error::dim("mul_col", ta.shape(), tc.shape()));
        }
        let cols = ta.cols();
        let mut out = ta.clone();
        for (i, row) in out.data_mut().chunks_mut(cols).enumerate() {
            let s = tc.data()[i];
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::MulCol(a, c)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 - v);
        self.push(value, Op::OneMinus(a))
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = match f {
            Unary::Sigmoid => t.map(sigmoid),
            Unary::Tanh => t.map(f64::tanh),
            Unary::Exp => t.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        reason: format!("non-positive entry {bad}"),
                    });
                }
                t.map(f64::ln)
            }
            Unary::Relu => t.map(|v| v.max(0.0)),
        };
        Ok(self.push(value, Op::Unary(f, a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// The hinge `max(a, 0)`.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?);
        require_matrix("concat_cols", first)?;
        let rows = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != rows {
                return Err(Error::dim("concat_cols", first.shape(), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?);
        require_matrix("concat_rows", first)?;
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != cols {
                return Err(Error::dim("concat_rows", first.shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Selects rows of `a` by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        require_matrix("gather_rows", t)?;
        if index.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(index.len() * t.cols());
        for &i in index {
            if i >= t.rows() {
                return Err(Error::Contract(format!("row {i} out of range for {:?}", t.shape())));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::matrix(index.len(), t.cols(), data)?;
        Ok(self.push(value, Op::GatherRows(a, index.to_vec())))
    }

    /// Copy of `base` with row `index[k]` replaced by row `k` of `rows`. Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, index: &[usize], rows: Var) -> Result<Var> {
        let (tb, tr) = (self.value(base), self.value(rows));
        require_matrix("scatter_rows", tb)?;
        if !tr.is_matrix() || tr.cols() != tb.cols() || tr.rows() != index.len() {
            return Err(Error::dim("scatter_rows", tb.shape(), tr.shape()));
        }
        let mut seen = vec![false; tb.rows()];
        for &i in index {
            if i >= tb.rows() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("bad scatter index {i}")));
            }
        }
        let cols = tb.cols();
        let mut out = tb.clone();
        for (k, &i) in index.iter().enumerate() {
            out.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(tr.row_slice(k));
        }
        Ok(self.push(
            out,
            Op::ScatterRows {
                base,
                rows,
                index: index.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Per-row sums as an `n x 1` column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        require_matrix("row_sums", t)?;
        let sums: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor::column(&sums);
        Ok(self.push(value, Op::RowSums(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        require_matrix("softmax_rows", self.value(a))?;
        let value = self.value(a).softmax_rows();
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        require_matrix("log_softmax_rows", t)?;
        let cols = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let lse = crate::tensor::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(out, Op::LogSoftmaxRows(a)))
    }

    /// Entry `flat_index` (row-major) of `a` as a scalar.
    pub fn pick(&mut self, a: Var, flat_index: usize) -> Result<Var> {
        let t = self.value(a);
        let v = *t.data().get(flat_index).ok_or_else(|| {
            Error::Contract(format!("index {flat_index} out of range for {:?}", t.shape()))
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, flat_index)))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Contract("sum of nothing".into()))?);
        let mut acc = first.clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            same_shape("add_n", &acc, t)?;
            acc.add_assign(t);
        }
        Ok(self.push(acc, Op::AddN(parts.to_vec())))
    }

    /// Accumulates `∂loss/∂θ` into the store for every parameter bound on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &g)?,
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    // out = a bᵀ: ∂a = g b, ∂b = gᵀ a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.matmul_tn(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let gb = column_sums(&g);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::SubRow(a, b) => {
                    let gb = column_sums(&g).map(|v| -v);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulCol(a, c) => {
                    let (ta, tc) = (self.value(*a), self.value(*c));
                    let cols = ta.cols();
                    let mut ga = g.clone();
                    let mut gc = vec![0.0; ta.rows()];
                    for r in 0..ta.rows() {
                        let s = tc.data()[r];
                        let grow = &g.data()[r * cols..(r + 1) * cols];
                        gc[r] = grow.iter().zip(ta.row_slice(r)).map(|(x, y)| x * y).sum();
                        ga.data_mut()[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *c, Tensor::column(&gc));
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|v| v * f)),
                Op::OneMinus(a) => accumulate(&mut grads, *a, g.map(|v| -v)),
                Op::Unary(f, a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let ga = match f {
                        Unary::Sigmoid => zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv)),
                        Unary::Tanh => zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv)),
                        Unary::Exp => zip_map(&g, y, |gv, yv| gv * yv),
                        Unary::Log => zip_map(&g, x, |gv, xv| gv / xv),
                        Unary::Relu => zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::matrix(rows, w, data)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        let data = g.data()[offset * cols..(offset + n) * cols].to_vec();
                        offset += n;
                        accumulate(&mut grads, p, Tensor::matrix(n, cols, data)?);
                    }
                }
                Op::GatherRows(a, index) => {
                    let src = self.value(*a);
                    let cols = src.cols();
                    let mut ga = Tensor::zeros(src.shape());
                    for (k, &i) in index.iter().enumerate() {
                        let dst = &mut ga.data_mut()[i * cols..(i + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(k)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterRows { base, rows, index } => {
                    let cols = g.cols();
                    let mut gbase = g.clone();
                    let mut grows = Vec::with_capacity(index.len() * cols);
                    for &i in index {
                        grows.extend_from_slice(g.row_slice(i));
                        gbase.data_mut()[i * cols..(i + 1) * cols].fill(0.0);
                    }
                    accumulate(&mut grads, *base, gbase);
                    accumulate(&mut grads, *rows, Tensor::matrix(index.len(), cols, grows)?);
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).shape())?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::RowSums(a) => {
                    let ta = self.value(*a);
                    let cols = ta.cols();
                    let mut ga = Tensor::zeros(ta.shape());
                    for (r, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                        row.fill(g.data()[r]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    // ∂x = y ⊙ (g - <g, y>) per row
                    let y = &node.value;
                    let cols = y.cols();
                    let mut ga = g.clone();
                    for (r, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                        let yr = y.row_slice(r);
                        let dot: f64 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (v, yv) in row.iter_mut().zip(yr) {
                            *v = yv * (*v - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    // ∂x = g - softmax(x) Σg per row
                    let y = &node.value;
                    let cols = y.cols();
                    let mut ga = g.clone();
                    for (r, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                        let total: f64 = row.iter().sum();
                        for (v, ly) in row.iter_mut().zip(y.row_slice(r)) {
                            *v -= ly.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, i) => {
                    let mut ga = Tensor::zeros(self.value(*a).shape());
                    ga.data_mut()[*i] = g.item();
                    accumulate(&mut grads, *a, ga);
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, g.clone());
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes already checked")
}

fn column_sums(g: &Tensor) -> Tensor {
    let cols = g.cols();
    let mut out = vec![0.0; cols];
    for row in g.data().chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::row(&out)
}

fn broadcast_row(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !a.is_matrix() || b.shape() != [1, a.cols()] {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let cols = a.cols();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(cols) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v = f(*v, bv);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParameterStore::new(0);
        let id = store.insert("w", Tensor::row(&[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let err = tape.backward(w, &mut store).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn log_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        assert_eq!(tape.value(s).item(), 0.5);
        assert_eq!(tape.value(t).item(), 0.0);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut store = ParameterStore::new(0);
        let id = store.insert("w", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let sq = tape.mul(w, w).unwrap();
        tape.backward(sq, &mut store).unwrap();
        tape.backward(sq, &mut store).unwrap();
        assert_eq!(store.grad(id).item(), 12.0);
    }

    #[test]
    fn matmul_backward_transpose_identities() {
        let mut store = ParameterStore::new(11);
        let a = store.insert_uniform("a", 3, 4, 1).unwrap();
        let b = store.insert_uniform("b", 4, 2, 1).unwrap();
        let g = Tensor::matrix(3, 2, vec![0.3, -1.0, 2.0, 0.5, -0.7, 1.1]).unwrap();
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        let prod = tape.matmul(va, vb).unwrap();
        let weights = tape.constant(g.clone());
        let weighted = tape.mul(prod, weights).unwrap();
        let loss = tape.sum(weighted);
        tape.backward(loss, &mut store).unwrap();
        let expect_a = g.matmul(&store.value(b).transpose().unwrap()).unwrap();
        let expect_b = store.value(a).transpose().unwrap().matmul(&g).unwrap();
        for (x, y) in store.grad(a).data().iter().zip(expect_a.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in store.grad(b).data().iter().zip(expect_b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn scatter_replaces_rows() {
        let mut tape = Tape::new();
        let base = tape.constant(Tensor::zeros(&[3, 2]));
        let rows = tape.constant(Tensor::row(&[1.0, 2.0]));
        let out = tape.scatter_rows(base, &[1], rows).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        assert!(tape.scatter_rows(base, &[3], rows).is_err());
    }
}
