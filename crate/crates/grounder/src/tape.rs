//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Ops are matrix-granular; a forward pass records one node per op and
//! `backward` walks the tape once, accumulating parameter gradients into a
//! caller-owned buffer. Frozen parameters participate in the forward pass but
//! their gradient slots are simply never read by the optimizer.

use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input: no gradient.
    Input,
    /// Leaf bound to a parameter id.
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    /// Row-wise softmax; columns where the mask is false are excluded.
    RowSoftmax(Var, Rc<Vec<bool>>),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    /// Broadcast-add a 1xC row onto every row.
    AddRow(Var, Var),
    ConcatRows(Rc<Vec<Var>>),
    SliceRows(Var, usize, usize),
    ConcatCols(Rc<Vec<Var>>),
    SliceCols(Var, usize, usize),
    Sum(Var),
    Mean(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(1024) }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        self.push(Op::Param(id), store.value(id).clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(Op::Mul(a, b), out)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x / y).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(Op::Div(a, b), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::from_vec(t.rows, t.cols, data);
        self.push(Op::Relu(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::from_vec(t.rows, t.cols, data);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x.abs()).collect();
        let out = Tensor::from_vec(t.rows, t.cols, data);
        self.push(Op::Abs(a), out)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x.min(*y)).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(Op::Min(a, b), out)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x.max(*y)).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(Op::Max(a, b), out)
    }

    /// Softmax over each row, restricted to columns where `mask` is true.
    /// Masked columns get probability exactly 0. Panics if the mask is all
    /// false; callers must reject empty contexts beforehand.
    pub fn row_softmax(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Var {
        let t = self.value(a);
        assert_eq!(mask.len(), t.cols, "softmax mask width");
        assert!(mask.iter().any(|&m| m), "softmax over fully masked row");
        let mut out = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            let row = t.row(r);
            let m = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &keep)| keep)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..t.cols {
                if mask[c] {
                    let e = (row[c] - m).exp();
                    *out.at_mut(r, c) = e;
                    z += e;
                }
            }
            for c in 0..t.cols {
                *out.at_mut(r, c) /= z;
            }
        }
        self.push(Op::RowSoftmax(a, mask), out)
    }

    /// Per-row layer normalization with affine parameters (1xC each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.cols, t.cols);
        assert_eq!(b.cols, t.cols);
        let mut out = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..t.cols {
                *out.at_mut(r, c) = (row[c] - mean) * rstd * g.data[c] + b.data[c];
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta }, out)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (t, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1);
        assert_eq!(r.cols, t.cols);
        let mut out = t.clone();
        for i in 0..out.rows {
            for c in 0..out.cols {
                *out.at_mut(i, c) += r.data[c];
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&v| self.value(v).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &v in parts {
            let t = self.value(v);
            assert_eq!(t.cols, cols);
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(Op::ConcatRows(Rc::new(parts.to_vec())), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows);
        let data = t.data[start * t.cols..(start + len) * t.cols].to_vec();
        let out = Tensor::from_vec(len, t.cols, data);
        self.push(Op::SliceRows(a, start, len), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&v| self.value(v).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &v in parts {
            let t = self.value(v);
            assert_eq!(t.rows, rows);
            for r in 0..rows {
                for c in 0..t.cols {
                    *out.at_mut(r, off + c) = t.at(r, c);
                }
            }
            off += t.cols;
        }
        self.push(Op::ConcatCols(Rc::new(parts.to_vec())), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols);
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            for c in 0..len {
                *out.at_mut(r, c) = t.at(r, start + c);
            }
        }
        self.push(Op::SliceCols(a, start, len), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::from_vec(1, 1, vec![s]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::from_vec(1, 1, vec![s]))
    }

    /// Convenience: constant 1x1 scalar.
    pub fn constant(&mut self, v: f64) -> Var {
        self.input(Tensor::from_vec(1, 1, vec![v]))
    }

    /// Backpropagate from the scalar `loss` node, seeding with `seed` (use
    /// 1/batch for averaged batch losses). Parameter gradients accumulate
    /// into `grads`, indexed by param id.
    pub fn backward(&self, loss: Var, seed: f64, grads: &mut [Tensor]) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::from_vec(1, 1, vec![seed]));

        for i in (0..=loss.0).rev() {
            let dy = match adj[i].take() {
                Some(d) => d,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => grads[*id].add_assign(&dy),
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &dy);
                    accumulate(&mut adj, *b, &dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &dy);
                    let mut neg = dy.clone();
                    neg.scale_assign(-1.0);
                    accumulate(&mut adj, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = hadamard(&dy, self.value(*b));
                    let db = hadamard(&dy, self.value(*a));
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *b, &db);
                }
                Op::Div(a, b) => {
                    let tb = self.value(*b);
                    let ta = self.value(*a);
                    let mut da = dy.clone();
                    for (d, y) in da.data.iter_mut().zip(&tb.data) {
                        *d /= y;
                    }
                    let mut db = dy.clone();
                    for ((d, x), y) in db.data.iter_mut().zip(&ta.data).zip(&tb.data) {
                        *d *= -x / (y * y);
                    }
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *b, &db);
                }
                Op::Scale(a, s) => {
                    let mut da = dy.clone();
                    da.scale_assign(*s);
                    accumulate(&mut adj, *a, &da);
                }
                Op::MatMul(a, b) => {
                    let da = dy.matmul(&self.value(*b).transpose());
                    let db = self.value(*a).transpose().matmul(&dy);
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *b, &db);
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, &dy.transpose()),
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let mut da = dy.clone();
                    for (d, x) in da.data.iter_mut().zip(&ta.data) {
                        if *x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut adj, *a, &da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = dy.clone();
                    for (d, s) in da.data.iter_mut().zip(&y.data) {
                        *d *= s * (1.0 - s);
                    }
                    accumulate(&mut adj, *a, &da);
                }
                Op::Abs(a) => {
                    let ta = self.value(*a);
                    let mut da = dy.clone();
                    for (d, x) in da.data.iter_mut().zip(&ta.data) {
                        *d *= if *x >= 0.0 { 1.0 } else { -1.0 };
                    }
                    accumulate(&mut adj, *a, &da);
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(self.nodes[i].op, Op::Min(..));
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut da = dy.clone();
                    let mut db = dy.clone();
                    for k in 0..dy.len() {
                        // ties route to the first operand (measure-zero set)
                        let a_wins = if is_min {
                            ta.data[k] <= tb.data[k]
                        } else {
                            ta.data[k] >= tb.data[k]
                        };
                        if a_wins {
                            db.data[k] = 0.0;
                        } else {
                            da.data[k] = 0.0;
                        }
                    }
                    accumulate(&mut adj, *a, &da);
                    accumulate(&mut adj, *b, &db);
                }
                Op::RowSoftmax(a, _mask) => {
                    let p = &self.nodes[i].value;
                    let mut da = Tensor::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let dot: f64 = (0..p.cols).map(|c| dy.at(r, c) * p.at(r, c)).sum();
                        for c in 0..p.cols {
                            *da.at_mut(r, c) = p.at(r, c) * (dy.at(r, c) - dot);
                        }
                    }
                    accumulate(&mut adj, *a, &da);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let t = self.value(*x);
                    let g = self.value(*gamma);
                    let n = t.cols as f64;
                    let mut dx = Tensor::zeros(t.rows, t.cols);
                    let mut dg = Tensor::zeros(1, t.cols);
                    let mut db = Tensor::zeros(1, t.cols);
                    for r in 0..t.rows {
                        let row = t.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let rstd = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                        let dyg: Vec<f64> =
                            (0..t.cols).map(|c| dy.at(r, c) * g.data[c]).collect();
                        let sum_dyg: f64 = dyg.iter().sum();
                        let sum_dyg_xhat: f64 =
                            dyg.iter().zip(&xhat).map(|(d, h)| d * h).sum();
                        for c in 0..t.cols {
                            dg.data[c] += dy.at(r, c) * xhat[c];
                            db.data[c] += dy.at(r, c);
                            *dx.at_mut(r, c) = rstd
                                * (dyg[c] - sum_dyg / n - xhat[c] * sum_dyg_xhat / n);
                        }
                    }
                    accumulate(&mut adj, *x, &dx);
                    accumulate(&mut adj, *gamma, &dg);
                    accumulate(&mut adj, *beta, &db);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut adj, *a, &dy);
                    let mut dr = Tensor::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            dr.data[c] += dy.at(r, c);
                        }
                    }
                    accumulate(&mut adj, *row, &dr);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &v in parts.iter() {
                        let rows = self.value(v).rows;
                        let cols = dy.cols;
                        let part = Tensor::from_vec(
                            rows,
                            cols,
                            dy.data[start * cols..(start + rows) * cols].to_vec(),
                        );
                        accumulate(&mut adj, v, &part);
                        start += rows;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    da.data[start * ta.cols..(start + len) * ta.cols]
                        .copy_from_slice(&dy.data);
                    accumulate(&mut adj, *a, &da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &v in parts.iter() {
                        let t = self.value(v);
                        let mut part = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            for c in 0..t.cols {
                                *part.at_mut(r, c) = dy.at(r, off + c);
                            }
                        }
                        accumulate(&mut adj, v, &part);
                        off += t.cols;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..dy.rows {
                        for c in 0..*len {
                            *da.at_mut(r, start + c) = dy.at(r, c);
                        }
                    }
                    accumulate(&mut adj, *a, &da);
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for d in &mut da.data {
                        *d = dy.data[0];
                    }
                    accumulate(&mut adj, *a, &da);
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    let g = dy.data[0] / ta.len() as f64;
                    let da = Tensor::from_vec(ta.rows, ta.cols, vec![g; ta.len()]);
                    accumulate(&mut adj, *a, &da);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, d: &Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(d),
        slot => *slot = Some(d.clone()),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}
