//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every recorded node. Nodes bound
//! to a [`ParamId`] can then be folded into a [`ParamStore`] with
//! [`ParamStore::accumulate`](crate::param::ParamStore::accumulate).
//!
//! The op set is deliberately closed: matrix products, elementwise arithmetic,
//! row-wise bias addition, row softmax (optionally causal), row log-softmax,
//! layer normalization, GELU, seeded dropout, row gather, concatenation, column
//! slicing, reductions, softplus, and the two-modality fusion used for
//! candidate scoring. There is no implicit broadcasting.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::seeded;
use crate::tensor::{dot, matmul_raw, Precision, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumRows(Var),
    SumAll(Var),
    Softplus(Var),
    Fusion {
        st: Var,
        sv: Var,
        alpha: Var,
        has_v: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, mut value: Tensor, op: Op) -> Result<Var> {
        self.precision.round_slice(value.data_mut());
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input (no parameter binding).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Binds a parameter from `store` as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(bias) != [1, c] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push("add_row", out, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.cols() == 0 {
            return Err(Error::Invalid("softmax over an empty axis".into()));
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push("softmax", out, Op::Softmax(x))
    }

    /// Row-wise softmax where entry `(i, j)` with `j > i` is excluded.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        if r != c {
            return Err(Error::shape("causal_softmax", format!("{r}x{c} is not square")));
        }
        if c == 0 {
            return Err(Error::Invalid("softmax over an empty axis".into()));
        }
        let mut out = self.value(x).clone();
        for i in 0..r {
            let row = out.row_mut(i);
            softmax_in_place(&mut row[..=i]);
            for v in &mut row[i + 1..] {
                *v = 0.0;
            }
        }
        self.push("causal_softmax", out, Op::Softmax(x))
    }

    /// Row-wise log-softmax. With a mask, entries whose mask is `false` are
    /// left out of the normalizer and read as zero in the output.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let t = self.value(x);
        if t.cols() == 0 {
            return Err(Error::Invalid("softmax over an empty axis".into()));
        }
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return Err(Error::shape("log_softmax", "mask size"));
            }
        }
        let mut out = t.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            let row = out.row_mut(r);
            let mx = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::Invalid("log-softmax row fully masked".into()));
            }
            let lse = mx
                + (0..cols)
                    .filter(|&j| keep(j))
                    .map(|j| (row[j] - mx).exp())
                    .sum::<f64>()
                    .ln();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { *v - lse } else { 0.0 };
            }
        }
        self.push("log_softmax", out, Op::LogSoftmax(x, mask))
    }

    /// Layer normalization over each row followed by the affine map
    /// `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(gamma) != [1, c] || self.shape(beta) != [1, c] {
            return Err(Error::shape("layer_norm", "affine parameters must be 1 x cols"));
        }
        let t = self.value(x);
        let mut xhat = Tensor::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for i in 0..r {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, Op::Gelu(x))
    }

    /// Inverted dropout: each entry is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`. The mask is a pure function
    /// of `seed`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            let n = self.value(x).len();
            let out = self.value(x).clone();
            return self.push("dropout", out, Op::Dropout(x, vec![1.0; n]));
        }
        let mask = dropout_mask(self.value(x).len(), rate, seed);
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.rows(), t.cols(), data)?;
        self.push("dropout", out, Op::Dropout(x, mask))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of {} rows", t.rows()),
            ));
        }
        let out = t.select_rows(idx);
        self.push("gather_rows", out, Op::Gather(table, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p)[1])
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {cols} cols", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p)[0])
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let t = self.value(x);
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&t.row(i)[start..start + len]);
        }
        self.push("slice_cols", out, Op::SliceCols(x, start))
    }

    /// Column sums as a `1 × c` row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = Tensor::zeros(1, t.cols());
        for i in 0..t.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        self.push("sum_rows", out, Op::SumRows(x))
    }

    /// Mean over the row axis.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x)[0];
        if r == 0 {
            return Err(Error::Invalid("mean over an empty axis".into()));
        }
        let s = self.sum_rows(x)?;
        self.scale(s, 1.0 / r as f64)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.push("softplus", out, Op::Softplus(x))
    }

    /// Dynamic two-modality score fusion, applied entrywise:
    /// `(s_t·e^{α s_t} + s_v·e^{α s_v}) / (e^{α s_t} + e^{α s_v})`.
    /// Column `j` with `has_v[j] == false` passes `s_t` through unchanged.
    pub fn fusion(&mut self, st: Var, sv: Var, alpha: Var, has_v: &[bool]) -> Result<Var> {
        self.same_shape("fusion", st, sv)?;
        let [r, c] = self.shape(st);
        if self.shape(alpha) != [1, 1] || has_v.len() != c {
            return Err(Error::shape("fusion", "alpha must be 1x1 and mask one per column"));
        }
        let a = self.value(alpha).item();
        let (ts, tv) = (self.value(st), self.value(sv));
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let s = ts.get(i, j);
                let v = if has_v[j] {
                    let wt = fusion_weight(s, tv.get(i, j), a);
                    wt * s + (1.0 - wt) * tv.get(i, j)
                } else {
                    s
                };
                out.set(i, j, v);
            }
        }
        self.push(
            "fusion",
            out,
            Op::Fusion {
                st,
                sv,
                alpha,
                has_v: has_v.to_vec(),
            },
        )
    }

    /// Reverse pass from `root`. The seed gradient is all ones, so for a scalar
    /// root the result is its exact gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::filled(rv.rows(), rv.cols(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if !dy.all_finite() {
                return Err(Error::NonFinite(format!("gradient at node {idx}")));
            }
            let node = &self.nodes[idx];
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = dy.matmul_t(val(*b)).expect("shapes checked in forward");
                let db = matmul_raw(&val(*a).transpose(), dy);
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Transpose(a) => accum(grads, *a, dy.transpose()),
            Op::Add(a, b) => {
                accum(grads, *a, dy.clone());
                accum(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, dy.clone());
                accum(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accum(grads, *a, hadamard(dy, val(*b)));
                accum(grads, *b, hadamard(dy, val(*a)));
            }
            Op::AddRow(x, bias) => {
                accum(grads, *x, dy.clone());
                accum(grads, *bias, column_sums(dy));
            }
            Op::Scale(x, c) => accum(grads, *x, dy.map(|v| v * c)),
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let s = dot(yr, dr);
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (dr[j] - s);
                    }
                }
                accum(grads, *x, dx);
            }
            Op::LogSoftmax(x, mask) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = Tensor::zeros(y.rows(), cols);
                for i in 0..y.rows() {
                    let keep = |j: usize| mask.as_ref().is_none_or(|m| m[i * cols + j]);
                    let (yr, dr) = (y.row(i), dy.row(i));
                    let s: f64 = (0..cols).filter(|&j| keep(j)).map(|j| dr[j]).sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        if keep(j) {
                            *o = dr[j] - yr[j].exp() * s;
                        }
                    }
                }
                accum(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let g = val(*gamma).data();
                let (r, c) = (xhat.rows(), xhat.cols());
                let mut dx = Tensor::zeros(r, c);
                let mut dg = Tensor::zeros(1, c);
                let mut db = Tensor::zeros(1, c);
                for i in 0..r {
                    let (xh, dr) = (xhat.row(i), dy.row(i));
                    let dxh: Vec<f64> = dr.iter().zip(g).map(|(d, gv)| d * gv).collect();
                    let sum_d: f64 = dxh.iter().sum();
                    let sum_dx: f64 = dot(&dxh, xh);
                    let n = c as f64;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = rstd[i] / n * (n * dxh[j] - sum_d - xh[j] * sum_dx);
                    }
                    for j in 0..c {
                        dg.data_mut()[j] += dr[j] * xh[j];
                        db.data_mut()[j] += dr[j];
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *gamma, dg);
                accum(grads, *beta, db);
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let dx = Tensor::new(
                    xv.rows(),
                    xv.cols(),
                    xv.data().iter().zip(dy.data()).map(|(&v, d)| d * gelu_grad(v)).collect(),
                )
                .expect("same shape");
                accum(grads, *x, dx);
            }
            Op::Dropout(x, mask) => {
                let dx = Tensor::new(
                    dy.rows(),
                    dy.cols(),
                    dy.data().iter().zip(mask).map(|(d, m)| d * m).collect(),
                )
                .expect("same shape");
                accum(grads, *x, dx);
            }
            Op::Gather(table, idx) => {
                let t = val(*table);
                let mut dt = Tensor::zeros(t.rows(), t.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, d) in dt.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
                accum(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = val(p).rows();
                    let idx: Vec<usize> = (off..off + r).collect();
                    accum(grads, p, dy.select_rows(&idx));
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let [r, c] = val(p).shape();
                    let mut dp = Tensor::zeros(r, c);
                    for i in 0..r {
                        dp.row_mut(i).copy_from_slice(&dy.row(i)[off..off + c]);
                    }
                    accum(grads, p, dp);
                    off += c;
                }
            }
            Op::SliceCols(x, start) => {
                let [r, c] = val(*x).shape();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                }
                accum(grads, *x, dx);
            }
            Op::SumRows(x) => {
                let r = val(*x).rows();
                let mut dx = Tensor::zeros(r, dy.cols());
                for i in 0..r {
                    dx.row_mut(i).copy_from_slice(dy.data());
                }
                accum(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let [r, c] = val(*x).shape();
                accum(grads, *x, Tensor::filled(r, c, dy.item()));
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                let dx = Tensor::new(
                    xv.rows(),
                    xv.cols(),
                    xv.data().iter().zip(dy.data()).map(|(&v, d)| d * sigmoid(v)).collect(),
                )
                .expect("same shape");
                accum(grads, *x, dx);
            }
            Op::Fusion {
                st,
                sv,
                alpha,
                has_v,
            } => {
                let (ts, tv) = (val(*st), val(*sv));
                let a = val(*alpha).item();
                let [r, c] = ts.shape();
                let mut dst = Tensor::zeros(r, c);
                let mut dsv = Tensor::zeros(r, c);
                let mut da = 0.0;
                for i in 0..r {
                    for j in 0..c {
                        let d = dy.get(i, j);
                        if !has_v[j] {
                            dst.set(i, j, d);
                            continue;
                        }
                        let (s, v) = (ts.get(i, j), tv.get(i, j));
                        let wt = fusion_weight(s, v, a);
                        let wv = 1.0 - wt;
                        let cross = wt * wv * (s - v);
                        dst.set(i, j, d * (wt + a * cross));
                        dsv.set(i, j, d * (wv - a * cross));
                        da += d * cross * (s - v);
                    }
                }
                accum(grads, *st, dst);
                accum(grads, *sv, dsv);
                accum(grads, *alpha, Tensor::scalar(da));
            }
        }
    }

    /// Scaled dot-product attention `softmax(q kᵀ / √d) v`. Returns the output
    /// and the attention weight matrix.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<(Var, Var)> {
        let dk = self.shape(q)[1];
        if self.shape(k)[1] != dk || self.shape(k)[0] != self.shape(v)[0] {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        let kt = self.transpose(k)?;
        let logits = self.matmul(q, kt)?;
        let logits = self.scale(logits, 1.0 / (dk as f64).sqrt())?;
        let weights = if causal {
            self.causal_softmax_rows(logits)?
        } else {
            self.softmax_rows(logits)?
        };
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Parameter bindings recorded on this graph, in creation order.
    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
    .expect("same shape")
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for i in 0..t.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Dropout keep-mask with inverted scaling, deterministic in `seed`.
pub fn dropout_mask(n: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weight on the text score in the two-way fusion: `σ(α (s_t − s_v))`, which
/// equals `e^{α s_t} / (e^{α s_t} + e^{α s_v})` without overflow.
#[inline]
pub(crate) fn fusion_weight(st: f64, sv: f64, alpha: f64) -> f64 {
    sigmoid(alpha * (st - sv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph {
        Graph::new(Precision::Double)
    }

    #[test]
    fn softmax_uniform() {
        let mut g = g64();
        let x = g.constant(Tensor::row_vector(vec![0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        let mut g = g64();
        let x = g.constant(Tensor::zeros(2, 0)).unwrap();
        assert!(g.softmax_rows(x).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = g64();
        let x = g.constant(Tensor::filled(2, 4, 3.7)).unwrap();
        let gm = g.constant(Tensor::filled(1, 4, 1.0)).unwrap();
        let bt = g.constant(Tensor::zeros(1, 4)).unwrap();
        let y = g.layer_norm(x, gm, bt).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn single_key_attention_returns_its_value() {
        let mut g = g64();
        let q = g
            .constant(Tensor::new(3, 2, vec![1.0, -2.0, 0.5, 4.0, -3.0, 0.0]).unwrap())
            .unwrap();
        let k = g.constant(Tensor::row_vector(vec![0.3, 0.9])).unwrap();
        let v = g.constant(Tensor::row_vector(vec![5.0, -1.0])).unwrap();
        let (out, w) = g.attention(q, k, v, false).unwrap();
        assert!(g.value(w).data().iter().all(|&x| x == 1.0));
        for r in 0..3 {
            assert_eq!(g.value(out).row(r), &[5.0, -1.0]);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = g64();
        let x = g.constant(Tensor::new(2, 2, vec![1.0, 9.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = g.causal_softmax_rows(x).unwrap();
        assert_eq!(g.value(y).row(0), &[1.0, 0.0]);
        let s: f64 = g.value(y).row(1).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut g = g64();
        let a = g.constant(Tensor::zeros(2, 3)).unwrap();
        let b = g.constant(Tensor::zeros(3, 2)).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let bias = g.constant(Tensor::zeros(1, 2)).unwrap();
        assert!(g.add_row(a, bias).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_rate_one_rejected() {
        let mut g = g64();
        let x = g.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0])).unwrap();
        let y = g.dropout(x, 0.0, 7).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.dropout(x, 1.0, 7).is_err());
    }

    #[test]
    fn dropout_unbiased_over_many_trials() {
        let n = 100_000;
        let mask = dropout_mask(n, 0.3, 11);
        let mean = mask.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let zeros = mask.iter().filter(|&&m| m == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.3).abs() < 0.01);
    }

    #[test]
    fn fusion_masked_column_passes_text_score() {
        let mut g = g64();
        let st = g.constant(Tensor::row_vector(vec![0.5, 0.5])).unwrap();
        let sv = g.constant(Tensor::row_vector(vec![0.3, 100.0])).unwrap();
        let a = g.constant(Tensor::scalar(0.0)).unwrap();
        let f = g.fusion(st, sv, a, &[true, false]).unwrap();
        assert!((g.value(f).get(0, 0) - 0.4).abs() < 1e-15);
        assert_eq!(g.value(f).get(0, 1), 0.5);
    }

    #[test]
    fn independent_input_gets_no_gradient() {
        let mut g = g64();
        let a = g.constant(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::row_vector(vec![3.0, 4.0])).unwrap();
        let sq = g.mul(a, a).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[2.0, 4.0]);
        assert!(grads.wrt(b).is_none());
    }
}
