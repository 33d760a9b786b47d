//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Each forward pass records its operations on a [`Tape`]; `backward` walks the
//! tape once in reverse. Parameter leaves borrow their matrices, so building a
//! tape for inference does not copy weights.

use std::borrow::Cow;

use crate::ctc::{forward_backward, Posteriorgram};
use crate::error::{Error, Result};
use crate::numerics::{masked_log_softmax, sharpened_softmax_unchecked, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

enum Op {
    Leaf,
    /// `x · wᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1·b` with `b` a single row
    AddRow(Var, Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    /// column softmax of an `n × 1` energy vector, sharpened by `gamma`
    Softmax(Var, f64),
    /// `wᵀ · m` for `w: n × 1`, `m: n × d`
    WeightedRows(Var, Var),
    /// centred 1-D convolution of an `n × 1` signal with `k × width` filters, zero padded
    Conv1d(Var, Var),
    /// `-log softmax(logits)[target]` over the masked support; keeps the softmax
    Nll(Var, Mat),
    /// CTC negative log-likelihood; keeps `∂loss/∂logits`
    Ctc(Var, Mat),
    /// weighted sum of `1 × 1` scalars
    Combine(Vec<(Var, f64)>),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
}

pub(crate) struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_ref(&mut self, value: &'p Mat) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols(), wv.cols(), "matmul_t inner dimension");
        let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xr = xv.row(i);
            for j in 0..m {
                let wr = wv.row(j);
                let mut acc = 0.0;
                for t in 0..k {
                    acc += xr[t] * wr[t];
                }
                out[i * m + j] = acc;
            }
        }
        self.push(Mat::from_raw(n, m, out), Op::MatMulT(x, w))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.as_slice().iter().zip(bv.as_slice()).map(|(x, y)| x + y).collect();
        let (r, c) = av.shape();
        self.push(Mat::from_raw(r, c, data), Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a row");
        assert_eq!(av.cols(), bv.cols(), "add_row width");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.as_slice().iter().map(|x| x.tanh()).collect();
        let (r, c) = av.shape();
        self.push(Mat::from_raw(r, c, data), Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols rows");
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        let cols = self.value(rows[0]).cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let rv = self.value(r);
            assert_eq!(rv.shape(), (1, cols), "stack_rows expects rows");
            data.extend_from_slice(rv.as_slice());
        }
        self.push(Mat::from_raw(rows.len(), cols, data), Op::StackRows(rows.to_vec()))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let v = Mat::row_vector(self.value(a).row(r).to_vec());
        self.push(v, Op::Row(a, r))
    }

    pub fn softmax(&mut self, e: Var, gamma: f64) -> Var {
        let ev = self.value(e);
        assert_eq!(ev.cols(), 1, "softmax expects a column");
        let p = sharpened_softmax_unchecked(ev.as_slice(), gamma);
        self.push(Mat::from_raw(p.len(), 1, p), Op::Softmax(e, gamma))
    }

    pub fn weighted_rows(&mut self, w: Var, m: Var) -> Var {
        let (wv, mv) = (self.value(w), self.value(m));
        assert_eq!(wv.shape(), (mv.rows(), 1), "weighted_rows shapes");
        let mut out = vec![0.0; mv.cols()];
        for t in 0..mv.rows() {
            let a = wv.get(t, 0);
            for (o, x) in out.iter_mut().zip(mv.row(t)) {
                *o += a * x;
            }
        }
        self.push(Mat::row_vector(out), Op::WeightedRows(w, m))
    }

    pub fn conv1d(&mut self, a: Var, filters: Var) -> Var {
        let (av, fv) = (self.value(a), self.value(filters));
        assert_eq!(av.cols(), 1, "conv1d expects a column");
        let (n, k, width) = (av.rows(), fv.rows(), fv.cols());
        let centre = width / 2;
        let mut out = Mat::zeros(n, k);
        for t in 0..n {
            for f in 0..k {
                let mut acc = 0.0;
                for j in 0..width {
                    let src = t as isize + j as isize - centre as isize;
                    if (0..n as isize).contains(&src) {
                        acc += fv.get(f, j) * av.get(src as usize, 0);
                    }
                }
                out.set(t, f, acc);
            }
        }
        self.push(out, Op::Conv1d(a, filters))
    }

    /// `-log p(target)` under a masked softmax of a `1 × V` logit row.
    pub fn nll(&mut self, logits: Var, target: usize, mask: &[bool]) -> Var {
        let lv = self.value(logits);
        let logp = masked_log_softmax(lv.as_slice(), Some(mask));
        let loss = -logp[target];
        let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        grad[target] -= 1.0;
        self.push(Mat::filled(1, 1, loss), Op::Nll(logits, Mat::row_vector(grad)))
    }

    /// CTC loss of `target` under the masked row-softmax of `logits`.
    pub fn ctc(&mut self, logits: Var, target: &[usize], mask: &[bool]) -> Result<Var> {
        let post = Posteriorgram::from_logits(self.value(logits), Some(mask));
        let fb = forward_backward(&post, target)?;
        let grad = crate::ctc::grad_from(&post, &fb);
        Ok(self.push(Mat::filled(1, 1, -fb.log_likelihood), Op::Ctc(logits, grad)))
    }

    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(t, w)| w * self.scalar(t)).sum();
        self.push(Mat::filled(1, 1, v), Op::Combine(terms.to_vec()))
    }

    /// Gradient of `v` from a [`Tape::backward`] result; zeros when `v` was not reached.
    pub fn gradient(&self, grads: &[Option<Mat>], v: Var) -> Mat {
        match &grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Mat::zeros(r, c)
            }
        }
    }

    /// Gradients of scalar `out` with respect to every node; `None` for untouched nodes.
    pub fn backward(&self, out: Var) -> Result<Vec<Option<Mat>>> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::invalid("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMulT(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
                    let mut gx = vec![0.0; n * k];
                    let mut gw = vec![0.0; m * k];
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        for j in 0..m {
                            let gij = gr[j];
                            if gij == 0.0 {
                                continue;
                            }
                            let wr = wv.row(j);
                            for t in 0..k {
                                gx[r * k + t] += gij * wr[t];
                                gw[j * k + t] += gij * xr[t];
                            }
                        }
                    }
                    acc(&mut grads, *x, Mat::from_raw(n, k, gx));
                    acc(&mut grads, *w, Mat::from_raw(m, k, gw));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let mut gb = vec![0.0; g.cols()];
                    for r in g.row_iter() {
                        for (o, x) in gb.iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, Mat::row_vector(gb));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(y.as_slice())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    acc(&mut grads, *a, Mat::from_raw(y.rows(), y.cols(), data));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let mut gp = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::StackRows(rows) => {
                    for (r, &p) in rows.iter().enumerate() {
                        acc(&mut grads, p, Mat::row_vector(g.row(r).to_vec()));
                    }
                }
                Op::Row(a, r) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Mat::zeros(rows, cols);
                    ga.row_mut(*r).copy_from_slice(g.as_slice());
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(e, gamma) => {
                    let p = node.value.as_slice();
                    let gs = g.as_slice();
                    let dot: f64 = p.iter().zip(gs).map(|(a, b)| a * b).sum();
                    let data = p.iter().zip(gs).map(|(pa, ga)| gamma * pa * (ga - dot)).collect();
                    acc(&mut grads, *e, Mat::from_raw(p.len(), 1, data));
                }
                Op::WeightedRows(w, m) => {
                    let (wv, mv) = (self.value(*w), self.value(*m));
                    let gs = g.as_slice();
                    let gw = (0..mv.rows())
                        .map(|t| mv.row(t).iter().zip(gs).map(|(a, b)| a * b).sum())
                        .collect();
                    let mut gm = Mat::zeros(mv.rows(), mv.cols());
                    for t in 0..mv.rows() {
                        let a = wv.get(t, 0);
                        for (o, x) in gm.row_mut(t).iter_mut().zip(gs) {
                            *o = a * x;
                        }
                    }
                    acc(&mut grads, *w, Mat::from_raw(mv.rows(), 1, gw));
                    acc(&mut grads, *m, gm);
                }
                Op::Conv1d(a, filters) => {
                    let (av, fv) = (self.value(*a), self.value(*filters));
                    let (n, k, width) = (av.rows(), fv.rows(), fv.cols());
                    let centre = width / 2;
                    let mut ga = Mat::zeros(n, 1);
                    let mut gf = Mat::zeros(k, width);
                    for t in 0..n {
                        for f in 0..k {
                            let gtf = g.get(t, f);
                            if gtf == 0.0 {
                                continue;
                            }
                            for j in 0..width {
                                let src = t as isize + j as isize - centre as isize;
                                if (0..n as isize).contains(&src) {
                                    let s = src as usize;
                                    ga.as_mut_slice()[s] += gtf * fv.get(f, j);
                                    gf.as_mut_slice()[f * width + j] += gtf * av.get(s, 0);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *filters, gf);
                }
                Op::Nll(logits, dl) | Op::Ctc(logits, dl) => {
                    let mut gl = dl.clone();
                    gl.scale_in_place(g.get(0, 0));
                    acc(&mut grads, *logits, gl);
                }
                Op::Combine(terms) => {
                    for &(t, w) in terms {
                        acc(&mut grads, t, Mat::filled(1, 1, w * g.get(0, 0)));
                    }
                }
            }
        }
        Ok(grads)
    }
}
