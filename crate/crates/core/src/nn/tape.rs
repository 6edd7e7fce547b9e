//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Operations append nodes to a [`Tape`]; node ids grow monotonically, so a
//! reverse sweep over ids is a valid reverse-topological order for backward.
//! A tape is built per training step and thrown away; parameters live outside
//! the tape and are registered as leaves each step.

use super::matrix::Matrix;
use super::sparse::CsrPair;
use super::NnError;
use std::ops::Range;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    /// A * B^T
    MatMulBT(usize, usize),
    /// constant sparse * dense
    SpMM(Rc<CsrPair>, usize),
    /// broadcast row-bias add: (n x d) + (1 x d)
    AddRowBias(usize, usize),
    Relu(usize),
    SoftmaxRows(usize),
    SliceCols(usize, Range<usize>),
    /// per-edge inner products of two embedding matrices
    EdgeInner {
        src_emb: usize,
        dst_emb: usize,
        edges: Rc<Vec<(u32, u32)>>,
    },
    /// sum over mask of (pred - target)^2
    MaskedSqSum {
        pred: usize,
        target: Rc<Matrix>,
        mask: Rc<Matrix>,
    },
    /// mean pinball loss over masked entries at the given level
    PinballMasked {
        pred: usize,
        target: Rc<Matrix>,
        mask: Rc<Matrix>,
        level: f64,
        n_masked: usize,
    },
    /// mean categorical cross entropy over masked rows
    CrossEntropyMasked {
        logits: usize,
        onehot: Rc<Matrix>,
        row_mask: Rc<Vec<bool>>,
        n_masked: usize,
    },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::Add(a.0, b.0), req)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::Sub(a.0, b.0), req)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let req = self.requires(a);
        self.push(value, Op::Scale(a.0, c), req)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMul(a.0, b.0), req)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMulBT(a.0, b.0), req)
    }

    pub fn spmm(&mut self, s: Rc<CsrPair>, x: Var) -> Var {
        let value = s.fwd.matmul_dense(self.value(x));
        let req = self.requires(x);
        self.push(value, Op::SpMM(s, x.0), req)
    }

    pub fn add_row_bias(&mut self, h: Var, bias: Var) -> Var {
        let hm = self.value(h);
        let bm = self.value(bias);
        assert_eq!(bm.rows(), 1, "bias must be a row vector");
        assert_eq!(bm.cols(), hm.cols(), "bias width mismatch");
        let mut value = hm.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                value.add_at(r, c, bm.get(0, c));
            }
        }
        let req = self.requires(h) || self.requires(bias);
        self.push(value, Op::AddRowBias(h.0, bias.0), req)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let req = self.requires(x);
        self.push(value, Op::Relu(x.0), req)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        let req = self.requires(x);
        self.push(value, Op::SoftmaxRows(x.0), req)
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Var {
        let value = self.value(x).slice_cols(range.start, range.end);
        let req = self.requires(x);
        self.push(value, Op::SliceCols(x.0, range), req)
    }

    /// Per-edge inner products: out[e] = src_emb[i_e] . dst_emb[j_e].
    pub fn edge_inner(&mut self, src_emb: Var, dst_emb: Var, edges: Rc<Vec<(u32, u32)>>) -> Var {
        let zs = self.value(src_emb);
        let zt = self.value(dst_emb);
        assert_eq!(zs.cols(), zt.cols(), "embedding width mismatch");
        let mut value = Matrix::zeros(edges.len(), 1);
        for (e, &(i, j)) in edges.iter().enumerate() {
            let a = zs.row(i as usize);
            let b = zt.row(j as usize);
            value.set(e, 0, a.iter().zip(b).map(|(x, y)| x * y).sum());
        }
        let req = self.requires(src_emb) || self.requires(dst_emb);
        self.push(
            value,
            Op::EdgeInner {
                src_emb: src_emb.0,
                dst_emb: dst_emb.0,
                edges,
            },
            req,
        )
    }

    /// Sum over mask=1 entries of (pred - target)^2; masked-out entries
    /// contribute nothing, including to gradients.
    pub fn masked_sq_sum(&mut self, pred: Var, target: Rc<Matrix>, mask: Rc<Matrix>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "target shape mismatch");
        assert_eq!(p.shape(), mask.shape(), "mask shape mismatch");
        let mut acc = 0.0;
        for (idx, &m) in mask.data().iter().enumerate() {
            if m != 0.0 {
                let d = p.data()[idx] - target.data()[idx];
                acc += d * d;
            }
        }
        let req = self.requires(pred);
        self.push(
            Matrix::scalar(acc),
            Op::MaskedSqSum { pred: pred.0, target, mask },
            req,
        )
    }

    /// Mean pinball loss at `level` over mask=1 entries.
    pub fn pinball_masked(
        &mut self,
        pred: Var,
        target: Rc<Matrix>,
        mask: Rc<Matrix>,
        level: f64,
    ) -> Result<Var, NnError> {
        if !(0.0 < level && level < 1.0) {
            return Err(NnError::BadAlpha(level));
        }
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "target shape mismatch");
        assert_eq!(p.shape(), mask.shape(), "mask shape mismatch");
        let mut acc = 0.0;
        let mut n_masked = 0usize;
        for (idx, &m) in mask.data().iter().enumerate() {
            if m != 0.0 {
                acc += super::pinball_value(target.data()[idx], p.data()[idx], level);
                n_masked += 1;
            }
        }
        if n_masked == 0 {
            return Err(NnError::EmptyMask);
        }
        let req = self.requires(pred);
        Ok(self.push(
            Matrix::scalar(acc / n_masked as f64),
            Op::PinballMasked {
                pred: pred.0,
                target,
                mask,
                level,
                n_masked,
            },
            req,
        ))
    }

    /// Mean categorical cross entropy of `logits` against one-hot rows,
    /// averaged over mask=true rows.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        onehot: Rc<Matrix>,
        row_mask: Rc<Vec<bool>>,
    ) -> Result<Var, NnError> {
        let x = self.value(logits);
        assert_eq!(x.shape(), onehot.shape(), "one-hot shape mismatch");
        assert_eq!(x.rows(), row_mask.len(), "row mask length mismatch");
        let n_masked = row_mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(NnError::EmptyMask);
        }
        let mut acc = 0.0;
        for r in 0..x.rows() {
            if !row_mask[r] {
                continue;
            }
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let dot: f64 = row.iter().zip(onehot.row(r)).map(|(v, y)| v * y).sum();
            acc += lse - dot;
        }
        let req = self.requires(logits);
        Ok(self.push(
            Matrix::scalar(acc / n_masked as f64),
            Op::CrossEntropyMasked {
                logits: logits.0,
                onehot,
                row_mask,
                n_masked,
            },
            req,
        ))
    }

    fn accumulate(&mut self, node: usize, delta: Matrix) {
        if !self.nodes[node].requires_grad {
            return;
        }
        match &mut self.nodes[node].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Populate gradients of every reachable `requires_grad` node from a
    /// scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if !self.nodes[loss.0].value.is_scalar() {
            let (r, c) = self.nodes[loss.0].value.shape();
            return Err(NnError::NonScalarLoss { rows: r, cols: c });
        }
        self.nodes[loss.0].grad = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[id].grad.clone() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            // Ops only reference earlier ids, so this sweep is reverse
            // topological.
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad.scale(-1.0));
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, grad.scale(c));
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = grad.matmul_bt(&self.nodes[b].value);
                    let db = self.nodes[a].value.matmul_tb(&grad);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MatMulBT(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = grad.matmul(&self.nodes[b].value);
                    let db = grad.matmul_tb(&self.nodes[a].value);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::SpMM(pair, x) => {
                    let x = *x;
                    let dx = pair.bwd.matmul_dense(&grad);
                    self.accumulate(x, dx);
                }
                Op::AddRowBias(h, bias) => {
                    let (h, bias) = (*h, *bias);
                    let mut db = Matrix::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            db.add_at(0, c, grad.get(r, c));
                        }
                    }
                    self.accumulate(h, grad);
                    self.accumulate(bias, db);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let mut dx = grad;
                    for (d, &v) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(self.nodes[x].value.data().iter())
                    {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let s = &self.nodes[id].value;
                    let mut dx = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let srow = s.row(r);
                        let grow = grad.row(r);
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..s.cols() {
                            dx.set(r, c, srow[c] * (grow[c] - dot));
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::SliceCols(x, range) => {
                    let x = *x;
                    let range = range.clone();
                    let full = self.nodes[x].value.shape();
                    let mut dx = Matrix::zeros(full.0, full.1);
                    for r in 0..grad.rows() {
                        for (off, c) in range.clone().enumerate() {
                            dx.set(r, c, grad.get(r, off));
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::EdgeInner {
                    src_emb,
                    dst_emb,
                    edges,
                } => {
                    let (src_emb, dst_emb) = (*src_emb, *dst_emb);
                    let edges = Rc::clone(edges);
                    let zs = self.nodes[src_emb].value.clone();
                    let zt = self.nodes[dst_emb].value.clone();
                    let mut dzs = Matrix::zeros(zs.rows(), zs.cols());
                    let mut dzt = Matrix::zeros(zt.rows(), zt.cols());
                    for (e, &(i, j)) in edges.iter().enumerate() {
                        let ge = grad.get(e, 0);
                        if ge == 0.0 {
                            continue;
                        }
                        for c in 0..zs.cols() {
                            dzs.add_at(i as usize, c, ge * zt.get(j as usize, c));
                            dzt.add_at(j as usize, c, ge * zs.get(i as usize, c));
                        }
                    }
                    self.accumulate(src_emb, dzs);
                    self.accumulate(dst_emb, dzt);
                }
                Op::MaskedSqSum { pred, target, mask } => {
                    let pred = *pred;
                    let (target, mask) = (Rc::clone(target), Rc::clone(mask));
                    let g = grad.scalar_value();
                    let p = &self.nodes[pred].value;
                    let mut dp = Matrix::zeros(p.rows(), p.cols());
                    for (idx, &m) in mask.data().iter().enumerate() {
                        if m != 0.0 {
                            let d = p.data()[idx] - target.data()[idx];
                            dp.data_mut()[idx] = g * 2.0 * d;
                        }
                    }
                    self.accumulate(pred, dp);
                }
                Op::PinballMasked {
                    pred,
                    target,
                    mask,
                    level,
                    n_masked,
                } => {
                    let pred = *pred;
                    let (target, mask) = (Rc::clone(target), Rc::clone(mask));
                    let (level, n_masked) = (*level, *n_masked);
                    let g = grad.scalar_value() / n_masked as f64;
                    let p = &self.nodes[pred].value;
                    let mut dp = Matrix::zeros(p.rows(), p.cols());
                    for (idx, &m) in mask.data().iter().enumerate() {
                        if m != 0.0 {
                            let y = target.data()[idx];
                            let yh = p.data()[idx];
                            // Subgradient at the kink uses the else branch.
                            dp.data_mut()[idx] = if y > yh { -level * g } else { (1.0 - level) * g };
                        }
                    }
                    self.accumulate(pred, dp);
                }
                Op::CrossEntropyMasked {
                    logits,
                    onehot,
                    row_mask,
                    n_masked,
                } => {
                    let logits = *logits;
                    let (onehot, row_mask) = (Rc::clone(onehot), Rc::clone(row_mask));
                    let n_masked = *n_masked;
                    let g = grad.scalar_value() / n_masked as f64;
                    let x = &self.nodes[logits].value;
                    let soft = x.softmax_rows();
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        if !row_mask[r] {
                            continue;
                        }
                        for c in 0..x.cols() {
                            dx.set(r, c, g * (soft.get(r, c) - onehot.get(r, c)));
                        }
                    }
                    self.accumulate(logits, dx);
                }
            }
        }
        Ok(())
    }
}
