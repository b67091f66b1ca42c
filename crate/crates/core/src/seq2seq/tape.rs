//! A small reverse-mode tape over dense matrices.
//!
//! Operations are coarse (whole GRU cells, whole attention reads, the full
//! cross-entropy) so a forward pass over a batch records a few hundred nodes
//! at most. Parameters are borrowed, never copied onto the tape.

use super::tensor::{gemm, sigmoid, softmax_in_place, Matrix};
use crate::corpus::PAD;

pub type NodeId = usize;

struct GruNode {
    x: NodeId,
    h: NodeId,
    w_ih: NodeId,
    w_hh: NodeId,
    b_ih: NodeId,
    b_hh: NodeId,
    /// 1.0 where the row advances, 0.0 where it keeps its previous state.
    mask: Option<Vec<f64>>,
    r: Matrix,
    z: Matrix,
    n: Matrix,
    gh_n: Matrix,
}

enum Op {
    Param(usize),
    Constant,
    Embed { table: NodeId, ids: Vec<u32> },
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    StackRows { parts: Vec<NodeId> },
    Tanh { x: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
    Gru(Box<GruNode>),
    Attend { query: NodeId, memory: Vec<NodeId>, weights: Matrix },
    Xent { logits: NodeId, targets: Vec<u32>, eps: f64, probs: Matrix, count: usize, row_nll: Vec<f64> },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Matrix],
    nodes: Vec<Node>,
}

/// Parameter matrices of a GRU cell, gates ordered reset, update, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_ih: NodeId,
    pub w_hh: NodeId,
    pub b_ih: NodeId,
    pub b_hh: NodeId,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        match (&self.nodes[id].op, &self.nodes[id].value) {
            (Op::Param(i), _) => &self.params[*i],
            (_, Some(v)) => v,
            _ => unreachable!("node {id} has no value"),
        }
    }

    fn push(&mut self, value: Option<Matrix>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(None, Op::Param(index))
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Some(value), Op::Constant)
    }

    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(
            Some(out),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = Matrix::zeros(xv.rows, wv.cols);
        for r in 0..out.rows {
            out.row_mut(r).copy_from_slice(&bv.data);
        }
        gemm(1.0, xv, false, wv, false, 1.0, &mut out);
        self.push(Some(out), Op::Affine { x, w, b })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows);
        let mut out = Matrix::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            let row = out.row_mut(r);
            row[..av.cols].copy_from_slice(av.row(r));
            row[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(Some(out), Op::Concat { a, b })
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols);
            data.extend_from_slice(&v.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(
            Some(Matrix::from_vec(rows, cols, data)),
            Op::StackRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.tanh());
        self.push(Some(out), Op::Tanh { x })
    }

    /// Multiplies by a fixed mask (inverted dropout keeps `1/(1-p)` scaling in
    /// the mask itself).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let mut out = self.value(x).clone();
        assert_eq!(mask.len(), out.data.len());
        out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        self.push(Some(out), Op::Dropout { x, mask })
    }

    pub fn gru(&mut self, x: NodeId, h: NodeId, w: GruWeights, mask: Option<Vec<f64>>) -> NodeId {
        let (xv, hv) = (self.value(x), self.value(h));
        let (b, hidden) = (hv.rows, hv.cols);
        let mut gi = Matrix::zeros(b, 3 * hidden);
        let mut gh = Matrix::zeros(b, 3 * hidden);
        let (bi, bh) = (self.value(w.b_ih), self.value(w.b_hh));
        for row in 0..b {
            gi.row_mut(row).copy_from_slice(&bi.data);
            gh.row_mut(row).copy_from_slice(&bh.data);
        }
        gemm(1.0, xv, false, self.value(w.w_ih), false, 1.0, &mut gi);
        gemm(1.0, hv, false, self.value(w.w_hh), false, 1.0, &mut gh);

        let mut r = Matrix::zeros(b, hidden);
        let mut z = Matrix::zeros(b, hidden);
        let mut n = Matrix::zeros(b, hidden);
        let mut gh_n = Matrix::zeros(b, hidden);
        let mut out = Matrix::zeros(b, hidden);
        for row in 0..b {
            let (gir, ghr) = (gi.row(row), gh.row(row));
            let keep = mask.as_ref().map_or(1.0, |m| m[row]);
            for j in 0..hidden {
                let rj = sigmoid(gir[j] + ghr[j]);
                let zj = sigmoid(gir[hidden + j] + ghr[hidden + j]);
                let ghnj = ghr[2 * hidden + j];
                let nj = (gir[2 * hidden + j] + rj * ghnj).tanh();
                let hprev = hv.at(row, j);
                let hnew = (1.0 - zj) * nj + zj * hprev;
                *r.at_mut(row, j) = rj;
                *z.at_mut(row, j) = zj;
                *n.at_mut(row, j) = nj;
                *gh_n.at_mut(row, j) = ghnj;
                *out.at_mut(row, j) = keep * hnew + (1.0 - keep) * hprev;
            }
        }
        self.push(
            Some(out),
            Op::Gru(Box::new(GruNode {
                x,
                h,
                w_ih: w.w_ih,
                w_hh: w.w_hh,
                b_ih: w.b_ih,
                b_hh: w.b_hh,
                mask,
                r,
                z,
                n,
                gh_n,
            })),
        )
    }

    /// Dot-product attention of `query` (B x H) over `memory` (S nodes of
    /// B x H); `mask` is B x S with 1.0 on valid positions.
    pub fn attend(&mut self, query: NodeId, memory: &[NodeId], mask: &Matrix) -> NodeId {
        let q = self.value(query);
        let (b, hidden) = (q.rows, q.cols);
        let s = memory.len();
        let mut weights = Matrix::zeros(b, s);
        let mut out = Matrix::zeros(b, hidden);
        let mut scores = vec![0.0; s];
        for row in 0..b {
            let qr = q.row(row);
            let mut valid = Vec::with_capacity(s);
            for (j, &m) in memory.iter().enumerate() {
                if mask.at(row, j) > 0.0 {
                    let e = self.value(m).row(row);
                    scores[valid.len()] = qr.iter().zip(e).map(|(a, b)| a * b).sum();
                    valid.push(j);
                }
            }
            if valid.is_empty() {
                continue;
            }
            softmax_in_place(&mut scores[..valid.len()]);
            let orow = out.row_mut(row);
            for (k, &j) in valid.iter().enumerate() {
                let w = scores[k];
                *weights.at_mut(row, j) = w;
                let e = self.value(memory[j]).row(row);
                for (o, v) in orow.iter_mut().zip(e) {
                    *o += w * v;
                }
            }
        }
        self.push(
            Some(out),
            Op::Attend {
                query,
                memory: memory.to_vec(),
                weights,
            },
        )
    }

    /// Mean label-smoothed cross-entropy over rows whose target is not PAD.
    /// The smoothed target puts `1 - eps` on the true class and spreads `eps`
    /// evenly over the other `V - 1` classes.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], eps: f64) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let v = lv.cols;
        let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
        let mut probs = lv.clone();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut row_nll = vec![0.0; targets.len()];
        for (r, &t) in targets.iter().enumerate() {
            if t == PAD {
                continue;
            }
            let row = lv.row(r);
            let log_z = softmax_in_place(probs.row_mut(r));
            let true_logit = row[t as usize];
            let sum_logits: f64 = row.iter().sum();
            let weighted = (1.0 - eps) * true_logit + off * (sum_logits - true_logit);
            total += log_z - weighted;
            row_nll[r] = log_z - true_logit;
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(
            Some(Matrix::from_vec(1, 1, vec![loss])),
            Op::Xent {
                logits,
                targets: targets.to_vec(),
                eps,
                probs,
                count,
                row_nll,
            },
        )
    }

    /// Unsmoothed `-log p(target)` per row of a cross-entropy node (0 for PAD rows).
    pub fn row_nll(&self, xent: NodeId) -> &[f64] {
        match &self.nodes[xent].op {
            Op::Xent { row_nll, .. } => row_nll,
            _ => panic!("node {xent} is not a cross-entropy node"),
        }
    }

    /// Gradients of the scalar node `loss` with respect to every parameter,
    /// in parameter order.
    pub fn backward(&self, loss: NodeId) -> Vec<Matrix> {
        let mut param_grads: Vec<Matrix> = self.params.iter().map(Matrix::zeros_like).collect();
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = Matrix::zeros_like(self.value(loss));
        seed.data.fill(1.0);
        grads[loss] = Some(seed);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Param(i) => param_grads[*i].add_assign(&g),
                Op::Constant => {}
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros_like(tv);
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, s) in dt.row_mut(i as usize).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    self.accumulate(&mut grads, *table, dt);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.wants_grad(*x) {
                        let mut dx = Matrix::zeros_like(xv);
                        gemm(1.0, &g, false, wv, true, 0.0, &mut dx);
                        self.accumulate(&mut grads, *x, dx);
                    }
                    let mut dw = Matrix::zeros_like(wv);
                    gemm(1.0, xv, true, &g, false, 0.0, &mut dw);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, col_sum(&g));
                }
                Op::Concat { a, b } => {
                    let ac = self.value(*a).cols;
                    let bc = self.value(*b).cols;
                    let mut da = Matrix::zeros(g.rows, ac);
                    let mut db = Matrix::zeros(g.rows, bc);
                    for r in 0..g.rows {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        db.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::StackRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let part = g.data[offset..offset + rows * cols].to_vec();
                        offset += rows * cols;
                        self.accumulate(&mut grads, p, Matrix::from_vec(rows, cols, part));
                    }
                }
                Op::Tanh { x } => {
                    let y = self.value(id);
                    let mut dx = g;
                    dx.data.iter_mut().zip(&y.data).for_each(|(d, y)| *d *= 1.0 - y * y);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    dx.data.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Gru(node) => self.gru_backward(node, &g, &mut grads),
                Op::Attend { query, memory, weights } => {
                    let q = self.value(*query);
                    let (b, hidden) = q.shape();
                    let mut dq = Matrix::zeros(b, hidden);
                    let mut dmem: Vec<Matrix> = memory.iter().map(|_| Matrix::zeros(b, hidden)).collect();
                    let mut dw = vec![0.0; memory.len()];
                    for row in 0..b {
                        let gr = g.row(row);
                        let wr = weights.row(row);
                        let mut dot = 0.0;
                        for (j, &m) in memory.iter().enumerate() {
                            if wr[j] == 0.0 {
                                dw[j] = 0.0;
                                continue;
                            }
                            let e = self.value(m).row(row);
                            dw[j] = gr.iter().zip(e).map(|(a, b)| a * b).sum();
                            dot += wr[j] * dw[j];
                        }
                        let qr = q.row(row);
                        for (j, &m) in memory.iter().enumerate() {
                            if wr[j] == 0.0 {
                                continue;
                            }
                            let ds = wr[j] * (dw[j] - dot);
                            let e = self.value(m).row(row);
                            for k in 0..hidden {
                                dq.data[row * hidden + k] += ds * e[k];
                            }
                            let dm = dmem[j].row_mut(row);
                            for k in 0..hidden {
                                dm[k] += wr[j] * gr[k] + ds * qr[k];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *query, dq);
                    for (&m, d) in memory.iter().zip(dmem) {
                        self.accumulate(&mut grads, m, d);
                    }
                }
                Op::Xent { logits, targets, eps, probs, count, .. } => {
                    if *count == 0 {
                        continue;
                    }
                    let scale = g.data[0] / *count as f64;
                    let v = probs.cols;
                    let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
                    let mut dl = Matrix::zeros(probs.rows, v);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == PAD {
                            continue;
                        }
                        let p = probs.row(r);
                        let d = dl.row_mut(r);
                        for c in 0..v {
                            let q = if c == t as usize { 1.0 - eps } else { off };
                            d[c] = scale * (p[c] - q);
                        }
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
            }
        }
        param_grads
    }

    fn gru_backward(&self, node: &GruNode, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let hv = self.value(node.h);
        let xv = self.value(node.x);
        let (b, hidden) = hv.shape();
        let mut dh = Matrix::zeros(b, hidden);
        let mut dgi = Matrix::zeros(b, 3 * hidden);
        let mut dgh = Matrix::zeros(b, 3 * hidden);
        for row in 0..b {
            let keep = node.mask.as_ref().map_or(1.0, |m| m[row]);
            for j in 0..hidden {
                let gj = g.at(row, j);
                let dhn = keep * gj;
                let (r, z, n, ghn) = (
                    node.r.at(row, j),
                    node.z.at(row, j),
                    node.n.at(row, j),
                    node.gh_n.at(row, j),
                );
                let hprev = hv.at(row, j);
                *dh.at_mut(row, j) = (1.0 - keep) * gj + dhn * z;
                let dn = dhn * (1.0 - z);
                let dz = dhn * (hprev - n);
                let dn_pre = dn * (1.0 - n * n);
                let dr_pre = dn_pre * ghn * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                *dgi.at_mut(row, j) = dr_pre;
                *dgi.at_mut(row, hidden + j) = dz_pre;
                *dgi.at_mut(row, 2 * hidden + j) = dn_pre;
                *dgh.at_mut(row, j) = dr_pre;
                *dgh.at_mut(row, hidden + j) = dz_pre;
                *dgh.at_mut(row, 2 * hidden + j) = dn_pre * r;
            }
        }
        if self.wants_grad(node.x) {
            let mut dx = Matrix::zeros_like(xv);
            gemm(1.0, &dgi, false, self.value(node.w_ih), true, 0.0, &mut dx);
            self.accumulate(grads, node.x, dx);
        }
        gemm(1.0, &dgh, false, self.value(node.w_hh), true, 1.0, &mut dh);
        self.accumulate(grads, node.h, dh);

        let mut dw_ih = Matrix::zeros_like(self.value(node.w_ih));
        gemm(1.0, xv, true, &dgi, false, 0.0, &mut dw_ih);
        self.accumulate(grads, node.w_ih, dw_ih);
        let mut dw_hh = Matrix::zeros_like(self.value(node.w_hh));
        gemm(1.0, hv, true, &dgh, false, 0.0, &mut dw_hh);
        self.accumulate(grads, node.w_hh, dw_hh);
        self.accumulate(grads, node.b_ih, col_sum(&dgi));
        self.accumulate(grads, node.b_hh, col_sum(&dgh));
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        !matches!(self.nodes[id].op, Op::Constant)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.wants_grad(id) {
            return;
        }
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

fn col_sum(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
