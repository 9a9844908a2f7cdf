//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] is a Wengert list over [`Tensor`] values: every op validates
//! shapes, computes its output immediately, and (when recording and when the
//! output depends on a trainable parameter) appends an adjoint record.
//! [`Graph::backward`] replays the records once in reverse and accumulates
//! gradients into the originating [`ParamStore`]. A graph is single-use:
//! a second backward without a new forward is rejected.

use std::cell::Cell;
use std::collections::BTreeMap;

use crate::autodiff::ops::{self, EPS_KL, EPS_NORM};
use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    requires: bool,
}

enum Op {
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    ScaleConst { a: NodeId, c: f64 },
    MulScalar { a: NodeId, s: NodeId },
    RowScale { m: NodeId, v: NodeId },
    ColScale { m: NodeId, v: NodeId },
    RowExtract { m: NodeId, row: usize },
    StackRows { parts: Vec<NodeId> },
    MeanRows { m: NodeId },
    Sum { a: NodeId },
    SumSquares { a: NodeId },
    Dot { a: NodeId, b: NodeId },
    SoftmaxVec { a: NodeId, tau: f64 },
    SoftmaxCols { m: NodeId, tau: f64 },
    CausalSoftmaxRows { m: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    RmsNormCols { m: NodeId },
    CosineSim { u: NodeId, v: NodeId },
    CosSimCols { h: NodeId, keys: NodeId },
    KlDiv { p: NodeId, q: NodeId },
    CeMeanCols { logits: NodeId, targets: Vec<(usize, usize)> },
    EmbedCols { table: NodeId, ids: Vec<usize> },
}

pub struct BackwardReport {
    /// Recorded ops visited by the reverse sweep (always all of them).
    pub visited_ops: usize,
}

pub struct Graph {
    nodes: Vec<Node>,
    ops: Vec<(NodeId, Op)>,
    param_nodes: BTreeMap<usize, NodeId>,
    record: bool,
    consumed: bool,
    degenerate_routing: Cell<u64>,
}

const RMS_EPS: f64 = 1e-8;

impl Graph {
    /// Recording graph: ops are logged for backward.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// Evaluation-only graph: values are computed, no records kept.
    pub fn eval() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(record: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            ops: Vec::new(),
            param_nodes: BTreeMap::new(),
            record,
            consumed: false,
            degenerate_routing: Cell::new(0),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn recorded_ops(&self) -> usize {
        self.ops.len()
    }

    /// Tokens routed through the uniform fallback because ‖h‖ fell below 1e-12.
    pub fn degenerate_routing_count(&self) -> u64 {
        self.degenerate_routing.get()
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Option<Op>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("graph node {}", self.nodes.len()),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, requires });
        if let Some(op) = op {
            if self.record && requires {
                self.ops.push((id, op));
            }
        }
        Ok(id)
    }

    /// Leaf bound to a parameter; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&nid) = self.param_nodes.get(&id.0) {
            return Ok(nid);
        }
        let p = store.get(id);
        let nid = self.push(p.value.clone(), p.trainable, None)?;
        self.param_nodes.insert(id.0, nid);
        Ok(nid)
    }

    /// Leaf carrying a fixed value; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, false, None)
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires)
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        self.push(y, self.req(&[a, b]), Some(Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = (t.nrows(), t.ncols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.at2(i, j);
            }
        }
        let y = Tensor::matrix(c, r, out)?;
        self.push(y, self.req(&[a]), Some(Op::Transpose { a }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let y = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(y, self.req(&[a, b]), Some(Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("sub", a, b));
        }
        let y = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(y, self.req(&[a, b]), Some(Op::Sub { a, b }))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul_elem", a, b));
        }
        let y = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(y, self.req(&[a, b]), Some(Op::MulElem { a, b }))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let y = map(self.value(a), |x| c * x);
        self.push(y, self.req(&[a]), Some(Op::ScaleConst { a, c }))
    }

    /// Broadcast multiply by a scalar node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(self.shape_err("mul_scalar", a, s));
        }
        let sv = self.value(s).item();
        let y = map(self.value(a), |x| sv * x);
        self.push(y, self.req(&[a, s]), Some(Op::MulScalar { a, s }))
    }

    /// diag(v) · M: row i scaled by v[i].
    pub fn row_scale(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rm, cm) = (self.value(m).nrows(), self.value(m).ncols());
        if self.value(v).shape() != [rm] {
            return Err(self.shape_err("row_scale", m, v));
        }
        let mv = self.value(m).as_slice();
        let vv = self.value(v).as_slice();
        let mut out = vec![0.0; rm * cm];
        for i in 0..rm {
            for j in 0..cm {
                out[i * cm + j] = mv[i * cm + j] * vv[i];
            }
        }
        let y = Tensor::matrix(rm, cm, out)?;
        self.push(y, self.req(&[m, v]), Some(Op::RowScale { m, v }))
    }

    /// M · diag(v): column j scaled by v[j].
    pub fn col_scale(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rm, cm) = (self.value(m).nrows(), self.value(m).ncols());
        if self.value(v).shape() != [cm] {
            return Err(self.shape_err("col_scale", m, v));
        }
        let mv = self.value(m).as_slice();
        let vv = self.value(v).as_slice();
        let mut out = vec![0.0; rm * cm];
        for i in 0..rm {
            for j in 0..cm {
                out[i * cm + j] = mv[i * cm + j] * vv[j];
            }
        }
        let y = Tensor::matrix(rm, cm, out)?;
        self.push(y, self.req(&[m, v]), Some(Op::ColScale { m, v }))
    }

    pub fn row_extract(&mut self, m: NodeId, row: usize) -> Result<NodeId> {
        let t = self.value(m);
        if row >= t.nrows() {
            return Err(Error::Usage(format!(
                "row_extract: row {row} out of {} rows",
                t.nrows()
            )));
        }
        let y = Tensor::vector(t.row(row).to_vec());
        self.push(y, self.req(&[m]), Some(Op::RowExtract { m, row }))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("stack_rows of zero vectors".into()));
        }
        let c = self.value(parts[0]).len();
        let mut out = Vec::with_capacity(parts.len() * c);
        for &p in parts {
            if self.value(p).shape() != [c] {
                return Err(self.shape_err("stack_rows", parts[0], p));
            }
            out.extend_from_slice(self.value(p).as_slice());
        }
        let y = Tensor::matrix(parts.len(), c, out)?;
        let req = self.req(parts);
        self.push(y, req, Some(Op::StackRows { parts: parts.to_vec() }))
    }

    /// Mean over the row index: [r×c] → [c].
    pub fn mean_rows(&mut self, m: NodeId) -> Result<NodeId> {
        let t = self.value(m);
        let (r, c) = (t.nrows(), t.ncols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += t.at2(i, j);
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let y = Tensor::vector(out);
        self.push(y, self.req(&[m]), Some(Op::MeanRows { m }))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let y = Tensor::scalar(self.value(a).as_slice().iter().sum());
        self.push(y, self.req(&[a]), Some(Op::Sum { a }))
    }

    /// Σ x² (squared Frobenius norm).
    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let y = Tensor::scalar(self.value(a).as_slice().iter().map(|x| x * x).sum());
        self.push(y, self.req(&[a]), Some(Op::SumSquares { a }))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("dot", a, b));
        }
        let y = Tensor::scalar(ops::dot(self.value(a).as_slice(), self.value(b).as_slice()));
        self.push(y, self.req(&[a, b]), Some(Op::Dot { a, b }))
    }

    pub fn softmax_vec(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("softmax temperature must be positive, got {tau}")));
        }
        let y = Tensor::vector(ops::softmax_temp_slice(self.value(a).as_slice(), tau));
        self.push(y, self.req(&[a]), Some(Op::SoftmaxVec { a, tau }))
    }

    pub fn softmax_cols(&mut self, m: NodeId, tau: f64) -> Result<NodeId> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("softmax temperature must be positive, got {tau}")));
        }
        let t = self.value(m);
        let (r, c) = (t.nrows(), t.ncols());
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let col: Vec<f64> = (0..r).map(|i| t.at2(i, j)).collect();
            let sm = ops::softmax_temp_slice(&col, tau);
            for i in 0..r {
                out[i * c + j] = sm[i];
            }
        }
        let y = Tensor::matrix(r, c, out)?;
        self.push(y, self.req(&[m]), Some(Op::SoftmaxCols { m, tau }))
    }

    /// Row-wise softmax over a [T×T] score matrix, row t restricted to
    /// columns 0..=t; masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, m: NodeId) -> Result<NodeId> {
        let t = self.value(m);
        let n = t.nrows();
        if t.ncols() != n {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax_rows",
                lhs: t.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &t.row(i)[..=i];
            let sm = ops::softmax_temp_slice(row, 1.0);
            out[i * n..i * n + i + 1].copy_from_slice(&sm);
        }
        let y = Tensor::matrix(n, n, out)?;
        self.push(y, self.req(&[m]), Some(Op::CausalSoftmaxRows { m }))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let y = map(self.value(a), f64::tanh);
        self.push(y, self.req(&[a]), Some(Op::Tanh { a }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let y = map(self.value(a), ops::sigmoid);
        self.push(y, self.req(&[a]), Some(Op::Sigmoid { a }))
    }

    /// Per-column RMS normalization (no learned gain).
    pub fn rms_norm_cols(&mut self, m: NodeId) -> Result<NodeId> {
        let t = self.value(m);
        let (r, c) = (t.nrows(), t.ncols());
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            let ms: f64 = (0..r).map(|i| t.at2(i, j).powi(2)).sum::<f64>() / r as f64;
            let ri = 1.0 / (ms + RMS_EPS).sqrt();
            for i in 0..r {
                out[i * c + j] = t.at2(i, j) * ri;
            }
        }
        let y = Tensor::matrix(r, c, out)?;
        self.push(y, self.req(&[m]), Some(Op::RmsNormCols { m }))
    }

    pub fn cosine_sim(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let c = ops::cosine_sim(self.value(u), self.value(v))?;
        self.push(Tensor::scalar(c), self.req(&[u, v]), Some(Op::CosineSim { u, v }))
    }

    /// Cosine similarities between every column of h [r×T] and every row of
    /// keys [N×r], producing [N×T]. Degenerate columns (‖h_t‖ < 1e-12) yield
    /// an all-zero similarity column (uniform routing after softmax) and are
    /// counted; no gradient flows through them.
    pub fn cos_sim_cols(&mut self, h: NodeId, keys: NodeId) -> Result<NodeId> {
        let (hv, kv) = (self.value(h), self.value(keys));
        let (r, t) = (hv.nrows(), hv.ncols());
        let n = kv.nrows();
        if kv.ncols() != r {
            return Err(self.shape_err("cos_sim_cols", h, keys));
        }
        let mut out = vec![0.0; n * t];
        for tt in 0..t {
            let col = hv.col(tt);
            let hn = ops::norm(&col);
            if hn < EPS_NORM {
                self.degenerate_routing.set(self.degenerate_routing.get() + 1);
                continue;
            }
            for i in 0..n {
                let krow = kv.row(i);
                let kn = ops::norm(krow);
                if kn < EPS_NORM {
                    continue;
                }
                out[i * t + tt] = ops::dot(&col, krow) / (hn * kn);
            }
        }
        let y = Tensor::matrix(n, t, out)?;
        self.push(y, self.req(&[h, keys]), Some(Op::CosSimCols { h, keys }))
    }

    /// KL(p ‖ q) with q clamped below at 1e-12. Inputs are validated as
    /// distributions; pass p as a constant node for a detached target.
    pub fn kl_div(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        if self.value(p).shape() != self.value(q).shape() {
            return Err(self.shape_err("kl_div", p, q));
        }
        ops::validate_distribution(self.value(p).as_slice(), "kl_div p")?;
        ops::validate_distribution(self.value(q).as_slice(), "kl_div q")?;
        let y = Tensor::scalar(ops::kl_slice(self.value(p).as_slice(), self.value(q).as_slice()));
        self.push(y, self.req(&[p, q]), Some(Op::KlDiv { p, q }))
    }

    /// Mean negative log-softmax of the target token over the selected
    /// columns of logits [V×T]; `targets` pairs are (column, token id).
    pub fn ce_mean_cols(&mut self, logits: NodeId, targets: Vec<(usize, usize)>) -> Result<NodeId> {
        let lv = self.value(logits);
        let (v, t) = (lv.nrows(), lv.ncols());
        if targets.is_empty() {
            return Err(Error::Usage("ce_mean_cols with no target positions".into()));
        }
        for &(col, tok) in &targets {
            if col >= t {
                return Err(Error::Data(format!("loss position {col} outside sequence of {t}")));
            }
            if tok >= v {
                return Err(Error::Data(format!("target id {tok} outside vocabulary of {v}")));
            }
        }
        let mut loss = 0.0;
        for &(col, tok) in &targets {
            let lse = ops::logsumexp((0..v).map(|i| lv.at2(i, col)));
            loss += lse - lv.at2(tok, col);
        }
        loss /= targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            self.req(&[logits]),
            Some(Op::CeMeanCols { logits, targets }),
        )
    }

    /// Column t of the output is row ids[t] of the table: [V×d] → [d×T].
    pub fn embed_cols(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (v, d) = (tv.nrows(), tv.ncols());
        for &id in ids {
            if id >= v {
                return Err(Error::Data(format!("token id {id} outside vocabulary of {v}")));
            }
        }
        let t = ids.len();
        let mut out = vec![0.0; d * t];
        for (tt, &id) in ids.iter().enumerate() {
            let row = tv.row(id);
            for j in 0..d {
                out[j * t + tt] = row[j];
            }
        }
        let y = Tensor::matrix(d, t, out)?;
        self.push(
            y,
            self.req(&[table]),
            Some(Op::EmbedCols { table, ids: ids.to_vec() }),
        )
    }

    /// Reverse sweep from a scalar loss; accumulates into trainable
    /// parameters of `store` and leaves frozen ones untouched.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<BackwardReport> {
        if !self.record {
            return Err(Error::Usage("backward on an evaluation-only graph".into()));
        }
        if self.consumed {
            return Err(Error::Usage("backward called twice on one compute record".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0usize;

        for idx in (0..self.ops.len()).rev() {
            visited += 1;
            let out = self.ops[idx].0;
            let Some(gy) = grads[out.0].take() else { continue };
            let op = &self.ops[idx].1;
            self.apply_vjp(op, &gy, &mut grads)?;
        }

        for (&pid, &nid) in &self.param_nodes {
            let p = store.get_mut(ParamId(pid));
            if !p.trainable {
                continue;
            }
            if let Some(g) = &grads[nid.0] {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        context: format!("gradient of parameter {pid}"),
                    });
                }
                let dst = p.grad.as_mut_slice();
                for (d, s) in dst.iter_mut().zip(g.as_slice()) {
                    *d += s;
                }
            }
        }
        Ok(BackwardReport { visited_ops: visited })
    }

    fn apply_vjp(&self, op: &Op, gy: &Tensor, grads: &mut Vec<Option<Tensor>>) -> Result<()> {
        match op {
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.nrows(), av.ncols());
                let n = bv.ncols();
                if self.nodes[a.0].requires {
                    let ga = slot(grads, *a, av.shape());
                    ops::matmul_nt_into(ga.as_mut_slice(), gy.as_slice(), bv.as_slice(), m, n, k);
                }
                if self.nodes[b.0].requires {
                    let gb = slot(grads, *b, bv.shape());
                    ops::matmul_tn_into(gb.as_mut_slice(), av.as_slice(), gy.as_slice(), m, k, n);
                }
            }
            Op::Transpose { a } => {
                if self.nodes[a.0].requires {
                    let av_shape = self.value(*a).shape().to_vec();
                    let (r, c) = (av_shape[0], av_shape[1]);
                    let ga = slot(grads, *a, &av_shape);
                    let gs = ga.as_mut_slice();
                    for i in 0..r {
                        for j in 0..c {
                            gs[i * c + j] += gy.at2(j, i);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.nodes[id.0].requires {
                        add_into(slot(grads, *id, gy.shape()), gy.as_slice(), 1.0);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[a.0].requires {
                    add_into(slot(grads, *a, gy.shape()), gy.as_slice(), 1.0);
                }
                if self.nodes[b.0].requires {
                    add_into(slot(grads, *b, gy.shape()), gy.as_slice(), -1.0);
                }
            }
            Op::MulElem { a, b } => {
                if self.nodes[a.0].requires {
                    let bv = self.value(*b).clone();
                    let ga = slot(grads, *a, gy.shape());
                    mul_add_into(ga, gy.as_slice(), bv.as_slice());
                }
                if self.nodes[b.0].requires {
                    let av = self.value(*a).clone();
                    let gb = slot(grads, *b, gy.shape());
                    mul_add_into(gb, gy.as_slice(), av.as_slice());
                }
            }
            Op::ScaleConst { a, c } => {
                if self.nodes[a.0].requires {
                    add_into(slot(grads, *a, gy.shape()), gy.as_slice(), *c);
                }
            }
            Op::MulScalar { a, s } => {
                let sv = self.value(*s).item();
                if self.nodes[a.0].requires {
                    add_into(slot(grads, *a, gy.shape()), gy.as_slice(), sv);
                }
                if self.nodes[s.0].requires {
                    let av = self.value(*a);
                    let acc: f64 = gy.as_slice().iter().zip(av.as_slice()).map(|(g, x)| g * x).sum();
                    slot(grads, *s, &[1]).as_mut_slice()[0] += acc;
                }
            }
            Op::RowScale { m, v } => {
                let (mv, vv) = (self.value(*m).clone(), self.value(*v).clone());
                let (r, c) = (mv.nrows(), mv.ncols());
                if self.nodes[m.0].requires {
                    let gm = slot(grads, *m, mv.shape()).as_mut_slice();
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] += gy.at2(i, j) * vv.at(i);
                        }
                    }
                }
                if self.nodes[v.0].requires {
                    let gv = slot(grads, *v, vv.shape()).as_mut_slice();
                    for i in 0..r {
                        for j in 0..c {
                            gv[i] += gy.at2(i, j) * mv.at2(i, j);
                        }
                    }
                }
            }
            Op::ColScale { m, v } => {
                let (mv, vv) = (self.value(*m).clone(), self.value(*v).clone());
                let (r, c) = (mv.nrows(), mv.ncols());
                if self.nodes[m.0].requires {
                    let gm = slot(grads, *m, mv.shape()).as_mut_slice();
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] += gy.at2(i, j) * vv.at(j);
                        }
                    }
                }
                if self.nodes[v.0].requires {
                    let gv = slot(grads, *v, vv.shape()).as_mut_slice();
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += gy.at2(i, j) * mv.at2(i, j);
                        }
                    }
                }
            }
            Op::RowExtract { m, row } => {
                if self.nodes[m.0].requires {
                    let shape = self.value(*m).shape().to_vec();
                    let c = shape[1];
                    let gm = slot(grads, *m, &shape).as_mut_slice();
                    for j in 0..c {
                        gm[row * c + j] += gy.at(j);
                    }
                }
            }
            Op::StackRows { parts } => {
                for (i, p) in parts.iter().enumerate() {
                    if self.nodes[p.0].requires {
                        let shape = self.value(*p).shape().to_vec();
                        add_into(slot(grads, *p, &shape), gy.row(i), 1.0);
                    }
                }
            }
            Op::MeanRows { m } => {
                if self.nodes[m.0].requires {
                    let shape = self.value(*m).shape().to_vec();
                    let (r, c) = (shape[0], shape[1]);
                    let gm = slot(grads, *m, &shape).as_mut_slice();
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] += gy.at(j) * inv;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if self.nodes[a.0].requires {
                    let shape = self.value(*a).shape().to_vec();
                    let g = gy.item();
                    for d in slot(grads, *a, &shape).as_mut_slice() {
                        *d += g;
                    }
                }
            }
            Op::SumSquares { a } => {
                if self.nodes[a.0].requires {
                    let av = self.value(*a).clone();
                    let g = gy.item();
                    let ga = slot(grads, *a, av.shape()).as_mut_slice();
                    for (d, x) in ga.iter_mut().zip(av.as_slice()) {
                        *d += 2.0 * g * x;
                    }
                }
            }
            Op::Dot { a, b } => {
                let g = gy.item();
                if self.nodes[a.0].requires {
                    let bv = self.value(*b).clone();
                    add_into(slot(grads, *a, bv.shape()), bv.as_slice(), g);
                }
                if self.nodes[b.0].requires {
                    let av = self.value(*a).clone();
                    add_into(slot(grads, *b, av.shape()), av.as_slice(), g);
                }
            }
            Op::SoftmaxVec { a, tau } => {
                if self.nodes[a.0].requires {
                    let y = ops::softmax_temp_slice(self.value(*a).as_slice(), *tau);
                    let inner: f64 = y.iter().zip(gy.as_slice()).map(|(yi, gi)| yi * gi).sum();
                    let shape = self.value(*a).shape().to_vec();
                    let ga = slot(grads, *a, &shape).as_mut_slice();
                    for i in 0..y.len() {
                        ga[i] += y[i] * (gy.at(i) - inner) / tau;
                    }
                }
            }
            Op::SoftmaxCols { m, tau } => {
                if self.nodes[m.0].requires {
                    let mv = self.value(*m).clone();
                    let (r, c) = (mv.nrows(), mv.ncols());
                    let gm = slot(grads, *m, mv.shape()).as_mut_slice();
                    for j in 0..c {
                        let col: Vec<f64> = (0..r).map(|i| mv.at2(i, j)).collect();
                        let y = ops::softmax_temp_slice(&col, *tau);
                        let inner: f64 = (0..r).map(|i| y[i] * gy.at2(i, j)).sum();
                        for i in 0..r {
                            gm[i * c + j] += y[i] * (gy.at2(i, j) - inner) / tau;
                        }
                    }
                }
            }
            Op::CausalSoftmaxRows { m } => {
                if self.nodes[m.0].requires {
                    let mv = self.value(*m).clone();
                    let n = mv.nrows();
                    let gm = slot(grads, *m, mv.shape()).as_mut_slice();
                    for i in 0..n {
                        let row = &mv.row(i)[..=i];
                        let y = ops::softmax_temp_slice(row, 1.0);
                        let inner: f64 = (0..=i).map(|j| y[j] * gy.at2(i, j)).sum();
                        for j in 0..=i {
                            gm[i * n + j] += y[j] * (gy.at2(i, j) - inner);
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                if self.nodes[a.0].requires {
                    let av = self.value(*a).clone();
                    let ga = slot(grads, *a, av.shape()).as_mut_slice();
                    for (i, x) in av.as_slice().iter().enumerate() {
                        let t = x.tanh();
                        ga[i] += gy.at(i) * (1.0 - t * t);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.nodes[a.0].requires {
                    let av = self.value(*a).clone();
                    let ga = slot(grads, *a, av.shape()).as_mut_slice();
                    for (i, x) in av.as_slice().iter().enumerate() {
                        let s = ops::sigmoid(*x);
                        ga[i] += gy.at(i) * s * (1.0 - s);
                    }
                }
            }
            Op::RmsNormCols { m } => {
                if self.nodes[m.0].requires {
                    let mv = self.value(*m).clone();
                    let (r, c) = (mv.nrows(), mv.ncols());
                    let gm = slot(grads, *m, mv.shape()).as_mut_slice();
                    for j in 0..c {
                        let ms: f64 = (0..r).map(|i| mv.at2(i, j).powi(2)).sum::<f64>() / r as f64;
                        let ri = 1.0 / (ms + RMS_EPS).sqrt();
                        let xdy: f64 = (0..r).map(|i| mv.at2(i, j) * gy.at2(i, j)).sum();
                        let k = ri.powi(3) / r as f64 * xdy;
                        for i in 0..r {
                            gm[i * c + j] += ri * gy.at2(i, j) - k * mv.at2(i, j);
                        }
                    }
                }
            }
            Op::CosineSim { u, v } => {
                let (uv, vv) = (self.value(*u).clone(), self.value(*v).clone());
                let (nu, nv) = (ops::norm(uv.as_slice()), ops::norm(vv.as_slice()));
                let c = ops::dot(uv.as_slice(), vv.as_slice()) / (nu * nv);
                let g = gy.item();
                if self.nodes[u.0].requires {
                    let gu = slot(grads, *u, uv.shape()).as_mut_slice();
                    for i in 0..uv.len() {
                        gu[i] += g * (vv.at(i) / (nu * nv) - c * uv.at(i) / (nu * nu));
                    }
                }
                if self.nodes[v.0].requires {
                    let gv = slot(grads, *v, vv.shape()).as_mut_slice();
                    for i in 0..vv.len() {
                        gv[i] += g * (uv.at(i) / (nu * nv) - c * vv.at(i) / (nv * nv));
                    }
                }
            }
            Op::CosSimCols { h, keys } => {
                let (hv, kv) = (self.value(*h).clone(), self.value(*keys).clone());
                let (_r, t) = (hv.nrows(), hv.ncols());
                let n = kv.nrows();
                let h_req = self.nodes[h.0].requires;
                let k_req = self.nodes[keys.0].requires;
                let mut gh = vec![0.0; hv.len()];
                let mut gk = vec![0.0; kv.len()];
                let c_cols = hv.ncols();
                for tt in 0..t {
                    let col = hv.col(tt);
                    let hn = ops::norm(&col);
                    if hn < EPS_NORM {
                        continue;
                    }
                    for i in 0..n {
                        let krow = kv.row(i);
                        let kn = ops::norm(krow);
                        if kn < EPS_NORM {
                            continue;
                        }
                        let g = gy.at2(i, tt);
                        if g == 0.0 {
                            continue;
                        }
                        let cv = ops::dot(&col, krow) / (hn * kn);
                        if h_req {
                            for (d, hd) in col.iter().enumerate() {
                                gh[d * c_cols + tt] +=
                                    g * (krow[d] / (hn * kn) - cv * hd / (hn * hn));
                            }
                        }
                        if k_req {
                            for d in 0..krow.len() {
                                gk[i * krow.len() + d] +=
                                    g * (col[d] / (hn * kn) - cv * krow[d] / (kn * kn));
                            }
                        }
                    }
                }
                if h_req {
                    add_into(slot(grads, *h, hv.shape()), &gh, 1.0);
                }
                if k_req {
                    add_into(slot(grads, *keys, kv.shape()), &gk, 1.0);
                }
            }
            Op::KlDiv { p, q } => {
                let (pv, qv) = (self.value(*p).clone(), self.value(*q).clone());
                let g = gy.item();
                if self.nodes[p.0].requires {
                    let gp = slot(grads, *p, pv.shape()).as_mut_slice();
                    for i in 0..pv.len() {
                        let pi = pv.at(i);
                        if pi > 0.0 {
                            gp[i] += g * ((pi / qv.at(i).max(EPS_KL)).ln() + 1.0);
                        }
                    }
                }
                if self.nodes[q.0].requires {
                    let gq = slot(grads, *q, qv.shape()).as_mut_slice();
                    for i in 0..qv.len() {
                        let qi = qv.at(i);
                        if qi > EPS_KL {
                            gq[i] += g * (-pv.at(i) / qi);
                        }
                    }
                }
            }
            Op::CeMeanCols { logits, targets } => {
                if self.nodes[logits.0].requires {
                    let lv = self.value(*logits).clone();
                    let (v, t) = (lv.nrows(), lv.ncols());
                    let scale = gy.item() / targets.len() as f64;
                    let gl = slot(grads, *logits, lv.shape()).as_mut_slice();
                    for &(col, tok) in targets {
                        let column: Vec<f64> = (0..v).map(|i| lv.at2(i, col)).collect();
                        let sm = ops::softmax_temp_slice(&column, 1.0);
                        for i in 0..v {
                            let delta = if i == tok { 1.0 } else { 0.0 };
                            gl[i * t + col] += scale * (sm[i] - delta);
                        }
                    }
                }
            }
            Op::EmbedCols { table, ids } => {
                if self.nodes[table.0].requires {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    let gt = slot(grads, *table, &shape).as_mut_slice();
                    for (tt, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += gy.at2(j, tt);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.as_slice().iter().map(|&x| f(x)).collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

fn slot<'g>(grads: &'g mut Vec<Option<Tensor>>, id: NodeId, shape: &[usize]) -> &'g mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(dst: &mut Tensor, src: &[f64], scale: f64) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn mul_add_into(dst: &mut Tensor, a: &[f64], b: &[f64]) {
    for ((d, x), y) in dst.as_mut_slice().iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, RngState};

    // Central differences against the same closure the analytic pass uses.
    // Keeps the oracle independent of every VJP in this file.
    fn fd_check(store: &mut ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> NodeId, tol: f64) {
        store.zero_grads();
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        g.backward(loss, store).unwrap();

        let eps = 1e-6;
        for pid in store.ids() {
            if !store.get(pid).trainable {
                continue;
            }
            for k in 0..store.get(pid).value.len() {
                let orig = store.get(pid).value.at(k);
                store.get_mut(pid).value.as_mut_slice()[k] = orig + eps;
                let mut gp = Graph::eval();
                let fp = {
                    let l = build(&mut gp, store);
                    gp.value(l).item()
                };
                store.get_mut(pid).value.as_mut_slice()[k] = orig - eps;
                let mut gm = Graph::eval();
                let fm = {
                    let l = build(&mut gm, store);
                    gm.value(l).item()
                };
                store.get_mut(pid).value.as_mut_slice()[k] = orig;
                let num = (fp - fm) / (2.0 * eps);
                let ana = store.get(pid).grad.at(k);
                let rel = (ana - num).abs() / f64::max(1.0, f64::max(ana.abs(), num.abs()));
                assert!(
                    rel < tol,
                    "param {} [{}]: analytic {} vs numeric {}",
                    store.name(pid),
                    k,
                    ana,
                    num
                );
            }
        }
    }

    fn rand_param(store: &mut ParamStore, rng: &mut RngState, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = rng.gaussian_vec(n).iter().map(|x| 0.6 * x).collect();
        store
            .add(name, Tensor::from_vec(shape, data).unwrap(), true)
            .unwrap()
    }

    #[test]
    fn test_matmul_chain_grads() {
        let mut rng = RngState::with_stream(11, streams::DATA);
        let mut store = ParamStore::new();
        let a = rand_param(&mut store, &mut rng, "a", &[3, 4]);
        let b = rand_param(&mut store, &mut rng, "b", &[4, 2]);
        fd_check(
            &mut store,
            &move |g, s| {
                let an = g.param(s, a).unwrap();
                let bn = g.param(s, b).unwrap();
                let y = g.matmul(an, bn).unwrap();
                let t = g.tanh(y).unwrap();
                g.sum_squares(t).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn test_softmax_rmsnorm_grads() {
        let mut rng = RngState::with_stream(12, streams::DATA);
        let mut store = ParamStore::new();
        let m = rand_param(&mut store, &mut rng, "m", &[4, 3]);
        fd_check(
            &mut store,
            &move |g, s| {
                let mn = g.param(s, m).unwrap();
                let n = g.rms_norm_cols(mn).unwrap();
                let sm = g.softmax_cols(n, 0.8).unwrap();
                let sq = g.sum_squares(sm).unwrap();
                g.scale_const(sq, 3.0).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn test_causal_softmax_and_ce_grads() {
        let mut rng = RngState::with_stream(13, streams::DATA);
        let mut store = ParamStore::new();
        let w = rand_param(&mut store, &mut rng, "w", &[5, 5]);
        fd_check(
            &mut store,
            &move |g, s| {
                let wn = g.param(s, w).unwrap();
                let p = g.causal_softmax_rows(wn).unwrap();
                let t = g.transpose(p).unwrap();
                g.ce_mean_cols(t, vec![(1, 0), (3, 4)]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn test_routing_path_grads() {
        let mut rng = RngState::with_stream(14, streams::DATA);
        let mut store = ParamStore::new();
        let h = rand_param(&mut store, &mut rng, "h", &[4, 3]);
        let k = rand_param(&mut store, &mut rng, "k", &[3, 4]);
        fd_check(
            &mut store,
            &move |g, s| {
                let hn = g.param(s, h).unwrap();
                let kn = g.param(s, k).unwrap();
                let sims = g.cos_sim_cols(hn, kn).unwrap();
                let gate = g.softmax_cols(sims, 0.8).unwrap();
                let picked = g.row_extract(gate, 1).unwrap();
                let sq = g.sum_squares(picked).unwrap();
                let all = g.sum(gate).unwrap();
                g.add(sq, all).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn test_kl_sigmoid_scalar_grads() {
        let mut store = ParamStore::new();
        let q = store
            .add("q", Tensor::vector(vec![0.2, 0.5, 1.1]), true)
            .unwrap();
        let gv = store.add("gv", Tensor::scalar(-0.3), true).unwrap();
        let mix = store
            .add("mix", Tensor::from_vec(&[2, 3], vec![0.4, -0.1, 0.8, 0.2, 0.9, -0.5]).unwrap(), true)
            .unwrap();
        fd_check(
            &mut store,
            &move |g, s| {
                let p = g.constant(Tensor::vector(vec![0.5, 0.3, 0.2])).unwrap();
                let qn = g.param(s, q).unwrap();
                let qd = g.softmax_vec(qn, 1.0).unwrap();
                let kl = g.kl_div(p, qd).unwrap();
                let gn = g.param(s, gv).unwrap();
                let gs = g.sigmoid(gn).unwrap();
                let mn = g.param(s, mix).unwrap();
                let mg = g.mul_scalar(mn, gs).unwrap();
                let me = g.mean_rows(mg).unwrap();
                let d = g.dot(me, me).unwrap();
                g.add(kl, d).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn test_scaling_stack_embed_grads() {
        let mut rng = RngState::with_stream(15, streams::DATA);
        let mut store = ParamStore::new();
        let m = rand_param(&mut store, &mut rng, "m", &[3, 4]);
        let v = rand_param(&mut store, &mut rng, "v", &[3]);
        let c = rand_param(&mut store, &mut rng, "c", &[4]);
        let tab = rand_param(&mut store, &mut rng, "tab", &[5, 3]);
        fd_check(
            &mut store,
            &move |g, s| {
                let mn = g.param(s, m).unwrap();
                let vn = g.param(s, v).unwrap();
                let cn = g.param(s, c).unwrap();
                let rs = g.row_scale(mn, vn).unwrap();
                let cs = g.col_scale(rs, cn).unwrap();
                let tn = g.param(s, tab).unwrap();
                let emb = g.embed_cols(tn, &[4, 0, 2, 0]).unwrap();
                let diff = g.sub(cs, emb).unwrap();
                let prod = g.mul_elem(diff, diff).unwrap();
                let r0 = g.row_extract(prod, 0).unwrap();
                let r1 = g.row_extract(prod, 2).unwrap();
                let st = g.stack_rows(&[r0, r1]).unwrap();
                g.sum(st).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn test_frozen_params_get_no_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true).unwrap();
        let w = store.add("w", Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap(), false).unwrap();
        let mut g = Graph::new();
        let an = g.param(&store, a).unwrap();
        let wn = g.param(&store, w).unwrap();
        let y = g.matmul(wn, an).unwrap();
        let loss = g.sum_squares(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.get(a).grad.as_slice().iter().any(|&x| x != 0.0));
        assert!(store.get(w).grad.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn test_frozen_only_subgraph_records_nothing() {
        let mut store = ParamStore::new();
        store.freeze_all();
        let w = store.add("w", Tensor::identity(3), false).unwrap();
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap()).unwrap();
        let y = g.matmul(wn, x).unwrap();
        let _ = g.sum(y).unwrap();
        assert_eq!(g.recorded_ops(), 0);
    }

    #[test]
    fn test_double_backward_rejected() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0), true).unwrap();
        let mut g = Graph::new();
        let an = g.param(&store, a).unwrap();
        let loss = g.sum_squares(an).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(matches!(g.backward(loss, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn test_backward_on_eval_graph_rejected() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0), true).unwrap();
        let mut g = Graph::eval();
        let an = g.param(&store, a).unwrap();
        let loss = g.sum_squares(an).unwrap();
        assert!(matches!(g.backward(loss, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn test_reverse_sweep_visits_each_op_once() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, -1.0]), true).unwrap();
        let mut g = Graph::new();
        let an = g.param(&store, a).unwrap();
        let t = g.tanh(an).unwrap();
        let u = g.add(t, an).unwrap();
        let loss = g.sum_squares(u).unwrap();
        let n_ops = g.recorded_ops();
        let report = g.backward(loss, &mut store).unwrap();
        assert_eq!(report.visited_ops, n_ops);
    }

    #[test]
    fn test_param_node_reused_and_grads_accumulate() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(3.0), true).unwrap();
        let mut g = Graph::new();
        let n1 = g.param(&store, a).unwrap();
        let n2 = g.param(&store, a).unwrap();
        assert_eq!(n1, n2);
        // loss = x·x through two uses, d/dx = 2x = 6
        let loss = g.mul_elem(n1, n2).unwrap();
        let loss = g.sum(loss).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!((store.get(a).grad.item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn test_degenerate_routing_column_goes_uniform() {
        let mut store = ParamStore::new();
        let k = store
            .add("k", Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(), true)
            .unwrap();
        let mut g = Graph::new();
        let h = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap())
            .unwrap();
        let kn = g.param(&store, k).unwrap();
        let sims = g.cos_sim_cols(h, kn).unwrap();
        assert_eq!(g.degenerate_routing_count(), 1);
        let gates = g.softmax_cols(sims, 0.8).unwrap();
        let gv = g.value(gates);
        for i in 0..3 {
            assert!((gv.at2(i, 1) - 1.0 / 3.0).abs() < 1e-15);
        }
        let loss = g.sum_squares(gates).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert!(store.get(k).grad.all_finite());
    }

    #[test]
    fn test_nonfinite_forward_rejected() {
        let mut g = Graph::eval();
        let big = g.constant(Tensor::scalar(1e308)).unwrap();
        let sq = g.mul_elem(big, big);
        assert!(matches!(sq, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn test_causal_softmax_masks_upper_triangle() {
        let mut g = Graph::eval();
        let m = g.constant(Tensor::matrix(3, 3, vec![5.0; 9]).unwrap()).unwrap();
        let p = g.causal_softmax_rows(m).unwrap();
        let pv = g.value(p);
        assert_eq!(pv.at2(0, 1), 0.0);
        assert_eq!(pv.at2(0, 2), 0.0);
        assert_eq!(pv.at2(1, 2), 0.0);
        assert!((pv.at2(0, 0) - 1.0).abs() < 1e-15);
        assert!((pv.at2(2, 0) - 1.0 / 3.0).abs() < 1e-15);
        for i in 0..3 {
            let s: f64 = (0..3).map(|j| pv.at2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_embed_cols_layout() {
        let mut g = Graph::eval();
        let tab = g
            .constant(Tensor::matrix(3, 2, vec![10.0, 11.0, 20.0, 21.0, 30.0, 31.0]).unwrap())
            .unwrap();
        let e = g.embed_cols(tab, &[2, 0]).unwrap();
        let ev = g.value(e);
        assert_eq!(ev.shape(), &[2, 2]);
        assert_eq!(ev.at2(0, 0), 30.0);
        assert_eq!(ev.at2(1, 0), 31.0);
        assert_eq!(ev.at2(0, 1), 10.0);
        assert_eq!(ev.at2(1, 1), 11.0);
    }
}
