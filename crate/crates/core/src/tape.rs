//! Reverse-mode autodiff over dense f64 matrices.
//!
//! The tape is rebuilt per training step; nodes are SSA so backward is a
//! single reverse sweep. All arithmetic is 64-bit and sequential, giving
//! bit-reproducible gradients for a fixed graph.

use std::sync::Arc;

use crate::sequence::AttentionMask;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// Row gather from an embedding table.
    Gather { table: NodeId, idx: Vec<usize> },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Broadcast a `[1, n]` bias over every row.
    AddRow { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    /// Rows of `a` scaled by per-row factors from a `[rows, 1]` gain node.
    ScaleRows { a: NodeId, gain: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    RmsNorm { a: NodeId, inv: Vec<f64> },
    /// Multi-head masked attention; `attn` holds per-head softmax weights,
    /// laid out `[head][q][k]`.
    Mha { q: NodeId, k: NodeId, v: NodeId, heads: usize, attn: Vec<f64> },
    /// Sum of per-row NLL against integer targets; output is `[1,1]`.
    CrossEntropySum { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    /// Sum of squared error against a constant target; output is `[1,1]`.
    SquaredErrorSum { pred: NodeId, target: Tensor },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

const RMS_EPS: f64 = 1e-6;

/// Computation tape. Build forward with the op methods, then call
/// [`Tape::backward`] once on a scalar node.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar node");
        t.data[0]
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn gather(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let t = self.value(table);
        let cols = t.cols;
        let mut out = Tensor::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < t.rows, "gather index {i} out of range ({} rows)", t.rows);
            out.data[r * cols..(r + 1) * cols].copy_from_slice(t.row(i));
        }
        self.push(out, Op::Gather { table, idx: idx.to_vec() })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        assert_eq!(ac, br, "matmul inner dims {ac} vs {br}");
        let mut out = Tensor::zeros(ar, bc);
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..ar {
                for kk in 0..ac {
                    let aik = av.data[i * ac + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv.data[kk * bc..(kk + 1) * bc];
                    let orow = &mut out.data[i * bc..(i + 1) * bc];
                    for j in 0..bc {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        self.push(out, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        assert_eq!(sa, sb, "add shape mismatch {sa:?} vs {sb:?}");
        let mut out = self.value(a).clone();
        for (o, x) in out.data.iter_mut().zip(self.nodes[b.0].value.data.iter()) {
            *o += *x;
        }
        self.push(out, Op::Add { a, b })
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (_, ac) = self.value(a).shape();
        let sb = self.value(bias).shape();
        assert_eq!(sb, (1, ac), "bias must be [1, {ac}]");
        let mut out = self.value(a).clone();
        let bv = self.nodes[bias.0].value.data.clone();
        for r in 0..out.rows {
            for c in 0..ac {
                out.data[r * ac + c] += bv[c];
            }
        }
        self.push(out, Op::AddRow { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v *= c;
        }
        self.push(out, Op::Scale { a, c })
    }

    pub fn scale_rows(&mut self, a: NodeId, gain: NodeId) -> NodeId {
        let (ar, ac) = self.value(a).shape();
        assert_eq!(self.value(gain).shape(), (ar, 1), "gain must be [{ar}, 1]");
        let mut out = self.value(a).clone();
        for r in 0..ar {
            let g = self.nodes[gain.0].value.data[r];
            for c in 0..ac {
                out.data[r * ac + c] *= g;
            }
        }
        self.push(out, Op::ScaleRows { a, gain })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|p| self.value(*p).rows).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut cursor = 0usize;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols, cols, "concat col mismatch");
            out.data[cursor..cursor + t.data.len()].copy_from_slice(&t.data);
            cursor += t.data.len();
        }
        self.push(out, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(a);
        assert!(start + len <= t.rows, "slice out of range");
        let cols = t.cols;
        let out = Tensor::from_vec(
            len,
            cols,
            t.data[start * cols..(start + len) * cols].to_vec(),
        );
        self.push(out, Op::SliceRows { a, start })
    }

    /// Per-row RMS normalization (no learned gain).
    pub fn rmsnorm(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (rows, cols) = t.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let ri = 1.0 / (ms + RMS_EPS).sqrt();
            inv.push(ri);
            for c in 0..cols {
                out.data[r * cols + c] = row[c] * ri;
            }
        }
        self.push(out, Op::RmsNorm { a, inv })
    }

    /// Multi-head attention. `q`, `k`, `v` are projected inputs of width
    /// `d_model`; heads split columns. A `None` mask allows everything; a
    /// fully masked query row yields a zero output row, so a residual block
    /// built on top passes its input through unchanged.
    pub fn mha(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<Arc<AttentionMask>>,
    ) -> NodeId {
        let (nq, d) = self.value(q).shape();
        let (nk, dk) = self.value(k).shape();
        let (nv, dv) = self.value(v).shape();
        assert_eq!(d, dk, "q/k width mismatch");
        assert_eq!(d, dv, "q/v width mismatch");
        assert_eq!(nk, nv, "k/v length mismatch");
        assert_eq!(d % heads, 0, "d_model {d} not divisible by heads {heads}");
        if let Some(m) = &mask {
            assert_eq!(m.q_len(), nq, "mask q len");
            assert_eq!(m.k_len(), nk, "mask k len");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(nq, d);
        let mut attn = vec![0.0f64; heads * nq * nk];
        {
            let qv = &self.nodes[q.0].value;
            let kv = &self.nodes[k.0].value;
            let vv = &self.nodes[v.0].value;
            let mut scores = vec![0.0f64; nk];
            for h in 0..heads {
                let off = h * dh;
                for qi in 0..nq {
                    let qrow = &qv.data[qi * d + off..qi * d + off + dh];
                    let mut any = false;
                    let mut max = f64::NEG_INFINITY;
                    for ki in 0..nk {
                        let allowed = mask.as_ref().map_or(true, |m| m.allowed(qi, ki));
                        if !allowed {
                            scores[ki] = f64::NEG_INFINITY;
                            continue;
                        }
                        any = true;
                        let krow = &kv.data[ki * d + off..ki * d + off + dh];
                        let s: f64 =
                            qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[ki] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    if !any {
                        continue; // zero output row
                    }
                    let mut denom = 0.0;
                    for ki in 0..nk {
                        if scores[ki] > f64::NEG_INFINITY {
                            scores[ki] = (scores[ki] - max).exp();
                            denom += scores[ki];
                        } else {
                            scores[ki] = 0.0;
                        }
                    }
                    let arow = &mut attn[(h * nq + qi) * nk..(h * nq + qi + 1) * nk];
                    for ki in 0..nk {
                        arow[ki] = scores[ki] / denom;
                    }
                    let orow = &mut out.data[qi * d + off..qi * d + off + dh];
                    for ki in 0..nk {
                        let w = arow[ki];
                        if w == 0.0 {
                            continue;
                        }
                        let vrow = &vv.data[ki * d + off..ki * d + off + dh];
                        for c in 0..dh {
                            orow[c] += w * vrow[c];
                        }
                    }
                }
            }
        }
        self.push(out, Op::Mha { q, k, v, heads, attn })
    }

    /// Sum of `-ln p[target]` over rows. Pair with [`Tape::scale`] for means.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (rows, vocab) = self.value(logits).shape();
        assert_eq!(rows, targets.len(), "one target per logit row");
        let mut probs = vec![0.0f64; rows * vocab];
        let mut loss = 0.0f64;
        {
            let lv = &self.nodes[logits.0].value;
            for r in 0..rows {
                let row = lv.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for c in 0..vocab {
                    let e = (row[c] - max).exp();
                    probs[r * vocab + c] = e;
                    denom += e;
                }
                for c in 0..vocab {
                    probs[r * vocab + c] /= denom;
                }
                assert!(targets[r] < vocab, "target out of vocab");
                loss -= probs[r * vocab + targets[r]].ln();
            }
        }
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropySum { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Sum of squared differences against a constant target.
    pub fn squared_error_sum(&mut self, pred: NodeId, target: &Tensor) -> NodeId {
        assert_eq!(self.value(pred).shape(), target.shape(), "squared error shape");
        let mut loss = 0.0f64;
        {
            let pv = &self.nodes[pred.0].value;
            for (p, t) in pv.data.iter().zip(target.data.iter()) {
                let d = p - t;
                loss += d * d;
            }
        }
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::SquaredErrorSum { pred, target: target.clone() },
        )
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Tensor {
        let (r, c) = self.nodes[id.0].value.shape();
        if self.nodes[id.0].grad.is_none() {
            self.nodes[id.0].grad = Some(Tensor::zeros(r, c));
        }
        self.nodes[id.0].grad.as_mut().unwrap()
    }

    /// Reverse sweep seeding `d(loss)/d(loss) = 1`.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar root");
        self.grad_buf(loss).data[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let gout = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // Take op apart without borrowing self mutably twice.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Gather { table, idx } => {
                    let (table, idx) = (*table, idx.clone());
                    let cols = gout.cols;
                    let gt = self.grad_buf(table);
                    for (r, &row) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gt.data[row * cols + c] += gout.data[r * cols + c];
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let (m, kk) = av.shape();
                    let n = bv.cols;
                    {
                        let ga = self.grad_buf(a);
                        // dA = dOut * B^T
                        for i2 in 0..m {
                            for j in 0..kk {
                                let mut s = 0.0;
                                for c in 0..n {
                                    s += gout.data[i2 * n + c] * bv.data[j * n + c];
                                }
                                ga.data[i2 * kk + j] += s;
                            }
                        }
                    }
                    {
                        let gb = self.grad_buf(b);
                        // dB = A^T * dOut
                        for j in 0..kk {
                            for c in 0..n {
                                let mut s = 0.0;
                                for i2 in 0..m {
                                    s += av.data[i2 * kk + j] * gout.data[i2 * n + c];
                                }
                                gb.data[j * n + c] += s;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (g, d) in self.grad_buf(a).data.iter_mut().zip(gout.data.iter()) {
                        *g += *d;
                    }
                    for (g, d) in self.grad_buf(b).data.iter_mut().zip(gout.data.iter()) {
                        *g += *d;
                    }
                }
                Op::AddRow { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let cols = gout.cols;
                    for (g, d) in self.grad_buf(a).data.iter_mut().zip(gout.data.iter()) {
                        *g += *d;
                    }
                    let gb = self.grad_buf(bias);
                    for r in 0..gout.rows {
                        for c in 0..cols {
                            gb.data[c] += gout.data[r * cols + c];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    for (g, d) in self.grad_buf(a).data.iter_mut().zip(gout.data.iter()) {
                        *g += c * *d;
                    }
                }
                Op::ScaleRows { a, gain } => {
                    let (a, gain) = (*a, *gain);
                    let av = self.nodes[a.0].value.clone();
                    let gv = self.nodes[gain.0].value.clone();
                    let (rows, cols) = av.shape();
                    {
                        let ga = self.grad_buf(a);
                        for r in 0..rows {
                            for c in 0..cols {
                                ga.data[r * cols + c] += gv.data[r] * gout.data[r * cols + c];
                            }
                        }
                    }
                    {
                        let gg = self.grad_buf(gain);
                        for r in 0..rows {
                            let mut s = 0.0;
                            for c in 0..cols {
                                s += av.data[r * cols + c] * gout.data[r * cols + c];
                            }
                            gg.data[r] += s;
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let cols = gout.cols;
                    let mut cursor = 0usize;
                    for p in parts {
                        let rows = self.nodes[p.0].value.rows;
                        let gp = self.grad_buf(p);
                        for i2 in 0..rows * cols {
                            gp.data[i2] += gout.data[cursor + i2];
                        }
                        cursor += rows * cols;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (a, start) = (*a, *start);
                    let cols = gout.cols;
                    let ga = self.grad_buf(a);
                    for r in 0..gout.rows {
                        for c in 0..cols {
                            ga.data[(start + r) * cols + c] += gout.data[r * cols + c];
                        }
                    }
                }
                Op::RmsNorm { a, inv } => {
                    let (a, inv) = (*a, inv.clone());
                    let av = self.nodes[a.0].value.clone();
                    let (rows, cols) = av.shape();
                    let ga = self.grad_buf(a);
                    for r in 0..rows {
                        let ri = inv[r];
                        let x = &av.data[r * cols..(r + 1) * cols];
                        let dy = &gout.data[r * cols..(r + 1) * cols];
                        let dot: f64 = dy.iter().zip(x).map(|(a2, b2)| a2 * b2).sum();
                        let coef = ri * ri * ri / cols as f64;
                        for c in 0..cols {
                            ga.data[r * cols + c] += ri * dy[c] - coef * dot * x[c];
                        }
                    }
                }
                Op::Mha { q, k, v, heads, attn } => {
                    let (q, k, v, heads) = (*q, *k, *v, *heads);
                    let attn = attn.clone();
                    let qv = self.nodes[q.0].value.clone();
                    let kv = self.nodes[k.0].value.clone();
                    let vv = self.nodes[v.0].value.clone();
                    let (nq, d) = qv.shape();
                    let nk = kv.rows;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(nq, d);
                    let mut gk = Tensor::zeros(nk, d);
                    let mut gv2 = Tensor::zeros(nk, d);
                    for h in 0..heads {
                        let off = h * dh;
                        for qi in 0..nq {
                            let arow = &attn[(h * nq + qi) * nk..(h * nq + qi + 1) * nk];
                            let dout = &gout.data[qi * d + off..qi * d + off + dh];
                            // dV and dAttn
                            let mut dattn = vec![0.0f64; nk];
                            for ki in 0..nk {
                                let w = arow[ki];
                                if w != 0.0 {
                                    let vrow = &vv.data[ki * d + off..ki * d + off + dh];
                                    let mut s = 0.0;
                                    for c in 0..dh {
                                        gv2.data[ki * d + off + c] += w * dout[c];
                                        s += dout[c] * vrow[c];
                                    }
                                    dattn[ki] = s;
                                }
                            }
                            // softmax backward: ds = a .* (dattn - sum(a .* dattn))
                            let dot: f64 =
                                arow.iter().zip(dattn.iter()).map(|(a2, b2)| a2 * b2).sum();
                            for ki in 0..nk {
                                let w = arow[ki];
                                if w == 0.0 {
                                    continue;
                                }
                                let ds = w * (dattn[ki] - dot) * scale;
                                let krow = &kv.data[ki * d + off..ki * d + off + dh];
                                let qrow = &qv.data[qi * d + off..qi * d + off + dh];
                                for c in 0..dh {
                                    gq.data[qi * d + off + c] += ds * krow[c];
                                    gk.data[ki * d + off + c] += ds * qrow[c];
                                }
                            }
                        }
                    }
                    for (g, d2) in self.grad_buf(q).data.iter_mut().zip(gq.data.iter()) {
                        *g += *d2;
                    }
                    for (g, d2) in self.grad_buf(k).data.iter_mut().zip(gk.data.iter()) {
                        *g += *d2;
                    }
                    for (g, d2) in self.grad_buf(v).data.iter_mut().zip(gv2.data.iter()) {
                        *g += *d2;
                    }
                }
                Op::CrossEntropySum { logits, targets, probs } => {
                    let (logits, targets, probs) = (*logits, targets.clone(), probs.clone());
                    let upstream = gout.data[0];
                    let vocab = self.nodes[logits.0].value.cols;
                    let gl = self.grad_buf(logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..vocab {
                            let p = probs[r * vocab + c];
                            let delta = if c == t { 1.0 } else { 0.0 };
                            gl.data[r * vocab + c] += upstream * (p - delta);
                        }
                    }
                }
                Op::SquaredErrorSum { pred, target } => {
                    let (pred, target) = (*pred, target.clone());
                    let upstream = gout.data[0];
                    let pv = self.nodes[pred.0].value.clone();
                    let gp = self.grad_buf(pred);
                    for i2 in 0..pv.data.len() {
                        gp.data[i2] += upstream * 2.0 * (pv.data[i2] - target.data[i2]);
                    }
                }
            }
        }
    }
}
