//! Tape-free forward math for inference: plain ops, masked attention, and an
//! incremental decoder with per-layer key/value caches.
//!
//! The arithmetic mirrors the tape ops operation-for-operation (same
//! summation order, same max-subtracted softmax), so inference hidden states
//! are bit-identical to a teacher-forced tape forward over the same rows.

use crate::params::ParamStore;
use crate::sequence::AttentionMask;
use crate::tape::Tensor;

pub fn matmul_plain(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows);
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

pub fn rmsnorm_plain(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let ri = 1.0 / (ms + 1e-6).sqrt();
        for c in 0..x.cols {
            out.data[r * x.cols + c] = row[c] * ri;
        }
    }
    out
}

fn rmsnorm_row(row: &[f64]) -> Vec<f64> {
    let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let ri = 1.0 / (ms + 1e-6).sqrt();
    row.iter().map(|v| v * ri).collect()
}

pub fn add_assign(x: &mut Tensor, y: &Tensor) {
    assert_eq!(x.shape(), y.shape());
    for (a, b) in x.data.iter_mut().zip(y.data.iter()) {
        *a += *b;
    }
}

/// Masked multi-head attention over full matrices; `allowed(q, k)` gates
/// pairs, fully blocked query rows give zero rows.
pub fn attention_plain(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Tensor {
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(q.rows, d);
    let mut scores = vec![0.0f64; k.rows];
    for h in 0..heads {
        let off = h * dh;
        for qi in 0..q.rows {
            let qrow = &q.data[qi * d + off..qi * d + off + dh];
            let mut any = false;
            let mut max = f64::NEG_INFINITY;
            for ki in 0..k.rows {
                if !allowed(qi, ki) {
                    scores[ki] = f64::NEG_INFINITY;
                    continue;
                }
                any = true;
                let krow = &k.data[ki * d + off..ki * d + off + dh];
                let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores[ki] = s;
                if s > max {
                    max = s;
                }
            }
            if !any {
                continue;
            }
            let mut denom = 0.0;
            for ki in 0..k.rows {
                if scores[ki] > f64::NEG_INFINITY {
                    scores[ki] = (scores[ki] - max).exp();
                    denom += scores[ki];
                } else {
                    scores[ki] = 0.0;
                }
            }
            let orow = &mut out.data[qi * d + off..qi * d + off + dh];
            for ki in 0..k.rows {
                let w = scores[ki] / denom;
                if w == 0.0 {
                    continue;
                }
                let vrow = &v.data[ki * d + off..ki * d + off + dh];
                for c in 0..dh {
                    orow[c] += w * vrow[c];
                }
            }
        }
    }
    out
}

/// Borrowed projections of one attention block.
#[derive(Clone, Copy)]
pub struct BlockW<'p> {
    pub wq: &'p Tensor,
    pub wk: &'p Tensor,
    pub wv: &'p Tensor,
    pub wo: &'p Tensor,
}

pub fn block_w<'p>(params: &'p ParamStore, prefix: &str) -> BlockW<'p> {
    BlockW {
        wq: params.get(&format!("{prefix}.wq")),
        wk: params.get(&format!("{prefix}.wk")),
        wv: params.get(&format!("{prefix}.wv")),
        wo: params.get(&format!("{prefix}.wo")),
    }
}

/// Residual self-attention over full rows.
pub fn sa_plain(x: &Tensor, w: BlockW, heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Tensor {
    let xn = rmsnorm_plain(x);
    let q = matmul_plain(&xn, w.wq);
    let k = matmul_plain(&xn, w.wk);
    let v = matmul_plain(&xn, w.wv);
    let a = attention_plain(&q, &k, &v, heads, allowed);
    let o = matmul_plain(&a, w.wo);
    let mut out = x.clone();
    add_assign(&mut out, &o);
    out
}

/// Residual cross-attention over full rows; empty memory passes through.
pub fn ca_plain(
    x: &Tensor,
    mem: Option<&Tensor>,
    w: BlockW,
    heads: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Tensor {
    let mem = match mem {
        Some(m) if m.rows > 0 => m,
        _ => return x.clone(),
    };
    let xn = rmsnorm_plain(x);
    let mn = rmsnorm_plain(mem);
    let q = matmul_plain(&xn, w.wq);
    let k = matmul_plain(&mn, w.wk);
    let v = matmul_plain(&mn, w.wv);
    let a = attention_plain(&q, &k, &v, heads, allowed);
    let o = matmul_plain(&a, w.wo);
    let mut out = x.clone();
    add_assign(&mut out, &o);
    out
}

/// One decoder layer of the incremental path: self-attention plus an
/// optional fixed-memory cross-attention.
pub struct LayerSpec<'p> {
    pub sa: BlockW<'p>,
    pub ca: Option<(BlockW<'p>, Tensor)>,
}

struct LayerState<'p> {
    spec: LayerSpec<'p>,
    /// Cached per-position K/V rows (flat, `n * d`).
    keys: Vec<f64>,
    vals: Vec<f64>,
    /// Precomputed cross-attention memory projections.
    ca_k: Option<Tensor>,
    ca_v: Option<Tensor>,
}

/// Incremental decoder: prefill a structured prefix once (full masked
/// forward), then extend one position at a time. Stepped positions attend to
/// every cached position, which matches the stream masks here: condition
/// text is globally visible and the generated region is causal.
pub struct IncrementalDecoder<'p> {
    layers: Vec<LayerState<'p>>,
    heads: usize,
    d: usize,
    len: usize,
}

impl<'p> IncrementalDecoder<'p> {
    pub fn new(layers: Vec<LayerSpec<'p>>, heads: usize, d: usize) -> IncrementalDecoder<'p> {
        let layers = layers
            .into_iter()
            .map(|spec| {
                let (ca_k, ca_v) = match &spec.ca {
                    Some((w, mem)) if mem.rows > 0 => {
                        let mn = rmsnorm_plain(mem);
                        (Some(matmul_plain(&mn, w.wk)), Some(matmul_plain(&mn, w.wv)))
                    }
                    _ => (None, None),
                };
                LayerState { spec, keys: Vec::new(), vals: Vec::new(), ca_k, ca_v }
            })
            .collect();
        IncrementalDecoder { layers, heads, d, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Runs the prefix through every layer under `mask`, caching K/V rows.
    /// Returns the final hidden rows.
    pub fn prefill(&mut self, rows: &Tensor, mask: &AttentionMask) -> Tensor {
        assert_eq!(self.len, 0, "prefill on a started decoder");
        assert_eq!(mask.q_len(), rows.rows);
        assert_eq!(mask.k_len(), rows.rows);
        let heads = self.heads;
        let mut x = rows.clone();
        for layer in &mut self.layers {
            let xn = rmsnorm_plain(&x);
            let q = matmul_plain(&xn, layer.spec.sa.wq);
            let k = matmul_plain(&xn, layer.spec.sa.wk);
            let v = matmul_plain(&xn, layer.spec.sa.wv);
            layer.keys.extend_from_slice(&k.data);
            layer.vals.extend_from_slice(&v.data);
            let a = attention_plain(&q, &k, &v, heads, &|qi, ki| mask.allowed(qi, ki));
            let o = matmul_plain(&a, layer.spec.sa.wo);
            add_assign(&mut x, &o);
            if let (Some(ca_k), Some(ca_v)) = (&layer.ca_k, &layer.ca_v) {
                let w = layer.spec.ca.as_ref().map(|(w, _)| *w).unwrap();
                let xn = rmsnorm_plain(&x);
                let q = matmul_plain(&xn, w.wq);
                let a = attention_plain(&q, ca_k, ca_v, heads, &|_, _| true);
                let o = matmul_plain(&a, w.wo);
                add_assign(&mut x, &o);
            }
        }
        self.len = rows.rows;
        x
    }

    /// Extends the sequence by one input row attending to all cached
    /// positions; returns its final hidden row.
    pub fn step(&mut self, row: &[f64]) -> Vec<f64> {
        assert_eq!(row.len(), self.d);
        let heads = self.heads;
        let d = self.d;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = row.to_vec();
        for layer in &mut self.layers {
            let xn = rmsnorm_row(&x);
            let xn_t = Tensor::from_vec(1, d, xn);
            let q = matmul_plain(&xn_t, layer.spec.sa.wq);
            let k = matmul_plain(&xn_t, layer.spec.sa.wk);
            let v = matmul_plain(&xn_t, layer.spec.sa.wv);
            layer.keys.extend_from_slice(&k.data);
            layer.vals.extend_from_slice(&v.data);
            let n = layer.keys.len() / d;
            let mut attn_out = vec![0.0f64; d];
            for h in 0..heads {
                let off = h * dh;
                let qrow = &q.data[off..off + dh];
                let mut scores = Vec::with_capacity(n);
                let mut max = f64::NEG_INFINITY;
                for ki in 0..n {
                    let krow = &layer.keys[ki * d + off..ki * d + off + dh];
                    let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores.push(s);
                    if s > max {
                        max = s;
                    }
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for ki in 0..n {
                    let w = scores[ki] / denom;
                    if w == 0.0 {
                        continue;
                    }
                    let vrow = &layer.vals[ki * d + off..ki * d + off + dh];
                    for c in 0..dh {
                        attn_out[off + c] += w * vrow[c];
                    }
                }
            }
            let o = matmul_plain(&Tensor::from_vec(1, d, attn_out), layer.spec.sa.wo);
            for (a, b) in x.iter_mut().zip(o.data.iter()) {
                *a += *b;
            }
            if let (Some(ca_k), Some(ca_v)) = (&layer.ca_k, &layer.ca_v) {
                let w = layer.spec.ca.as_ref().map(|(w, _)| *w).unwrap();
                let xn = rmsnorm_row(&x);
                let q = matmul_plain(&Tensor::from_vec(1, d, xn), w.wq);
                let a = attention_plain(&q, ca_k, ca_v, heads, &|_, _| true);
                let o = matmul_plain(&a, w.wo);
                for (a2, b2) in x.iter_mut().zip(o.data.iter()) {
                    *a2 += *b2;
                }
            }
        }
        self.len += 1;
        x
    }
}
