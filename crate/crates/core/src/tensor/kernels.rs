//! Slice-level numeric kernels shared by [`Tensor`](super::Tensor) methods
//! and the autodiff [`Graph`](super::Graph). Accumulation happens in the
//! element type and sequentially in index order, so results do not depend
//! on thread count.

use super::Element;
use crate::par::rows_mut;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    rows_mut(&mut out, n, m * k * n, |i, row| matmul_row(a, b, k, n, i, row));
    out
}

/// Single-threaded variant of [`matmul`], kept for benchmarking.
pub fn matmul_serial<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(a, b, k, n, i, row);
    }
    out
}

#[inline]
fn matmul_row<T: Element>(a: &[T], b: &[T], k: usize, n: usize, i: usize, row: &mut [T]) {
    let a_row = &a[i * k..(i + 1) * k];
    for (p, &a_ip) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &b_pj) in row.iter_mut().zip(b_row) {
            *o = *o + a_ip * b_pj;
        }
    }
}

/// `out[m×k] = g[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_b_t<T: Element>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    rows_mut(&mut out, k, m * k * n, |i, row| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            *o = dot(g_row, &b[p * n..(p + 1) * n]);
        }
    });
    out
}

/// `out[k×n] = aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_a_t<T: Element>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    rows_mut(&mut out, n, m * k * n, |p, row| {
        for i in 0..m {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            for (o, &g_ij) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                *o = *o + a_ip * g_ij;
            }
        }
    });
    out
}

#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Softmax along the middle axis of a tensor viewed as `[outer, len, inner]`.
pub fn softmax_axis<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let idx = |i: usize| base + i * inner;
            let mut max = T::neg_infinity();
            for i in 0..len {
                max = max.max(x[idx(i)]);
            }
            let mut sum = T::zero();
            for i in 0..len {
                let e = (x[idx(i)] - max).exp();
                out[idx(i)] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for i in 0..len {
                out[idx(i)] = out[idx(i)] * inv;
            }
        }
    }
    out
}

/// Softmax of a single contiguous row, in place. Entries equal to `-inf`
/// come out as exactly zero.
pub fn softmax_row_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Log-softmax of one row.
pub fn log_softmax_row<T: Element>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    let log_z = max + sum.ln();
    row.iter().map(|&v| v - log_z).collect()
}

/// RMS normalisation of each `d`-wide row.
///
/// With `weights` present, the mean square is taken over `weights[i]·x[i]`
/// and divided by `Σ weights` instead of `d`; channels whose weight is zero
/// then drop out of the statistic entirely. Returns the output and the
/// per-row reciprocal RMS.
pub fn rms_norm<T: Element>(
    x: &[T],
    d: usize,
    gain: &[T],
    weights: Option<&[T]>,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let denom = match weights {
        Some(w) => w.iter().fold(T::zero(), |a, &b| a + b),
        None => T::lit(d as f64),
    };
    let mut out = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut ss = T::zero();
        match weights {
            Some(w) => {
                for (&v, &wi) in xr.iter().zip(w) {
                    let t = wi * v;
                    ss = ss + t * t;
                }
            }
            None => {
                for &v in xr {
                    ss = ss + v * v;
                }
            }
        }
        let inv_rms = T::one() / (ss / denom + eps).sqrt();
        inv[r] = inv_rms;
        for ((o, &v), &g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = g * (v * inv_rms);
        }
    }
    (out, inv)
}

pub fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Rotary position embedding over rows of width `width`, each row split into
/// `head_dim`-sized heads; channel pairs `(2i, 2i+1)` of each head at row
/// `t` are rotated by `(start_pos + t) · base^(-2i/head_dim)`. With
/// `inverse` the rotation angle is negated.
pub fn rope<T: Element>(
    x: &[T],
    width: usize,
    head_dim: usize,
    base: f32,
    start_pos: usize,
    inverse: bool,
) -> Vec<T> {
    let rows = x.len() / width;
    let half = head_dim / 2;
    // Angles are formed in f64 and rounded once so that every element type
    // rotates by the same angle.
    let freqs: Vec<f64> = (0..half)
        .map(|i| (base as f64).powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut out = vec![T::zero(); x.len()];
    let mut trig = vec![(T::zero(), T::zero()); half];
    for t in 0..rows {
        let pos = (start_pos + t) as f64;
        for (slot, f) in trig.iter_mut().zip(&freqs) {
            let (s, c) = (pos * f).sin_cos();
            let s = if inverse { -s } else { s };
            *slot = (T::lit(s as f32 as f64), T::lit(c as f32 as f64));
        }
        let row = &x[t * width..(t + 1) * width];
        let out_row = &mut out[t * width..(t + 1) * width];
        for h in 0..width / head_dim {
            for (i, &(s, c)) in trig.iter().enumerate() {
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                out_row[a] = x0 * c - x1 * s;
                out_row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

/// Geometry of a grouped-query causal attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    fn group(&self) -> usize {
        self.heads / self.kv_heads
    }
}

/// Causal grouped-query attention. `q` is `[seq × heads·hd]`, `k` and `v`
/// are `[seq × kv_heads·hd]`. Query head `h` reads kv head
/// `h / (heads / kv_heads)`. The causal mask is added as `-inf` before the
/// softmax. Returns the output `[seq × heads·hd]` and the attention
/// probabilities `[heads × seq × seq]`.
pub fn causal_attention<T: Element>(q: &[T], k: &[T], v: &[T], s: AttnShape) -> (Vec<T>, Vec<T>) {
    let AttnShape {
        seq,
        heads,
        kv_heads,
        head_dim: hd,
    } = s;
    let qw = heads * hd;
    let kw = kv_heads * hd;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut probs = vec![T::zero(); heads * seq * seq];
    rows_mut(&mut probs, seq * seq, heads * seq * seq * hd, |h, p| {
        let g = h / s.group();
        for i in 0..seq {
            let qi = &q[i * qw + h * hd..i * qw + (h + 1) * hd];
            let row = &mut p[i * seq..(i + 1) * seq];
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = if j > i {
                    T::neg_infinity()
                } else {
                    dot(qi, &k[j * kw + g * hd..j * kw + (g + 1) * hd]) * scale
                };
            }
            softmax_row_in_place(row);
        }
    });
    let mut out = vec![T::zero(); seq * qw];
    rows_mut(&mut out, qw, heads * seq * seq * hd, |i, o_row| {
        for h in 0..heads {
            let g = h / s.group();
            let o = &mut o_row[h * hd..(h + 1) * hd];
            let p = &probs[h * seq * seq + i * seq..h * seq * seq + (i + 1) * seq];
            for (j, &pij) in p.iter().enumerate().take(i + 1) {
                let vj = &v[j * kw + g * hd..j * kw + (g + 1) * hd];
                for (oo, &vv) in o.iter_mut().zip(vj) {
                    *oo = *oo + pij * vv;
                }
            }
        }
    });
    (out, probs)
}

/// Gradients of [`causal_attention`] with respect to `q`, `k` and `v`.
pub fn causal_attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d_out: &[T],
    s: AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnShape {
        seq,
        heads,
        kv_heads,
        head_dim: hd,
    } = s;
    let qw = heads * hd;
    let kw = kv_heads * hd;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut d_probs = vec![T::zero(); seq];
    for h in 0..heads {
        let g = h / s.group();
        for i in 0..seq {
            let p = &probs[h * seq * seq + i * seq..h * seq * seq + (i + 1) * seq];
            let doi = &d_out[i * qw + h * hd..i * qw + (h + 1) * hd];
            let qi = &q[i * qw + h * hd..i * qw + (h + 1) * hd];
            // dP_ij = dO_i · v_j, then the softmax Jacobian.
            let mut weighted = T::zero();
            for j in 0..=i {
                let dp = dot(doi, &v[j * kw + g * hd..j * kw + (g + 1) * hd]);
                d_probs[j] = dp;
                weighted = weighted + p[j] * dp;
            }
            for j in 0..=i {
                let ds = p[j] * (d_probs[j] - weighted) * scale;
                let kj = &k[j * kw + g * hd..j * kw + (g + 1) * hd];
                for c in 0..hd {
                    dq[i * qw + h * hd + c] = dq[i * qw + h * hd + c] + ds * kj[c];
                    dk[j * kw + g * hd + c] = dk[j * kw + g * hd + c] + ds * qi[c];
                    dv[j * kw + g * hd + c] = dv[j * kw + g * hd + c] + p[j] * doi[c];
                }
            }
        }
    }
    (dq, dk, dv)
}
