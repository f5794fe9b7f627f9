//! Layer primitives with explicit forward caches and backward passes.
//!
//! Every `backward` accumulates parameter gradients into a [`ParamStore`] with
//! the model's layout and returns the gradient with respect to the layer input.

use rand::Rng;

use crate::params::{init_values, Init, ParamId, ParamStore};
use crate::tensor::{Mat, Real};

/// `out = beta·out + op(a)·op(b)` on raw row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm<T: Real>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    beta: T,
    out: &mut [T],
) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    debug_assert_eq!(k, k2);
    assert!(a.len() >= a_rows * a_cols && b.len() >= b_rows * b_cols && out.len() >= m * n);
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    if k == 0 {
        for x in out[..m * n].iter_mut() {
            *x = *x * beta;
        }
        return;
    }
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1);
}

/// Creates parameters under a name prefix.
pub struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    pub fn param(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamId {
        let n = shape.iter().product();
        let value = init_values(init, n, self.rng);
        self.store.push(name, shape, value)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Truncated normal with std `1/sqrt(fan_in)`. At the small widths used here
/// a fixed std of 0.02 on every layer shrinks activations so far that
/// detection training never leaves the label prior.
pub fn fan_in_init(fan_in: usize) -> Init {
    Init::TruncNormal(1.0 / (fan_in.max(1) as f64).sqrt())
}

impl Linear {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<T, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = bld.param(&format!("{name}.weight"), vec![fan_in, fan_out], fan_in_init(fan_in));
        let b = bld.param(&format!("{name}.bias"), vec![fan_out], Init::Zeros);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.cols, self.fan_in);
        let bias = p.get(self.b);
        let mut y = Mat::zeros(x.rows, self.fan_out);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(bias);
        }
        mm(&x.data, x.rows, x.cols, false, p.get(self.w), self.fan_in, self.fan_out, false, T::one(), &mut y.data);
        y
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, x: &Mat<T>, dy: &Mat<T>, g: &mut ParamStore<T>) -> Mat<T> {
        mm(&x.data, x.rows, x.cols, true, &dy.data, dy.rows, dy.cols, false, T::one(), g.get_mut(self.w));
        let gb = g.get_mut(self.b);
        for r in 0..dy.rows {
            for (a, &d) in gb.iter_mut().zip(dy.row(r)) {
                *a = *a + d;
            }
        }
        let mut dx = Mat::zeros(x.rows, self.fan_in);
        mm(&dy.data, dy.rows, dy.cols, false, p.get(self.w), self.fan_in, self.fan_out, true, T::zero(), &mut dx.data);
        dx
    }
}

pub const CONV_KERNEL: usize = 3;

/// Temporal convolution, kernel 3, stride 1, zero "same" padding. Frames at
/// or beyond `valid` are treated as zero on input and forced to zero on output.
#[derive(Clone, Debug)]
pub struct Conv1d {
    /// `(kernel·fan_in) × fan_out`, tap-major.
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

pub struct ConvCache<T> {
    col: Mat<T>,
    valid: usize,
}

impl Conv1d {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<T, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_init(bld, name, fan_in, fan_out, fan_in_init(CONV_KERNEL * fan_in))
    }

    pub fn with_init<T: Real, R: Rng>(bld: &mut Builder<T, R>, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        let w = bld.param(&format!("{name}.weight"), vec![CONV_KERNEL * fan_in, fan_out], init);
        let b = bld.param(&format!("{name}.bias"), vec![fan_out], Init::Zeros);
        Self { w, b, fan_in, fan_out }
    }

    fn im2col<T: Real>(&self, x: &Mat<T>, valid: usize) -> Mat<T> {
        let n = x.rows;
        let mut col = Mat::zeros(n, CONV_KERNEL * self.fan_in);
        for t in 0..valid {
            let row = col.row_mut(t);
            for k in 0..CONV_KERNEL {
                let src = t as isize + k as isize - 1;
                if src >= 0 && (src as usize) < valid {
                    row[k * self.fan_in..(k + 1) * self.fan_in].copy_from_slice(x.row(src as usize));
                }
            }
        }
        col
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Mat<T>, valid: usize) -> (Mat<T>, ConvCache<T>) {
        assert_eq!(x.cols, self.fan_in);
        assert!(valid <= x.rows);
        let col = self.im2col(x, valid);
        let mut y = Mat::zeros(x.rows, self.fan_out);
        let bias = p.get(self.b);
        for r in 0..valid {
            y.row_mut(r).copy_from_slice(bias);
        }
        mm(
            &col.data,
            valid,
            col.cols,
            false,
            p.get(self.w),
            col.cols,
            self.fan_out,
            false,
            T::one(),
            &mut y.data[..valid * self.fan_out],
        );
        (y, ConvCache { col, valid })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Mat<T>,
        g: &mut ParamStore<T>,
    ) -> Mat<T> {
        let valid = cache.valid;
        let kc = cache.col.cols;
        let dyv = &dy.data[..valid * self.fan_out];
        mm(&cache.col.data, valid, kc, true, dyv, valid, self.fan_out, false, T::one(), g.get_mut(self.w));
        let gb = g.get_mut(self.b);
        for r in 0..valid {
            for (a, &d) in gb.iter_mut().zip(dy.row(r)) {
                *a = *a + d;
            }
        }
        let mut dcol = Mat::zeros(valid, kc);
        mm(dyv, valid, self.fan_out, false, p.get(self.w), kc, self.fan_out, true, T::zero(), &mut dcol.data);
        let mut dx = Mat::zeros(dy.rows, self.fan_in);
        for t in 0..valid {
            let row = dcol.row(t);
            for k in 0..CONV_KERNEL {
                let src = t as isize + k as isize - 1;
                if src >= 0 && (src as usize) < valid {
                    let dst = dx.row_mut(src as usize);
                    for (a, &d) in dst.iter_mut().zip(&row[k * self.fan_in..(k + 1) * self.fan_in]) {
                        *a = *a + d;
                    }
                }
            }
        }
        dx
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LnCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<T, R>, name: &str, dim: usize) -> Self {
        let gamma = bld.param(&format!("{name}.gamma"), vec![dim], Init::Ones);
        let beta = bld.param(&format!("{name}.beta"), vec![dim], Init::Zeros);
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
        let n = T::lit(self.dim as f64);
        let eps = T::lit(LN_EPS);
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let yr = y.row_mut(r);
            for c in 0..self.dim {
                yr[c] = gamma[c] * xhat.get(r, c) + beta[c];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &LnCache<T>,
        dy: &Mat<T>,
        g: &mut ParamStore<T>,
    ) -> Mat<T> {
        let n = T::lit(self.dim as f64);
        let gamma = p.get(self.gamma);
        let mut dgamma = vec![T::zero(); self.dim];
        let mut dbeta = vec![T::zero(); self.dim];
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        let mut dxhat = vec![T::zero(); self.dim];
        for r in 0..dy.rows {
            let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for c in 0..self.dim {
                dgamma[c] = dgamma[c] + dyr[c] * xh[c];
                dbeta[c] = dbeta[c] + dyr[c];
                dxhat[c] = dyr[c] * gamma[c];
                s1 = s1 + dxhat[c];
                s2 = s2 + dxhat[c] * xh[c];
            }
            let inv = cache.inv_std[r];
            let out = dx.row_mut(r);
            for c in 0..self.dim {
                out[c] = inv * (dxhat[c] - (s1 + xh[c] * s2) / n);
            }
        }
        for (a, d) in g.get_mut(self.gamma).iter_mut().zip(dgamma) {
            *a = *a + d;
        }
        for (a, d) in g.get_mut(self.beta).iter_mut().zip(dbeta) {
            *a = *a + d;
        }
        dx
    }
}

pub fn relu<T: Real>(x: &Mat<T>) -> Mat<T> {
    x.map(|v| v.max(T::zero()))
}

/// Backward through ReLU given its output.
pub fn relu_backward<T: Real>(y: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Real>(x: &Mat<T>) -> Mat<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Real>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        let t = (c * (v + a * v * v * v)).tanh();
        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
        *d = *d * (half * (T::one() + t) + half * v * dt);
    }
    dx
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Attention window of each query row as a half-open key range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    ranges: Vec<(usize, usize)>,
    /// Real tokens, when every one of them sees all real tokens.
    dense: Option<usize>,
}

impl AttentionMask {
    /// Token `j` sees token `i` iff `|i - j| <= q/2` (rounded down; `q = 0`
    /// means unrestricted) and `i` is not one of the trailing `pad_len`
    /// padding positions. Padding rows see only themselves.
    pub fn local(n: usize, q: usize, pad_len: usize) -> Self {
        assert!(pad_len < n || n == 0, "padding must leave at least one token");
        let real = n - pad_len;
        let half = q / 2;
        let ranges = (0..n)
            .map(|j| {
                if j >= real {
                    (j, j + 1)
                } else if q == 0 {
                    (0, real)
                } else {
                    (j.saturating_sub(half), (j + half + 1).min(real))
                }
            })
            .collect::<Vec<_>>();
        let dense = (real > 0 && ranges[..real].iter().all(|&r| r == (0, real))).then_some(real);
        Self { ranges, dense }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn range(&self, j: usize) -> (usize, usize) {
        self.ranges[j]
    }

    pub fn allows(&self, j: usize, i: usize) -> bool {
        let (lo, hi) = self.ranges[j];
        lo <= i && i < hi
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        (0..n).map(|j| (0..n).map(|i| self.allows(j, i)).collect()).collect()
    }
}

/// Multi-head softmax self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttnCache<T> {
    input: Mat<T>,
    qkv: Mat<T>,
    /// Softmax weights, head-major, each row's window stored contiguously.
    probs: Vec<T>,
    offsets: Vec<usize>,
    ctx: Mat<T>,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(bld: &mut Builder<T, R>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let qkv = Linear::new(bld, &format!("{name}.qkv"), dim, 3 * dim);
        let out = Linear::new(bld, &format!("{name}.out"), dim, dim);
        Self { qkv, out, heads, dim }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Mat<T>, mask: &AttentionMask) -> (Mat<T>, AttnCache<T>) {
        let n = x.rows;
        assert_eq!(mask.len(), n);
        let d = self.dim;
        let dh = d / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let qkv = self.qkv.forward(p, x);
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for j in 0..n {
            let (lo, hi) = mask.range(j);
            offsets.push(offsets[j] + hi - lo);
        }
        let per_head = offsets[n];
        let mut probs = vec![T::zero(); per_head * self.heads];
        let mut ctx = Mat::zeros(n, d);
        if let Some(real) = mask.dense {
            self.forward_dense(&qkv, real, scale, &mut probs, &mut ctx);
            let y = self.out.forward(p, &ctx);
            return (y, AttnCache { input: x.clone(), qkv, probs, offsets, ctx });
        }
        for h in 0..self.heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for j in 0..n {
                let (lo, hi) = mask.range(j);
                let base = h * per_head + offsets[j];
                let w = &mut probs[base..base + hi - lo];
                let q = &qkv.row(j)[qo..qo + dh];
                let mut max = T::neg_infinity();
                for (slot, i) in w.iter_mut().zip(lo..hi) {
                    let k = &qkv.row(i)[ko..ko + dh];
                    let s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    *slot = s;
                    max = max.max(s);
                }
                let mut z = T::zero();
                for slot in w.iter_mut() {
                    *slot = (*slot - max).exp();
                    z = z + *slot;
                }
                let c = &mut ctx.row_mut(j)[qo..qo + dh];
                for (slot, i) in w.iter_mut().zip(lo..hi) {
                    *slot = *slot / z;
                    let v = &qkv.row(i)[vo..vo + dh];
                    for (a, &b) in c.iter_mut().zip(v) {
                        *a = *a + *slot * b;
                    }
                }
            }
        }
        let y = self.out.forward(p, &ctx);
        (y, AttnCache { input: x.clone(), qkv, probs, offsets, ctx })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &AttnCache<T>,
        mask: &AttentionMask,
        dy: &Mat<T>,
        g: &mut ParamStore<T>,
    ) -> Mat<T> {
        let n = dy.rows;
        let d = self.dim;
        let dh = d / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let dctx = self.out.backward(p, &cache.ctx, dy, g);
        let qkv = &cache.qkv;
        let per_head = cache.offsets[n];
        let mut dqkv = Mat::zeros(n, 3 * d);
        if let Some(real) = mask.dense {
            self.backward_dense(cache, &dctx, real, scale, &mut dqkv);
            return self.qkv.backward(p, &cache.input, &dqkv, g);
        }
        let mut dp = Vec::new();
        for h in 0..self.heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for j in 0..n {
                let (lo, hi) = mask.range(j);
                let base = h * per_head + cache.offsets[j];
                let w = &cache.probs[base..base + hi - lo];
                let dc = &dctx.row(j)[qo..qo + dh];
                dp.clear();
                let mut dot = T::zero();
                for (&pw, i) in w.iter().zip(lo..hi) {
                    let v = &qkv.row(i)[vo..vo + dh];
                    let g_ij = dc.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
                    dp.push(g_ij);
                    dot = dot + pw * g_ij;
                    let dv = &mut dqkv.row_mut(i)[vo..vo + dh];
                    for (a, &b) in dv.iter_mut().zip(dc) {
                        *a = *a + pw * b;
                    }
                }
                let mut dq = vec![T::zero(); dh];
                for ((&pw, &g_ij), i) in w.iter().zip(&dp).zip(lo..hi) {
                    let ds = pw * (g_ij - dot) * scale;
                    let k = &qkv.row(i)[ko..ko + dh];
                    for (a, &b) in dq.iter_mut().zip(k) {
                        *a = *a + ds * b;
                    }
                    let q = &qkv.row(j)[qo..qo + dh];
                    let dk = &mut dqkv.row_mut(i)[ko..ko + dh];
                    for (a, &b) in dk.iter_mut().zip(q) {
                        *a = *a + ds * b;
                    }
                }
                for (a, b) in dqkv.row_mut(j)[qo..qo + dh].iter_mut().zip(dq) {
                    *a = *a + b;
                }
            }
        }
        self.qkv.backward(p, &cache.input, &dqkv, g)
    }
}

/// Rows `0..rows` of columns `col..col + width`.
fn block<T: Real>(m: &Mat<T>, rows: usize, col: usize, width: usize) -> Mat<T> {
    Mat::from_fn(rows, width, |i, k| m.get(i, col + k))
}

impl Attention {
    // Unrestricted attention over the first `real` tokens as matrix
    // products; trailing padding tokens attend only to themselves.
    fn forward_dense<T: Real>(&self, qkv: &Mat<T>, real: usize, scale: T, probs: &mut [T], ctx: &mut Mat<T>) {
        let n = qkv.rows;
        let d = self.dim;
        let dh = d / self.heads;
        let per_head = real * real + (n - real);
        let mut s = Mat::zeros(real, real);
        let mut c = Mat::zeros(real, dh);
        for h in 0..self.heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = block(qkv, real, qo, dh);
            let k = block(qkv, real, ko, dh);
            let v = block(qkv, real, vo, dh);
            q.matmul_into(false, &k, true, T::zero(), &mut s);
            for j in 0..real {
                let row = s.row_mut(j);
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x * scale));
                let mut z = T::zero();
                for x in row.iter_mut() {
                    *x = (*x * scale - max).exp();
                    z = z + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / z;
                }
            }
            s.matmul_into(false, &v, false, T::zero(), &mut c);
            for j in 0..real {
                ctx.row_mut(j)[qo..qo + dh].copy_from_slice(c.row(j));
            }
            let base = h * per_head;
            probs[base..base + real * real].copy_from_slice(&s.data);
            for j in real..n {
                probs[base + real * real + j - real] = T::one();
                let vj = qkv.row(j)[vo..vo + dh].to_vec();
                ctx.row_mut(j)[qo..qo + dh].copy_from_slice(&vj);
            }
        }
    }

    fn backward_dense<T: Real>(&self, cache: &AttnCache<T>, dctx: &Mat<T>, real: usize, scale: T, dqkv: &mut Mat<T>) {
        let qkv = &cache.qkv;
        let n = qkv.rows;
        let d = self.dim;
        let dh = d / self.heads;
        let per_head = real * real + (n - real);
        let mut dp = Mat::zeros(real, real);
        let mut dq = Mat::zeros(real, dh);
        let mut dk = Mat::zeros(real, dh);
        let mut dv = Mat::zeros(real, dh);
        for h in 0..self.heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = block(qkv, real, qo, dh);
            let k = block(qkv, real, ko, dh);
            let v = block(qkv, real, vo, dh);
            let dc = block(dctx, real, qo, dh);
            let base = h * per_head;
            let pm = Mat::from_vec(real, real, cache.probs[base..base + real * real].to_vec());
            dc.matmul_into(false, &v, true, T::zero(), &mut dp);
            // dp becomes the score gradient
            for j in 0..real {
                let pr = pm.row(j);
                let row = dp.row_mut(j);
                let dot = pr.iter().zip(row.iter()).fold(T::zero(), |a, (&pw, &g)| a + pw * g);
                for (x, &pw) in row.iter_mut().zip(pr) {
                    *x = pw * (*x - dot) * scale;
                }
            }
            dp.matmul_into(false, &k, false, T::zero(), &mut dq);
            dp.matmul_into(true, &q, false, T::zero(), &mut dk);
            pm.matmul_into(true, &dc, false, T::zero(), &mut dv);
            for j in 0..real {
                let row = dqkv.row_mut(j);
                row[qo..qo + dh].copy_from_slice(dq.row(j));
                row[ko..ko + dh].copy_from_slice(dk.row(j));
                row[vo..vo + dh].copy_from_slice(dv.row(j));
            }
            for j in real..n {
                let g = dctx.row(j)[qo..qo + dh].to_vec();
                dqkv.row_mut(j)[vo..vo + dh].copy_from_slice(&g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_examples() {
        let all = AttentionMask::local(4, 0, 0).to_dense();
        assert!(all.iter().flatten().all(|&b| b));

        let band = AttentionMask::local(5, 2, 0).to_dense();
        for j in 0..5 {
            for i in 0..5 {
                assert_eq!(band[j][i], (i as isize - j as isize).abs() <= 1, "({j},{i})");
            }
        }

        let m = AttentionMask::local(40, 15, 0);
        assert_eq!(m.range(20), (13, 28));
        assert_eq!(m.range(0), (0, 8));

        let padded = AttentionMask::local(6, 0, 2).to_dense();
        for j in 0..4 {
            assert_eq!(padded[j], vec![true, true, true, true, false, false]);
        }
        assert_eq!(padded[4], vec![false, false, false, false, true, false]);
        assert_eq!(padded[5], vec![false, false, false, false, false, true]);
    }

    fn numeric<F: Fn(&ParamStore<f64>, &Mat<f64>) -> f64>(
        f: F,
        p: &ParamStore<f64>,
        x: &Mat<f64>,
    ) -> (ParamStore<f64>, Mat<f64>) {
        let h = 1e-6;
        let mut gp = p.zeros_like();
        let mut pp = p.clone();
        for e in 0..p.len() {
            for k in 0..p.entries()[e].value.len() {
                let orig = pp.entries()[e].value[k];
                pp.entries_mut()[e].value[k] = orig + h;
                let up = f(&pp, x);
                pp.entries_mut()[e].value[k] = orig - h;
                let dn = f(&pp, x);
                pp.entries_mut()[e].value[k] = orig;
                gp.entries_mut()[e].value[k] = (up - dn) / (2.0 * h);
            }
        }
        let mut gx = Mat::zeros(x.rows, x.cols);
        let mut xx = x.clone();
        for k in 0..x.data.len() {
            let orig = xx.data[k];
            xx.data[k] = orig + h;
            let up = f(p, &xx);
            xx.data[k] = orig - h;
            let dn = f(p, &xx);
            xx.data[k] = orig;
            gx.data[k] = (up - dn) / (2.0 * h);
        }
        (gp, gx)
    }

    fn weights(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn randomize(p: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in p.entries_mut() {
            for v in &mut e.value {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    fn check_layer(
        p: &ParamStore<f64>,
        x: &Mat<f64>,
        fwd: impl Fn(&ParamStore<f64>, &Mat<f64>) -> Mat<f64>,
        bwd: impl Fn(&ParamStore<f64>, &Mat<f64>, &Mat<f64>, &mut ParamStore<f64>) -> Mat<f64>,
    ) {
        let y = fwd(p, x);
        let probe = weights(y.rows, y.cols, 99);
        let loss = |p: &ParamStore<f64>, x: &Mat<f64>| -> f64 {
            fwd(p, x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let mut g = p.zeros_like();
        let dx = bwd(p, x, &probe, &mut g);
        let (ngp, ngx) = numeric(loss, p, x);
        for (a, b) in g.entries().iter().zip(ngp.entries()) {
            assert_close(&a.value, &b.value, 1e-6);
        }
        assert_close(&dx.data, &ngx.data, 1e-6);
    }

    #[test]
    fn linear_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut Builder { store: &mut store, rng: &mut rng }, "l", 4, 3);
        randomize(&mut store, 2);
        check_layer(&store, &weights(5, 4, 3), |p, x| lin.forward(p, x), |p, x, dy, g| lin.backward(p, x, dy, g));
    }

    #[test]
    fn conv_gradients_and_padding() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::new(&mut Builder { store: &mut store, rng: &mut rng }, "c", 3, 2);
        randomize(&mut store, 2);
        let x = weights(6, 3, 4);
        for valid in [6, 4] {
            check_layer(
                &store,
                &x,
                |p, x| conv.forward(p, x, valid).0,
                |p, x, dy, g| {
                    let (_, cache) = conv.forward(p, x, valid);
                    conv.backward(p, &cache, dy, g)
                },
            );
        }
        // valid rows of a padded call equal the unpadded call
        let (full, _) = conv.forward(&store, &x.slice_rows(0, 4), 4);
        let (padded, _) = conv.forward(&store, &x, 4);
        assert_eq!(padded.slice_rows(0, 4), full);
        assert!(padded.data[4 * 2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv1d::new(&mut Builder { store: &mut store, rng: &mut rng }, "c", 2, 2);
        randomize(&mut store, 6);
        let x = weights(5, 2, 7);
        let (y, _) = conv.forward(&store, &x, 5);
        let w = store.get(conv.w);
        let b = store.get(conv.b);
        for t in 0..5 {
            for o in 0..2 {
                let mut s = b[o];
                for k in 0..3 {
                    let src = t as isize + k as isize - 1;
                    if (0..5).contains(&src) {
                        for c in 0..2 {
                            s += w[(k * 2 + c) * 2 + o] * x.get(src as usize, c);
                        }
                    }
                }
                assert!((y.get(t, o) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ln = LayerNorm::new(&mut Builder { store: &mut store, rng: &mut rng }, "n", 5);
        randomize(&mut store, 2);
        check_layer(
            &store,
            &weights(3, 5, 3),
            |p, x| ln.forward(p, x).0,
            |p, x, dy, g| {
                let (_, c) = ln.forward(p, x);
                ln.backward(p, &c, dy, g)
            },
        );
    }

    #[test]
    fn attention_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = Attention::new(&mut Builder { store: &mut store, rng: &mut rng }, "a", 4, 2);
        randomize(&mut store, 2);
        for mask in [AttentionMask::local(7, 0, 0), AttentionMask::local(7, 0, 2), AttentionMask::local(7, 3, 2)] {
            check_layer(
                &store,
                &weights(7, 4, 3),
                |p, x| att.forward(p, x, &mask).0,
                |p, x, dy, g| {
                    let (_, c) = att.forward(p, x, &mask);
                    att.backward(p, &c, &mask, dy, g)
                },
            );
        }
    }

    #[test]
    fn dense_attention_matches_windowed_loop() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = Attention::new(&mut Builder { store: &mut store, rng: &mut rng }, "a", 6, 3);
        randomize(&mut store, 4);
        let x = weights(9, 6, 5);
        let dy = weights(9, 6, 6);
        for pad in [0, 3] {
            let dense = AttentionMask::local(9, 0, pad);
            assert!(dense.dense.is_some());
            let looped = AttentionMask { ranges: dense.ranges.clone(), dense: None };
            let (ya, ca) = att.forward(&store, &x, &dense);
            let (yb, cb) = att.forward(&store, &x, &looped);
            let (mut ga, mut gb) = (store.zeros_like(), store.zeros_like());
            let dxa = att.backward(&store, &ca, &dense, &dy, &mut ga);
            let dxb = att.backward(&store, &cb, &looped, &dy, &mut gb);
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
            assert!(close(&ya.data, &yb.data));
            assert!(close(&dxa.data, &dxb.data));
            for (a, b) in ga.entries().iter().zip(gb.entries()) {
                assert!(close(&a.value, &b.value), "{}", a.name);
            }
        }
        assert!(AttentionMask::local(9, 5, 0).dense.is_none());
        assert!(AttentionMask::local(9, 40, 0).dense.is_some());
    }

    #[test]
    fn gelu_gradient() {
        let x = weights(3, 4, 8).map(|v| 3.0 * v);
        let probe = weights(3, 4, 9);
        let dx = gelu_backward(&x, &probe);
        let h = 1e-6;
        for k in 0..x.data.len() {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up.data[k] += h;
            dn.data[k] -= h;
            let num = (gelu(&up).data[k] - gelu(&dn).data[k]) / (2.0 * h) * probe.data[k];
            assert!((num - dx.data[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0f64), 800.0);
        assert!(softplus(-800.0f64) >= 0.0);
    }
}
