//! Differentiable operations on [`Var`].
//!
//! Shape errors inside the graph are programming errors and panic; the
//! public model and loss entry points validate shapes before recording.

use std::rc::Rc;

use super::tape::Var;
use super::{gemm, Tensor};

fn pad4(shape: &[usize]) -> [usize; 4] {
    assert!(shape.len() <= 4, "broadcasting supports rank <= 4, got {shape:?}");
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    out
}

/// Contiguous strides with zero stride on size-1 axes.
fn bstrides(s: [usize; 4]) -> [usize; 4] {
    let mut st = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        st[i] = if s[i] == 1 { 0 } else { acc };
        acc *= s[i];
    }
    st
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad4(a), pad4(b));
    let mut out = Vec::with_capacity(rank);
    for i in 4 - rank..4 {
        let (x, y) = (pa[i], pb[i]);
        assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
        out.push(x.max(y));
    }
    out
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let o = pad4(&shape);
    let (sa, sb) = (bstrides(pad4(a.shape())), bstrides(pad4(b.shape())));
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(o.iter().product());
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o[3] {
                    out.push(f(ad[ba + i3 * sa[3]], bd[bb + i3 * sb[3]]));
                }
            }
        }
    }
    Tensor::new(shape, out)
}

/// Sums a broadcast gradient back down to `target` shape.
fn reduce_to(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let o = pad4(g.shape());
    let st = bstrides(pad4(target));
    let mut out = vec![0.0; target.iter().product()];
    let gd = g.data();
    let mut k = 0;
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..o[3] {
                    out[base + i3 * st[3]] += gd[k];
                    k += 1;
                }
            }
        }
    }
    Tensor::new(target.to_vec(), out)
}

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    // derivative expressed through (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let y = Rc::new(xv.map(f));
    let yc = Rc::clone(&y);
    x.tape().push((*y).clone(), &[x], Box::new(move |g| {
        let d = Tensor::new(
            g.shape().to_vec(),
            g.data()
                .iter()
                .zip(xv.data().iter().zip(yc.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect(),
        );
        vec![Some(d)]
    }))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

impl<'t> Var<'t> {
    // ---- elementwise binary (numpy-style broadcasting, rank <= 4) ----

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape().push(out, &[self, other], Box::new(move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(g, &sb))]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape().push(out, &[self, other], Box::new(move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(&g.map(|v| -v), &sb))]
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x * y);
        self.tape().push(out, &[self, other], Box::new(move |g| {
            let ga = broadcast_zip(g, &b, |g, y| g * y);
            let gb = broadcast_zip(g, &a, |g, x| g * x);
            vec![Some(reduce_to(&ga, a.shape())), Some(reduce_to(&gb, b.shape()))]
        }))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, |x, y| x / y);
        self.tape().push(out, &[self, other], Box::new(move |g| {
            let ga = broadcast_zip(g, &b, |g, y| g / y);
            let q = broadcast_zip(&a, &b, |x, y| -x / (y * y));
            let gb = broadcast_zip(g, &q, |g, q| g * q);
            vec![Some(reduce_to(&ga, a.shape())), Some(reduce_to(&gb, b.shape()))]
        }))
    }

    /// Elementwise maximum over same-shaped vars. Ties route the gradient
    /// to the earliest argument.
    pub fn max_of(items: &[Var<'t>]) -> Var<'t> {
        assert!(!items.is_empty(), "max_of needs at least one input");
        let vals: Vec<Rc<Tensor>> = items.iter().map(Var::value).collect();
        let shape = vals[0].shape().to_vec();
        for v in &vals {
            assert_eq!(v.shape(), &shape[..], "max_of shape mismatch");
        }
        let n = vals[0].numel();
        let mut arg = vec![0u32; n];
        let mut out = vals[0].data().to_vec();
        for (k, v) in vals.iter().enumerate().skip(1) {
            for (i, &x) in v.data().iter().enumerate() {
                if x > out[i] {
                    out[i] = x;
                    arg[i] = k as u32;
                }
            }
        }
        let count = items.len();
        items[0].tape().push(Tensor::new(shape.clone(), out), items, Box::new(move |g| {
            let mut gs: Vec<Vec<f64>> = vec![vec![0.0; g.numel()]; count];
            for (i, (&a, &gv)) in arg.iter().zip(g.data()).enumerate() {
                gs[a as usize][i] = gv;
            }
            gs.into_iter().map(|d| Some(Tensor::new(shape.clone(), d))).collect()
        }))
    }

    // ---- scalar and unary ----

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        unary(self, move |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(self) -> Var<'t> {
        unary(self, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    /// Tanh approximation of GELU, written as `x * sigmoid(2u)`.
    pub fn gelu(self) -> Var<'t> {
        unary(
            self,
            |x| x * sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x)),
            |x, _| {
                let s = sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x));
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                s + 2.0 * x * s * (1.0 - s) * du
            },
        )
    }

    /// `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        unary(self, move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    // ---- reductions ----

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape().push(Tensor::scalar(v.sum()), &[self], Box::new(move |g| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        }))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over `axis`, keeping it with size one.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        assert!(axis < shape.len(), "sum_axis: axis {axis} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (x, y) in dst.iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[axis] = 1;
        self.tape().push(Tensor::new(oshape, out), &[self], Box::new(move |g| {
            let gd = g.data();
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    gi[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(shape.clone(), gi))]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).mul_scalar(1.0 / n)
    }

    // ---- shape manipulation ----

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape.to_vec());
        self.tape().push(out, &[self], Box::new(move |g| vec![Some(g.clone().reshape(old.clone()))]))
    }

    /// Axis permutation of a rank-4 tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: [usize; 4]) -> Var<'t> {
        let v = self.value();
        let out = permute4(&v, perm);
        let mut inv = [0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.tape().push(out, &[self], Box::new(move |g| vec![Some(permute4(g, inv))]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        self.tape().push(Tensor::new(oshape, out), &[self], Box::new(move |g| {
            let mut gi = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gi[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape.clone(), gi))]
        }))
    }

    /// Concatenation along `axis`.
    pub fn concat(items: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!items.is_empty(), "concat needs at least one input");
        let vals: Vec<Rc<Tensor>> = items.iter().map(Var::value).collect();
        let s0 = vals[0].shape().to_vec();
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let lens: Vec<usize> = vals
            .iter()
            .map(|v| {
                let s = v.shape();
                assert!(
                    s.len() == s0.len() && s[..axis] == s0[..axis] && s[axis + 1..] == s0[axis + 1..],
                    "concat shape mismatch"
                );
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in vals.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut oshape = s0.clone();
        oshape[axis] = total;
        items[0].tape().push(Tensor::new(oshape, out), items, Box::new(move |g| {
            let mut parts: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let gd = g.data();
            let mut k = 0;
            for _ in 0..outer {
                for (p, &l) in parts.iter_mut().zip(&lens) {
                    p.extend_from_slice(&gd[k..k + l * inner]);
                    k += l * inner;
                }
            }
            parts
                .into_iter()
                .zip(&lens)
                .map(|(p, &l)| {
                    let mut s = s0.clone();
                    s[axis] = l;
                    Some(Tensor::new(s, p))
                })
                .collect()
        }))
    }

    // ---- linear algebra ----

    /// Batched matrix product of rank-3 tensors `[b, m, k] x [b, k, n]`, with
    /// optional transposition of either operand's last two axes.
    pub fn bmm(self, other: Var<'t>, a_trans: bool, b_trans: bool) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm expects matching rank-3 batches");
        let batch = sa[0];
        let (m, k) = if a_trans { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if b_trans { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dimension mismatch");
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                a_trans,
                &b.data()[i * k * n..],
                b_trans,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.tape().push(Tensor::new(vec![batch, m, n], out), &[self, other], Box::new(move |g| {
            let gd = g.data();
            let mut ga = vec![0.0; batch * m * k];
            let mut gb = vec![0.0; batch * k * n];
            for i in 0..batch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                // dA = G * op(B)^T, laid out like A.
                if a_trans {
                    gemm(k, n, m, bi, b_trans, gi, true, &mut ga[i * m * k..(i + 1) * m * k], false);
                } else {
                    gemm(m, n, k, gi, false, bi, !b_trans, &mut ga[i * m * k..(i + 1) * m * k], false);
                }
                // dB = op(A)^T * G, laid out like B.
                if b_trans {
                    gemm(n, m, k, gi, true, ai, a_trans, &mut gb[i * k * n..(i + 1) * k * n], false);
                } else {
                    gemm(k, m, n, ai, !a_trans, gi, false, &mut gb[i * k * n..(i + 1) * k * n], false);
                }
            }
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga)),
                Some(Tensor::new(b.shape().to_vec(), gb)),
            ]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let len = *shape.last().expect("softmax of rank-0");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(len) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let y = Rc::new(Tensor::new(shape.clone(), out));
        let yc = Rc::clone(&y);
        self.tape().push((*y).clone(), &[self], Box::new(move |g| {
            let mut gi = vec![0.0; g.numel()];
            for ((gr, yr), dst) in g.data().chunks(len).zip(yc.data().chunks(len)).zip(gi.chunks_mut(len)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::new(shape.clone(), gi))]
        }))
    }

    // ---- spatial ----

    /// 2x2 average pooling with stride 2 on NCHW (odd trailing rows/cols dropped).
    pub fn avg_pool2(self) -> Var<'t> {
        let v = self.value();
        let (n, c, h, w) = v.dims4();
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "avg_pool2 on a map smaller than 2x2");
        let d = v.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &d[p * h * w..];
            for y in 0..ho {
                for x in 0..wo {
                    let s = src[2 * y * w + 2 * x]
                        + src[2 * y * w + 2 * x + 1]
                        + src[(2 * y + 1) * w + 2 * x]
                        + src[(2 * y + 1) * w + 2 * x + 1];
                    out[(p * ho + y) * wo + x] = 0.25 * s;
                }
            }
        }
        self.tape().push(Tensor::new(vec![n, c, ho, wo], out), &[self], Box::new(move |g| {
            let gd = g.data();
            let mut gi = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                for y in 0..ho {
                    for x in 0..wo {
                        let q = 0.25 * gd[(p * ho + y) * wo + x];
                        let b = p * h * w;
                        gi[b + 2 * y * w + 2 * x] += q;
                        gi[b + 2 * y * w + 2 * x + 1] += q;
                        gi[b + (2 * y + 1) * w + 2 * x] += q;
                        gi[b + (2 * y + 1) * w + 2 * x + 1] += q;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gi))]
        }))
    }

    /// Bilinear resize of NCHW maps (half-pixel centers, edge clamped).
    /// Each output is a convex combination of inputs, so constants survive.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'t> {
        let v = self.value();
        let (n, c, h, w) = v.dims4();
        if (h, w) == (out_h, out_w) {
            return self;
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let d = v.data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                    dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        self.tape().push(Tensor::new(vec![n, c, out_h, out_w], out), &[self], Box::new(move |g| {
            let gd = g.data();
            let mut gi = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let gsrc = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut gi[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let q = gsrc[oy * out_w + ox];
                        dst[y0 * w + x0] += q * (1.0 - wy) * (1.0 - wx);
                        dst[y0 * w + x1] += q * (1.0 - wy) * wx;
                        dst[y1 * w + x0] += q * wy * (1.0 - wx);
                        dst[y1 * w + x1] += q * wy * wx;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gi))]
        }))
    }

    /// Per-sample spatial gather: output cell `p` of sample `b` copies input
    /// cell `maps[b][p]` across all channels, or zero when `None`.
    pub fn spatial_gather(self, maps: Rc<Vec<Vec<Option<u32>>>>, out_h: usize, out_w: usize) -> Var<'t> {
        let v = self.value();
        let (n, c, h, w) = v.dims4();
        assert_eq!(maps.len(), n, "one gather map per sample");
        let hw = h * w;
        let ohw = out_h * out_w;
        let d = v.data();
        let mut out = vec![0.0; n * c * ohw];
        for b in 0..n {
            assert_eq!(maps[b].len(), ohw, "gather map size");
            for ch in 0..c {
                let src = &d[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let dst = &mut out[(b * c + ch) * ohw..(b * c + ch + 1) * ohw];
                for (o, m) in dst.iter_mut().zip(&maps[b]) {
                    if let Some(i) = m {
                        *o = src[*i as usize];
                    }
                }
            }
        }
        self.tape().push(Tensor::new(vec![n, c, out_h, out_w], out), &[self], Box::new(move |g| {
            let gd = g.data();
            let mut gi = vec![0.0; n * c * hw];
            for b in 0..n {
                for ch in 0..c {
                    let gsrc = &gd[(b * c + ch) * ohw..(b * c + ch + 1) * ohw];
                    let dst = &mut gi[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for (q, m) in gsrc.iter().zip(&maps[b]) {
                        if let Some(i) = m {
                            dst[*i as usize] += q;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gi))]
        }))
    }

    // ---- fused losses ----

    /// Mean sigmoid focal loss of `self` (logits) against binary `targets`
    /// (entries >= 0.5 count as positive).
    pub fn sigmoid_focal(self, targets: &Tensor, gamma: f64, alpha: f64) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.shape(), targets.shape(), "focal loss shape mismatch");
        let count = v.numel() as f64;
        let t = targets.clone();
        let mut total = 0.0;
        for (&x, &y) in v.data().iter().zip(t.data()) {
            total += focal_term(x, y >= 0.5, gamma, alpha).0;
        }
        self.tape().push(Tensor::scalar(total / count), &[self], Box::new(move |g| {
            let s = g.data()[0] / count;
            let d = v
                .data()
                .iter()
                .zip(t.data())
                .map(|(&x, &y)| s * focal_term(x, y >= 0.5, gamma, alpha).1)
                .collect();
            vec![Some(Tensor::new(v.shape().to_vec(), d))]
        }))
    }
}

/// Focal loss of one logit and its derivative with respect to the logit.
pub(crate) fn focal_term(x: f64, positive: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let (z, a, sign) = if positive { (x, alpha, 1.0) } else { (-x, 1.0 - alpha, -1.0) };
    let log_p = log_sigmoid(z);
    let p = sigmoid(z);
    let q = sigmoid(-z);
    let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -a * qg * log_p;
    let dz = a * qg * (gamma * p * log_p - q);
    (loss, sign * dz)
}

/// For each output index: (lower source, upper source, upper weight).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let wgt = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, wgt)
        })
        .collect()
}

fn permute4(t: &Tensor, perm: [usize; 4]) -> Tensor {
    let s = pad4(t.shape());
    assert_eq!(t.rank(), 4, "permute expects rank 4");
    let os = [s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]];
    let st = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let ps = [st[perm[0]], st[perm[1]], st[perm[2]], st[perm[3]]];
    let d = t.data();
    let mut out = Vec::with_capacity(t.numel());
    for i0 in 0..os[0] {
        for i1 in 0..os[1] {
            for i2 in 0..os[2] {
                let base = i0 * ps[0] + i1 * ps[1] + i2 * ps[2];
                for i3 in 0..os[3] {
                    out.push(d[base + i3 * ps[3]]);
                }
            }
        }
    }
    Tensor::new(os.to_vec(), out)
}
