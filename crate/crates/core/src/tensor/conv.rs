//! 2-D convolution (NCHW, square kernels, zero padding, grouped).

use super::tape::Var;
use super::{gemm, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.groups == self.cout
    }
}

/// Unfolds channels `[c0, c0 + cg)` of one sample into `[cg*k*k, ho*wo]`.
fn im2col(x: &[f64], g: &Geom, c0: usize, cols: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let plane = &x[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geom, c0: usize, dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let plane = &mut dx[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox * s + kx - p` is in range.
fn valid_cols(kx: usize, g: &Geom) -> (usize, usize) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    let off = kx as isize - p;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = ((g.w as isize - 1 - off).div_euclid(s) + 1).clamp(0, g.wo as isize);
    (lo.min(g.wo as isize) as usize, hi.max(lo) as usize)
}

fn depthwise_forward(x: &[f64], wt: &[f64], g: &Geom, out: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_cols(kx, g)).collect();
    for b in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
            let kern = &wt[c * k * k..(c + 1) * k * k];
            let dst = &mut out[(b * g.cout + c) * g.ho * g.wo..(b * g.cout + c + 1) * g.ho * g.wo];
            for oy in 0..g.ho {
                let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                        let wv = kern[ky * k + kx];
                        let i0 = (lo * s + kx) as isize - p;
                        if s == 1 {
                            let src = &row[i0 as usize..i0 as usize + (hi - lo)];
                            for (d, v) in drow[lo..hi].iter_mut().zip(src) {
                                *d += wv * v;
                            }
                        } else {
                            for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                *d += wv * row[i0 as usize + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(x: &[f64], wt: &[f64], gout: &[f64], g: &Geom, dx: &mut [f64], dw: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_cols(kx, g)).collect();
    for b in 0..g.n {
        for c in 0..g.cin {
            let base = (b * g.cin + c) * g.h * g.w;
            let plane = &x[base..base + g.h * g.w];
            let dplane = &mut dx[base..base + g.h * g.w];
            let kern = &wt[c * k * k..(c + 1) * k * k];
            let dkern = &mut dw[c * k * k..(c + 1) * k * k];
            let go = &gout[(b * g.cout + c) * g.ho * g.wo..(b * g.cout + c + 1) * g.ho * g.wo];
            for oy in 0..g.ho {
                let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let r0 = iy as usize * g.w;
                    for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                        let wv = kern[ky * k + kx];
                        let i0 = ((lo * s + kx) as isize - p) as usize;
                        let mut acc = 0.0;
                        if s == 1 {
                            let n = hi - lo;
                            let src = &plane[r0 + i0..r0 + i0 + n];
                            let dst = &mut dplane[r0 + i0..r0 + i0 + n];
                            for ((q, x), d) in grow[lo..hi].iter().zip(src).zip(dst) {
                                acc += q * x;
                                *d += q * wv;
                            }
                        } else {
                            for (j, q) in grow[lo..hi].iter().enumerate() {
                                let idx = r0 + i0 + j * s;
                                acc += q * plane[idx];
                                dplane[idx] += q * wv;
                            }
                        }
                        dkern[ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Convolution of an NCHW input with weights `[cout, cin/groups, k, k]`
    /// and an optional bias `[cout]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize, groups: usize) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        let (n, cin, h, w) = xv.dims4();
        let ws = wv.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert!(groups >= 1 && cin % groups == 0 && ws[0] % groups == 0, "bad group count");
        assert_eq!(ws[1], cin / groups, "conv weight expects {} input channels per group, input has {}", ws[1], cin / groups);
        let k = ws[2];
        assert!(h + 2 * padding >= k && w + 2 * padding >= k, "kernel larger than padded input");
        let g = Geom {
            n,
            cin,
            h,
            w,
            cout: ws[0],
            k,
            stride,
            pad: padding,
            groups,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (w + 2 * padding - k) / stride + 1,
        };
        let hw = g.ho * g.wo;
        let ckk = g.cin_g() * k * k;
        let mut out = vec![0.0; n * g.cout * hw];
        if g.depthwise() {
            depthwise_forward(xv.data(), wv.data(), &g, &mut out);
        } else {
            let mut cols = vec![0.0; if g.pointwise() { 0 } else { ckk * hw }];
            for b in 0..n {
                let xs = &xv.data()[b * cin * h * w..(b + 1) * cin * h * w];
                for gi in 0..groups {
                    let src = if g.pointwise() {
                        &xs[gi * g.cin_g() * hw..(gi + 1) * g.cin_g() * hw]
                    } else {
                        im2col(xs, &g, gi * g.cin_g(), &mut cols);
                        &cols[..]
                    };
                    let wg = &wv.data()[gi * g.cout_g() * ckk..];
                    let o0 = (b * g.cout + gi * g.cout_g()) * hw;
                    gemm(g.cout_g(), ckk, hw, wg, false, src, false, &mut out[o0..o0 + g.cout_g() * hw], false);
                }
            }
        }
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            assert_eq!(bv.shape(), &[g.cout], "conv bias shape");
            for b in 0..n {
                for c in 0..g.cout {
                    let v = bv.data()[c];
                    for o in &mut out[(b * g.cout + c) * hw..(b * g.cout + c + 1) * hw] {
                        *o += v;
                    }
                }
            }
        }
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.tape().push(Tensor::new(vec![n, g.cout, g.ho, g.wo], out), &parents, Box::new(move |go| {
            let gd = go.data();
            let mut dx = vec![0.0; n * cin * h * w];
            let mut dw = vec![0.0; wv.numel()];
            if g.depthwise() {
                depthwise_backward(xv.data(), wv.data(), gd, &g, &mut dx, &mut dw);
            } else {
                let pw = g.pointwise();
                let mut cols = vec![0.0; if pw { 0 } else { ckk * hw }];
                let mut dcols = vec![0.0; if pw { 0 } else { ckk * hw }];
                for b in 0..n {
                    let xs = &xv.data()[b * cin * h * w..(b + 1) * cin * h * w];
                    let dxs = &mut dx[b * cin * h * w..(b + 1) * cin * h * w];
                    for gi in 0..groups {
                        let c0 = gi * g.cin_g();
                        let src = if pw {
                            &xs[c0 * hw..(c0 + g.cin_g()) * hw]
                        } else {
                            im2col(xs, &g, c0, &mut cols);
                            &cols[..]
                        };
                        let o0 = (b * g.cout + gi * g.cout_g()) * hw;
                        let gog = &gd[o0..o0 + g.cout_g() * hw];
                        let w0 = gi * g.cout_g() * ckk;
                        // dW_g += dOut_g * cols^T
                        gemm(g.cout_g(), hw, ckk, gog, false, src, true, &mut dw[w0..w0 + g.cout_g() * ckk], true);
                        // dcols = W_g^T * dOut_g
                        if pw {
                            let dst = &mut dxs[c0 * hw..(c0 + g.cin_g()) * hw];
                            gemm(ckk, g.cout_g(), hw, &wv.data()[w0..], true, gog, false, dst, false);
                        } else {
                            gemm(ckk, g.cout_g(), hw, &wv.data()[w0..], true, gog, false, &mut dcols, false);
                            col2im(&dcols, &g, c0, dxs);
                        }
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::new(vec![n, cin, h, w], dx)),
                Some(Tensor::new(wv.shape().to_vec(), dw)),
            ];
            if has_bias {
                let mut db = vec![0.0; g.cout];
                for b in 0..n {
                    for (c, d) in db.iter_mut().enumerate() {
                        *d += gd[(b * g.cout + c) * hw..(b * g.cout + c + 1) * hw].iter().sum::<f64>();
                    }
                }
                grads.push(Some(Tensor::new(vec![g.cout], db)));
            }
            grads
        }))
    }
}
