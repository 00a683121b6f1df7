//! Loop-based reference implementations used to check the vectorised code,
//! plus a central finite-difference gradient checker.

use crate::losses::{DetectionTargets, KeypointGrid};
use crate::negotiator::Negotiator;
use crate::nn::Conv2d;
use crate::tensor::{Tape, Tensor, Var};

/// Relative L2 error between the tape gradient of `f(x)` at `x0` and
/// central finite differences with step `1e-6`.
pub fn grad_rel_error(x0: &Tensor, f: impl for<'a> Fn(Var<'a>) -> Var<'a>) -> f64 {
    let eval = |x: &Tensor| {
        let tape = Tape::new();
        f(tape.constant(x.clone())).item()
    };
    let tape = Tape::new();
    let x = tape.input(x0.clone(), true);
    let g = tape.backward(f(x));
    let analytic = g.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape().to_vec()));
    let eps = 1e-6;
    let mut diff = 0.0;
    let mut scale = 0.0;
    for i in 0..x0.numel() {
        let mut xp = x0.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= eps;
        let num = (eval(&xp) - eval(&xm)) / (2.0 * eps);
        diff += (analytic.data()[i] - num).powi(2);
        scale += num * num;
    }
    diff.sqrt() / scale.sqrt().max(1e-12)
}

/// Same-padded stride-1 dense convolution of a `[c, h, w]` buffer.
pub fn conv2d(x: &[f64], c: usize, h: usize, w: usize, conv: &Conv2d) -> Vec<f64> {
    let cout = conv.out_channels();
    let k = conv.kernel();
    let pad = (k / 2) as isize;
    let wt = conv.weight.value();
    let b = conv.bias.value();
    let (wt, b) = (wt.data(), b.data());
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b[o];
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (sy, sx) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += wt[((o * c + i) * k + ky) * k + kx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}

/// 2x2 average pooling of a `[c, h, w]` buffer.
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * (h / 2) * (w / 2)];
    for i in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |yy: usize, xk: usize| x[(i * h + yy) * w + xk];
                out[(i * (h / 2) + y) * (w / 2) + xx] =
                    (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1)) / 4.0;
            }
        }
    }
    out
}

/// Half-pixel-centred bilinear resize of a `[c, h, w]` buffer.
pub fn resize_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; c * oh * ow];
    for i in 0..c {
        for y in 0..oh {
            let (y0, y1, fy) = coord(y, h, oh);
            for xx in 0..ow {
                let (x0, x1, fx) = coord(xx, w, ow);
                let at = |a: usize, b: usize| x[(i * h + a) * w + b];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(i * oh + y) * ow + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Negotiated `P` for `[c, h, w]` inputs: pyramid levels, importance-weighted
/// mean per level, upsampling and the shrink header.
pub fn negotiate(neg: &Negotiator, inputs: &[Tensor]) -> Vec<f64> {
    let (c, h, w) = (neg.spec.channels, neg.spec.height, neg.spec.width);
    let levels = neg.config.levels;
    let sizes: Vec<(usize, usize)> = (0..=levels).map(|l| (h >> l, w >> l)).collect();
    let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&(a, b)| vec![0.0; c * a * b]).collect();
    for u in inputs {
        let mut ul = u.data().to_vec();
        for l in 0..=levels {
            if l > 0 {
                let (ph, pw) = sizes[l - 1];
                let d = avg_pool2(&ul, c, ph, pw);
                let res = conv2d(&d, c, sizes[l].0, sizes[l].1, &neg.layers[l - 1].conv);
                ul = d.iter().zip(&res).map(|(a, b)| a + b).collect();
            }
            let (lh, lw) = sizes[l];
            let est = &neg.estimators[l];
            let hid: Vec<f64> = conv2d(&ul, c, lh, lw, &est.hidden).into_iter().map(|v| v.max(0.0)).collect();
            let logit = conv2d(&hid, est.hidden.out_channels(), lh, lw, &est.out);
            for (k, z) in logit.iter().enumerate() {
                acc[l][k] += ul[k] / (1.0 + (-z).exp()) / inputs.len() as f64;
            }
        }
    }
    let mut cat = Vec::with_capacity((levels + 1) * c * h * w);
    for (l, a) in acc.iter().enumerate() {
        cat.extend(resize_bilinear(a, c, sizes[l].0, sizes[l].1, h, w));
    }
    conv2d(&cat, (levels + 1) * c, h, w, &neg.shrink)
}

/// Cosine similarity between every pair of keypoint feature vectors of a
/// `[c, h, w]` sample; zero vectors compare as 0.
pub fn relation_matrix(sample: &Tensor, kp: &KeypointGrid) -> [[f64; 9]; 9] {
    let (c, h, w) = (sample.shape()[0], sample.shape()[1], sample.shape()[2]);
    let mut m = [[0.0; 9]; 9];
    for i in 0..9 {
        for j in 0..9 {
            let (xi, yi) = kp.points[i];
            let (xj, yj) = kp.points[j];
            let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let a = sample.data()[ch * h * w + yi * w + xi];
                let b = sample.data()[ch * h * w + yj * w + xj];
                dot += a * b;
                ni += a * a;
                nj += b * b;
            }
            m[i][j] = if ni == 0.0 || nj == 0.0 { 0.0 } else { dot / (ni.sqrt() * nj.sqrt()) };
        }
    }
    m
}

/// `sum_s sum_ij |M(a_s) - M(b_s)|_ij / 81` over `[n, c, h, w]` batches.
pub fn structural_align(a: &Tensor, b: &Tensor, kp: &KeypointGrid) -> f64 {
    let (n, c, h, w) = a.dims4();
    let sample = |t: &Tensor, s: usize| Tensor::new(vec![c, h, w], t.data()[s * c * h * w..(s + 1) * c * h * w].to_vec());
    let mut total = 0.0;
    for s in 0..n {
        let (ma, mb) = (relation_matrix(&sample(a, s), kp), relation_matrix(&sample(b, s), kp));
        for i in 0..9 {
            for j in 0..9 {
                total += (ma[i][j] - mb[i][j]).abs();
            }
        }
    }
    total / 81.0
}

/// Mean sigmoid focal loss over all entries.
pub fn focal(logits: &[f64], target: &[f64], gamma: f64, alpha: f64) -> f64 {
    let mut total = 0.0;
    for (&x, &y) in logits.iter().zip(target) {
        let p = 1.0 / (1.0 + (-x).exp());
        let (pt, at) = if y > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        total += -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    total / logits.len() as f64
}

/// Focal loss on channel 0 plus the mean L1 offset error over positives.
pub fn detection(logits: &Tensor, t: &DetectionTargets, gamma: f64, alpha: f64) -> f64 {
    let (n, _, h, w) = logits.dims4();
    let mut heat = Vec::new();
    let mut target = Vec::new();
    let mut l1 = 0.0;
    let mut pos = 0;
    for b in 0..n {
        for r in 0..h {
            for c in 0..w {
                heat.push(logits.at4(b, 0, r, c));
                target.push(t.heatmap.at4(b, 0, r, c));
                if t.mask.at4(b, 0, r, c) > 0.5 {
                    pos += 1;
                    for k in 0..2 {
                        l1 += (logits.at4(b, 1 + k, r, c) - t.offsets.at4(b, k, r, c)).abs();
                    }
                }
            }
        }
    }
    focal(&heat, &target, gamma, alpha) + if pos > 0 { l1 / pos as f64 } else { 0.0 }
}
