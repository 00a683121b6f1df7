//! Alignment, reconstruction and task losses.
//!
//! Conventions shared by every loss here:
//! * squared norms are means over all entries, so weights do not depend on
//!   resolution;
//! * `Std(x)` is the per-sample, per-channel standard deviation over spatial
//!   positions (population form); two `Std` tensors are compared by the mean
//!   of their squared elementwise differences.

mod detection;
mod structural;

pub use detection::{detection_loss, DetectionTargets};
pub use structural::{relation_matrix, relation_matrices, structural_align_loss, KeypointGrid, RelationMatrix};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::param::module_fields;
use crate::nn::Conv2d;
use crate::tensor::{Tape, Tensor, Var};

/// Every scalar coefficient of the training objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Std term of the distribution alignment loss.
    pub alpha: f64,
    /// Std term of the cycle loss.
    pub beta: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub lambda_a: f64,
    pub lambda_c: f64,
    pub lambda_u: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda_d: 1.0,
            lambda_s: 0.5,
            lambda_p: 0.5,
            lambda_a: 1.0,
            lambda_c: 1.0,
            lambda_u: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.beta,
            self.lambda_d,
            self.lambda_s,
            self.lambda_p,
            self.lambda_a,
            self.lambda_c,
            self.lambda_u,
            self.focal_gamma,
            self.focal_alpha,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.focal_alpha > 1.0 {
            return Err(Error::Config("focal alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

/// `Std(x)` as `[n, c, 1]`.
pub fn channel_std<'t>(x: Var<'t>) -> Var<'t> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "channel_std expects NCHW");
    let flat = x.reshape(&[s[0], s[1], s[2] * s[3]]);
    let centred = flat.sub(flat.mean_axis(2));
    centred.square().mean_axis(2).add_scalar(1e-12).sqrt()
}

/// Mean squared difference plus `weight` times the mean squared difference
/// of channel standard deviations.
fn moment_loss<'t>(a: Var<'t>, b: Var<'t>, weight: f64) -> Var<'t> {
    let mse = a.sub(b).square().mean();
    if weight == 0.0 {
        return mse;
    }
    mse.add(channel_std(a).sub(channel_std(b)).square().mean().mul_scalar(weight))
}

/// Round-trip reconstruction penalty between native features `f` and the
/// receiver's reconstruction `l_rec`.
pub fn cycle_loss<'t>(f: Var<'t>, l_rec: Var<'t>, beta: f64) -> Var<'t> {
    same_shape(&f, &l_rec, "cycle loss");
    moment_loss(f, l_rec, beta)
}

/// Pulls a sender output `p_m` onto the common representation `p`.
pub fn distribution_align_loss<'t>(p_m: Var<'t>, p: Var<'t>, alpha: f64) -> Var<'t> {
    same_shape(&p_m, &p, "distribution loss");
    moment_loss(p_m, p, alpha)
}

/// Mean sigmoid focal loss of logits against a binary target of equal shape.
pub fn focal_loss<'t>(logits: Var<'t>, target: &Tensor, gamma: f64, alpha: f64) -> Var<'t> {
    logits.sigmoid_focal(target, gamma, alpha)
}

/// Shared occupancy predictor applied to every common-space feature:
/// 3x3 convolution, ReLU, 1x1 convolution to one logit channel.
#[derive(Clone, Debug)]
pub struct OccupancyHead {
    pub hidden: Conv2d,
    pub out: Conv2d,
}
module_fields!(OccupancyHead { hidden, out });

impl OccupancyHead {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut out = Conv2d::new(channels, 1, 1, 1, rng);
        out.bias.set(Tensor::full(vec![1], -2.0));
        Self { hidden: Conv2d::new(channels, channels, 3, 1, rng), out }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        self.out.forward(tape, self.hidden.forward(tape, x).relu())
    }
}

/// Focal loss of the shared head's occupancy prediction on `p_any` against
/// labels `y` (`[n, 1, h, w]`).
pub fn pragmatic_align_loss<'t>(
    tape: &'t Tape,
    p_any: Var<'t>,
    y: &Tensor,
    head: &OccupancyHead,
    weights: &LossWeights,
) -> Var<'t> {
    let logits = head.forward(tape, p_any);
    assert_eq!(logits.shape(), y.shape(), "occupancy labels must match the common footprint");
    focal_loss(logits, y, weights.focal_gamma, weights.focal_alpha)
}

/// Components of one modality's multi-dimensional alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlignTerms {
    pub distribution: f64,
    pub structural: f64,
    pub pragmatic: f64,
}

/// `lambda_d * dis + lambda_s * stru + lambda_p * pragma(p_m)`; terms with a
/// zero weight are skipped entirely.
pub fn multidim_align_loss<'t>(
    tape: &'t Tape,
    p_m: Var<'t>,
    p: Var<'t>,
    y: &Tensor,
    head: &OccupancyHead,
    keypoints: &KeypointGrid,
    weights: &LossWeights,
) -> (Var<'t>, AlignTerms) {
    let mut terms = AlignTerms::default();
    let dis = distribution_align_loss(p_m, p, weights.alpha);
    terms.distribution = dis.item();
    let mut total = dis.mul_scalar(weights.lambda_d);
    if weights.lambda_s != 0.0 {
        let stru = structural_align_loss(p_m, p, keypoints);
        terms.structural = stru.item();
        total = total.add(stru.mul_scalar(weights.lambda_s));
    }
    if weights.lambda_p != 0.0 {
        let prag = pragmatic_align_loss(tape, p_m, y, head, weights);
        terms.pragmatic = prag.item();
        total = total.add(prag.mul_scalar(weights.lambda_p));
    }
    (total, terms)
}

/// `lambda_a * pragma(P) + sum_m (lambda_c * cycle_m + lambda_u * uni_m)`.
pub fn stage1_loss<'t>(pragma_p: Option<Var<'t>>, per_modality: &[(Var<'t>, Var<'t>)], weights: &LossWeights) -> Var<'t> {
    let mut total: Option<Var<'t>> = pragma_p.map(|v| v.mul_scalar(weights.lambda_a));
    for &(cycle, uni) in per_modality {
        let term = cycle.mul_scalar(weights.lambda_c).add(uni.mul_scalar(weights.lambda_u));
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    total.expect("stage-1 loss needs at least one term")
}

#[cfg(test)]
mod tests;
