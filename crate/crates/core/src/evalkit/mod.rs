//! Detection AP, domain-gap statistics, collaboration evaluations, ablation
//! grids and report emission.

mod ablation;
mod ap;
mod collab;
mod report;

pub use ablation::{ablation_cell, run_ablation, table4_grid, AblationCell};
pub use ap::{detection_ap, ApAccumulator};
pub use collab::{collab_scores_by_ego, domain_gaps, evaluate, run_collab_eval, CollabScore, Method};
pub use report::{
    emit_report, read_bundle, render_markdown, AblationRow, ApEntry, DomainGap, MetricsReport, NoiseSweep, ReportBundle, REPORT_SCHEMA,
};

use crate::agents::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviations below this are clamped before computing KL.
pub const MIN_STD: f64 = 1e-6;

/// Per-channel mean and standard deviation over batch and space.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics of a `[n, c, h, w]` tensor.
    pub fn of(x: &Tensor) -> Self {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        let d = x.data();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let vals = || (0..n).flat_map(move |b| d[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter());
            let m = vals().sum::<f64>() / count;
            let var = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = var.sqrt().max(MIN_STD);
        }
        Self { mean, std }
    }
}

/// Closed-form `KL(N(ma, sa^2) || N(mb, sb^2))`.
pub fn gaussian_kl(ma: f64, sa: f64, mb: f64, sb: f64) -> f64 {
    let (sa, sb) = (sa.max(MIN_STD), sb.max(MIN_STD));
    ((sb / sa).ln() + (sa * sa + (ma - mb) * (ma - mb)) / (2.0 * sb * sb) - 0.5).max(0.0)
}

/// Mean over channels of the Gaussian KL between per-channel fits of two
/// `[n, c, h, w]` batches.
pub fn kl_domain_gap_tensors(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 4 || b.rank() != 4 || a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Shape(format!("domain gap needs matching [n, c, h, w] batches, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (sa, sb) = (ChannelStats::of(a), ChannelStats::of(b));
    let c = sa.mean.len();
    Ok((0..c).map(|k| gaussian_kl(sa.mean[k], sa.std[k], sb.mean[k], sb.std[k])).sum::<f64>() / c as f64)
}

/// `KL(a || b)` between two batches of standard-shaped feature maps.
pub fn kl_domain_gap(a: &[FeatureMap], b: &[FeatureMap]) -> Result<f64> {
    let stack = |fs: &[FeatureMap]| -> Result<Tensor> {
        let first = fs.first().ok_or_else(|| Error::Invalid("domain gap needs nonempty batches".into()))?;
        if fs.iter().any(|f| f.data.shape() != first.data.shape()) {
            return Err(Error::Shape("feature maps in a batch must share one shape".into()));
        }
        Ok(Tensor::stack_batch(&fs.iter().map(FeatureMap::batched).collect::<Vec<_>>()))
    };
    kl_domain_gap_tensors(&stack(a)?, &stack(b)?)
}

#[cfg(test)]
mod tests;
