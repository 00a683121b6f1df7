use crate::scenegen::GridSpec;
use crate::tensor::{Tape, Tensor, Var};

/// Centre-point supervision at a detection head's resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    /// `[n, 1, h, w]`, 1 at cells containing an object centre.
    pub heatmap: Tensor,
    /// `[n, 2, h, w]`, sub-cell position `(dx, dy)` in `[0, 1)` at positives.
    pub offsets: Tensor,
    /// `[n, 1, h, w]`, 1 at positives.
    pub mask: Tensor,
}

impl DetectionTargets {
    /// Targets for ego-frame object centres, one list per sample.
    pub fn build(centers: &[Vec<(f64, f64)>], grid: GridSpec) -> Self {
        let n = centers.len();
        let s = grid.cells();
        let mut heatmap = Tensor::zeros(vec![n, 1, s, s]);
        let mut offsets = Tensor::zeros(vec![n, 2, s, s]);
        for (b, list) in centers.iter().enumerate() {
            for &(x, y) in list {
                let Some((r, c)) = grid.cell_of(x, y) else { continue };
                heatmap.set4(b, 0, r, c, 1.0);
                offsets.set4(b, 0, r, c, (x + grid.extent) * grid.resolution - c as f64);
                offsets.set4(b, 1, r, c, (y + grid.extent) * grid.resolution - r as f64);
            }
        }
        let mask = heatmap.clone();
        Self { heatmap, offsets, mask }
    }

    pub fn positives(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// Focal loss on the centre heatmap (channel 0 of `logits`) plus the L1
/// offset error (channels 1–2) averaged over positive cells.
pub fn detection_loss<'t>(tape: &'t Tape, logits: Var<'t>, targets: &DetectionTargets, gamma: f64, alpha: f64) -> Var<'t> {
    let s = logits.shape();
    assert_eq!(s[1], 3, "detection logits carry heatmap and two offsets");
    assert_eq!(targets.heatmap.shape(), [s[0], 1, s[2], s[3]], "detection targets shape");
    let heat = logits.narrow(1, 0, 1).sigmoid_focal(&targets.heatmap, gamma, alpha);
    let npos = targets.positives();
    if npos == 0 {
        return heat;
    }
    let diff = logits.narrow(1, 1, 2).sub(tape.constant(targets.offsets.clone()));
    let l1 = diff.abs().mul(tape.constant(targets.mask.clone())).sum().mul_scalar(1.0 / npos as f64);
    heat.add(l1)
}
