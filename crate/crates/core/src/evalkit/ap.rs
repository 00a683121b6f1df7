use crate::agents::Peak;

/// Scored detections pooled over any number of frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApAccumulator {
    scored: Vec<(f64, bool)>,
    num_gt: usize,
}

impl ApAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Greedily matches `peaks` (descending score) to the nearest unmatched
    /// ground-truth centre within `radius` metres.
    pub fn add(&mut self, peaks: &[Peak], gt: &[(f64, f64)], radius: f64) {
        let mut taken = vec![false; gt.len()];
        for p in peaks {
            let best = gt
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, &(x, y))| (i, (p.x - x).hypot(p.y - y)))
                .filter(|&(_, d)| d <= radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = best {
                taken[i] = true;
            }
            self.scored.push((p.score, best.is_some()));
        }
        self.num_gt += gt.len();
    }

    pub fn num_gt(&self) -> usize {
        self.num_gt
    }

    /// All-point interpolated area under the precision-recall curve.
    pub fn ap(&self) -> f64 {
        if self.num_gt == 0 {
            return if self.scored.is_empty() { 1.0 } else { 0.0 };
        }
        let mut order: Vec<usize> = (0..self.scored.len()).collect();
        order.sort_by(|&a, &b| self.scored[b].0.total_cmp(&self.scored[a].0));
        let mut tp = 0usize;
        let mut points = Vec::with_capacity(order.len());
        for (rank, &i) in order.iter().enumerate() {
            if self.scored[i].1 {
                tp += 1;
            }
            points.push((tp as f64 / self.num_gt as f64, tp as f64 / (rank + 1) as f64));
        }
        let mut ap = 0.0;
        let mut best_precision = 0.0f64;
        for k in (0..points.len()).rev() {
            let (recall, precision) = points[k];
            best_precision = best_precision.max(precision);
            let prev_recall = if k == 0 { 0.0 } else { points[k - 1].0 };
            if recall > prev_recall {
                ap += (recall - prev_recall) * best_precision;
            }
        }
        ap
    }
}

/// Average precision of one frame.
pub fn detection_ap(peaks: &[Peak], gt: &[(f64, f64)], radius: f64) -> f64 {
    let mut acc = ApAccumulator::new();
    acc.add(peaks, gt, radius);
    acc.ap()
}
