use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, Var};

const EPS_SQ: f64 = 1e-24;

/// Nine sample positions on a 3x3 lattice at fractions 1/4, 1/2 and 3/4 of
/// the feature footprint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointGrid {
    /// `(x, y)` = `(column, row)` cell indices.
    pub points: [(usize, usize); 9],
}

impl KeypointGrid {
    pub fn for_size(height: usize, width: usize) -> Self {
        let at = |frac: usize, n: usize| frac * n / 4;
        let mut points = [(0, 0); 9];
        for (i, p) in points.iter_mut().enumerate() {
            *p = (at(1 + i % 3, width), at(1 + i / 3, height));
        }
        Self { points }
    }

    fn flat_indices(&self, width: usize) -> Vec<Option<u32>> {
        self.points.iter().map(|&(x, y)| Some((y * width + x) as u32)).collect()
    }
}

/// Pairwise cosine similarities between the channel vectors at the nine
/// keypoints. A zero vector has similarity 0 with everything, itself included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationMatrix {
    pub data: [[f64; 9]; 9],
}

/// Relation matrix of one `[c, h, w]` sample.
pub fn relation_matrix(sample: &Tensor, keypoints: &KeypointGrid) -> RelationMatrix {
    let s = sample.shape();
    assert_eq!(s.len(), 3, "relation_matrix expects one [c, h, w] sample");
    let (c, h, w) = (s[0], s[1], s[2]);
    let vecs: Vec<Vec<f64>> = keypoints
        .points
        .iter()
        .map(|&(x, y)| {
            assert!(x < w && y < h, "keypoint outside the sample");
            (0..c).map(|ch| sample.data()[(ch * h + y) * w + x]).collect()
        })
        .collect();
    let norms: Vec<f64> = vecs.iter().map(|v| (v.iter().map(|a| a * a).sum::<f64>() + EPS_SQ).sqrt()).collect();
    let mut data = [[0.0; 9]; 9];
    for i in 0..9 {
        for j in 0..9 {
            let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
            data[i][j] = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
        }
    }
    RelationMatrix { data }
}

/// Differentiable relation matrices of a `[n, c, h, w]` batch, `[n, 9, 9]`.
pub fn relation_matrices<'t>(x: Var<'t>, keypoints: &KeypointGrid) -> Var<'t> {
    let s = x.shape();
    let (n, c, w) = (s[0], s[1], s[3]);
    let idx = keypoints.flat_indices(w);
    let maps = Rc::new(vec![idx; n]);
    let pts = x.spatial_gather(maps, 3, 3).reshape(&[n, c, 9, 1]).permute([0, 2, 1, 3]).reshape(&[n, 9, c]);
    let norms = pts.square().sum_axis(2).add_scalar(EPS_SQ).sqrt();
    let unit = pts.div(norms);
    unit.bmm(unit, false, true)
}

/// `sum_s sum_ij |M(p_m)_s - M(p)_s|_ij / 81`.
pub fn structural_align_loss<'t>(p_m: Var<'t>, p: Var<'t>, keypoints: &KeypointGrid) -> Var<'t> {
    assert_eq!(p_m.shape(), p.shape(), "structural loss: shape mismatch");
    relation_matrices(p_m, keypoints).sub(relation_matrices(p, keypoints)).abs().sum().mul_scalar(1.0 / 81.0)
}
