//! Training-time negotiator: a feature pyramid with per-level importance
//! estimators that blends every member's standardized features into `P`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::FeatureMap;
use crate::bridge::{CommonFeature, StandardRepSpec};
use crate::error::{Error, Result};
use crate::nn::param::module_fields;
use crate::nn::Conv2d;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    /// Number of downsampling levels above level 0.
    pub levels: usize,
    pub estimator_hidden: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { levels: 2, estimator_hidden: 16 }
    }
}

impl PyramidConfig {
    /// Spatial side of level `l`.
    pub fn level_size(&self, spec: StandardRepSpec, l: usize) -> (usize, usize) {
        (spec.height >> l, spec.width >> l)
    }

    /// Experiment-level check: at least one level and every level at least 4x4.
    pub fn validate(&self, spec: StandardRepSpec) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        self.check_divisible(spec)?;
        let (h, w) = self.level_size(spec, self.levels);
        if h < 4 || w < 4 {
            return Err(Error::Config(format!("pyramid level {} would be {h}x{w}, below 4x4", self.levels)));
        }
        Ok(())
    }

    fn check_divisible(&self, spec: StandardRepSpec) -> Result<()> {
        let k = 1usize << self.levels;
        if spec.height % k != 0 || spec.width % k != 0 || self.estimator_hidden == 0 {
            return Err(Error::Config(format!(
                "standard size {}x{} is not divisible by 2^{}, or estimator width is zero",
                spec.height, spec.width, self.levels
            )));
        }
        Ok(())
    }
}

/// `avgpool2(x) + conv3x3(avgpool2(x))`.
#[derive(Clone, Debug)]
pub struct PyramidLayer {
    pub conv: Conv2d,
}
module_fields!(PyramidLayer { conv });

impl PyramidLayer {
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let d = x.avg_pool2();
        d.add(self.conv.forward(tape, d))
    }
}

/// `sigmoid(conv1x1(relu(conv3x3(x))))`, one importance value per entry.
#[derive(Clone, Debug)]
pub struct Estimator {
    pub hidden: Conv2d,
    pub out: Conv2d,
}
module_fields!(Estimator { hidden, out });

impl Estimator {
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        self.out.forward(tape, self.hidden.forward(tape, x).relu()).sigmoid()
    }
}

#[derive(Clone, Debug)]
pub struct Negotiator {
    pub spec: StandardRepSpec,
    pub config: PyramidConfig,
    pub layers: Vec<PyramidLayer>,
    /// One per level, including level 0; shared across modalities.
    pub estimators: Vec<Estimator>,
    pub shrink: Conv2d,
}
module_fields!(Negotiator { layers, estimators, shrink });

/// Output of a negotiation with its intermediates.
pub struct Negotiation<'t> {
    pub p: Var<'t>,
    /// `levels[m][l]`.
    pub levels: Vec<Vec<Var<'t>>>,
    /// `importance[m][l]`.
    pub importance: Vec<Vec<Var<'t>>>,
    pub per_level: Vec<Var<'t>>,
}

impl Negotiator {
    pub fn new<R: Rng + ?Sized>(spec: StandardRepSpec, config: PyramidConfig, rng: &mut R) -> Result<Self> {
        config.check_divisible(spec)?;
        let c = spec.channels;
        let layers = (0..config.levels).map(|_| PyramidLayer { conv: Conv2d::new(c, c, 3, 1, rng).scaled(0.5) }).collect();
        let estimators = (0..=config.levels)
            .map(|_| Estimator {
                hidden: Conv2d::new(c, config.estimator_hidden, 3, 1, rng),
                out: Conv2d::new(config.estimator_hidden, c, 1, 1, rng).scaled(0.1),
            })
            .collect();
        let mut n = Self { spec, config, layers, estimators, shrink: Conv2d::new((config.levels + 1) * c, c, 1, 1, rng) };
        n.set_average_shrink();
        Ok(n)
    }

    /// Shrink header that averages the level copies channel by channel.
    pub fn set_average_shrink(&mut self) {
        let c = self.spec.channels;
        let k = self.config.levels + 1;
        let mut w = Tensor::zeros(vec![c, k * c, 1, 1]);
        for o in 0..c {
            for l in 0..k {
                w.data_mut()[o * k * c + l * c + o] = 1.0 / k as f64;
            }
        }
        self.shrink.weight.set(w);
        self.shrink.bias.set(Tensor::zeros(vec![c]));
    }

    /// Pins every importance value to 1 (sigmoid of a large constant).
    pub fn force_unit_importance(&mut self) {
        for e in &mut self.estimators {
            e.out.zero();
            let c = e.out.out_channels();
            e.out.bias.set(Tensor::full(vec![c], 50.0));
        }
    }

    /// Leaves only the average-pooling path in the pyramid.
    pub fn zero_residuals(&mut self) {
        for l in &mut self.layers {
            l.conv.zero();
        }
    }

    /// Levels `0..=L` of one modality's standardized features.
    pub fn pyramid_levels<'t>(&self, tape: &'t Tape, u: Var<'t>) -> Vec<Var<'t>> {
        let mut out = vec![u];
        for layer in &self.layers {
            let next = layer.forward(tape, *out.last().expect("level 0 present"));
            out.push(next);
        }
        out
    }

    pub fn estimate_importance<'t>(&self, tape: &'t Tape, u_l: Var<'t>, level: usize) -> Var<'t> {
        self.estimators[level].forward(tape, u_l)
    }

    pub fn negotiate<'t>(&self, tape: &'t Tape, us: &[Var<'t>]) -> Result<Negotiation<'t>> {
        if us.is_empty() {
            return Err(Error::Invalid("negotiation needs at least one modality".into()));
        }
        for u in us {
            self.spec.check(&u.shape())?;
        }
        let levels: Vec<Vec<Var>> = us.iter().map(|&u| self.pyramid_levels(tape, u)).collect();
        let importance: Vec<Vec<Var>> = levels
            .iter()
            .map(|ls| ls.iter().enumerate().map(|(l, &u)| self.estimate_importance(tape, u, l)).collect())
            .collect();
        let m = us.len() as f64;
        let mut per_level = Vec::with_capacity(self.config.levels + 1);
        let mut upsampled = Vec::with_capacity(self.config.levels + 1);
        for l in 0..=self.config.levels {
            let mut acc = levels[0][l].mul(importance[0][l]);
            for k in 1..us.len() {
                acc = acc.add(levels[k][l].mul(importance[k][l]));
            }
            let p_l = acc.mul_scalar(1.0 / m);
            per_level.push(p_l);
            upsampled.push(p_l.resize_bilinear(self.spec.height, self.spec.width));
        }
        let p = self.shrink.forward(tape, Var::concat(&upsampled, 1));
        Ok(Negotiation { p, levels, importance, per_level })
    }
}

/// Negotiates one common feature from per-modality standardized features
/// that share a frame. Modalities are taken in name order.
pub fn negotiate(u_by_modality: &BTreeMap<String, FeatureMap>, negotiator: &Negotiator) -> Result<CommonFeature> {
    let Some(first) = u_by_modality.values().next() else {
        return Err(Error::Invalid("negotiation needs at least one modality".into()));
    };
    if u_by_modality.values().any(|f| f.frame != first.frame) {
        return Err(Error::Invalid("negotiation inputs must share one frame".into()));
    }
    let tape = Tape::new();
    let us: Vec<Var> = u_by_modality.values().map(|f| tape.constant(f.batched())).collect();
    let p = negotiator.negotiate(&tape, &us)?.p.value();
    let map = FeatureMap::new((*p).clone().reshape(negotiator.spec.shape().to_vec()), first.frame)?;
    CommonFeature::new(map, negotiator.spec)
}

#[cfg(test)]
mod tests;
