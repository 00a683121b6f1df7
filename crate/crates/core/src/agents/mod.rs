//! Heterogeneous perception models: encoder, fusion and detection head.

pub(crate) mod train;

pub use train::{train_homogeneous, HomogeneousConfig, TrainOutcome, ViewCache};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::param::module_fields;
use crate::nn::Conv2d;
use crate::scenegen::{GridSpec, ModalitySpec, Observation, Pose};
use crate::tensor::{Tape, Tensor, Var};

/// Encoder families; each fixes a layer plan of `(kernel, stride)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderArch {
    #[serde(rename = "convA")]
    ConvA,
    #[serde(rename = "convB")]
    ConvB,
    #[serde(rename = "convC")]
    ConvC,
    #[serde(rename = "convD")]
    ConvD,
}

impl EncoderArch {
    pub fn layers(self) -> &'static [(usize, usize)] {
        match self {
            EncoderArch::ConvA => &[(3, 2), (3, 1), (3, 1)],
            EncoderArch::ConvB => &[(5, 2), (3, 2), (3, 1)],
            EncoderArch::ConvC => &[(3, 1), (3, 2), (3, 1), (3, 1)],
            EncoderArch::ConvD => &[(3, 2), (3, 2), (1, 1)],
        }
    }

    pub fn total_stride(self) -> usize {
        self.layers().iter().map(|&(_, s)| s).product()
    }
}

/// Identity and fixed architecture of one agent type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    agent_id: String,
    modality: ModalitySpec,
    encoder_arch: EncoderArch,
    native_channels: usize,
}

impl AgentSpec {
    pub fn new(agent_id: impl Into<String>, modality: ModalitySpec, encoder_arch: EncoderArch, native_channels: usize) -> Result<Self> {
        let spec = Self { agent_id: agent_id.into(), modality, encoder_arch, native_channels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.modality.validate()?;
        if self.native_channels == 0 {
            return Err(Error::Config(format!("{}: native_channels must be positive", self.agent_id)));
        }
        let cells = self.modality.grid.cells();
        if cells % self.encoder_arch.total_stride() != 0 {
            return Err(Error::Config(format!(
                "{}: observation size {cells} is not divisible by the encoder stride {}",
                self.agent_id,
                self.encoder_arch.total_stride()
            )));
        }
        Ok(())
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }

    pub fn modality(&self) -> &ModalitySpec {
        &self.modality
    }

    pub fn encoder_arch(&self) -> EncoderArch {
        self.encoder_arch
    }

    pub fn native_channels(&self) -> usize {
        self.native_channels
    }

    /// Side length of the (square) native feature map.
    pub fn native_size(&self) -> usize {
        self.modality.grid.cells() / self.encoder_arch.total_stride()
    }

    pub fn native_shape(&self) -> [usize; 3] {
        let s = self.native_size();
        [self.native_channels, s, s]
    }

    pub fn native_grid(&self) -> GridSpec {
        GridSpec::with_cells(self.modality.grid.extent, self.native_size())
    }

    pub fn obs_size(&self) -> usize {
        self.modality.grid.cells()
    }
}

/// A feature grid `[c, h, w]` and the pose of the frame it is expressed in.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub frame: Pose,
}

impl FeatureMap {
    pub fn new(data: Tensor, frame: Pose) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape(format!("feature maps are [c, h, w], got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::Invalid("feature map has non-finite entries".into()));
        }
        Ok(Self { data, frame })
    }

    pub fn batched(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.data.shape());
        self.data.clone().reshape(shape)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
}
module_fields!(Encoder { convs });

impl Encoder {
    pub fn new<R: Rng + ?Sized>(arch: EncoderArch, channels: usize, rng: &mut R) -> Self {
        let mut cin = 1;
        let convs = arch
            .layers()
            .iter()
            .map(|&(k, s)| {
                let conv = Conv2d::new(cin, channels, k, s, rng);
                cin = channels;
                conv
            })
            .collect();
        Self { convs }
    }

    /// `[n, 1, obs, obs]` -> `[n, c, native, native]`, ReLU after every layer.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        self.convs.iter().fold(x, |h, conv| conv.forward(tape, h).relu())
    }
}

/// Channel-wise max over the local and received features, then a 1x1 mix.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub mix: Conv2d,
}
module_fields!(Fusion { mix });

impl Fusion {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self { mix: Conv2d::new(channels, channels, 1, 1, rng) }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, local: Var<'t>, received: &[Var<'t>]) -> Var<'t> {
        let mut all = vec![local];
        for r in received {
            assert_eq!(r.shape(), local.shape(), "fusion inputs must share the local native shape");
            all.push(*r);
        }
        let pooled = if all.len() == 1 { local } else { Var::max_of(&all) };
        self.mix.forward(tape, pooled).relu()
    }
}

/// Centre heatmap logit plus two sub-cell offsets per location.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub hidden: Conv2d,
    pub out: Conv2d,
}
module_fields!(DetectionHead { hidden, out });

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut out = Conv2d::new(channels, 3, 1, 1, rng).scaled(0.1);
        // heatmap prior of about 0.1
        out.bias.set(Tensor::new(vec![3], vec![-2.19, 0.5, 0.5]));
        Self { hidden: Conv2d::new(channels, channels, 3, 1, rng), out }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, g: Var<'t>) -> Var<'t> {
        self.out.forward(tape, self.hidden.forward(tape, g).relu())
    }
}

/// An agent's frozen perception stack.
#[derive(Clone, Debug)]
pub struct PerceptionModel {
    pub spec: AgentSpec,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub head: DetectionHead,
}
module_fields!(PerceptionModel { encoder, fusion, head });

impl PerceptionModel {
    pub fn new<R: Rng + ?Sized>(spec: AgentSpec, rng: &mut R) -> Self {
        let c = spec.native_channels();
        Self {
            encoder: Encoder::new(spec.encoder_arch(), c, rng),
            fusion: Fusion::new(c, rng),
            head: DetectionHead::new(c, rng),
            spec,
        }
    }

    /// Native features of one observation.
    pub fn encode(&self, obs: &Observation, frame: Pose) -> Result<FeatureMap> {
        let n = self.spec.obs_size();
        if obs.grid != self.spec.modality().grid || obs.data.len() != n * n {
            return Err(Error::Shape(format!("{}: observation does not match the modality grid", self.spec.agent_id())));
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, n, n], obs.data.clone()));
        let f = self.encoder.forward(&tape, x).value();
        let shape = self.spec.native_shape();
        FeatureMap::new((*f).clone().reshape(shape.to_vec()), frame)
    }

    /// Fuses features that are already expressed in the local frame.
    pub fn fuse(&self, local: &FeatureMap, received: &[FeatureMap]) -> Result<FeatureMap> {
        let shape = self.spec.native_shape();
        for f in std::iter::once(local).chain(received) {
            if f.data.shape() != shape {
                return Err(Error::Shape(format!("fusion input {:?} differs from native {:?}", f.data.shape(), shape)));
            }
            if f.frame != local.frame {
                return Err(Error::Invalid("fusion inputs must be expressed in the local frame".into()));
            }
        }
        let tape = Tape::new();
        let l = tape.constant(local.batched());
        let r: Vec<Var> = received.iter().map(|f| tape.constant(f.batched())).collect();
        let g = self.fusion.forward(&tape, l, &r).value();
        FeatureMap::new((*g).clone().reshape(shape.to_vec()), local.frame)
    }

    /// Runs the head and extracts peaks above `threshold`.
    pub fn detect(&self, fused: &FeatureMap, threshold: f64) -> Result<Detections> {
        if fused.data.shape() != self.spec.native_shape() {
            return Err(Error::Shape("detect expects a native-shaped fused feature".into()));
        }
        let tape = Tape::new();
        let logits = self.head.forward(&tape, tape.constant(fused.batched())).value();
        Ok(Detections::from_logits(&logits, 0, self.spec.native_grid(), threshold))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Ego-frame position, metres.
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Decoded detection output of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Detections {
    /// `[h, w]` centre probabilities.
    pub heatmap: Tensor,
    /// `[2, h, w]` sub-cell offsets.
    pub offsets: Tensor,
    /// Sorted by descending score.
    pub peaks: Vec<Peak>,
}

impl Detections {
    /// Decodes sample `b` of a `[n, 3, h, w]` logit tensor.
    pub fn from_logits(logits: &Tensor, b: usize, grid: GridSpec, threshold: f64) -> Self {
        let (_, c, h, w) = logits.dims4();
        assert_eq!(c, 3, "detection logits carry three channels");
        let plane = h * w;
        let base = b * 3 * plane;
        let d = logits.data();
        let heatmap = Tensor::new(vec![h, w], d[base..base + plane].iter().map(|&z| sigmoid(z)).collect());
        let offsets = Tensor::new(vec![2, h, w], d[base + plane..base + 3 * plane].to_vec());
        let peaks = extract_peaks(&heatmap, &offsets, grid, threshold);
        Self { heatmap, offsets, peaks }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// 3x3 local maxima strictly above `threshold`. Ties between neighbours go
/// to the cell that comes first in raster order.
pub fn extract_peaks(heatmap: &Tensor, offsets: &Tensor, grid: GridSpec, threshold: f64) -> Vec<Peak> {
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let hm = heatmap.data();
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = hm[r * w + c];
            if v <= threshold {
                continue;
            }
            let mut is_peak = true;
            'nb: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let u = hm[rr as usize * w + cc as usize];
                    let earlier = (rr, cc) < (r as isize, c as isize);
                    if u > v || (earlier && u == v) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                let ox = offsets.data()[r * w + c];
                let oy = offsets.data()[h * w + r * w + c];
                peaks.push(Peak {
                    x: -grid.extent + (c as f64 + ox) / grid.resolution,
                    y: -grid.extent + (r as f64 + oy) / grid.resolution,
                    score: v,
                });
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks
}

#[cfg(test)]
mod tests;
