//! Plug-and-play sender/receiver pairs between an agent's native feature
//! space and the shared common space.

mod collab;

pub use collab::{batch_warps, collaborative_logits, coverage_mask, fill_uncovered, Collaborator, Message, Participant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentSpec, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::param::module_fields;
use crate::nn::{ConvNextBlock, FusedAxialAttention, Param, SizeChannelAdapter};
use crate::tensor::{Tape, Tensor, Var};

/// Shape every common-space feature conforms to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandardRepSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl StandardRepSpec {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config("standard representation dimensions must be positive".into()));
        }
        Ok(Self { channels, height, width })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn batch_shape(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.height, self.width]
    }

    pub fn check(&self, x: &[usize]) -> Result<()> {
        if x.len() != 4 || x[1..] != self.shape() {
            return Err(Error::Shape(format!("expected [n, {}, {}, {}], got {x:?}", self.channels, self.height, self.width)));
        }
        Ok(())
    }
}

/// A feature map known to conform to a [`StandardRepSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct CommonFeature(FeatureMap);

impl CommonFeature {
    pub fn new(map: FeatureMap, spec: StandardRepSpec) -> Result<Self> {
        if map.data.shape() != spec.shape() {
            return Err(Error::Shape(format!("common feature {:?} does not match {:?}", map.data.shape(), spec.shape())));
        }
        Ok(Self(map))
    }

    pub fn map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn into_map(self) -> FeatureMap {
        self.0
    }
}

/// Resizer from a native shape to the standard shape (bilinear + 1x1).
pub fn resize_to_standard<'t>(tape: &'t Tape, adapter: &SizeChannelAdapter, f: Var<'t>) -> Var<'t> {
    adapter.forward(tape, f)
}

pub fn new_resizer<R: Rng + ?Sized>(agent: &AgentSpec, spec: StandardRepSpec, rng: &mut R) -> SizeChannelAdapter {
    SizeChannelAdapter::new(agent.native_channels(), spec.channels, spec.height, spec.width, rng)
}

/// Native features -> (prompt `R`, common-space message `P_m`).
#[derive(Clone, Debug)]
pub struct Sender {
    pub resize: SizeChannelAdapter,
    pub recombiner: Vec<ConvNextBlock>,
    pub aligner: FusedAxialAttention,
}
module_fields!(Sender { resize, recombiner, aligner });

impl Sender {
    pub fn new<R: Rng + ?Sized>(agent: &AgentSpec, spec: StandardRepSpec, rng: &mut R) -> Self {
        Self {
            resize: new_resizer(agent, spec, rng),
            recombiner: (0..2).map(|_| ConvNextBlock::new(spec.channels, rng)).collect(),
            aligner: FusedAxialAttention::new(spec.channels, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, f: Var<'t>) -> (Var<'t>, Var<'t>) {
        let mut r = self.resize.forward(tape, f);
        for block in &self.recombiner {
            r = block.forward(tape, r);
        }
        let p = self.aligner.forward_self(tape, r);
        (r, p)
    }
}

/// (local prompt `R`, received `P`) -> native-shaped features.
#[derive(Clone, Debug)]
pub struct Receiver {
    pub converter: FusedAxialAttention,
    /// Learned query grid used instead of the local prompt when present.
    pub constant_query: Option<Param>,
    pub recombiner: Vec<ConvNextBlock>,
    pub resize: SizeChannelAdapter,
}
module_fields!(Receiver { converter, constant_query, recombiner, resize });

impl Receiver {
    pub fn new<R: Rng + ?Sized>(agent: &AgentSpec, spec: StandardRepSpec, use_local_prompt: bool, rng: &mut R) -> Self {
        let s = agent.native_size();
        Self {
            converter: FusedAxialAttention::new(spec.channels, rng),
            constant_query: (!use_local_prompt).then(|| Param::new(Tensor::randn(spec.batch_shape(1).to_vec(), 1.0, rng))),
            recombiner: (0..2).map(|_| ConvNextBlock::new(spec.channels, rng)).collect(),
            resize: SizeChannelAdapter::new(spec.channels, agent.native_channels(), s, s, rng),
        }
    }

    pub fn uses_local_prompt(&self) -> bool {
        self.constant_query.is_none()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, r_local: Var<'t>, p: Var<'t>) -> Var<'t> {
        assert_eq!(r_local.shape(), p.shape(), "receiver prompt and message must share the standard shape");
        let query = match &self.constant_query {
            Some(q) => r_local.mul_scalar(0.0).detach().add(tape.param(q)),
            None => r_local,
        };
        let mut t = self.converter.forward_cross(tape, query, p);
        for block in &self.recombiner {
            t = block.forward(tape, t);
        }
        self.resize.forward(tape, t)
    }
}

/// One agent's sender and receiver.
#[derive(Clone, Debug)]
pub struct Bridge {
    pub sender: Sender,
    pub receiver: Receiver,
}
module_fields!(Bridge { sender, receiver });

impl Bridge {
    pub fn new<R: Rng + ?Sized>(agent: &AgentSpec, spec: StandardRepSpec, use_local_prompt: bool, rng: &mut R) -> Self {
        Self { sender: Sender::new(agent, spec, rng), receiver: Receiver::new(agent, spec, use_local_prompt, rng) }
    }
}

/// Sender forward on one native feature map.
pub fn sender_forward(f: &FeatureMap, sender: &Sender, spec: StandardRepSpec) -> Result<(FeatureMap, CommonFeature)> {
    let native = sender.resize.proj.in_channels();
    if f.data.shape()[0] != native {
        return Err(Error::Shape(format!("sender expects {native} channels, got {:?}", f.data.shape())));
    }
    let tape = Tape::new();
    let (r, p) = sender.forward(&tape, tape.constant(f.batched()));
    let unbatch = |v: Var| (*v.value()).clone().reshape(spec.shape().to_vec());
    let r = FeatureMap::new(unbatch(r), f.frame)?;
    let p = CommonFeature::new(FeatureMap::new(unbatch(p), f.frame)?, spec)?;
    Ok((r, p))
}

/// Receiver forward; `received` must already be expressed in the local frame.
pub fn receiver_forward(r_local: &FeatureMap, received: &CommonFeature, receiver: &Receiver, agent: &AgentSpec) -> Result<FeatureMap> {
    if r_local.data.shape() != received.map().data.shape() {
        return Err(Error::Shape("receiver prompt must have the standard shape".into()));
    }
    let tape = Tape::new();
    let out = receiver.forward(&tape, tape.constant(r_local.batched()), tape.constant(received.map().batched()));
    FeatureMap::new((*out.value()).clone().reshape(agent.native_shape().to_vec()), r_local.frame)
}
