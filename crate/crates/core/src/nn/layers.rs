use rand::Rng;

use super::param::module_fields;
use super::{Module, Param};
use crate::tensor::{Tape, Tensor, Var};

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}
module_fields!(Conv2d { weight, bias });

impl Conv2d {
    /// He-normal initialisation, zero bias, "same" padding for odd kernels.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Self::with_groups(cin, cout, kernel, stride, 1, rng)
    }

    pub fn with_groups<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(cin % groups == 0 && cout % groups == 0, "channels must divide into groups");
        let fan_in = (cin / groups) * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::new(Tensor::randn(vec![cout, cin / groups, kernel, kernel], std, rng)),
            bias: Param::new(Tensor::zeros(vec![cout])),
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().shape()[2]
    }

    /// Multiplies the initial weights, e.g. to start a residual branch near zero.
    pub fn scaled(mut self, factor: f64) -> Self {
        let w = self.weight.value().map(|x| x * factor);
        self.weight.set(w);
        self
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        x.conv2d(tape.param(&self.weight), Some(tape.param(&self.bias)), self.stride, self.padding, self.groups)
    }

    /// Sets a 1x1 convolution to the identity map (square channel count).
    pub fn set_identity(&mut self) {
        let c = self.out_channels();
        assert!(self.kernel() == 1 && self.in_channels() == c && self.groups == 1, "identity needs square 1x1 conv");
        self.weight.set(Tensor::from_fn(vec![c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }));
        self.bias.set(Tensor::zeros(vec![c]));
    }

    pub fn zero(&mut self) {
        self.weight.set(Tensor::zeros(self.weight.value().shape().to_vec()));
        self.bias.set(Tensor::zeros(vec![self.out_channels()]));
    }
}

/// Layer normalisation across the channel axis of NCHW maps.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: Param,
    pub beta: Param,
}
module_fields!(ChannelNorm { gamma, beta });

impl ChannelNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(vec![1, channels, 1, 1])),
            beta: Param::new(Tensor::zeros(vec![1, channels, 1, 1])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let mean = x.mean_axis(1);
        let centred = x.sub(mean);
        let var = centred.square().mean_axis(1);
        let normed = centred.div(var.add_scalar(1e-6).sqrt());
        normed.mul(tape.param(&self.gamma)).add(tape.param(&self.beta))
    }
}

/// Residual ConvNeXt-style block: depthwise 7x7, channel norm, pointwise
/// expansion, GELU, pointwise projection.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub depthwise: Conv2d,
    pub norm: ChannelNorm,
    pub expand: Conv2d,
    pub project: Conv2d,
}
module_fields!(ConvNextBlock { depthwise, norm, expand, project });

impl ConvNextBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            depthwise: Conv2d::with_groups(channels, channels, 7, 1, channels, rng).scaled(0.5),
            norm: ChannelNorm::new(channels),
            expand: Conv2d::new(channels, 4 * channels, 1, 1, rng),
            project: Conv2d::new(4 * channels, channels, 1, 1, rng).scaled(0.1),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let h = self.depthwise.forward(tape, x);
        let h = self.norm.forward(tape, h);
        let h = self.expand.forward(tape, h).gelu();
        x.add(self.project.forward(tape, h))
    }

    /// Turns the block into the identity map.
    pub fn zero_residual(&mut self) {
        self.project.zero();
    }
}

/// Bilinear resize to a fixed spatial size followed by a 1x1 channel projection.
#[derive(Clone, Debug)]
pub struct SizeChannelAdapter {
    pub out_h: usize,
    pub out_w: usize,
    pub proj: Conv2d,
}
module_fields!(SizeChannelAdapter { proj });

impl SizeChannelAdapter {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, out_h: usize, out_w: usize, rng: &mut R) -> Self {
        let mut proj = Conv2d::new(cin, cout, 1, 1, rng);
        // unit-variance-preserving start rather than He gain
        let w = proj.weight.value().map(|x| x / 2f64.sqrt());
        proj.weight.set(w);
        Self { out_h, out_w, proj }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let resized = x.resize_bilinear(self.out_h, self.out_w);
        self.proj.forward(tape, resized)
    }
}

impl Module for () {
    fn visit<'a>(&'a self, _: &str, _: &mut dyn FnMut(String, &'a Param)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(String, &mut Param)) {}
}
