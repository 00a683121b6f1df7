//! Parameters, layers and the optimiser shared by every model in the crate.

mod attention;
mod layers;
mod optim;
pub(crate) mod param;

pub use attention::{AxisAttention, FusedAxialAttention};
pub use layers::{ChannelNorm, Conv2d, ConvNextBlock, SizeChannelAdapter};
pub use optim::Adam;
pub use param::{Module, Param, ParamId};
