pub mod agents;
pub mod bridge;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod negotiator;
pub mod nn;
pub mod oracle;
pub mod scenegen;
pub mod tensor;
pub mod training;


pub use agents::{AgentSpec, EncoderArch, FeatureMap, PerceptionModel};
pub use error::{Error, Result};
pub use scenegen::{DatasetSpec, GridSpec, ModalitySpec, Pose};
pub use tensor::{Gradients, Tape, Tensor, Var};
