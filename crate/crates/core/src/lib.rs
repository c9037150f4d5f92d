pub mod autodiff;
pub mod channel;
pub mod codec;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod gssm;
pub mod image;
pub mod macs;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vssm;

pub use channel::{ChannelKind, ChannelRealization};
pub use codec::{Cbr, MambaJscc, ModelConfig};
pub use error::{Error, Result};
pub use gssm::CsiRestConfig;
pub use params::{Checkpoint, ParamStore};
pub use tensor::{Rng, Tensor};
