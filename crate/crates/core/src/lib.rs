pub mod budget;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod init;
pub mod network;
pub mod probe;
pub mod rf;
pub mod sts;
pub mod tensor;

pub use conv::ConvSpec;
pub use error::{Error, Result};
pub use init::{Checkpoint, InflationRates, InitStrategy};
pub use network::{Network, NetworkSpec};
pub use sts::{StsConfig, StsParams};
pub use tensor::{DType, Element, Tensor, VideoBatch};
