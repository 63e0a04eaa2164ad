//! Fully convolutional network engine for dense crowd segmentation.

pub mod error;
pub mod evalbench;
pub mod fusion;
pub mod netspec;
pub mod network;
pub mod pipeline;
pub mod scenedata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use netspec::{parse_spec, NetworkSpec};
pub use network::{init_network, Network};
pub use tensor::{Shape, Tensor};
