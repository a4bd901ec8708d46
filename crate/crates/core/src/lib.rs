//! Reward-based (policy-gradient) image classification with an adversarial
//! robustness evaluation harness.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod reward;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{build_network, Network, NetworkConfig};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
