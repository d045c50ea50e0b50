//! Simulation and training engine for reversible-network training on
//! eDRAM-backed accelerators.

pub mod bfp;
pub mod duplex;
pub mod error;
pub mod harness;
pub mod memory;
pub mod scheduler;
pub mod systolic;
pub mod tensor;

pub use bfp::{BfpConfig, BfpGroup, BfpTensor};
pub use error::{Error, Result};
pub use tensor::{Padding, Tensor};
