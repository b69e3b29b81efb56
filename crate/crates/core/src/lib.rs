//! Joint transfer of weights and per-layer architecture choices for small
//! convolutional backbones, with a contrastive variant and a brute-force
//! rating harness.

pub mod arch;
pub mod candidates;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod network;
pub mod objective;
pub mod oracle;
pub mod persist;
pub mod pipeline;
pub mod rng;
pub mod selfsup;
pub mod supernet;
pub mod tensor;

pub use error::{NtaaError, Result};
