//! FreshNets: convolutional networks whose filters are stored as a small
//! vector of hashed, frequency-banded DCT weights.
//!
//! The crate covers the dense kernels ([`ops`]), the orthonormal DCT
//! ([`dct`]), weight-sharing hashes and band allocation ([`hashing`]), the
//! FreshNets and hashed fully-connected layers ([`fresh`]), comparison
//! methods ([`baselines`]), declarative network specs ([`netspec`]),
//! training ([`training`]) and the binary model format ([`model_file`]).

pub mod baselines;
pub mod data;
pub mod dct;
mod error;
pub mod fresh;
pub mod hashing;
pub mod layer;
pub mod model_file;
pub mod netspec;
pub mod network;
pub mod ops;
pub mod selftest;
pub mod tensor;
pub mod training;
pub mod visualize;

pub use error::{Error, Result};
pub use netspec::{build, Compression, CompressionMethod, NetworkSpec};
pub use network::Network;
pub use tensor::{Batch, Tensor4};
