//! Loss barriers between neural-network solutions and the permutation
//! symmetry that explains them.
//!
//! The crate is organised along the experimental pipeline:
//!
//! - [`net`]: dense and shallow convolutional networks, an exact forward pass,
//!   SGD training and parameter-space arithmetic (interpolation, averaging).
//! - [`data`]: IDX / CIFAR loaders, synthetic blobs, normalisation,
//!   stratified subsampling and label corruption.
//! - [`perm`]: hidden-unit permutations and their action on networks.
//! - [`barrier`]: loss profiles along linear paths and barrier statistics.
//! - [`search`]: simulated annealing, functional-difference matching,
//!   grid-bucket matching and brute-force enumeration.
//! - [`lab`]: experiment protocols and structured reports.
//!
//! Every stochastic step is driven by an explicit 64-bit seed, and every
//! reduction that feeds a reported number is performed in a fixed order, so
//! results are bit-reproducible on a given machine.

pub mod barrier;
pub mod data;
mod error;
pub mod lab;
pub mod net;
pub mod perm;
pub mod search;
pub mod seed;
mod serde_f64;

pub use error::{Error, Result};
