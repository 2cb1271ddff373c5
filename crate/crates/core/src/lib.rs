//! Iterative Retinex low-light enhancement with a small map-estimation network.
//!
//! `menet` predicts per-iteration illumination (`E`) and noise (`N`) maps,
//! `enhancer` peels them off the input, `losses` and `train` fit the network
//! without reference images, and `infer` is the fast f32 path used by the CLI.

pub mod adam;
pub mod cli;
pub mod conv;
pub mod enhancer;
pub mod error;
pub mod finite_diff;
pub mod gradcheck;
pub mod imageio;
pub mod infer;
pub mod losses;
pub mod menet;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
