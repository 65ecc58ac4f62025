//! Multilingual CTC/attention speech recognition with a hierarchical
//! information path through the encoder: language identity at the shallow
//! layers, masked prediction of random-projection acoustic units next,
//! IPA phonemes in the middle, and mixture-of-experts token layers at the top.

pub mod ctc;
pub mod data;
pub mod decode;
pub mod eval;
mod error;
pub mod model;
pub mod moe;
pub mod nnet;
pub mod numerics;
pub mod quantizer;
pub mod train;

pub use error::{Error, Result};

/// Seed of an independent random stream named by `tag` and `index`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut b = seed.to_le_bytes().to_vec();
    b.extend_from_slice(tag.as_bytes());
    b.extend_from_slice(&index.to_le_bytes());
    nnet::fnv1a(&b)
}
