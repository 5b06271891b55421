//! Leveled RNS-CKKS with exactly the operations split training needs.

mod context;
pub mod encoding;
mod keys;
pub mod modarith;
pub mod ntt;
mod ops;
mod params;
mod poly;
pub mod serialize;

use thiserror::Error;

pub use context::CkksContext;
pub use keys::{keygen, KeySet, PublicKey, RotationKey, RotationKeySet, SecretKey, ERROR_STD};
pub use ops::{Ciphertext, Plaintext, SCALE_TOLERANCE};
pub use params::{CkksParams, HeSet};
pub use poly::RnsPoly;
pub use serialize::{deserialize_ct, deserialize_public_context, serialize_ct, serialize_public_context, PublicContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CkksError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("{len} values exceed the slot capacity {slots}")]
    Capacity { len: usize, slots: usize },
    #[error("level mismatch: {left} vs {right}")]
    LevelMismatch { left: usize, right: usize },
    #[error("scale mismatch: {left} vs {right}")]
    ScaleMismatch { left: f64, right: f64 },
    #[error("multiplicative depth exhausted at level {level}")]
    DepthExhausted { level: usize },
    #[error("level {requested} is not reachable (maximum {max})")]
    Level { requested: usize, max: usize },
    #[error("no rotation key for step {0}")]
    MissingRotationKey(usize),
    #[error("context mismatch: {0}")]
    Context(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}
