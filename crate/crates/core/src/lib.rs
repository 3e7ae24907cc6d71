//! Structured attention for in-context learning.
//!
//! Demonstration segments attend only within themselves and to the test
//! segment, while the test segment attends to everything. This makes encoder
//! cost linear in the number of demonstrations and the test representation
//! invariant to demonstration order. The crate also provides a tiny
//! encoder-decoder model, the fusion baselines (FiD, Group-FiD, ensembles),
//! synthetic meta-training tasks and a scaling benchmark.

pub mod attention;
pub mod bench;
pub mod error;
pub mod fusion;
pub mod layout;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

/// Integer token id of the synthetic vocabulary.
pub type TokenId = u32;

/// Padding token; never attended to as a key.
pub const PAD: TokenId = 0;
/// Decoder start token.
pub const BOS: TokenId = 1;
/// First id available to task content.
pub const FIRST_CONTENT_TOKEN: TokenId = 2;
