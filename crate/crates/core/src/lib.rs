//! Instruction-following speech recognition at desk scale.
//!
//! The crate covers the whole pipeline: rule-based skill targets
//! ([`textops`]), instruction banks and sample construction
//! ([`instructions`]), a subword [`tokenizer`], synthetic speech features
//! ([`synthaudio`]), an attention encoder-decoder with its own reverse-mode
//! differentiation ([`model`]), length-normalised beam search ([`decode`]) and
//! the evaluation suite ([`eval`]). [`pipeline`] wires them together.

pub mod decode;
pub mod eval;
pub mod instructions;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod synthaudio;
pub mod textops;
pub mod tokenizer;

use sha2::{Digest, Sha256};

/// Derives an independent 64-bit stream seed from a root seed and a label
/// (typically an utterance id), so per-item randomness does not depend on
/// processing order.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    tokenizer::hex(&Sha256::digest(bytes))
}
