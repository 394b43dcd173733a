//! Named substreams from a single base seed.
//!
//! Every random decision in the engine (init, shuffles, augmentation, synth
//! data, search candidates) draws from a ChaCha stream seeded through this
//! derivation, so one config seed pins the whole run and components stay
//! independently reproducible.

use sha2::{Digest, Sha256};

/// Derives a child seed from `base` and a stream label.
pub(crate) fn derive(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_tag_sensitive() {
        assert_eq!(derive(1, "init"), derive(1, "init"));
        assert_ne!(derive(1, "init"), derive(1, "shuffle"));
        assert_ne!(derive(1, "init"), derive(2, "init"));
    }
}
