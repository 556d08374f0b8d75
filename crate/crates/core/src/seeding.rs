//! Labeled sub-seeds derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic 64-bit seed for `(master, label, parts...)`.
pub fn sub_seed(master: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(master: u64, label: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master, label, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_parts_separate_streams() {
        let a = sub_seed(1, "env", &[0, 0]);
        assert_eq!(a, sub_seed(1, "env", &[0, 0]));
        assert_ne!(a, sub_seed(1, "init", &[0, 0]));
        assert_ne!(a, sub_seed(1, "env", &[0, 1]));
        assert_ne!(a, sub_seed(2, "env", &[0, 0]));
        assert_ne!(
            sub_seed(1, "ab", &[]),
            sub_seed(1, "a", &[u64::from_le_bytes(*b"b\0\0\0\0\0\0\0")])
        );
    }
}
