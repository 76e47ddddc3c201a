//! Seeded train/test assignment by hashing record ids, so a record's side
//! does not depend on row order.

use sha2::{Digest, Sha256};

/// Uniform value in [0, 1) derived from `(seed, id)`.
pub fn unit_hash(seed: u64, id: &str) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

/// Whether `id` falls in the training side for `fraction`.
pub fn is_train(seed: u64, id: &str, fraction: f64) -> bool {
    unit_hash(seed, id) < fraction
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stable_and_roughly_proportional() {
        let ids: Vec<String> = (0..10_000).map(|i| format!("id{i}")).collect();
        let train = ids.iter().filter(|id| is_train(7, id, 0.7)).count();
        assert!((6700..7300).contains(&train), "{train}");
        let mut reversed = ids.clone();
        reversed.reverse();
        let a: Vec<bool> = ids.iter().map(|id| is_train(7, id, 0.7)).collect();
        let mut b: Vec<bool> = reversed.iter().map(|id| is_train(7, id, 0.7)).collect();
        b.reverse();
        assert_eq!(a, b);
        assert_ne!(
            ids.iter().map(|id| is_train(8, id, 0.5)).collect::<Vec<_>>(),
            ids.iter().map(|id| is_train(7, id, 0.5)).collect::<Vec<_>>()
        );
    }
}
