//! Seeded randomness.
//!
//! Everything random in the crate flows from ChaCha20 streams. Keys carry a
//! 256-bit seed; experiments carry a `u64` seed from which one stream per
//! (purpose, trial index) is derived, so results do not depend on how trials
//! are scheduled across threads.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type KeyedRng = ChaCha20Rng;

pub fn from_seed(seed: [u8; 32]) -> KeyedRng {
    ChaCha20Rng::from_seed(seed)
}

pub fn from_u64(seed: u64) -> KeyedRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Hashes `parts` into a fresh 256-bit seed.
pub fn derive_seed(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// Independent stream for trial `index` of the experiment part named `stream`.
pub fn trial_rng(seed: u64, stream: &str, index: u64) -> KeyedRng {
    from_seed(derive_seed(&[
        &seed.to_le_bytes(),
        stream.as_bytes(),
        &index.to_le_bytes(),
    ]))
}

/// Uniform integer in `[0, bound)`.
///
/// Lemire's multiply-shift with rejection. Written out rather than taken
/// from `rand` so that partitions stay bit-identical across `rand` releases.
pub fn bounded<R: RngCore + ?Sized>(rng: &mut R, bound: u64) -> u64 {
    assert!(bound > 0, "bounded: empty range");
    let mut m = (rng.next_u64() as u128) * (bound as u128);
    let mut low = m as u64;
    if low < bound {
        let threshold = bound.wrapping_neg() % bound;
        while low < threshold {
            m = (rng.next_u64() as u128) * (bound as u128);
            low = m as u64;
        }
    }
    (m >> 64) as u64
}

/// Uniform `f64` in `[0, 1)` with 53 bits of precision.
pub fn unit_f64<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_stays_in_range() {
        let mut rng = from_u64(3);
        for bound in [1u64, 2, 3, 7, 1000, u64::MAX / 3] {
            for _ in 0..1000 {
                assert!(bounded(&mut rng, bound) < bound);
            }
        }
    }

    #[test]
    fn bounded_is_roughly_uniform() {
        let mut rng = from_u64(11);
        let mut hist = [0u32; 6];
        let draws = 60_000;
        for _ in 0..draws {
            hist[bounded(&mut rng, 6) as usize] += 1;
        }
        // binomial sd = sqrt(60000 * 1/6 * 5/6) ~ 91
        for count in hist {
            assert!((count as i64 - 10_000).abs() < 400, "{hist:?}");
        }
    }

    #[test]
    fn trial_streams_differ_by_index_and_name() {
        let a = trial_rng(1, "null", 0).next_u64();
        let b = trial_rng(1, "null", 1).next_u64();
        let c = trial_rng(1, "mark", 0).next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, trial_rng(1, "null", 0).next_u64());
    }

    #[test]
    fn unit_f64_in_range() {
        let mut rng = from_u64(5);
        for _ in 0..10_000 {
            let u = unit_f64(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
