//! Seed management: every source of randomness in a run is a named substream
//! derived from one master seed, so results are reproducible regardless of
//! thread scheduling and resumable from a counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a over a label. Used to map stream names to seed
/// material; must never change, or old checkpoints stop replaying.
fn fnv1a(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derives independent RNG streams from a single master seed.
///
/// A stream is addressed by a label (purpose) and an index (epoch, step,
/// sequence number, ...). The same (master, label, index) always yields the
/// same stream, which makes parallel batch processing and mid-run resumption
/// deterministic without serializing any RNG internals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, label: &str, index: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&self.master.to_le_bytes());
        seed[8..16].copy_from_slice(&fnv1a(label).to_le_bytes());
        seed[16..24].copy_from_slice(&index.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }
}
