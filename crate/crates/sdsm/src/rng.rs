//! Reproducible random-number streams.
//!
//! Every ensemble derives its draws from a single 64-bit master seed through
//! a counter-based scheme: one stream per replicate, one substream per time
//! step. Substreams are opened by setting the ChaCha stream counter, so the
//! draws a replicate sees are independent of thread scheduling and of how
//! many workers run the ensemble.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role bits for the stream-id layout, so different consumers of the same
/// master seed can never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Particle-system replicates.
    Simulation = 1,
    /// Dual-process replicates.
    Dual = 2,
    /// Initial-cloud sampling.
    Init = 3,
    /// Validation-suite internals (synthetic nulls, shuffles).
    Validate = 4,
}

/// Factory for the per-replicate / per-step streams of one run.
#[derive(Debug, Clone)]
pub struct RngFactory {
    key: [u8; 32],
    master_seed: u64,
}

impl RngFactory {
    pub fn new(master_seed: u64) -> Self {
        // Expand the 64-bit seed to a 256-bit ChaCha key with SplitMix64.
        let mut key = [0u8; 32];
        let mut state = master_seed;
        for chunk in key.chunks_mut(8) {
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        Self { key, master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Substream for one (kind, replicate, step) triple.
    ///
    /// Layout: kind in bits 60..64, replicate in bits 24..60, step in 0..24.
    /// Steps beyond 2^24 per replicate are rejected at configuration time.
    pub fn substream(&self, kind: StreamKind, replicate: u64, step: u64) -> ChaCha8Rng {
        debug_assert!(replicate < 1 << 36);
        debug_assert!(step < 1 << 24);
        let id = ((kind as u64) << 60) | (replicate << 24) | step;
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(id);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let f = RngFactory::new(42);
        let a: f64 = f.substream(StreamKind::Simulation, 3, 7).gen();
        let b: f64 = f.substream(StreamKind::Simulation, 3, 7).gen();
        let c: f64 = f.substream(StreamKind::Simulation, 3, 8).gen();
        let d: f64 = f.substream(StreamKind::Dual, 3, 7).gen();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a.to_bits(), c.to_bits());
        assert_ne!(a.to_bits(), d.to_bits());
    }

    #[test]
    fn different_seeds_differ() {
        let a: f64 = RngFactory::new(1).substream(StreamKind::Init, 0, 0).gen();
        let b: f64 = RngFactory::new(2).substream(StreamKind::Init, 0, 0).gen();
        assert_ne!(a.to_bits(), b.to_bits());
    }
}
