//! Splittable deterministic random streams.
//!
//! A stream is identified by a root seed and a path of split indices. Child
//! streams depend only on that path, never on how much randomness the parent
//! has consumed, so work can be spread over threads without changing results.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    key: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(splitmix64(seed))
    }

    fn from_key(key: u64) -> Self {
        let mut bytes = [0u8; 32];
        let mut z = key;
        for chunk in bytes.chunks_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        RngStream { key, rng: ChaCha8Rng::from_seed(bytes) }
    }

    /// Independent child stream number `index`.
    pub fn split(&self, index: u64) -> RngStream {
        Self::from_key(splitmix64(self.key ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    /// Child stream keyed by a label, for named sub-tasks.
    pub fn split_named(&self, label: &str) -> RngStream {
        let h = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        self.split(h)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}
