//! Index-keyed random streams.
//!
//! Every random draw in an experiment comes from a ChaCha stream whose key is
//! derived from `(master seed, purpose tag, index, ...)`. Replicate `k` therefore
//! sees the same numbers no matter which worker runs it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    master: u64,
    path: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl StreamKey {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            path: 0x5EED,
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Sub-key for a named purpose ("points", "field", ...).
    pub fn purpose(self, tag: &str) -> Self {
        Self {
            master: self.master,
            path: splitmix64(self.path ^ fnv1a(tag).rotate_left(17)),
        }
    }

    /// Sub-key for the `index`-th replicate / draw under this key.
    pub fn child(self, index: u64) -> Self {
        Self {
            master: self.master,
            path: splitmix64(self.path.rotate_left(29) ^ splitmix64(index ^ 0xA5A5_5A5A_0F0F_F0F0)),
        }
    }

    /// 64-bit digest of this key, used as the `seed` column of output rows.
    pub fn digest(&self) -> u64 {
        splitmix64(self.master ^ splitmix64(self.path))
    }

    pub fn rng(self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut state = self.master ^ self.path.rotate_left(32);
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state ^ self.path);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
