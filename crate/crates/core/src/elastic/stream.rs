use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a random stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    PoolSize,
    Subset,
    Data,
    Init,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::PoolSize => 0x706f_6f6c,
            Purpose::Subset => 0x7375_6273,
            Purpose::Data => 0x6461_7461,
            Purpose::Init => 0x696e_6974,
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent seed for a sub-stream (e.g. one model layer).
pub fn derive_seed(seed: u64, lane: u64) -> u64 {
    splitmix64(seed ^ splitmix64(lane.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Counter-keyed random stream.
///
/// The draw sequence depends only on `(seed, purpose, step, token)`, never
/// on which thread or batch position asked for it.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    purpose: Purpose,
    step: u64,
    token: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, purpose: Purpose, step: u64, token: u64) -> Self {
        let words = [
            splitmix64(seed),
            splitmix64(purpose.tag() ^ 0xA5A5_A5A5_0000_0000),
            splitmix64(step ^ 0x5bd1_e995_0000_0001),
            splitmix64(token ^ 0x1b87_3593_0000_0002),
        ];
        let mut key = [0u8; 32];
        for (chunk, w) in key.chunks_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        Self {
            seed,
            purpose,
            step,
            token,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn token(&self) -> u64 {
        self.token
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
