use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A splittable, deterministic random stream.
///
/// A stream is just a 64-bit key. [`RandomStream::derive`] produces child
/// streams keyed by a tag, so per-layer and per-batch draws depend only on
/// the path of tags from the master seed and never on how many other
/// streams were consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RandomStream(u64);

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self(splitmix64(seed))
    }

    pub fn derive(self, tag: u64) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(tag.wrapping_mul(GOLDEN_GAMMA))))
    }

    /// Child stream keyed by a string label (FNV-1a hashed).
    pub fn derive_named(self, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.derive(h)
    }

    pub fn key(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
