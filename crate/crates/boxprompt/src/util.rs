//! Small shared helpers: checksums, named RNG streams, float rounding.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash. Used for content checksums in cache records and
/// checkpoint headers; stable across platforms and dependency-free. Not
/// cryptographic — it only has to catch corruption and staleness.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Extend an FNV-1a state with more bytes (for incremental hashing).
pub fn fnv1a64_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Derive a named RNG sub-stream from a master seed.
///
/// Every consumer of randomness (subset sampling, weight init, transform
/// sampling, box noise, shuffling) pulls from its own named stream so that
/// adding draws to one consumer never perturbs another, and a single `--seed`
/// reproduces the whole experiment.
pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = fnv1a64(&seed.to_le_bytes());
    h = fnv1a64_extend(h, name.as_bytes());
    ChaCha8Rng::seed_from_u64(h)
}

/// Round an f64 through f32 precision.
///
/// Values that must survive a float32 on-disk round trip bit-exactly (cached
/// embeddings, checkpointed weights) are kept f32-representable in memory, so
/// serializing them as float32 is lossless.
#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Make a sample id safe to embed in a file name: anything outside
/// `[A-Za-z0-9_-]` becomes an underscore.
pub(crate) fn path_safe_id(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Hash a slice of f64 values via their f32 bit patterns (little-endian).
/// Companions of [`round_f32`]: checksums computed this way match checksums
/// of the serialized float32 payload.
pub fn checksum_f32_of(values: impl Iterator<Item = f64>) -> u64 {
    let mut h = FNV_OFFSET;
    for v in values {
        h = fnv1a64_extend(h, &(v as f32).to_le_bits());
    }
    h
}

trait ToLeBits {
    fn to_le_bits(self) -> [u8; 4];
}

impl ToLeBits for f32 {
    fn to_le_bits(self) -> [u8; 4] {
        self.to_bits().to_le_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn named_streams_are_independent_and_stable() {
        use rand::Rng;
        let mut a1 = named_stream(7, "init");
        let mut a2 = named_stream(7, "init");
        let mut b = named_stream(7, "shuffle");
        let xs1: Vec<u32> = (0..4).map(|_| a1.gen()).collect();
        let xs2: Vec<u32> = (0..4).map(|_| a2.gen()).collect();
        let ys: Vec<u32> = (0..4).map(|_| b.gen()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn f32_rounding_is_idempotent() {
        let x = 0.1234567890123_f64;
        let r = round_f32(x);
        assert_eq!(r, round_f32(r));
        assert_eq!(r as f32, x as f32);
    }
}
