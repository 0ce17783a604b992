//! Pinned FNV-1a 64-bit hashing.
//!
//! Both the token hasher and the dataset splitter depend on this exact byte
//! stream, so the function must never change between releases.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a 64-bit hasher.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a64(u64);

impl Default for Fnv1a64 {
    fn default() -> Self {
        Self(FNV_OFFSET)
    }
}

impl Fnv1a64 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a64::new();
    h.write(bytes);
    h.finish()
}

/// Hash of the seed's 8 little-endian bytes followed by the key's UTF-8 bytes.
pub fn stable_hash64(seed: u64, key: &str) -> u64 {
    let mut h = Fnv1a64::new();
    h.write(&seed.to_le_bytes());
    h.write(key.as_bytes());
    h.finish()
}
