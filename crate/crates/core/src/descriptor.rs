//! 256-bit binary descriptors and their substring decomposition.
//!
//! Bit order: byte 0 holds bits 0..=7, least significant bit first, and so
//! on up to byte 31. Substring `k` of a configuration with substring length
//! `l` covers bits `[k*l, (k+1)*l)`, read as an unsigned integer whose least
//! significant bit is bit `k*l`. The descriptor file format and external
//! extractors use the same convention.

use std::fmt;

use crate::error::{Error, Result};

/// Descriptor length in bits.
pub const DESCRIPTOR_BITS: usize = 256;
/// Descriptor length in bytes.
pub const DESCRIPTOR_BYTES: usize = DESCRIPTOR_BITS / 8;

const WORDS: usize = DESCRIPTOR_BITS / 64;

/// A fixed-length 256-bit binary feature descriptor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BinaryDescriptor {
    words: [u64; WORDS],
}

impl BinaryDescriptor {
    pub const fn zeros() -> Self {
        Self { words: [0; WORDS] }
    }

    pub const fn ones() -> Self {
        Self {
            words: [u64::MAX; WORDS],
        }
    }

    pub fn from_array(bytes: [u8; DESCRIPTOR_BYTES]) -> Self {
        let mut words = [0u64; WORDS];
        for (w, chunk) in words.iter_mut().zip(bytes.chunks_exact(8)) {
            *w = u64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        Self { words }
    }

    /// Builds a descriptor from a byte slice, which must be exactly 32 bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; DESCRIPTOR_BYTES] =
            bytes.try_into().map_err(|_| Error::DescriptorLength {
                expected: DESCRIPTOR_BYTES,
                actual: bytes.len(),
            })?;
        Ok(Self::from_array(arr))
    }

    pub fn to_bytes(&self) -> [u8; DESCRIPTOR_BYTES] {
        let mut out = [0u8; DESCRIPTOR_BYTES];
        for (chunk, w) in out.chunks_exact_mut(8).zip(self.words.iter()) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < DESCRIPTOR_BITS, "bit index {i} out of range");
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize, value: bool) {
        assert!(i < DESCRIPTOR_BITS, "bit index {i} out of range");
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn flip_bit(&mut self, i: usize) {
        assert!(i < DESCRIPTOR_BITS, "bit index {i} out of range");
        self.words[i / 64] ^= 1u64 << (i % 64);
    }

    pub fn complement(&self) -> Self {
        let mut words = self.words;
        for w in &mut words {
            *w = !*w;
        }
        Self { words }
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub(crate) fn words(&self) -> &[u64; WORDS] {
        &self.words
    }
}

impl From<[u8; DESCRIPTOR_BYTES]> for BinaryDescriptor {
    fn from(bytes: [u8; DESCRIPTOR_BYTES]) -> Self {
        Self::from_array(bytes)
    }
}

impl fmt::Debug for BinaryDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryDescriptor(")?;
        for b in self.to_bytes() {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// Hamming distance: popcount of the bitwise XOR, in `[0, 256]`.
#[inline]
pub fn hamming_distance(a: &BinaryDescriptor, b: &BinaryDescriptor) -> u32 {
    let (x, y) = (a.words(), b.words());
    (x[0] ^ y[0]).count_ones()
        + (x[1] ^ y[1]).count_ones()
        + (x[2] ^ y[2]).count_ones()
        + (x[3] ^ y[3]).count_ones()
}

/// Partition of a descriptor into `m` disjoint substrings of `l` bits each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "RawSubstringConfig", into = "RawSubstringConfig")]
pub struct SubstringConfig {
    m: usize,
    l: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RawSubstringConfig {
    m: usize,
}

impl TryFrom<RawSubstringConfig> for SubstringConfig {
    type Error = Error;

    fn try_from(raw: RawSubstringConfig) -> Result<Self> {
        Self::new(raw.m)
    }
}

impl From<SubstringConfig> for RawSubstringConfig {
    fn from(cfg: SubstringConfig) -> Self {
        Self { m: cfg.m }
    }
}

impl SubstringConfig {
    /// `m` must divide 256.
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 || m > DESCRIPTOR_BITS || !DESCRIPTOR_BITS.is_multiple_of(m) {
            return Err(Error::InvalidInput(format!(
                "substring count {m} must be in [1, {DESCRIPTOR_BITS}] and divide {DESCRIPTOR_BITS}"
            )));
        }
        Ok(Self {
            m,
            l: DESCRIPTOR_BITS / m,
        })
    }

    /// Number of substrings (hash tables).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Substring length in bits.
    pub fn l(&self) -> usize {
        self.l
    }

    /// Whether substrings fit in a `u64` bucket key.
    pub fn keyable(&self) -> bool {
        self.l <= 64
    }
}

impl Default for SubstringConfig {
    fn default() -> Self {
        Self { m: 16, l: 16 }
    }
}

/// The `k`-th `l`-bit substring of `desc` as an unsigned bucket key.
pub fn substring_index(desc: &BinaryDescriptor, k: usize, cfg: &SubstringConfig) -> Result<u64> {
    if k >= cfg.m {
        return Err(Error::InvalidInput(format!(
            "table index {k} out of range for m = {}",
            cfg.m
        )));
    }
    if !cfg.keyable() {
        return Err(Error::InvalidInput(format!(
            "substring length {} exceeds the 64-bit bucket key",
            cfg.l
        )));
    }
    Ok(slice_unchecked(desc, k, cfg.l))
}

// l is a power of two <= 64, so a slice never straddles two words.
#[inline]
pub(crate) fn slice_unchecked(desc: &BinaryDescriptor, k: usize, l: usize) -> u64 {
    let start = k * l;
    let word = desc.words()[start / 64] >> (start % 64);
    if l == 64 {
        word
    } else {
        word & ((1u64 << l) - 1)
    }
}
