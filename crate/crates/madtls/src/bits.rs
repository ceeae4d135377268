//! Bit strings with MSB-first byte packing.
//!
//! Segments are addressed down to the bit, so ciphertexts and plaintexts are
//! bit strings rather than byte strings. On the wire a bit string is packed
//! MSB-first and zero-padded to a byte boundary; the true length travels in
//! the segmentation info.

use bitvec::prelude::*;
use std::fmt;
use std::ops::Range;

/// A bit string of arbitrary length, packed MSB-first.
#[derive(Clone, PartialEq, Eq, Default, Hash)]
pub struct Bits {
    inner: BitVec<u8, Msb0>,
}

impl Bits {
    pub fn new() -> Self {
        Self::default()
    }

    /// All bits of `bytes`, in order.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            inner: BitVec::from_slice(bytes),
        }
    }

    /// The first `bit_len` bits of `bytes`. Returns `None` if `bytes` is too
    /// short or a padding bit past `bit_len` is set.
    pub fn from_bytes_exact(bytes: &[u8], bit_len: usize) -> Option<Self> {
        if bytes.len() != bit_len.div_ceil(8) {
            return None;
        }
        let all = BitVec::<u8, Msb0>::from_slice(bytes);
        if all[bit_len..].any() {
            return None;
        }
        let mut inner = all;
        inner.truncate(bit_len);
        Some(Self { inner })
    }

    pub fn zeros(bit_len: usize) -> Self {
        Self {
            inner: BitVec::repeat(false, bit_len),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn get(&self, index: usize) -> bool {
        self.inner[index]
    }

    pub fn push(&mut self, bit: bool) {
        self.inner.push(bit);
    }

    pub fn flip(&mut self, index: usize) {
        let bit = self.inner[index];
        self.inner.set(index, !bit);
    }

    pub fn slice(&self, range: Range<usize>) -> Bits {
        Self {
            inner: self.inner[range].to_bitvec(),
        }
    }

    pub fn extend(&mut self, other: &Bits) {
        self.inner.extend_from_bitslice(&other.inner);
    }

    /// In-place XOR with an equal-length bit string.
    pub fn xor_with(&mut self, other: &Bits) {
        assert_eq!(self.len(), other.len(), "xor of unequal bit lengths");
        for (mut a, b) in self.inner.iter_mut().zip(other.inner.iter()) {
            *a = *a ^ *b;
        }
    }

    pub fn xor(&self, other: &Bits) -> Bits {
        let mut out = self.clone();
        out.xor_with(other);
        out
    }

    /// Packed bytes, zero-padded to a byte boundary.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = self.inner.clone();
        v.set_uninitialized(false);
        v.force_align();
        v.into_vec()
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bits({}:{})", self.len(), hex::encode(self.to_bytes()))
    }
}

impl FromIterator<bool> for Bits {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self {
            inner: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_is_msb_first() {
        let mut b = Bits::new();
        b.push(true);
        b.push(false);
        b.push(true);
        assert_eq!(b.to_bytes(), vec![0b1010_0000]);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn from_bytes_exact_rejects_set_padding() {
        assert!(Bits::from_bytes_exact(&[0b1010_0000], 3).is_some());
        assert!(Bits::from_bytes_exact(&[0b1010_1000], 3).is_none());
        assert!(Bits::from_bytes_exact(&[0xff, 0x00], 3).is_none());
    }

    #[test]
    fn slice_and_extend_round_trip() {
        let b = Bits::from_bytes(&[0xde, 0xad, 0xbe, 0xef]);
        let mut joined = b.slice(0..13);
        joined.extend(&b.slice(13..32));
        assert_eq!(joined, b);
    }

    #[test]
    fn xor_is_involutive() {
        let a = Bits::from_bytes(&[0x12, 0x34]);
        let k = Bits::from_bytes(&[0xff, 0x0f]);
        assert_eq!(a.xor(&k).xor(&k), a);
    }
}
