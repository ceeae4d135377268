//! Pluggable cryptographic primitives: segment MAC, stream cipher, KDF.
//!
//! Everything above this module works in terms of three operations:
//!
//! * [`mac`] — a 16-byte segment authenticator (HMAC-SHA256, truncated).
//! * [`keystream_xor`] — length-preserving stream encryption (AES-256-CTR).
//! * [`kdf`] — label-separated key derivation (HKDF-SHA256).
//!
//! All three are pure functions over value inputs and safe to call from any
//! number of threads. Per-thread invocation counters are kept in [`metrics`]
//! so higher layers can assert closed-form call counts.

use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes256;
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::Sha256;
use std::fmt;
use thiserror::Error;

use crate::bits::Bits;
use crate::wire::put_varint;

pub const MAC_KEY_LEN: usize = 32;
pub const STREAM_KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 16;

/// Fixed first IV word, keeping this construction's counter blocks disjoint
/// from any other CTR user of the same key.
const IV_LABEL: [u8; 4] = *b"sctx";

/// One record may consume at most this many keystream bits per context;
/// the 3-byte block counter in the IV caps the span at 2^24 blocks.
pub const MAX_KEYSTREAM_BITS: u64 = (1 << 24) * 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("keystream span exhausted: offset {offset} + {len} bits exceeds {MAX_KEYSTREAM_BITS}")]
    KeystreamSpan { offset: u64, len: u64 },
    #[error("kdf secret must be non-empty")]
    EmptySecret,
}

/// 32-byte key for the segment MAC. Debug output is redacted.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacKey([u8; MAC_KEY_LEN]);

impl MacKey {
    pub fn from_bytes(bytes: [u8; MAC_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; MAC_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MacKey(..)")
    }
}

/// 32-byte key for segment encryption. Debug output is redacted.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct StreamKey([u8; STREAM_KEY_LEN]);

impl StreamKey {
    pub fn from_bytes(bytes: [u8; STREAM_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; STREAM_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for StreamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("StreamKey(..)")
    }
}

/// A 16-byte authenticator. XOR of two partial tags is a partial tag, with
/// the all-zero tag as identity.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartialTag(pub [u8; TAG_LEN]);

impl PartialTag {
    pub const ZERO: PartialTag = PartialTag([0u8; TAG_LEN]);

    pub fn xor(self, other: PartialTag) -> PartialTag {
        let mut out = self.0;
        for (a, b) in out.iter_mut().zip(other.0.iter()) {
            *a ^= b;
        }
        PartialTag(out)
    }

    pub fn xor_assign(&mut self, other: PartialTag) {
        *self = self.xor(other);
    }

    pub fn as_bytes(&self) -> &[u8; TAG_LEN] {
        &self.0
    }
}

impl fmt::Debug for PartialTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PartialTag({})", hex::encode(self.0))
    }
}

/// Record nonce: 16-bit epoch plus 48-bit sequence number, as carried in the
/// record header. A (epoch, sequence) pair is never reused under one key.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub struct Nonce {
    pub epoch: u16,
    pub sequence: u64,
}

impl Nonce {
    pub fn new(epoch: u16, sequence: u64) -> Self {
        assert!(sequence < 1 << 48, "sequence number exceeds 48 bits");
        Self { epoch, sequence }
    }
}

/// Domain-separation tags for every use of [`mac`]. Splicing a tag from one
/// purpose into another fails because the first MAC input byte differs.
pub mod domain {
    use super::Nonce;

    pub const RECORD_SEGMENT: u8 = 0x01;
    pub const KEY_BLOB: u8 = 0x02;
    pub const FINISHED: u8 = 0x03;
    pub const CONTROL: u8 = 0x04;

    /// Binds a segment tag to (epoch, sequence, segment index), so tags can
    /// be spliced neither across records nor across positions within one.
    pub fn record_segment(nonce: Nonce, segment_index: u8) -> [u8; 10] {
        let mut out = [0u8; 10];
        out[0] = RECORD_SEGMENT;
        out[1..3].copy_from_slice(&nonce.epoch.to_be_bytes());
        out[3..9].copy_from_slice(&nonce.sequence.to_be_bytes()[2..]);
        out[9] = segment_index;
        out
    }

    pub fn key_blob(target_entity: u8) -> [u8; 2] {
        [KEY_BLOB, target_entity]
    }

    pub fn finished(role: u8) -> [u8; 2] {
        [FINISHED, role]
    }

    pub fn control(nonce: Nonce) -> [u8; 9] {
        let mut out = [0u8; 9];
        out[0] = CONTROL;
        out[1..3].copy_from_slice(&nonce.epoch.to_be_bytes());
        out[3..9].copy_from_slice(&nonce.sequence.to_be_bytes()[2..]);
        out
    }
}

/// Segment MAC over a bit string.
///
/// The authenticated encoding is `domain_tag || varint(bit length) || data`
/// zero-padded to a byte boundary. The explicit bit-length prefix separates
/// a 5-bit segment from the 8-bit segment with the same padded bytes.
pub fn mac(key: &MacKey, domain_tag: &[u8], data: &Bits) -> PartialTag {
    metrics::count_mac();
    let mut m = <Hmac<Sha256> as Mac>::new_from_slice(&key.0).expect("hmac accepts 32-byte keys");
    m.update(domain_tag);
    let mut len_prefix = Vec::with_capacity(10);
    put_varint(&mut len_prefix, data.len() as u64);
    m.update(&len_prefix);
    m.update(&data.to_bytes());
    let full = m.finalize().into_bytes();
    let mut out = [0u8; TAG_LEN];
    out.copy_from_slice(&full[..TAG_LEN]);
    PartialTag(out)
}

/// XORs `data` with the AES-256-CTR keystream for `(nonce, context_index)`,
/// starting `bit_offset` bits into that stream. Involutive and
/// length-preserving; the same (key, nonce, context, offset range) must never
/// cover two different plaintexts.
///
/// IV layout per 16-byte counter block:
/// `label(4) || epoch(2) || sequence(6) || context_index(1) || block(3)`.
pub fn keystream_xor(
    key: &StreamKey,
    nonce: Nonce,
    context_index: u8,
    bit_offset: u64,
    data: &Bits,
) -> Result<Bits, CryptoError> {
    let len = data.len() as u64;
    if bit_offset + len > MAX_KEYSTREAM_BITS {
        return Err(CryptoError::KeystreamSpan {
            offset: bit_offset,
            len,
        });
    }
    if data.is_empty() {
        return Ok(data.clone());
    }

    let first_block = bit_offset / 128;
    let last_block = (bit_offset + len - 1) / 128;
    let nblocks = (last_block - first_block + 1) as usize;
    metrics::count_cipher_blocks(nblocks as u64);

    let cipher = Aes256::new_from_slice(&key.0).expect("aes-256 accepts 32-byte keys");
    let mut stream = Vec::with_capacity(nblocks * 16);
    for block_index in first_block..=last_block {
        let mut block = [0u8; 16];
        block[..4].copy_from_slice(&IV_LABEL);
        block[4..6].copy_from_slice(&nonce.epoch.to_be_bytes());
        block[6..12].copy_from_slice(&nonce.sequence.to_be_bytes()[2..]);
        block[12] = context_index;
        block[13..16].copy_from_slice(&(block_index as u32).to_be_bytes()[1..]);
        cipher.encrypt_block((&mut block).into());
        stream.extend_from_slice(&block);
    }

    let skip = (bit_offset - first_block * 128) as usize;
    let pad = Bits::from_bytes(&stream).slice(skip..skip + data.len());
    Ok(data.xor(&pad))
}

/// HKDF-SHA256 with the length-prefixed concatenation of `labels` as info.
/// Distinct label lists produce independent keys.
pub fn kdf(secret: &[u8], labels: &[&[u8]]) -> Result<[u8; 32], CryptoError> {
    if secret.is_empty() {
        return Err(CryptoError::EmptySecret);
    }
    metrics::count_kdf();
    let mut info = Vec::new();
    for label in labels {
        put_varint(&mut info, label.len() as u64);
        info.extend_from_slice(label);
    }
    let hk = Hkdf::<Sha256>::new(None, secret);
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm).expect("32 bytes is a valid hkdf length");
    Ok(okm)
}

pub fn kdf_mac_key(secret: &[u8], labels: &[&[u8]]) -> Result<MacKey, CryptoError> {
    Ok(MacKey(kdf(secret, labels)?))
}

pub fn kdf_stream_key(secret: &[u8], labels: &[&[u8]]) -> Result<StreamKey, CryptoError> {
    Ok(StreamKey(kdf(secret, labels)?))
}

/// Per-thread primitive invocation counters.
///
/// Counters are monotone within a thread; callers snapshot before and after
/// an operation and diff. Scenario runs are single-threaded, so per-hop call
/// counts fall out directly.
pub mod metrics {
    use std::cell::Cell;

    thread_local! {
        static MAC_CALLS: Cell<u64> = const { Cell::new(0) };
        static CIPHER_BLOCKS: Cell<u64> = const { Cell::new(0) };
        static KDF_CALLS: Cell<u64> = const { Cell::new(0) };
    }

    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
    pub struct PrimitiveCounts {
        pub mac_calls: u64,
        pub cipher_blocks: u64,
        pub kdf_calls: u64,
    }

    impl PrimitiveCounts {
        pub fn delta_since(self, earlier: PrimitiveCounts) -> PrimitiveCounts {
            PrimitiveCounts {
                mac_calls: self.mac_calls - earlier.mac_calls,
                cipher_blocks: self.cipher_blocks - earlier.cipher_blocks,
                kdf_calls: self.kdf_calls - earlier.kdf_calls,
            }
        }
    }

    pub fn snapshot() -> PrimitiveCounts {
        PrimitiveCounts {
            mac_calls: MAC_CALLS.with(Cell::get),
            cipher_blocks: CIPHER_BLOCKS.with(Cell::get),
            kdf_calls: KDF_CALLS.with(Cell::get),
        }
    }

    pub(super) fn count_mac() {
        MAC_CALLS.with(|c| c.set(c.get() + 1));
    }

    pub(super) fn count_cipher_blocks(n: u64) {
        CIPHER_BLOCKS.with(|c| c.set(c.get() + n));
    }

    pub(super) fn count_kdf() {
        KDF_CALLS.with(|c| c.set(c.get() + 1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_mac_key(fill: u8) -> MacKey {
        MacKey::from_bytes([fill; 32])
    }

    fn test_stream_key(fill: u8) -> StreamKey {
        StreamKey::from_bytes([fill; 32])
    }

    #[test]
    fn mac_is_deterministic() {
        let k = test_mac_key(7);
        let d = domain::record_segment(Nonce::new(1, 42), 0);
        let m = Bits::from_bytes(&[0xaa, 0xbb]);
        assert_eq!(mac(&k, &d, &m), mac(&k, &d, &m));
    }

    #[test]
    fn mac_separates_bit_lengths() {
        // 5-bit 10110 vs 8-bit 10110000: identical padded bytes, different
        // canonical encodings because of the length prefix.
        let five = Bits::from_bytes_exact(&[0b1011_0000], 5).unwrap();
        let eight = Bits::from_bytes(&[0b1011_0000]);
        assert_eq!(five.to_bytes(), eight.to_bytes());

        let encode = |b: &Bits| {
            let mut e = Vec::new();
            put_varint(&mut e, b.len() as u64);
            e.extend_from_slice(&b.to_bytes());
            e
        };
        assert_ne!(encode(&five), encode(&eight));

        let k = test_mac_key(1);
        let d = domain::record_segment(Nonce::new(0, 0), 0);
        assert_ne!(mac(&k, &d, &five), mac(&k, &d, &eight));
    }

    #[test]
    fn tag_xor_cancels() {
        let k1 = test_mac_key(1);
        let k2 = test_mac_key(2);
        let d = domain::record_segment(Nonce::new(3, 9), 1);
        let m = Bits::from_bytes(b"segment");
        let t1 = mac(&k1, &d, &m);
        let t2 = mac(&k2, &d, &m);
        assert_eq!(t1.xor(t2).xor(t1), t2);
        assert_eq!(t1.xor(t1), PartialTag::ZERO);
        assert_eq!(t1.xor(t2), t2.xor(t1));
    }

    #[test]
    fn keystream_is_involutive_and_length_preserving() {
        let k = test_stream_key(9);
        let n = Nonce::new(2, 77);
        for len in [1usize, 5, 8, 100, 256] {
            let m: Bits = (0..len).map(|i| i % 3 == 0).collect();
            let c = keystream_xor(&k, n, 4, 0, &m).unwrap();
            assert_eq!(c.len(), m.len());
            assert_eq!(keystream_xor(&k, n, 4, 0, &c).unwrap(), m);
        }
    }

    #[test]
    fn keystream_offsets_are_contiguous() {
        // Encrypting two chunks at contiguous offsets must equal one call
        // over the concatenation.
        let k = test_stream_key(3);
        let n = Nonce::new(1, 5);
        let m = Bits::from_bytes(&[0x01, 0x23, 0x45, 0x67, 0x89]);
        let whole = keystream_xor(&k, n, 0, 0, &m).unwrap();

        let head = keystream_xor(&k, n, 0, 0, &m.slice(0..13)).unwrap();
        let tail = keystream_xor(&k, n, 0, 13, &m.slice(13..40)).unwrap();
        let mut joined = head;
        joined.extend(&tail);
        assert_eq!(joined, whole);
    }

    #[test]
    fn keystream_span_overflow_rejected() {
        let k = test_stream_key(0);
        let m = Bits::from_bytes(&[0u8; 2]);
        let err = keystream_xor(&k, Nonce::new(0, 0), 0, MAX_KEYSTREAM_BITS - 8, &m).unwrap_err();
        assert!(matches!(err, CryptoError::KeystreamSpan { .. }));
    }

    #[test]
    fn distinct_contexts_use_distinct_keystreams() {
        let k = test_stream_key(5);
        let n = Nonce::new(0, 1);
        let m = Bits::from_bytes(&[0u8; 16]);
        let c0 = keystream_xor(&k, n, 0, 0, &m).unwrap();
        let c1 = keystream_xor(&k, n, 1, 0, &m).unwrap();
        assert_ne!(c0, c1);
    }

    #[test]
    fn kdf_separates_labels() {
        let s = b"shared secret";
        let nonce = b"nonce";
        let enc0 = kdf(s, &[nonce, &[0], b"encrypt"]).unwrap();
        let enc1 = kdf(s, &[nonce, &[1], b"encrypt"]).unwrap();
        assert_ne!(enc0, enc1);

        let read = kdf(s, &[nonce, &[2], &[1], b"read"]).unwrap();
        let write = kdf(s, &[nonce, &[2], &[1], b"write"]).unwrap();
        assert_ne!(read, write);
    }

    #[test]
    fn kdf_rejects_empty_secret() {
        assert_eq!(kdf(b"", &[b"x"]).unwrap_err(), CryptoError::EmptySecret);
    }

    #[test]
    fn metrics_count_calls() {
        let before = metrics::snapshot();
        let k = test_mac_key(0);
        let _ = mac(&k, &[0], &Bits::from_bytes(&[1]));
        let _ = mac(&k, &[0], &Bits::from_bytes(&[2]));
        let d = metrics::snapshot().delta_since(before);
        assert_eq!(d.mac_calls, 2);
    }
}
