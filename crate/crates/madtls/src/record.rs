//! Record encoding and segment encryption.
//!
//! The record keeps the DTLS 1.2 header (content type, version, epoch,
//! 48-bit sequence number, length) and inserts a single segmentation-info
//! byte behind it: bit 7 is the `m` flag (middlebox tags present), bit 6 the
//! `l` flag (layout carried inline), bits 0-5 a template id into the
//! session's pre-exchanged table. The payload is the ciphertext (bit string,
//! zero-padded to a byte boundary), followed by any per-middlebox tags as
//! `(entity, tag)` pairs in ascending entity order, and the 16-byte
//! aggregated tag. Against a plain DTLS 1.2 record with a 16-byte tag, a
//! template-addressed record costs exactly one extra byte.

use std::collections::BTreeMap;
use thiserror::Error;

use crate::access::{AccessError, EncKeys, EntityId, SegmentationInfo, TemplateTable};
use crate::bits::Bits;
use crate::crypto::{keystream_xor, CryptoError, Nonce, PartialTag, TAG_LEN};
use crate::wire::{put_u16, put_u48, put_varint, Reader, WireError};

pub mod content_type {
    /// Standard DTLS handshake messages.
    pub const HANDSHAKE: u8 = 0x16;
    /// Standard DTLS change-cipher-spec.
    pub const CHANGE_CIPHER_SPEC: u8 = 0x14;
    /// Session control records carrying template registrations and
    /// pre-issued tag streams.
    pub const TAG_STREAM: u8 = 0x1d;
    /// Protected application data.
    pub const DATA: u8 = 0x1e;
    /// Middlebox-injected messages under a dedicated epoch.
    pub const INJECTED: u8 = 0x1f;

    pub fn is_protected(ct: u8) -> bool {
        matches!(ct, TAG_STREAM..=INJECTED)
    }
}

/// DTLS 1.2 on the wire.
pub const VERSION: [u8; 2] = [0xfe, 0xfd];

/// Fixed header bytes before the payload: type, version, epoch, sequence,
/// length.
pub const HEADER_LEN: usize = 13;

/// Header, segmentation byte, and aggregated tag: the floor for any
/// protected record.
pub const MIN_PROTECTED_LEN: usize = HEADER_LEN + 1 + TAG_LEN;

/// Wire size of a plain DTLS 1.2 record carrying `payload_bytes` of data and
/// a 16-byte authentication tag; the baseline for overhead comparisons.
pub fn dtls12_record_size(payload_bytes: usize) -> usize {
    HEADER_LEN + payload_bytes + TAG_LEN
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("content type {0:#04x} is not a protected record; ignore")]
    NotProtected(u8),
    #[error("unknown template id {0}")]
    UnknownTemplate(u8),
    #[error("record version mismatch")]
    BadVersion,
    #[error("length field says {declared} bytes, record carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("ciphertext is {got} bits but the layout describes {expected}")]
    LayoutMismatch { expected: u64, got: u64 },
    #[error("nonzero padding bits after the ciphertext")]
    PaddingBits,
    #[error("inline layout is malformed")]
    MalformedLayout,
    #[error("middlebox tags present without the m flag")]
    UnexpectedMiddleboxTags,
    #[error("middlebox tags not in ascending entity order")]
    TagOrder,
    #[error("trailing bytes do not form (entity, tag) pairs")]
    MalformedTagBlock,
    #[error("no encryption key for context {0}")]
    MissingEncKey(u8),
    #[error("record exceeds the 16-bit length field")]
    Oversized,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Access(#[from] AccessError),
}

/// How a record communicates its segmentation: by 6-bit template id or by an
/// inline layout encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayoutRef {
    Template(u8),
    Explicit(SegmentationInfo),
}

/// A protected record before encoding / after decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtectedRecord {
    pub content_type: u8,
    pub nonce: Nonce,
    pub m_flag: bool,
    pub layout_ref: LayoutRef,
    pub ciphertext: Bits,
    /// Per-middlebox verification tags, ascending by target entity.
    pub selfverify_tags: Vec<(EntityId, PartialTag)>,
    pub main_tag: PartialTag,
}

/// Inline layout encoding: segment count, then per segment a varint bit
/// length and a context byte.
pub fn encode_layout(layout: &SegmentationInfo) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(layout.segment_count() as u8);
    for seg in layout.segments() {
        put_varint(&mut out, u64::from(seg.bits));
        out.push(seg.context.index());
    }
    out
}

pub fn decode_layout(r: &mut Reader<'_>) -> Result<SegmentationInfo, RecordError> {
    let n = r.u8()?;
    let mut pairs = Vec::with_capacity(usize::from(n));
    for _ in 0..n {
        let bits = r.varint()?;
        let ctx = r.u8()?;
        pairs.push((bits as u32, ctx));
    }
    SegmentationInfo::from_pairs(&pairs).map_err(|_| RecordError::MalformedLayout)
}

pub fn encode_record(record: &ProtectedRecord) -> Result<Vec<u8>, RecordError> {
    if !record.m_flag && !record.selfverify_tags.is_empty() {
        return Err(RecordError::UnexpectedMiddleboxTags);
    }
    if !record
        .selfverify_tags
        .windows(2)
        .all(|w| w[0].0 < w[1].0)
    {
        return Err(RecordError::TagOrder);
    }

    let mut seg_byte = 0u8;
    if record.m_flag {
        seg_byte |= 0x80;
    }
    let mut layout_bytes = Vec::new();
    match &record.layout_ref {
        LayoutRef::Template(id) => {
            debug_assert!(*id < 64);
            seg_byte |= id & 0x3f;
        }
        LayoutRef::Explicit(layout) => {
            seg_byte |= 0x40;
            layout_bytes = encode_layout(layout);
        }
    }

    let ct_bytes = record.ciphertext.to_bytes();
    let body_len = 1 + layout_bytes.len() + ct_bytes.len()
        + record.selfverify_tags.len() * (1 + TAG_LEN)
        + TAG_LEN;
    if body_len > usize::from(u16::MAX) {
        return Err(RecordError::Oversized);
    }

    let mut out = Vec::with_capacity(HEADER_LEN + body_len);
    out.push(record.content_type);
    out.extend_from_slice(&VERSION);
    put_u16(&mut out, record.nonce.epoch);
    put_u48(&mut out, record.nonce.sequence);
    put_u16(&mut out, body_len as u16);
    out.push(seg_byte);
    out.extend_from_slice(&layout_bytes);
    out.extend_from_slice(&ct_bytes);
    for (entity, tag) in &record.selfverify_tags {
        out.push(entity.index());
        out.extend_from_slice(tag.as_bytes());
    }
    out.extend_from_slice(record.main_tag.as_bytes());
    Ok(out)
}

/// Decodes a protected record, resolving the layout through `templates` when
/// the record addresses one by id.
pub fn decode_record(
    wire: &[u8],
    templates: &TemplateTable,
) -> Result<(ProtectedRecord, SegmentationInfo), RecordError> {
    let mut r = Reader::new(wire);
    let content_type = r.u8()?;
    if !content_type::is_protected(content_type) {
        return Err(RecordError::NotProtected(content_type));
    }
    if r.take(2)? != VERSION {
        return Err(RecordError::BadVersion);
    }
    let epoch = r.u16()?;
    let sequence = r.u48()?;
    let declared = usize::from(r.u16()?);
    if declared != r.remaining() {
        return Err(RecordError::LengthMismatch {
            declared,
            actual: r.remaining(),
        });
    }

    let seg_byte = r.u8()?;
    let m_flag = seg_byte & 0x80 != 0;
    let l_flag = seg_byte & 0x40 != 0;
    let (layout_ref, layout) = if l_flag {
        let layout = decode_layout(&mut r)?;
        (LayoutRef::Explicit(layout.clone()), layout)
    } else {
        let id = seg_byte & 0x3f;
        let layout = templates
            .get(id)
            .ok_or(RecordError::UnknownTemplate(id))?
            .clone();
        (LayoutRef::Template(id), layout)
    };

    let total_bits = layout.total_bits() as usize;
    let ct_bytes = r.take(total_bits.div_ceil(8))?;
    let ciphertext =
        Bits::from_bytes_exact(ct_bytes, total_bits).ok_or(RecordError::PaddingBits)?;

    let mut selfverify_tags = Vec::new();
    while r.remaining() > TAG_LEN {
        if !m_flag {
            return Err(RecordError::UnexpectedMiddleboxTags);
        }
        if r.remaining() < 1 + TAG_LEN + TAG_LEN {
            return Err(RecordError::MalformedTagBlock);
        }
        let entity = EntityId(r.u8()?);
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(r.take(TAG_LEN)?);
        if let Some((last, _)) = selfverify_tags.last() {
            if *last >= entity {
                return Err(RecordError::TagOrder);
            }
        }
        selfverify_tags.push((entity, PartialTag(tag)));
    }
    let mut main = [0u8; TAG_LEN];
    main.copy_from_slice(r.take(TAG_LEN)?);
    r.finish()?;

    Ok((
        ProtectedRecord {
            content_type,
            nonce: Nonce::new(epoch, sequence),
            m_flag,
            layout_ref,
            ciphertext,
            selfverify_tags,
            main_tag: PartialTag(main),
        },
        layout,
    ))
}

/// Unprotected record for handshake flights and change-cipher-spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlainRecord {
    pub content_type: u8,
    pub nonce: Nonce,
    pub payload: Vec<u8>,
}

pub fn encode_plain_record(record: &PlainRecord) -> Result<Vec<u8>, RecordError> {
    if record.payload.len() > usize::from(u16::MAX) {
        return Err(RecordError::Oversized);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + record.payload.len());
    out.push(record.content_type);
    out.extend_from_slice(&VERSION);
    put_u16(&mut out, record.nonce.epoch);
    put_u48(&mut out, record.nonce.sequence);
    put_u16(&mut out, record.payload.len() as u16);
    out.extend_from_slice(&record.payload);
    Ok(out)
}

pub fn decode_plain_record(wire: &[u8]) -> Result<PlainRecord, RecordError> {
    let mut r = Reader::new(wire);
    let content_type = r.u8()?;
    if r.take(2)? != VERSION {
        return Err(RecordError::BadVersion);
    }
    let epoch = r.u16()?;
    let sequence = r.u48()?;
    let declared = usize::from(r.u16()?);
    if declared != r.remaining() {
        return Err(RecordError::LengthMismatch {
            declared,
            actual: r.remaining(),
        });
    }
    let payload = r.take(declared)?.to_vec();
    Ok(PlainRecord {
        content_type,
        nonce: Nonce::new(epoch, sequence),
        payload,
    })
}

/// Splits a message into its per-segment bit strings.
pub fn split_segments(message: &Bits, layout: &SegmentationInfo) -> Result<Vec<Bits>, RecordError> {
    if message.len() as u64 != layout.total_bits() {
        return Err(RecordError::LayoutMismatch {
            expected: layout.total_bits(),
            got: message.len() as u64,
        });
    }
    (0..layout.segment_count())
        .map(|i| Ok(message.slice(layout.bit_range(i)?)))
        .collect()
}

pub fn join_segments(segments: &[Bits]) -> Bits {
    let mut out = Bits::new();
    for seg in segments {
        out.extend(seg);
    }
    out
}

/// Encrypts every segment under its context key. Requires keys for all
/// referenced contexts, so this is a sender-side operation.
pub fn encrypt_segments(
    plaintext: &Bits,
    layout: &SegmentationInfo,
    keys: &impl EncKeys,
    nonce: Nonce,
) -> Result<Bits, RecordError> {
    let segments = split_segments(plaintext, layout)?;
    let mut out = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let ctx = layout.segments()[i].context;
        let key = keys
            .enc_key(ctx)
            .ok_or(RecordError::MissingEncKey(ctx.index()))?;
        out.push(keystream_xor(
            key,
            nonce,
            ctx.index(),
            layout.context_bit_offset(i),
            seg,
        )?);
    }
    Ok(join_segments(&out))
}

/// Decrypts exactly the segments whose context key is available; everything
/// else is absent from the result. Key possession is the authorization.
pub fn decrypt_segments_for(
    keys: &impl EncKeys,
    ciphertext: &Bits,
    layout: &SegmentationInfo,
    nonce: Nonce,
) -> Result<BTreeMap<usize, Bits>, RecordError> {
    let segments = split_segments(ciphertext, layout)?;
    let mut out = BTreeMap::new();
    for (i, seg) in segments.iter().enumerate() {
        let ctx = layout.segments()[i].context;
        if let Some(key) = keys.enc_key(ctx) {
            out.insert(
                i,
                keystream_xor(key, nonce, ctx.index(), layout.context_bit_offset(i), seg)?,
            );
        }
    }
    Ok(out)
}

/// Full decryption for an entity holding every context key (the receiver).
pub fn decrypt_segments(
    keys: &impl EncKeys,
    ciphertext: &Bits,
    layout: &SegmentationInfo,
    nonce: Nonce,
) -> Result<Bits, RecordError> {
    for seg in layout.segments() {
        if keys.enc_key(seg.context).is_none() {
            return Err(RecordError::MissingEncKey(seg.context.index()));
        }
    }
    let parts = decrypt_segments_for(keys, ciphertext, layout, nonce)?;
    Ok(join_segments(&parts.into_values().collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::{derive_key_matrix, AccessRights, ContextId, KeyMatrix};
    use std::collections::BTreeMap as Map;

    fn two_context_matrix() -> KeyMatrix {
        derive_key_matrix(
            b"record tests secret",
            &Map::new(),
            b"record nonce",
            &AccessRights::new(),
            2,
            &[ContextId(0), ContextId(1)],
        )
        .unwrap()
    }

    fn sample_record(ciphertext: Bits, layout_ref: LayoutRef) -> ProtectedRecord {
        ProtectedRecord {
            content_type: content_type::DATA,
            nonce: Nonce::new(1, 7),
            m_flag: false,
            layout_ref,
            ciphertext,
            selfverify_tags: Vec::new(),
            main_tag: PartialTag([0xab; TAG_LEN]),
        }
    }

    fn table_with(id: u8, pairs: &[(u32, u8)]) -> TemplateTable {
        let mut t = TemplateTable::new();
        t.insert(id, SegmentationInfo::from_pairs(pairs).unwrap()).unwrap();
        t
    }

    #[test]
    fn template_record_costs_one_extra_byte() {
        let record = sample_record(
            Bits::from_bytes(&[0x5a; 20]),
            LayoutRef::Template(3),
        );
        let wire = encode_record(&record).unwrap();
        assert_eq!(wire.len(), 50);
        assert_eq!(wire.len(), dtls12_record_size(20) + 1);
    }

    #[test]
    fn each_middlebox_tag_costs_seventeen_bytes() {
        let mut record = sample_record(Bits::from_bytes(&[1, 2, 3]), LayoutRef::Template(0));
        let base = encode_record(&record).unwrap().len();
        record.m_flag = true;
        record.selfverify_tags.push((EntityId(1), PartialTag([9; TAG_LEN])));
        assert_eq!(encode_record(&record).unwrap().len(), base + 17);
        record.selfverify_tags.push((EntityId(2), PartialTag([8; TAG_LEN])));
        assert_eq!(encode_record(&record).unwrap().len(), base + 34);
    }

    #[test]
    fn encode_decode_round_trip() {
        let table = table_with(3, &[(96, 0), (64, 1)]);
        let mut record = sample_record(Bits::from_bytes(&[0x11; 20]), LayoutRef::Template(3));
        record.m_flag = true;
        record.selfverify_tags = vec![
            (EntityId(1), PartialTag([1; TAG_LEN])),
            (EntityId(3), PartialTag([3; TAG_LEN])),
        ];
        let wire = encode_record(&record).unwrap();
        let (decoded, layout) = decode_record(&wire, &table).unwrap();
        assert_eq!(decoded, record);
        assert_eq!(layout, *table.get(3).unwrap());
    }

    #[test]
    fn explicit_layout_round_trip() {
        // Layout carried inline, including a sub-byte segment.
        let layout = SegmentationInfo::from_pairs(&[(48, 0), (112, 1), (5, 2)]).unwrap();
        let ct: Bits = (0..165).map(|i| i % 7 == 0).collect();
        let record = sample_record(ct, LayoutRef::Explicit(layout.clone()));
        let wire = encode_record(&record).unwrap();
        let (decoded, resolved) = decode_record(&wire, &TemplateTable::new()).unwrap();
        assert_eq!(decoded, record);
        assert_eq!(resolved, layout);
    }

    #[test]
    fn unknown_template_rejected() {
        let record = sample_record(Bits::from_bytes(&[0; 4]), LayoutRef::Template(63));
        let wire = encode_record(&record).unwrap();
        let err = decode_record(&wire, &TemplateTable::new()).unwrap_err();
        assert_eq!(err, RecordError::UnknownTemplate(63));
    }

    #[test]
    fn truncation_and_bad_type_are_distinct_errors() {
        let table = table_with(0, &[(32, 0)]);
        let record = sample_record(Bits::from_bytes(&[9; 4]), LayoutRef::Template(0));
        let wire = encode_record(&record).unwrap();

        let err = decode_record(&wire[..wire.len() - 1], &table).unwrap_err();
        assert!(matches!(err, RecordError::LengthMismatch { .. }));

        let mut bad_type = wire.clone();
        bad_type[0] = 0x17;
        assert_eq!(
            decode_record(&bad_type, &table).unwrap_err(),
            RecordError::NotProtected(0x17)
        );
    }

    #[test]
    fn length_field_is_validated() {
        let table = table_with(0, &[(32, 0)]);
        let record = sample_record(Bits::from_bytes(&[9; 4]), LayoutRef::Template(0));
        let mut wire = encode_record(&record).unwrap();
        wire[12] = wire[12].wrapping_add(1);
        assert!(matches!(
            decode_record(&wire, &table).unwrap_err(),
            RecordError::LengthMismatch { .. }
        ));
    }

    #[test]
    fn set_padding_bit_rejected() {
        let layout = SegmentationInfo::from_pairs(&[(5, 0)]).unwrap();
        let ct = Bits::from_bytes_exact(&[0b1010_0000], 5).unwrap();
        let record = sample_record(ct, LayoutRef::Explicit(layout));
        let mut wire = encode_record(&record).unwrap();
        // Flip the lowest padding bit of the single ciphertext byte.
        let ct_pos = HEADER_LEN + 1 + 3;
        wire[ct_pos] |= 0x01;
        assert_eq!(
            decode_record(&wire, &TemplateTable::new()).unwrap_err(),
            RecordError::PaddingBits
        );
    }

    #[test]
    fn encryption_round_trips_per_entity_view() {
        let matrix = two_context_matrix();
        let layout = SegmentationInfo::from_pairs(&[(24, 0), (136, 1)]).unwrap();
        let msg = Bits::from_bytes(&[0x42; 20]);
        let nonce = Nonce::new(1, 99);
        let ct = encrypt_segments(&msg, &layout, &matrix, nonce).unwrap();
        assert_eq!(ct.len(), msg.len());
        assert_eq!(decrypt_segments(&matrix, &ct, &layout, nonce).unwrap(), msg);
    }

    #[test]
    fn partial_keys_yield_partial_views() {
        // An inspection entity holding only context 0's key sees only the
        // leading 24-bit segment.
        struct OneKey(crate::crypto::StreamKey);
        impl EncKeys for OneKey {
            fn enc_key(&self, context: ContextId) -> Option<&crate::crypto::StreamKey> {
                (context == ContextId(0)).then_some(&self.0)
            }
        }

        let matrix = two_context_matrix();
        let layout = SegmentationInfo::from_pairs(&[(24, 0), (136, 1)]).unwrap();
        let msg = Bits::from_bytes(&[0x42; 20]);
        let nonce = Nonce::new(1, 100);
        let ct = encrypt_segments(&msg, &layout, &matrix, nonce).unwrap();

        let partial = OneKey(matrix.enc_key(ContextId(0)).unwrap().clone());
        let view = decrypt_segments_for(&partial, &ct, &layout, nonce).unwrap();
        assert_eq!(view.len(), 1);
        assert_eq!(view[&0], msg.slice(0..24));

        struct NoKeys;
        impl EncKeys for NoKeys {
            fn enc_key(&self, _: ContextId) -> Option<&crate::crypto::StreamKey> {
                None
            }
        }
        assert!(decrypt_segments_for(&NoKeys, &ct, &layout, nonce).unwrap().is_empty());
    }

    #[test]
    fn same_plaintext_different_contexts_differs() {
        let matrix = two_context_matrix();
        let layout = SegmentationInfo::from_pairs(&[(32, 0), (32, 1)]).unwrap();
        let mut msg = Bits::from_bytes(&[0x77; 4]);
        msg.extend(&Bits::from_bytes(&[0x77; 4]));
        let ct = encrypt_segments(&msg, &layout, &matrix, Nonce::new(1, 5)).unwrap();
        assert_ne!(ct.slice(0..32), ct.slice(32..64));
    }

    #[test]
    fn shared_context_segments_use_contiguous_keystream() {
        // Two segments of one context must encrypt exactly like a single
        // segment covering both.
        let matrix = two_context_matrix();
        let nonce = Nonce::new(2, 17);
        let msg = Bits::from_bytes(&[0xc3; 8]);

        let split = SegmentationInfo::from_pairs(&[(24, 0), (40, 0)]).unwrap();
        let merged = SegmentationInfo::from_pairs(&[(64, 0)]).unwrap();
        let ct_split = encrypt_segments(&msg, &split, &matrix, nonce).unwrap();
        let ct_merged = encrypt_segments(&msg, &merged, &matrix, nonce).unwrap();
        assert_eq!(ct_split, ct_merged);
    }

    #[test]
    fn plain_record_round_trip() {
        let record = PlainRecord {
            content_type: content_type::HANDSHAKE,
            nonce: Nonce::new(0, 3),
            payload: b"hello flight".to_vec(),
        };
        let wire = encode_plain_record(&record).unwrap();
        assert_eq!(decode_plain_record(&wire).unwrap(), record);
    }
}
