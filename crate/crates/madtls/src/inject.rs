//! Limited message injection through pre-authenticated templates.
//!
//! A template is a record skeleton the sending endpoint authorizes in
//! advance: some segments are fixed (their ciphertext issued with the
//! template), the rest are placeholders a designated middlebox may fill.
//! Injected records ride content type 0x1f under their own epoch, allocated
//! from the top of the epoch space downward, so their sequence numbers never
//! interact with the regular stream.
//!
//! Per sequence number the endpoint pre-issues one base tag: the aggregated
//! tag of the template's skeleton (fixed ciphertext, all-zero placeholder
//! bits) as it would stand just in front of the injector — keyed by the
//! nearest upstream owners of each context, entities before the injector
//! never see injected traffic. Filling a placeholder is a plain write-access
//! rotation from the zero skeleton to the injected ciphertext, so the
//! receiver and all downstream middleboxes verify injected records exactly
//! like regular ones. Extending a template's budget only ships new base
//! tags, never the template itself.
//!
//! Fixed segments are encrypted once, under sequence 0 of the injection
//! epoch (injectable sequences start at 1); placeholders are encrypted under
//! the record's own sequence. The two groups never share a context — a
//! placeholder context is writable by exactly the injector, a fixed context
//! must not be — so their keystreams stay disjoint.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use thiserror::Error;

use crate::access::{
    Access, AccessError, AccessRights, ContextId, EncKeys, EntityId, KeyKind, KeyMatrix,
    SegmentationInfo, TemplateTable,
};
use crate::bits::Bits;
use crate::crypto::{domain, keystream_xor, mac, CryptoError, MacKey, Nonce, PartialTag, TAG_LEN};
use crate::record::{join_segments, split_segments, RecordError};
use crate::tag::{AggregatedTag, TagError};
use crate::wire::{put_u16, put_u48, Reader, WireError};

/// Sequence 0 of an injection epoch keys the fixed segments' keystream and
/// is never injectable.
pub const TEMPLATE_SEQUENCE: u64 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InjectError {
    #[error("injection epoch space exhausted")]
    EpochExhausted,
    #[error("sequence {0} already consumed")]
    SequenceReused(u64),
    #[error("sequence {0} has no pre-issued tag")]
    SequenceNotIssued(u64),
    #[error("sequence range overlaps already issued tags")]
    OverlappingRange,
    #[error("sequence 0 is reserved for the template itself")]
    ReservedSequence,
    #[error("placeholder context {0} is not writable by the injector")]
    PlaceholderNotWritable(u8),
    #[error("placeholder context {0} is writable by another middlebox")]
    PlaceholderSharedWriter(u8),
    #[error("fixed context {0} is writable by the injector")]
    FixedWritableByInjector(u8),
    #[error("segment {segment} value is {got} bits, expected {expected}")]
    ValueLength {
        segment: usize,
        expected: u32,
        got: usize,
    },
    #[error("no value supplied for placeholder segment {0}")]
    MissingValue(usize),
    #[error("value supplied for non-placeholder segment {0}")]
    UnexpectedValue(usize),
    #[error("kinds list does not match the layout")]
    KindsMismatch,
    #[error("missing plaintext for fixed segment {0}")]
    MissingFixedPlaintext(usize),
    #[error("unknown template {0}")]
    UnknownTemplate(u8),
    #[error("control message failed authentication")]
    ControlAuthFailure,
    #[error("unknown control message type {0}")]
    UnknownControlType(u8),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Fixed,
    Placeholder,
}

/// A pre-authenticated message skeleton plus its tag budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageTemplate {
    pub template_id: u8,
    pub layout: SegmentationInfo,
    pub kinds: Vec<SegmentKind>,
    pub injector: EntityId,
    pub epoch: u16,
    /// Ciphertext of the fixed segments, encrypted under sequence 0.
    pub fixed_ciphertext: BTreeMap<usize, Bits>,
    /// Pre-issued base tags by sequence number.
    pub base_tags: BTreeMap<u64, AggregatedTag>,
    consumed: BTreeSet<u64>,
}

impl MessageTemplate {
    pub fn highest_issued(&self) -> Option<u64> {
        self.base_tags.keys().next_back().copied()
    }

    /// Marks `sequence` consumed and hands out its base tag. Each pre-issued
    /// tag is usable exactly once.
    pub fn consume(&mut self, sequence: u64) -> Result<AggregatedTag, InjectError> {
        if self.consumed.contains(&sequence) {
            return Err(InjectError::SequenceReused(sequence));
        }
        let tag = *self
            .base_tags
            .get(&sequence)
            .ok_or(InjectError::SequenceNotIssued(sequence))?;
        self.consumed.insert(sequence);
        Ok(tag)
    }

    pub fn placeholder_segments(&self) -> impl Iterator<Item = usize> + '_ {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == SegmentKind::Placeholder)
            .map(|(i, _)| i)
    }

    pub fn fixed_segments(&self) -> impl Iterator<Item = usize> + '_ {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == SegmentKind::Fixed)
            .map(|(i, _)| i)
    }

    /// The zero-placeholder skeleton the base tags cover.
    pub fn skeleton(&self) -> Vec<Bits> {
        self.layout
            .segments()
            .iter()
            .enumerate()
            .map(|(i, seg)| match self.kinds[i] {
                SegmentKind::Fixed => self.fixed_ciphertext[&i].clone(),
                SegmentKind::Placeholder => Bits::zeros(seg.bits as usize),
            })
            .collect()
    }
}

/// Hands out injection epochs from the top of the 16-bit space downward.
/// Regular epochs grow upward from 1, so the two spaces stay disjoint as
/// long as allocation stays above the current regular epoch.
#[derive(Clone, Debug)]
pub struct EpochAllocator {
    next: u16,
}

impl Default for EpochAllocator {
    fn default() -> Self {
        Self::new()
    }
}

impl EpochAllocator {
    pub fn new() -> Self {
        Self { next: u16::MAX }
    }

    pub fn allocate(&mut self, regular_epoch: u16) -> Result<u16, InjectError> {
        if self.next <= regular_epoch {
            return Err(InjectError::EpochExhausted);
        }
        let epoch = self.next;
        self.next -= 1;
        Ok(epoch)
    }
}

fn validate_kinds(
    layout: &SegmentationInfo,
    kinds: &[SegmentKind],
    rights: &AccessRights,
    injector: EntityId,
) -> Result<(), InjectError> {
    if kinds.len() != layout.segment_count() {
        return Err(InjectError::KindsMismatch);
    }
    for (i, seg) in layout.segments().iter().enumerate() {
        let ctx = seg.context;
        match kinds[i] {
            SegmentKind::Placeholder => {
                if rights.get(ctx, injector) != Some(Access::Write) {
                    return Err(InjectError::PlaceholderNotWritable(ctx.index()));
                }
                for (c, mbx, access) in rights.entries() {
                    if c == ctx && mbx != injector && access == Access::Write {
                        return Err(InjectError::PlaceholderSharedWriter(ctx.index()));
                    }
                }
            }
            SegmentKind::Fixed => {
                if rights.get(ctx, injector) == Some(Access::Write) {
                    return Err(InjectError::FixedWritableByInjector(ctx.index()));
                }
            }
        }
    }
    Ok(())
}

/// The key of the nearest owner strictly before `entity`, walking down from
/// `entity - 1`; the sender's keys make this total.
fn upstream_key<'a>(
    matrix: &'a KeyMatrix,
    ctx: ContextId,
    entity: EntityId,
    kind: KeyKind,
) -> Result<&'a MacKey, AccessError> {
    for j in (0..entity.index()).rev() {
        if let Some(key) = matrix.key(ctx, EntityId(j), kind) {
            return Ok(key);
        }
    }
    Err(AccessError::UnknownContext(ctx.index()))
}

/// Endpoint-side template issuance: encrypts the fixed segments, then
/// pre-computes one base tag per sequence in `sequences` over the skeleton,
/// keyed as the aggregate would stand arriving at the injector.
#[allow(clippy::too_many_arguments)]
pub fn issue_template(
    matrix: &KeyMatrix,
    rights: &AccessRights,
    template_id: u8,
    layout: &SegmentationInfo,
    kinds: Vec<SegmentKind>,
    injector: EntityId,
    epoch: u16,
    fixed_plaintext: &BTreeMap<usize, Bits>,
    sequences: Range<u64>,
) -> Result<MessageTemplate, InjectError> {
    validate_kinds(layout, &kinds, rights, injector)?;
    if sequences.start == TEMPLATE_SEQUENCE {
        return Err(InjectError::ReservedSequence);
    }

    let template_nonce = Nonce::new(epoch, TEMPLATE_SEQUENCE);
    let mut fixed_ciphertext = BTreeMap::new();
    for (i, seg) in layout.segments().iter().enumerate() {
        if kinds[i] != SegmentKind::Fixed {
            continue;
        }
        let plain = fixed_plaintext
            .get(&i)
            .ok_or(InjectError::MissingFixedPlaintext(i))?;
        if plain.len() != seg.bits as usize {
            return Err(InjectError::ValueLength {
                segment: i,
                expected: seg.bits,
                got: plain.len(),
            });
        }
        let key = matrix
            .enc_key(seg.context)
            .ok_or(AccessError::UnknownContext(seg.context.index()))?;
        let ct = keystream_xor(
            key,
            template_nonce,
            seg.context.index(),
            layout.context_bit_offset(i),
            plain,
        )?;
        fixed_ciphertext.insert(i, ct);
    }

    let mut template = MessageTemplate {
        template_id,
        layout: layout.clone(),
        kinds,
        injector,
        epoch,
        fixed_ciphertext,
        base_tags: BTreeMap::new(),
        consumed: BTreeSet::new(),
    };
    extend_template(matrix, &mut template, sequences)?;
    Ok(template)
}

/// Pre-issues base tags for further sequences of an existing template.
pub fn extend_template(
    matrix: &KeyMatrix,
    template: &mut MessageTemplate,
    sequences: Range<u64>,
) -> Result<(), InjectError> {
    if sequences.start == TEMPLATE_SEQUENCE {
        return Err(InjectError::ReservedSequence);
    }
    if sequences.clone().any(|s| template.base_tags.contains_key(&s)) {
        return Err(InjectError::OverlappingRange);
    }
    let skeleton = template.skeleton();
    for sequence in sequences {
        let nonce = Nonce::new(template.epoch, sequence);
        let mut tag = PartialTag::ZERO;
        for (i, seg) in template.layout.segments().iter().enumerate() {
            let d = domain::record_segment(nonce, i as u8);
            let read_key = upstream_key(matrix, seg.context, template.injector, KeyKind::Read)?;
            let write_key = upstream_key(matrix, seg.context, template.injector, KeyKind::Write)?;
            tag.xor_assign(mac(read_key, &d, &skeleton[i]));
            tag.xor_assign(mac(write_key, &d, &skeleton[i]));
        }
        template.base_tags.insert(sequence, AggregatedTag(tag));
    }
    Ok(())
}

/// Injector-side placeholder encryption. Returns the full ciphertext segment
/// vector: fixed segments from the template, placeholders fresh under this
/// record's sequence.
pub fn fill_placeholders(
    keys: &impl EncKeys,
    template: &MessageTemplate,
    sequence: u64,
    values: &BTreeMap<usize, Bits>,
) -> Result<Vec<Bits>, InjectError> {
    let nonce = Nonce::new(template.epoch, sequence);
    let mut segments = template.skeleton();
    for (&i, _) in values.iter() {
        if template.kinds.get(i) != Some(&SegmentKind::Placeholder) {
            return Err(InjectError::UnexpectedValue(i));
        }
    }
    for i in template.placeholder_segments() {
        let seg = template.layout.segments()[i];
        let value = values.get(&i).ok_or(InjectError::MissingValue(i))?;
        if value.len() != seg.bits as usize {
            return Err(InjectError::ValueLength {
                segment: i,
                expected: seg.bits,
                got: value.len(),
            });
        }
        let key = keys
            .enc_key(seg.context)
            .ok_or(AccessError::UnknownContext(seg.context.index()))?;
        segments[i] = keystream_xor(
            key,
            nonce,
            seg.context.index(),
            template.layout.context_bit_offset(i),
            value,
        )?;
    }
    Ok(segments)
}

/// Decrypts an injected record: fixed segments under the template sequence,
/// placeholders under the record's own. Only segments with an available key
/// appear in the result.
pub fn decrypt_injected_for(
    keys: &impl EncKeys,
    ciphertext: &Bits,
    layout: &SegmentationInfo,
    kinds: &[SegmentKind],
    epoch: u16,
    sequence: u64,
) -> Result<BTreeMap<usize, Bits>, InjectError> {
    if kinds.len() != layout.segment_count() {
        return Err(InjectError::KindsMismatch);
    }
    let segments = split_segments(ciphertext, layout)?;
    let mut out = BTreeMap::new();
    for (i, seg) in segments.iter().enumerate() {
        let ctx = layout.segments()[i].context;
        let Some(key) = keys.enc_key(ctx) else {
            continue;
        };
        let nonce = match kinds[i] {
            SegmentKind::Fixed => Nonce::new(epoch, TEMPLATE_SEQUENCE),
            SegmentKind::Placeholder => Nonce::new(epoch, sequence),
        };
        out.insert(
            i,
            keystream_xor(key, nonce, ctx.index(), layout.context_bit_offset(i), seg)?,
        );
    }
    Ok(out)
}

/// Session control messages carried in 0x1d records, authenticated under the
/// injector's key-distribution key (which the receiver derives on its own).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ControlMessage {
    /// Announces a template: its id (the layout must already be in the
    /// session's table), injection epoch, injector, segment kinds, and the
    /// fixed segments' ciphertext.
    RegisterTemplate {
        template_id: u8,
        epoch: u16,
        injector: EntityId,
        kinds: Vec<SegmentKind>,
        fixed_ciphertext: BTreeMap<usize, Bits>,
    },
    /// Ships base tags for sequences `start..start + tags.len()`.
    TagRange {
        template_id: u8,
        start: u64,
        tags: Vec<PartialTag>,
    },
}

const CONTROL_REGISTER: u8 = 1;
const CONTROL_TAG_RANGE: u8 = 2;

pub fn encode_control(msg: &ControlMessage, kd: &MacKey, nonce: Nonce) -> Vec<u8> {
    let mut body = Vec::new();
    match msg {
        ControlMessage::RegisterTemplate {
            template_id,
            epoch,
            injector,
            kinds,
            fixed_ciphertext,
        } => {
            body.push(CONTROL_REGISTER);
            body.push(*template_id);
            put_u16(&mut body, *epoch);
            body.push(injector.index());
            body.push(kinds.len() as u8);
            let mut bitmap = vec![0u8; kinds.len().div_ceil(8)];
            for (i, kind) in kinds.iter().enumerate() {
                if *kind == SegmentKind::Placeholder {
                    bitmap[i / 8] |= 0x80 >> (i % 8);
                }
            }
            body.extend_from_slice(&bitmap);
            for ct in fixed_ciphertext.values() {
                body.extend_from_slice(&ct.to_bytes());
            }
        }
        ControlMessage::TagRange {
            template_id,
            start,
            tags,
        } => {
            body.push(CONTROL_TAG_RANGE);
            body.push(*template_id);
            put_u48(&mut body, *start);
            put_u16(&mut body, tags.len() as u16);
            for tag in tags {
                body.extend_from_slice(tag.as_bytes());
            }
        }
    }
    let tag = mac(kd, &domain::control(nonce), &Bits::from_bytes(&body));
    body.extend_from_slice(tag.as_bytes());
    body
}

/// Decodes a control payload. With `kd` present the MAC is enforced;
/// middleboxes other than the injector pass `None` and treat the content as
/// advisory.
pub fn decode_control(
    payload: &[u8],
    templates: &TemplateTable,
    kd: Option<&MacKey>,
    nonce: Nonce,
) -> Result<ControlMessage, InjectError> {
    if payload.len() < TAG_LEN {
        return Err(InjectError::Wire(WireError::Truncated {
            needed: TAG_LEN - payload.len(),
        }));
    }
    let (body, tag_bytes) = payload.split_at(payload.len() - TAG_LEN);
    if let Some(kd) = kd {
        let expected = mac(kd, &domain::control(nonce), &Bits::from_bytes(body));
        if expected.as_bytes() != tag_bytes {
            return Err(InjectError::ControlAuthFailure);
        }
    }
    let mut r = Reader::new(body);
    let msg = match r.u8()? {
        CONTROL_REGISTER => {
            let template_id = r.u8()?;
            let epoch = r.u16()?;
            let injector = EntityId(r.u8()?);
            let count = usize::from(r.u8()?);
            let bitmap = r.take(count.div_ceil(8))?.to_vec();
            let kinds: Vec<SegmentKind> = (0..count)
                .map(|i| {
                    if bitmap[i / 8] & (0x80 >> (i % 8)) != 0 {
                        SegmentKind::Placeholder
                    } else {
                        SegmentKind::Fixed
                    }
                })
                .collect();
            let layout = templates
                .get(template_id)
                .ok_or(InjectError::UnknownTemplate(template_id))?;
            if kinds.len() != layout.segment_count() {
                return Err(InjectError::KindsMismatch);
            }
            let mut fixed_ciphertext = BTreeMap::new();
            for (i, kind) in kinds.iter().enumerate() {
                if *kind != SegmentKind::Fixed {
                    continue;
                }
                let bits = layout.segments()[i].bits as usize;
                let bytes = r.take(bits.div_ceil(8))?;
                let ct = Bits::from_bytes_exact(bytes, bits)
                    .ok_or(InjectError::Record(RecordError::PaddingBits))?;
                fixed_ciphertext.insert(i, ct);
            }
            ControlMessage::RegisterTemplate {
                template_id,
                epoch,
                injector,
                kinds,
                fixed_ciphertext,
            }
        }
        CONTROL_TAG_RANGE => {
            let template_id = r.u8()?;
            let start = r.u48()?;
            let count = usize::from(r.u16()?);
            let mut tags = Vec::with_capacity(count);
            for _ in 0..count {
                let mut tag = [0u8; TAG_LEN];
                tag.copy_from_slice(r.take(TAG_LEN)?);
                tags.push(PartialTag(tag));
            }
            ControlMessage::TagRange {
                template_id,
                start,
                tags,
            }
        }
        other => return Err(InjectError::UnknownControlType(other)),
    };
    r.finish()?;
    Ok(msg)
}

/// Reassembles a template on the consuming side from its registration and
/// tag ranges.
pub fn template_from_control(
    registration: &ControlMessage,
    templates: &TemplateTable,
) -> Result<MessageTemplate, InjectError> {
    match registration {
        ControlMessage::RegisterTemplate {
            template_id,
            epoch,
            injector,
            kinds,
            fixed_ciphertext,
        } => {
            let layout = templates
                .get(*template_id)
                .ok_or(InjectError::UnknownTemplate(*template_id))?
                .clone();
            Ok(MessageTemplate {
                template_id: *template_id,
                layout,
                kinds: kinds.clone(),
                injector: *injector,
                epoch: *epoch,
                fixed_ciphertext: fixed_ciphertext.clone(),
                base_tags: BTreeMap::new(),
                consumed: BTreeSet::new(),
            })
        }
        ControlMessage::TagRange { .. } => Err(InjectError::UnknownControlType(CONTROL_TAG_RANGE)),
    }
}

pub fn absorb_tag_range(
    template: &mut MessageTemplate,
    msg: &ControlMessage,
) -> Result<(), InjectError> {
    match msg {
        ControlMessage::TagRange { start, tags, .. } => {
            for (offset, tag) in tags.iter().enumerate() {
                template
                    .base_tags
                    .insert(start + offset as u64, AggregatedTag(*tag));
            }
            Ok(())
        }
        ControlMessage::RegisterTemplate { .. } => {
            Err(InjectError::UnknownControlType(CONTROL_REGISTER))
        }
    }
}

/// Convenience for tests and the simulator: the injected record's full
/// ciphertext as one bit string.
pub fn assemble_ciphertext(segments: &[Bits]) -> Bits {
    join_segments(segments)
}
