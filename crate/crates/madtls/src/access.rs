//! Sessions, entities, contexts, access rights, segment layouts, and the
//! key matrix.
//!
//! A session has `e` entities on a fixed path: entity 0 is the sender,
//! entity `e-1` the receiver, everything between a middlebox. Each context
//! groups segments under one set of per-middlebox rights and one encryption
//! key. The key matrix holds one read and/or write MAC key per (context,
//! entity) according to those rights, and resolves predecessor keys: for a
//! key at entity `j`, the predecessor is the same-kind key of the nearest
//! earlier entity that owns one. The sender's keys always exist, so
//! resolution never fails; the receiver owns no keys and works entirely with
//! predecessors.

use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::crypto::{kdf_mac_key, kdf_stream_key, CryptoError, MacKey, StreamKey};

pub const MAX_CONTEXTS: u8 = 64;
pub const MAX_TEMPLATES: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccessError {
    #[error("entity {entity} holds no {kind:?} key for context {context} (access violation)")]
    AccessViolation { context: u8, entity: u8, kind: KeyKind },
    #[error("segment index {index} out of range for {segments}-segment layout")]
    SegmentOutOfRange { index: usize, segments: usize },
    #[error("context {0} is not part of this session")]
    UnknownContext(u8),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("session needs at least a sender and a receiver, got {0} entities")]
    TooFewEntities(u8),
    #[error("context id {0} exceeds the maximum of 63")]
    ContextIdRange(u8),
    #[error("at most 64 contexts per session, got {0}")]
    TooManyContexts(usize),
    #[error("template id {0} exceeds the maximum of 63")]
    TemplateIdRange(u8),
    #[error("at most 64 templates per session")]
    TooManyTemplates,
    #[error("rights entry references entity {0}, which is not a middlebox")]
    RightsForNonMiddlebox(u8),
    #[error("rights entry references undeclared context {0}")]
    RightsForUnknownContext(u8),
    #[error("layout has no segments")]
    EmptyLayout,
    #[error("layout has more than 255 segments")]
    TooManySegments,
    #[error("segment {0} has zero bit length")]
    EmptySegment(usize),
    #[error("context {0} is declared but never referenced by a template or layout")]
    UnreferencedContext(u8),
    #[error("no pre-shared key for entitled middlebox {0}")]
    MissingMiddleboxPsk(u8),
    #[error("self-verify flag set on entity {0}, which is not a middlebox")]
    SelfVerifyNonMiddlebox(u8),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Path position of a communication entity. 0 is the sender; the highest
/// index in a session is the receiver.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct EntityId(pub u8);

impl EntityId {
    pub const SENDER: EntityId = EntityId(0);

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn is_sender(self) -> bool {
        self.0 == 0
    }

    pub fn is_receiver(self, entity_count: u8) -> bool {
        self.0 == entity_count - 1
    }

    pub fn is_middlebox(self, entity_count: u8) -> bool {
        self.0 > 0 && self.0 + 1 < entity_count
    }
}

/// Index of an access context, 0..=63.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct ContextId(pub u8);

impl ContextId {
    pub fn index(self) -> u8 {
        self.0
    }
}

/// A middlebox's right on one context. Write subsumes read: a writer owns
/// both the read and the write key, and a pair is never stored as both.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Access {
    Read,
    Write,
}

/// Which of the two per-context MAC keys is meant.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum KeyKind {
    Read,
    Write,
}

/// Per-(context, middlebox) rights. The sender implicitly writes every
/// context and the receiver holds no entry.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessRights {
    map: BTreeMap<(u8, u8), Access>,
}

impl AccessRights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn grant(&mut self, context: ContextId, middlebox: EntityId, access: Access) {
        self.map.insert((context.0, middlebox.0), access);
    }

    pub fn get(&self, context: ContextId, middlebox: EntityId) -> Option<Access> {
        self.map.get(&(context.0, middlebox.0)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ContextId, EntityId, Access)> + '_ {
        self.map
            .iter()
            .map(|(&(c, m), &a)| (ContextId(c), EntityId(m), a))
    }

    /// Entities with any right, ascending.
    pub fn entitled_middleboxes(&self) -> BTreeSet<EntityId> {
        self.map.keys().map(|&(_, m)| EntityId(m)).collect()
    }

    /// True if `entity` may read `context` — sender and receiver always can,
    /// a middlebox needs read or write.
    pub fn can_read(&self, context: ContextId, entity: EntityId, entity_count: u8) -> bool {
        entity.is_sender() || entity.is_receiver(entity_count) || self.get(context, entity).is_some()
    }

    pub fn can_write(&self, context: ContextId, entity: EntityId) -> bool {
        entity.is_sender() || self.get(context, entity) == Some(Access::Write)
    }
}

/// One contiguous bit range of a message, assigned to a context.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Segment {
    pub bits: u32,
    pub context: ContextId,
}

/// Ordered segment list covering a plaintext exactly: contiguous,
/// non-overlapping, total length the sum of the parts.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SegmentationInfo {
    segments: Vec<Segment>,
}

impl SegmentationInfo {
    pub fn new(segments: Vec<Segment>) -> Result<Self, ConfigError> {
        if segments.is_empty() {
            return Err(ConfigError::EmptyLayout);
        }
        if segments.len() > 255 {
            return Err(ConfigError::TooManySegments);
        }
        for (i, seg) in segments.iter().enumerate() {
            if seg.bits == 0 {
                return Err(ConfigError::EmptySegment(i));
            }
            if seg.context.0 >= MAX_CONTEXTS {
                return Err(ConfigError::ContextIdRange(seg.context.0));
            }
        }
        Ok(Self { segments })
    }

    /// Convenience constructor from `(bits, context index)` pairs.
    pub fn from_pairs(pairs: &[(u32, u8)]) -> Result<Self, ConfigError> {
        Self::new(
            pairs
                .iter()
                .map(|&(bits, ctx)| Segment {
                    bits,
                    context: ContextId(ctx),
                })
                .collect(),
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn total_bits(&self) -> u64 {
        self.segments.iter().map(|s| u64::from(s.bits)).sum()
    }

    /// Bit range of segment `index` within the whole message.
    pub fn bit_range(&self, index: usize) -> Result<std::ops::Range<usize>, AccessError> {
        if index >= self.segments.len() {
            return Err(AccessError::SegmentOutOfRange {
                index,
                segments: self.segments.len(),
            });
        }
        let start: u64 = self.segments[..index].iter().map(|s| u64::from(s.bits)).sum();
        let end = start + u64::from(self.segments[index].bits);
        Ok(start as usize..end as usize)
    }

    /// Keystream bit offset for segment `index`: the cumulative bit count of
    /// earlier segments in the same context, so one context's keystream is
    /// never reused within a record.
    pub fn context_bit_offset(&self, index: usize) -> u64 {
        let ctx = self.segments[index].context;
        self.segments[..index]
            .iter()
            .filter(|s| s.context == ctx)
            .map(|s| u64::from(s.bits))
            .sum()
    }

    pub fn contexts(&self) -> BTreeSet<ContextId> {
        self.segments.iter().map(|s| s.context).collect()
    }
}

/// Maps the segment index to its context.
pub fn delta(layout: &SegmentationInfo, segment_index: usize) -> Result<ContextId, AccessError> {
    layout
        .segments()
        .get(segment_index)
        .map(|s| s.context)
        .ok_or(AccessError::SegmentOutOfRange {
            index: segment_index,
            segments: layout.segment_count(),
        })
}

/// Up to 64 pre-exchanged layouts, addressed by the 6-bit template id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TemplateTable {
    map: BTreeMap<u8, SegmentationInfo>,
}

impl TemplateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: u8, layout: SegmentationInfo) -> Result<(), ConfigError> {
        if usize::from(id) >= MAX_TEMPLATES {
            return Err(ConfigError::TemplateIdRange(id));
        }
        if !self.map.contains_key(&id) && self.map.len() >= MAX_TEMPLATES {
            return Err(ConfigError::TooManyTemplates);
        }
        self.map.insert(id, layout);
        Ok(())
    }

    /// Inserts at the lowest free id and returns it.
    pub fn append(&mut self, layout: SegmentationInfo) -> Result<u8, ConfigError> {
        let id = (0..MAX_TEMPLATES as u8)
            .find(|id| !self.map.contains_key(id))
            .ok_or(ConfigError::TooManyTemplates)?;
        self.map.insert(id, layout);
        Ok(id)
    }

    pub fn get(&self, id: u8) -> Option<&SegmentationInfo> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &SegmentationInfo)> {
        self.map.iter().map(|(&id, layout)| (id, layout))
    }
}

/// Static description of one session: path, contexts, rights, templates,
/// and which middleboxes carry their own verification tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionConfig {
    pub entity_count: u8,
    pub contexts: Vec<ContextId>,
    pub rights: AccessRights,
    pub templates: TemplateTable,
    pub selfverify: BTreeSet<EntityId>,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.entity_count < 2 {
            return Err(ConfigError::TooFewEntities(self.entity_count));
        }
        if self.contexts.len() > usize::from(MAX_CONTEXTS) {
            return Err(ConfigError::TooManyContexts(self.contexts.len()));
        }
        let declared: BTreeSet<u8> = self.contexts.iter().map(|c| c.0).collect();
        for ctx in &self.contexts {
            if ctx.0 >= MAX_CONTEXTS {
                return Err(ConfigError::ContextIdRange(ctx.0));
            }
        }
        for (ctx, mbx, _) in self.rights.entries() {
            if !mbx.is_middlebox(self.entity_count) {
                return Err(ConfigError::RightsForNonMiddlebox(mbx.0));
            }
            if !declared.contains(&ctx.0) {
                return Err(ConfigError::RightsForUnknownContext(ctx.0));
            }
        }
        let mut referenced: BTreeSet<u8> = BTreeSet::new();
        for (_, layout) in self.templates.iter() {
            for seg in layout.segments() {
                if !declared.contains(&seg.context.0) {
                    return Err(ConfigError::RightsForUnknownContext(seg.context.0));
                }
                referenced.insert(seg.context.0);
            }
        }
        if !self.templates.is_empty() {
            if let Some(&ctx) = declared.difference(&referenced).next() {
                return Err(ConfigError::UnreferencedContext(ctx));
            }
        }
        for &entity in &self.selfverify {
            if !entity.is_middlebox(self.entity_count) {
                return Err(ConfigError::SelfVerifyNonMiddlebox(entity.0));
            }
        }
        Ok(())
    }

    pub fn receiver(&self) -> EntityId {
        EntityId(self.entity_count - 1)
    }

    pub fn middleboxes(&self) -> impl Iterator<Item = EntityId> {
        (1..self.entity_count.saturating_sub(1)).map(EntityId)
    }
}

/// All keys of one session: read/write MAC keys per (context, entity),
/// encryption keys per context, key-distribution keys per middlebox.
///
/// Endpoints hold the complete matrix; middleboxes receive only their
/// column as a [`MiddleboxKeySet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyMatrix {
    entity_count: u8,
    read: BTreeMap<(u8, u8), MacKey>,
    write: BTreeMap<(u8, u8), MacKey>,
    enc: BTreeMap<u8, StreamKey>,
    kd: BTreeMap<u8, MacKey>,
}

impl KeyMatrix {
    pub fn entity_count(&self) -> u8 {
        self.entity_count
    }

    pub fn read_key(&self, context: ContextId, entity: EntityId) -> Option<&MacKey> {
        self.read.get(&(context.0, entity.0))
    }

    pub fn write_key(&self, context: ContextId, entity: EntityId) -> Option<&MacKey> {
        self.write.get(&(context.0, entity.0))
    }

    pub fn key(&self, context: ContextId, entity: EntityId, kind: KeyKind) -> Option<&MacKey> {
        match kind {
            KeyKind::Read => self.read_key(context, entity),
            KeyKind::Write => self.write_key(context, entity),
        }
    }

    pub fn enc_key(&self, context: ContextId) -> Option<&StreamKey> {
        self.enc.get(&context.0)
    }

    pub fn kd_key(&self, entity: EntityId) -> Option<&MacKey> {
        self.kd.get(&entity.0)
    }

    /// The entity owning the predecessor key: the largest index below
    /// `entity` at which a `kind` key for `context` exists.
    ///
    /// Callable by an entity that owns the key itself or by the receiver,
    /// which owns nothing but verifies against its predecessors. Always
    /// resolves for declared contexts because the sender's keys exist.
    pub fn predecessor_owner(
        &self,
        context: ContextId,
        entity: EntityId,
        kind: KeyKind,
    ) -> Result<EntityId, AccessError> {
        let receiver = entity.0 == self.entity_count - 1;
        if entity.0 == 0 || (!receiver && self.key(context, entity, kind).is_none()) {
            return Err(AccessError::AccessViolation {
                context: context.0,
                entity: entity.0,
                kind,
            });
        }
        for j in (0..entity.0).rev() {
            if self.key(context, EntityId(j), kind).is_some() {
                return Ok(EntityId(j));
            }
        }
        Err(AccessError::UnknownContext(context.0))
    }

    /// The predecessor key itself.
    pub fn predecessor_key(
        &self,
        context: ContextId,
        entity: EntityId,
        kind: KeyKind,
    ) -> Result<&MacKey, AccessError> {
        let owner = self.predecessor_owner(context, entity, kind)?;
        self.key(context, owner, kind)
            .ok_or(AccessError::UnknownContext(context.0))
    }

    /// The restriction of this matrix to what one middlebox receives during
    /// key distribution.
    pub fn middlebox_key_set(
        &self,
        entity: EntityId,
        rights: &AccessRights,
    ) -> Result<MiddleboxKeySet, AccessError> {
        let mut set = MiddleboxKeySet {
            entity,
            entity_count: self.entity_count,
            own_read: BTreeMap::new(),
            own_write: BTreeMap::new(),
            predecessor_read: BTreeMap::new(),
            predecessor_write: BTreeMap::new(),
            prev_writer_read: BTreeMap::new(),
            enc: BTreeMap::new(),
        };
        for (ctx, mbx, access) in rights.entries() {
            if mbx != entity {
                continue;
            }
            let read = self
                .read_key(ctx, entity)
                .ok_or(AccessError::UnknownContext(ctx.0))?;
            set.own_read.insert(ctx.0, read.clone());
            set.predecessor_read
                .insert(ctx.0, self.predecessor_key(ctx, entity, KeyKind::Read)?.clone());
            let enc = self.enc_key(ctx).ok_or(AccessError::UnknownContext(ctx.0))?;
            set.enc.insert(ctx.0, enc.clone());
            if access == Access::Write {
                let write = self
                    .write_key(ctx, entity)
                    .ok_or(AccessError::UnknownContext(ctx.0))?;
                set.own_write.insert(ctx.0, write.clone());
                set.predecessor_write
                    .insert(ctx.0, self.predecessor_key(ctx, entity, KeyKind::Write)?.clone());
                // The previous writer's read key: removing that writer's
                // read-side term from a downstream middlebox tag needs it,
                // and the nearest read-key owner may be a later pure reader.
                let prev_writer = self.predecessor_owner(ctx, entity, KeyKind::Write)?;
                let paired = self
                    .read_key(ctx, prev_writer)
                    .ok_or(AccessError::UnknownContext(ctx.0))?;
                set.prev_writer_read.insert(ctx.0, paired.clone());
            }
        }
        Ok(set)
    }
}

/// The keys one middlebox extracts from its key-distribution blob.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiddleboxKeySet {
    pub entity: EntityId,
    pub entity_count: u8,
    pub own_read: BTreeMap<u8, MacKey>,
    pub own_write: BTreeMap<u8, MacKey>,
    pub predecessor_read: BTreeMap<u8, MacKey>,
    pub predecessor_write: BTreeMap<u8, MacKey>,
    /// Read key of the nearest earlier write-key owner, per write context.
    pub prev_writer_read: BTreeMap<u8, MacKey>,
    pub enc: BTreeMap<u8, StreamKey>,
}

/// Access to per-context encryption keys, implemented by the full matrix
/// (endpoints) and by a middlebox's extracted key set. Holding the key is
/// what authorizes decryption, so segment decryption takes any of these.
pub trait EncKeys {
    fn enc_key(&self, context: ContextId) -> Option<&StreamKey>;
}

impl EncKeys for KeyMatrix {
    fn enc_key(&self, context: ContextId) -> Option<&StreamKey> {
        KeyMatrix::enc_key(self, context)
    }
}

impl EncKeys for MiddleboxKeySet {
    fn enc_key(&self, context: ContextId) -> Option<&StreamKey> {
        self.enc.get(&context.0)
    }
}

const LABEL_ENCRYPT: &[u8] = b"encrypt";
const LABEL_READ: &[u8] = b"read";
const LABEL_WRITE: &[u8] = b"write";

/// Derives the complete key matrix from the endpoint secret, the
/// per-middlebox secrets, and the handshake nonce.
///
/// Encryption keys depend only on the endpoint secret. Read and write keys
/// additionally bind the middlebox's path index and the context, with
/// distinct labels for the two kinds. Key-distribution keys come from the
/// respective middlebox secret. The receiver's column stays empty.
pub fn derive_key_matrix(
    psk_sr: &[u8],
    psks_sm: &BTreeMap<EntityId, Vec<u8>>,
    handshake_nonce: &[u8],
    rights: &AccessRights,
    entity_count: u8,
    contexts: &[ContextId],
) -> Result<KeyMatrix, ConfigError> {
    let mut matrix = KeyMatrix {
        entity_count,
        read: BTreeMap::new(),
        write: BTreeMap::new(),
        enc: BTreeMap::new(),
        kd: BTreeMap::new(),
    };
    for &ctx in contexts {
        let enc = kdf_stream_key(psk_sr, &[handshake_nonce, &[ctx.0], LABEL_ENCRYPT])?;
        matrix.enc.insert(ctx.0, enc);
        // Sender keys exist for every context.
        for (kind, label) in [(KeyKind::Read, LABEL_READ), (KeyKind::Write, LABEL_WRITE)] {
            let key = kdf_mac_key(psk_sr, &[handshake_nonce, &[0], &[ctx.0], label])?;
            match kind {
                KeyKind::Read => matrix.read.insert((ctx.0, 0), key),
                KeyKind::Write => matrix.write.insert((ctx.0, 0), key),
            };
        }
    }
    for (ctx, mbx, access) in rights.entries() {
        if !matrix.enc.contains_key(&ctx.0) {
            return Err(ConfigError::RightsForUnknownContext(ctx.0));
        }
        let read = kdf_mac_key(psk_sr, &[handshake_nonce, &[mbx.0], &[ctx.0], LABEL_READ])?;
        matrix.read.insert((ctx.0, mbx.0), read);
        if access == Access::Write {
            let write = kdf_mac_key(psk_sr, &[handshake_nonce, &[mbx.0], &[ctx.0], LABEL_WRITE])?;
            matrix.write.insert((ctx.0, mbx.0), write);
        }
    }
    for mbx in rights.entitled_middleboxes() {
        let psk = psks_sm
            .get(&mbx)
            .ok_or(ConfigError::MissingMiddleboxPsk(mbx.0))?;
        matrix.kd.insert(mbx.0, kdf_mac_key(psk, &[handshake_nonce])?);
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The worked key-assignment example: four entities, two contexts.
    /// Middlebox 1 reads context 1; middlebox 2 reads context 0; middlebox 3
    /// reads context 1. Expected predecessors: for context 0 at entity 2 the
    /// sender's key, for context 1 at entity 3 entity 1's key.
    pub(crate) fn example_rights() -> AccessRights {
        let mut r = AccessRights::new();
        r.grant(ContextId(1), EntityId(1), Access::Read);
        r.grant(ContextId(0), EntityId(2), Access::Read);
        r.grant(ContextId(1), EntityId(3), Access::Read);
        r
    }

    pub(crate) fn example_matrix() -> KeyMatrix {
        let mut psks = BTreeMap::new();
        for m in 1..=3 {
            psks.insert(EntityId(m), vec![m; 32]);
        }
        derive_key_matrix(
            b"endpoint secret",
            &psks,
            b"nonce",
            &example_rights(),
            5,
            &[ContextId(0), ContextId(1)],
        )
        .unwrap()
    }

    #[test]
    fn predecessor_resolution_matches_example() {
        let m = example_matrix();
        assert_eq!(
            m.predecessor_key(ContextId(0), EntityId(2), KeyKind::Read).unwrap(),
            m.read_key(ContextId(0), EntityId(0)).unwrap()
        );
        assert_eq!(
            m.predecessor_key(ContextId(1), EntityId(3), KeyKind::Read).unwrap(),
            m.read_key(ContextId(1), EntityId(1)).unwrap()
        );
    }

    #[test]
    fn key_existence_matches_rights() {
        let m = example_matrix();
        // Entity 2 has no read access to context 1.
        assert!(m.read_key(ContextId(1), EntityId(2)).is_none());
        assert!(m.read_key(ContextId(1), EntityId(1)).is_some());
        // Read right does not create a write key.
        assert!(m.write_key(ContextId(0), EntityId(2)).is_none());
        // Sender keys always exist; receiver column is empty.
        for ctx in [ContextId(0), ContextId(1)] {
            assert!(m.read_key(ctx, EntityId(0)).is_some());
            assert!(m.write_key(ctx, EntityId(0)).is_some());
            assert!(m.read_key(ctx, EntityId(4)).is_none());
            assert!(m.write_key(ctx, EntityId(4)).is_none());
        }
    }

    #[test]
    fn receiver_resolves_predecessors_without_owning_keys() {
        let m = example_matrix();
        assert_eq!(
            m.predecessor_owner(ContextId(1), EntityId(4), KeyKind::Read).unwrap(),
            EntityId(3)
        );
        assert_eq!(
            m.predecessor_owner(ContextId(1), EntityId(4), KeyKind::Write).unwrap(),
            EntityId(0)
        );
    }

    #[test]
    fn predecessor_requires_a_right() {
        let m = example_matrix();
        let err = m
            .predecessor_key(ContextId(1), EntityId(2), KeyKind::Read)
            .unwrap_err();
        assert!(matches!(err, AccessError::AccessViolation { .. }));
    }

    #[test]
    fn no_middlebox_session_resolves_to_sender() {
        let m = derive_key_matrix(
            b"s",
            &BTreeMap::new(),
            b"n",
            &AccessRights::new(),
            2,
            &[ContextId(0), ContextId(3)],
        )
        .unwrap();
        for ctx in [ContextId(0), ContextId(3)] {
            assert_eq!(
                m.predecessor_owner(ctx, EntityId(1), KeyKind::Read).unwrap(),
                EntityId(0)
            );
        }
    }

    #[test]
    fn derivation_is_deterministic() {
        assert_eq!(example_matrix(), example_matrix());
    }

    #[test]
    fn delta_maps_segments_to_contexts() {
        let layout = SegmentationInfo::from_pairs(&[(8, 0), (16, 1)]).unwrap();
        assert_eq!(delta(&layout, 1).unwrap(), ContextId(1));
        assert!(delta(&layout, 2).is_err());

        let translation = SegmentationInfo::from_pairs(&[(48, 2), (112, 5)]).unwrap();
        assert_eq!(delta(&translation, 0).unwrap(), ContextId(2));

        let single = SegmentationInfo::from_pairs(&[(13, 7)]).unwrap();
        assert_eq!(delta(&single, 0).unwrap(), ContextId(7));
    }

    #[test]
    fn context_bit_offsets_accumulate_per_context() {
        let layout = SegmentationInfo::from_pairs(&[(8, 0), (16, 1), (4, 0), (3, 0)]).unwrap();
        assert_eq!(layout.context_bit_offset(0), 0);
        assert_eq!(layout.context_bit_offset(1), 0);
        assert_eq!(layout.context_bit_offset(2), 8);
        assert_eq!(layout.context_bit_offset(3), 12);
    }

    #[test]
    fn layout_validation() {
        assert_eq!(
            SegmentationInfo::from_pairs(&[]).unwrap_err(),
            ConfigError::EmptyLayout
        );
        assert_eq!(
            SegmentationInfo::from_pairs(&[(8, 0), (0, 1)]).unwrap_err(),
            ConfigError::EmptySegment(1)
        );
        assert_eq!(
            SegmentationInfo::from_pairs(&[(8, 64)]).unwrap_err(),
            ConfigError::ContextIdRange(64)
        );
    }

    #[test]
    fn template_table_caps_at_64() {
        let mut table = TemplateTable::new();
        let layout = SegmentationInfo::from_pairs(&[(8, 0)]).unwrap();
        for id in 0..64 {
            table.insert(id, layout.clone()).unwrap();
        }
        assert_eq!(table.insert(64, layout.clone()).unwrap_err(), ConfigError::TemplateIdRange(64));
        assert_eq!(table.append(layout).unwrap_err(), ConfigError::TooManyTemplates);
    }

    #[test]
    fn middlebox_key_set_is_the_matrix_column() {
        let m = example_matrix();
        let rights = example_rights();
        let set = m.middlebox_key_set(EntityId(2), &rights).unwrap();
        assert_eq!(set.own_read.len(), 1);
        assert_eq!(
            set.own_read.get(&0).unwrap(),
            m.read_key(ContextId(0), EntityId(2)).unwrap()
        );
        assert!(set.own_write.is_empty());
        assert_eq!(
            set.predecessor_read.get(&0).unwrap(),
            m.read_key(ContextId(0), EntityId(0)).unwrap()
        );
        assert_eq!(set.enc.len(), 1);
    }

    #[test]
    fn session_config_validation_flags_bad_rights() {
        let mut rights = AccessRights::new();
        rights.grant(ContextId(0), EntityId(3), Access::Read);
        let config = SessionConfig {
            entity_count: 3,
            contexts: vec![ContextId(0)],
            rights,
            templates: TemplateTable::new(),
            selfverify: BTreeSet::new(),
        };
        assert_eq!(
            config.validate().unwrap_err(),
            ConfigError::RightsForNonMiddlebox(3)
        );
    }
}
