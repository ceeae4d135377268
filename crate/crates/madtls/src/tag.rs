//! The aggregated authentication-tag algebra.
//!
//! Every segment is authenticated twice, once under the read key and once
//! under the write key of whoever touched it last; all these partial tags
//! travel XOR-aggregated in a single 16-byte value. Each entity with access
//! rotates its segments' partial tags to its own keys: a reader swaps the
//! read-side tag, a writer swaps both sides (over the possibly rewritten
//! data). The receiver recomputes the expected aggregate from predecessor
//! keys alone. The rotation at every hop is what detects ephemeral changes:
//! data altered in front of a middlebox and restored afterwards leaves the
//! wrong key's tag in the aggregate.
//!
//! Partial tags bind (epoch, sequence, segment index) through the MAC domain
//! tag, so a tag can be spliced neither across records nor across positions
//! within a record.
//!
//! [`oracle`] holds an independent reference model that tracks the live
//! partial tags as an explicit multiset. Tests cross-check the streaming
//! aggregate against it after every hop.

use std::collections::BTreeSet;
use thiserror::Error;

use crate::access::{
    Access, AccessError, AccessRights, ContextId, EntityId, KeyKind, KeyMatrix, MiddleboxKeySet,
    SegmentationInfo,
};
use crate::bits::Bits;
use crate::crypto::{domain, mac, MacKey, Nonce, PartialTag};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TagError {
    #[error("expected {expected} segments, got {got}")]
    SegmentCount { expected: usize, got: usize },
    #[error("segment {0} changed bit length in flight")]
    LengthChanged(usize),
    #[error("segment {0} modified without write access")]
    NonWriteSegmentChanged(usize),
    #[error("view for entity {entity} is missing a {kind:?} key on segment {segment}")]
    MissingKey {
        entity: u8,
        segment: usize,
        kind: KeyKind,
    },
    #[error(transparent)]
    Access(#[from] AccessError),
}

/// The single authenticator carried by a record: the XOR of all live
/// per-segment partial tags.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct AggregatedTag(pub PartialTag);

impl AggregatedTag {
    pub fn xor_assign(&mut self, delta: PartialTag) {
        self.0.xor_assign(delta);
    }
}

/// One entity's key view onto one record layout.
///
/// Populated fields depend on the role: the sender owns fresh keys for every
/// segment, a middlebox owns keys plus predecessors for its accessible
/// segments, the receiver holds predecessors for everything and owns nothing.
#[derive(Clone, Debug)]
pub struct TagContextView {
    pub entity: EntityId,
    pub segments: Vec<SegmentView>,
}

#[derive(Clone, Debug)]
pub struct SegmentView {
    pub context: ContextId,
    /// This entity's right on the segment; `None` for sender and receiver,
    /// whose roles are implicit.
    pub access: Option<Access>,
    pub read_own: Option<MacKey>,
    pub read_prev: Option<MacKey>,
    pub write_own: Option<MacKey>,
    pub write_prev: Option<MacKey>,
    /// Read key of the nearest earlier write-key owner. Removing that
    /// writer's read-side term from a middlebox tag needs it; the plain
    /// read predecessor may belong to a later pure reader.
    pub prev_writer_read: Option<MacKey>,
}

impl SegmentView {
    fn empty(context: ContextId) -> Self {
        Self {
            context,
            access: None,
            read_own: None,
            read_prev: None,
            write_own: None,
            write_prev: None,
            prev_writer_read: None,
        }
    }
}

impl TagContextView {
    pub fn sender(matrix: &KeyMatrix, layout: &SegmentationInfo) -> Result<Self, TagError> {
        let sender = EntityId::SENDER;
        let mut segments = Vec::with_capacity(layout.segment_count());
        for seg in layout.segments() {
            let ctx = seg.context;
            segments.push(SegmentView {
                context: ctx,
                access: None,
                read_own: Some(cloned_key(matrix.read_key(ctx, sender), sender, segments.len(), KeyKind::Read)?),
                write_own: Some(cloned_key(matrix.write_key(ctx, sender), sender, segments.len(), KeyKind::Write)?),
                ..SegmentView::empty(ctx)
            });
        }
        Ok(Self {
            entity: sender,
            segments,
        })
    }

    pub fn receiver(matrix: &KeyMatrix, layout: &SegmentationInfo) -> Result<Self, TagError> {
        let receiver = EntityId(matrix.entity_count() - 1);
        let mut segments = Vec::with_capacity(layout.segment_count());
        for seg in layout.segments() {
            let ctx = seg.context;
            segments.push(SegmentView {
                context: ctx,
                access: None,
                read_prev: Some(matrix.predecessor_key(ctx, receiver, KeyKind::Read)?.clone()),
                write_prev: Some(matrix.predecessor_key(ctx, receiver, KeyKind::Write)?.clone()),
                ..SegmentView::empty(ctx)
            });
        }
        Ok(Self {
            entity: receiver,
            segments,
        })
    }

    /// Endpoint-side construction of a middlebox's view from the full matrix.
    pub fn middlebox(
        matrix: &KeyMatrix,
        rights: &AccessRights,
        layout: &SegmentationInfo,
        entity: EntityId,
    ) -> Result<Self, TagError> {
        let mut segments = Vec::with_capacity(layout.segment_count());
        for (index, seg) in layout.segments().iter().enumerate() {
            let ctx = seg.context;
            let mut view = SegmentView {
                context: ctx,
                access: rights.get(ctx, entity),
                ..SegmentView::empty(ctx)
            };
            match view.access {
                None => {}
                Some(Access::Read) => {
                    view.read_own = Some(cloned_key(matrix.read_key(ctx, entity), entity, index, KeyKind::Read)?);
                    view.read_prev = Some(matrix.predecessor_key(ctx, entity, KeyKind::Read)?.clone());
                }
                Some(Access::Write) => {
                    view.read_own = Some(cloned_key(matrix.read_key(ctx, entity), entity, index, KeyKind::Read)?);
                    view.read_prev = Some(matrix.predecessor_key(ctx, entity, KeyKind::Read)?.clone());
                    view.write_own = Some(cloned_key(matrix.write_key(ctx, entity), entity, index, KeyKind::Write)?);
                    view.write_prev = Some(matrix.predecessor_key(ctx, entity, KeyKind::Write)?.clone());
                    let prev_writer = matrix.predecessor_owner(ctx, entity, KeyKind::Write)?;
                    view.prev_writer_read =
                        Some(cloned_key(matrix.read_key(ctx, prev_writer), prev_writer, index, KeyKind::Read)?);
                }
            }
            segments.push(view);
        }
        Ok(Self { entity, segments })
    }

    /// Middlebox-side construction from the keys extracted during the
    /// handshake.
    pub fn from_key_set(keys: &MiddleboxKeySet, layout: &SegmentationInfo) -> Self {
        let segments = layout
            .segments()
            .iter()
            .map(|seg| {
                let ctx = seg.context.index();
                let access = if keys.own_write.contains_key(&ctx) {
                    Some(Access::Write)
                } else if keys.own_read.contains_key(&ctx) {
                    Some(Access::Read)
                } else {
                    None
                };
                SegmentView {
                    context: seg.context,
                    access,
                    read_own: keys.own_read.get(&ctx).cloned(),
                    read_prev: keys.predecessor_read.get(&ctx).cloned(),
                    write_own: keys.own_write.get(&ctx).cloned(),
                    write_prev: keys.predecessor_write.get(&ctx).cloned(),
                    prev_writer_read: keys.prev_writer_read.get(&ctx).cloned(),
                }
            })
            .collect();
        Self {
            entity: keys.entity,
            segments,
        }
    }

    fn check_segments(&self, segments: &[Bits]) -> Result<(), TagError> {
        if segments.len() != self.segments.len() {
            return Err(TagError::SegmentCount {
                expected: self.segments.len(),
                got: segments.len(),
            });
        }
        Ok(())
    }

    fn key(&self, index: usize, pick: fn(&SegmentView) -> &Option<MacKey>, kind: KeyKind) -> Result<&MacKey, TagError> {
        pick(&self.segments[index]).as_ref().ok_or(TagError::MissingKey {
            entity: self.entity.index(),
            segment: index,
            kind,
        })
    }
}

fn cloned_key(
    key: Option<&MacKey>,
    entity: EntityId,
    segment: usize,
    kind: KeyKind,
) -> Result<MacKey, TagError> {
    key.cloned().ok_or(TagError::MissingKey {
        entity: entity.index(),
        segment,
        kind,
    })
}

/// Which segments of a layout an entity may explicitly read or write.
/// The two sets are disjoint: write subsumes read and is stored once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessSets {
    pub read: BTreeSet<usize>,
    pub write: BTreeSet<usize>,
}

impl AccessSets {
    pub fn of(rights: &AccessRights, layout: &SegmentationInfo, entity: EntityId) -> Self {
        let mut sets = Self::default();
        for (i, seg) in layout.segments().iter().enumerate() {
            match rights.get(seg.context, entity) {
                Some(Access::Read) => {
                    sets.read.insert(i);
                }
                Some(Access::Write) => {
                    sets.write.insert(i);
                }
                None => {}
            }
        }
        sets
    }

    pub fn accessible(&self) -> BTreeSet<usize> {
        self.read.union(&self.write).copied().collect()
    }
}

fn segment_mac(key: &MacKey, nonce: Nonce, index: usize, data: &Bits) -> PartialTag {
    mac(key, &domain::record_segment(nonce, index as u8), data)
}

/// The sender's per-segment partial tags. Computing them once covers the
/// aggregated tag and every middlebox tag; assembling a middlebox tag from
/// here costs no further MAC invocations.
pub struct SenderTags {
    read: Vec<PartialTag>,
    write: Vec<PartialTag>,
}

impl SenderTags {
    pub fn compute(
        view: &TagContextView,
        nonce: Nonce,
        segments: &[Bits],
    ) -> Result<Self, TagError> {
        view.check_segments(segments)?;
        let mut read = Vec::with_capacity(segments.len());
        let mut write = Vec::with_capacity(segments.len());
        for (i, data) in segments.iter().enumerate() {
            read.push(segment_mac(view.key(i, |s| &s.read_own, KeyKind::Read)?, nonce, i, data));
            write.push(segment_mac(view.key(i, |s| &s.write_own, KeyKind::Write)?, nonce, i, data));
        }
        Ok(Self { read, write })
    }

    pub fn main_tag(&self) -> AggregatedTag {
        let mut t = PartialTag::ZERO;
        for (r, w) in self.read.iter().zip(&self.write) {
            t.xor_assign(*r);
            t.xor_assign(*w);
        }
        AggregatedTag(t)
    }

    /// The tag for a middlebox with access sets `target`: read-side tags for
    /// everything it can see, write-side tags for what it can write.
    pub fn selfverify(&self, target: &AccessSets) -> PartialTag {
        let mut t = PartialTag::ZERO;
        for &i in target.accessible().iter() {
            t.xor_assign(self.read[i]);
        }
        for &i in &target.write {
            t.xor_assign(self.write[i]);
        }
        t
    }
}

/// The sender's initial aggregated tag over the encrypted segments.
pub fn initial_tag(
    view: &TagContextView,
    nonce: Nonce,
    segments: &[Bits],
) -> Result<AggregatedTag, TagError> {
    Ok(SenderTags::compute(view, nonce, segments)?.main_tag())
}

/// Read-access rotation: for each readable segment the predecessor's
/// read-side tag is removed and this entity's added, over unchanged data.
pub fn reader_update(
    mut tag: AggregatedTag,
    view: &TagContextView,
    nonce: Nonce,
    segments: &[Bits],
) -> Result<AggregatedTag, TagError> {
    view.check_segments(segments)?;
    for (i, data) in segments.iter().enumerate() {
        if view.segments[i].access != Some(Access::Read) {
            continue;
        }
        tag.xor_assign(segment_mac(view.key(i, |s| &s.read_prev, KeyKind::Read)?, nonce, i, data));
        tag.xor_assign(segment_mac(view.key(i, |s| &s.read_own, KeyKind::Read)?, nonce, i, data));
    }
    Ok(tag)
}

/// Write-access rotation: both predecessor tags over the old data out, both
/// own tags over the new data in. Applies even when the data is unchanged,
/// so the key rotation happens whenever a writer is on-path.
pub fn writer_update(
    mut tag: AggregatedTag,
    view: &TagContextView,
    nonce: Nonce,
    old: &[Bits],
    new: &[Bits],
) -> Result<AggregatedTag, TagError> {
    view.check_segments(old)?;
    view.check_segments(new)?;
    for i in 0..old.len() {
        if old[i].len() != new[i].len() {
            return Err(TagError::LengthChanged(i));
        }
        if view.segments[i].access != Some(Access::Write) && old[i] != new[i] {
            return Err(TagError::NonWriteSegmentChanged(i));
        }
    }
    for i in 0..old.len() {
        if view.segments[i].access != Some(Access::Write) {
            continue;
        }
        tag.xor_assign(segment_mac(view.key(i, |s| &s.read_prev, KeyKind::Read)?, nonce, i, &old[i]));
        tag.xor_assign(segment_mac(view.key(i, |s| &s.read_own, KeyKind::Read)?, nonce, i, &new[i]));
        tag.xor_assign(segment_mac(view.key(i, |s| &s.write_prev, KeyKind::Write)?, nonce, i, &old[i]));
        tag.xor_assign(segment_mac(view.key(i, |s| &s.write_own, KeyKind::Write)?, nonce, i, &new[i]));
    }
    Ok(tag)
}

/// Receiver-side check: recomputes the expected aggregate from predecessor
/// keys over the received data and compares.
pub fn receiver_verify(
    tag: AggregatedTag,
    view: &TagContextView,
    nonce: Nonce,
    segments: &[Bits],
) -> Result<bool, TagError> {
    view.check_segments(segments)?;
    let mut expected = PartialTag::ZERO;
    for (i, data) in segments.iter().enumerate() {
        expected.xor_assign(segment_mac(view.key(i, |s| &s.read_prev, KeyKind::Read)?, nonce, i, data));
        expected.xor_assign(segment_mac(view.key(i, |s| &s.write_prev, KeyKind::Write)?, nonce, i, data));
    }
    Ok(expected == tag.0)
}

/// Sender-side middlebox tag for `target`. Prefer [`SenderTags::selfverify`]
/// when the main tag is being computed anyway.
pub fn selfverify_initial(
    view: &TagContextView,
    nonce: Nonce,
    segments: &[Bits],
    target: &AccessSets,
) -> Result<PartialTag, TagError> {
    Ok(SenderTags::compute(view, nonce, segments)?.selfverify(target))
}

/// An intermediary's rotation of a downstream middlebox's tag, restricted to
/// segments both can access.
///
/// Write-side terms rotate only between writers, so the removal uses the
/// previous writer's keys: its write key, and its paired read key rather
/// than the plain read predecessor (which may belong to a later pure
/// reader that never touches this tag).
pub fn selfverify_update(
    mut tag: PartialTag,
    view: &TagContextView,
    target: &AccessSets,
    nonce: Nonce,
    old: &[Bits],
    new: &[Bits],
) -> Result<PartialTag, TagError> {
    view.check_segments(old)?;
    view.check_segments(new)?;
    for i in 0..old.len() {
        let seg = &view.segments[i];
        if target.write.contains(&i) && seg.access == Some(Access::Write) {
            tag.xor_assign(segment_mac(view.key(i, |s| &s.prev_writer_read, KeyKind::Read)?, nonce, i, &old[i]));
            tag.xor_assign(segment_mac(view.key(i, |s| &s.read_own, KeyKind::Read)?, nonce, i, &new[i]));
            tag.xor_assign(segment_mac(view.key(i, |s| &s.write_prev, KeyKind::Write)?, nonce, i, &old[i]));
            tag.xor_assign(segment_mac(view.key(i, |s| &s.write_own, KeyKind::Write)?, nonce, i, &new[i]));
        }
        if target.read.contains(&i) && seg.access.is_some() {
            tag.xor_assign(segment_mac(view.key(i, |s| &s.read_prev, KeyKind::Read)?, nonce, i, &old[i]));
            tag.xor_assign(segment_mac(view.key(i, |s| &s.read_own, KeyKind::Read)?, nonce, i, &new[i]));
        }
    }
    Ok(tag)
}

/// The tag value a middlebox expects for its accessible segments, computed
/// from predecessor keys.
pub fn selfverify_expected(
    view: &TagContextView,
    nonce: Nonce,
    segments: &[Bits],
) -> Result<PartialTag, TagError> {
    view.check_segments(segments)?;
    let mut expected = PartialTag::ZERO;
    for (i, data) in segments.iter().enumerate() {
        match view.segments[i].access {
            None => {}
            Some(Access::Read) => {
                expected.xor_assign(segment_mac(view.key(i, |s| &s.read_prev, KeyKind::Read)?, nonce, i, data));
            }
            Some(Access::Write) => {
                expected.xor_assign(segment_mac(view.key(i, |s| &s.prev_writer_read, KeyKind::Read)?, nonce, i, data));
                expected.xor_assign(segment_mac(view.key(i, |s| &s.write_prev, KeyKind::Write)?, nonce, i, data));
            }
        }
    }
    Ok(expected)
}

/// Middlebox-side verification of its own tag against the received data.
pub fn selfverify_check(
    view: &TagContextView,
    nonce: Nonce,
    segments: &[Bits],
    tag: PartialTag,
) -> Result<bool, TagError> {
    Ok(selfverify_expected(view, nonce, segments)? == tag)
}

pub mod oracle {
    //! Reference model: tracks every live partial tag in an explicit
    //! multiset instead of a streaming XOR. Used by tests to cross-check the
    //! aggregate after each hop; a removal that finds no matching live tag
    //! is reported rather than silently XORed in.

    use super::*;

    #[derive(Debug, Error, PartialEq, Eq)]
    pub enum OracleError {
        #[error("removal of a partial tag that is not live (segment {segment}, {kind:?})")]
        TagNotLive { segment: usize, kind: KeyKind },
        #[error("oracle rejects empty messages")]
        EmptyMessage,
        #[error("reader changed segment {0}")]
        ReaderChangedData(usize),
        #[error(transparent)]
        Tag(#[from] TagError),
        #[error(transparent)]
        Access(#[from] AccessError),
    }

    pub struct TagOracle {
        live: Vec<PartialTag>,
    }

    impl Default for TagOracle {
        fn default() -> Self {
            Self::new()
        }
    }

    impl TagOracle {
        pub fn new() -> Self {
            Self { live: Vec::new() }
        }

        fn add(&mut self, tag: PartialTag) {
            self.live.push(tag);
        }

        fn remove(&mut self, tag: PartialTag, segment: usize, kind: KeyKind) -> Result<(), OracleError> {
            match self.live.iter().position(|t| *t == tag) {
                Some(pos) => {
                    self.live.swap_remove(pos);
                    Ok(())
                }
                None => Err(OracleError::TagNotLive { segment, kind }),
            }
        }

        /// Records the sender's issuance: two live tags per segment.
        pub fn issue(
            &mut self,
            matrix: &KeyMatrix,
            layout: &SegmentationInfo,
            nonce: Nonce,
            segments: &[Bits],
        ) -> Result<(), OracleError> {
            if segments.is_empty() {
                return Err(OracleError::EmptyMessage);
            }
            for (i, data) in segments.iter().enumerate() {
                let ctx = layout.segments()[i].context;
                for kind in [KeyKind::Read, KeyKind::Write] {
                    let key = matrix.key(ctx, EntityId::SENDER, kind).ok_or(
                        AccessError::UnknownContext(ctx.index()),
                    )?;
                    self.add(segment_mac(key, nonce, i, data));
                }
            }
            Ok(())
        }

        /// Records one middlebox hop. `old` is the data as received, `new`
        /// as forwarded.
        pub fn hop(
            &mut self,
            matrix: &KeyMatrix,
            rights: &AccessRights,
            entity: EntityId,
            layout: &SegmentationInfo,
            nonce: Nonce,
            old: &[Bits],
            new: &[Bits],
        ) -> Result<(), OracleError> {
            for i in 0..old.len() {
                let ctx = layout.segments()[i].context;
                match rights.get(ctx, entity) {
                    None => {}
                    Some(Access::Read) => {
                        if old[i] != new[i] {
                            return Err(OracleError::ReaderChangedData(i));
                        }
                        let prev = matrix.predecessor_key(ctx, entity, KeyKind::Read)?;
                        self.remove(segment_mac(prev, nonce, i, &old[i]), i, KeyKind::Read)?;
                        let own = matrix.read_key(ctx, entity).expect("reader owns a read key");
                        self.add(segment_mac(own, nonce, i, &old[i]));
                    }
                    Some(Access::Write) => {
                        for kind in [KeyKind::Read, KeyKind::Write] {
                            let prev = matrix.predecessor_key(ctx, entity, kind)?;
                            self.remove(segment_mac(prev, nonce, i, &old[i]), i, kind)?;
                            let own = matrix.key(ctx, entity, kind).expect("writer owns both keys");
                            self.add(segment_mac(own, nonce, i, &new[i]));
                        }
                    }
                }
            }
            Ok(())
        }

        /// XOR of all live partial tags.
        pub fn aggregated(&self) -> AggregatedTag {
            let mut t = PartialTag::ZERO;
            for tag in &self.live {
                t.xor_assign(*tag);
            }
            AggregatedTag(t)
        }

        pub fn live_count(&self) -> usize {
            self.live.len()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::access::derive_key_matrix;
    use crate::record::split_segments;
    use oracle::TagOracle;
    use std::collections::BTreeMap;

    struct Session {
        matrix: KeyMatrix,
        rights: AccessRights,
        layout: SegmentationInfo,
    }

    /// Four entities: reader on context 0 at entity 1, writer on context 1
    /// at entity 2.
    fn session() -> Session {
        let mut rights = AccessRights::new();
        rights.grant(ContextId(0), EntityId(1), Access::Read);
        rights.grant(ContextId(1), EntityId(2), Access::Write);
        let mut psks = BTreeMap::new();
        psks.insert(EntityId(1), vec![0x11; 16]);
        psks.insert(EntityId(2), vec![0x22; 16]);
        let matrix = derive_key_matrix(
            b"tag tests secret",
            &psks,
            b"tag nonce",
            &rights,
            4,
            &[ContextId(0), ContextId(1)],
        )
        .unwrap();
        let layout = SegmentationInfo::from_pairs(&[(16, 0), (8, 1), (8, 0)]).unwrap();
        Session {
            matrix,
            rights,
            layout,
        }
    }

    fn segments(s: &Session, bytes: &[u8]) -> Vec<Bits> {
        split_segments(&Bits::from_bytes(bytes), &s.layout).unwrap()
    }

    const NONCE: Nonce = Nonce { epoch: 1, sequence: 9 };

    #[test]
    fn single_segment_tag_is_the_two_term_xor() {
        let mut psks = BTreeMap::new();
        psks.insert(EntityId(1), vec![1; 8]);
        let mut rights = AccessRights::new();
        rights.grant(ContextId(0), EntityId(1), Access::Read);
        let matrix =
            derive_key_matrix(b"s", &psks, b"n", &rights, 3, &[ContextId(0)]).unwrap();
        let layout = SegmentationInfo::from_pairs(&[(24, 0)]).unwrap();
        let data = vec![Bits::from_bytes(&[1, 2, 3])];

        let view = TagContextView::sender(&matrix, &layout).unwrap();
        let t = initial_tag(&view, NONCE, &data).unwrap();

        let d = domain::record_segment(NONCE, 0);
        let expected = mac(matrix.read_key(ContextId(0), EntityId(0)).unwrap(), &d, &data[0])
            .xor(mac(matrix.write_key(ContextId(0), EntityId(0)).unwrap(), &d, &data[0]));
        assert_eq!(t.0, expected);
    }

    #[test]
    fn initial_tag_matches_oracle_over_three_segments() {
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let view = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let t = initial_tag(&view, NONCE, &data).unwrap();

        let mut oracle = TagOracle::new();
        oracle.issue(&s.matrix, &s.layout, NONCE, &data).unwrap();
        assert_eq!(oracle.live_count(), 6);
        assert_eq!(oracle.aggregated(), t);
    }

    #[test]
    fn swapping_segments_changes_the_tag() {
        // Segments 0 and 2 share context 0 and here share bit length; only
        // the index binding distinguishes them.
        let s = session();
        let layout = SegmentationInfo::from_pairs(&[(8, 0), (8, 1), (8, 0)]).unwrap();
        let data = split_segments(&Bits::from_bytes(&[1, 2, 3]), &layout).unwrap();
        let mut swapped = data.clone();
        swapped.swap(0, 2);

        let view = TagContextView::sender(&s.matrix, &layout).unwrap();
        let t = initial_tag(&view, NONCE, &data).unwrap();
        let t_swapped = initial_tag(&view, NONCE, &swapped).unwrap();
        assert_ne!(t, t_swapped);
    }

    fn run_honest(s: &Session, data: &[Bits], rewrite: Option<(usize, Bits)>) -> (AggregatedTag, Vec<Bits>) {
        let sender = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let mut tag = initial_tag(&sender, NONCE, data).unwrap();
        let mut current = data.to_vec();
        for entity in [EntityId(1), EntityId(2)] {
            let view = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, entity).unwrap();
            tag = reader_update(tag, &view, NONCE, &current).unwrap();
            let mut new = current.clone();
            if let Some((seg, replacement)) = &rewrite {
                if view.segments[*seg].access == Some(Access::Write) {
                    new[*seg] = replacement.clone();
                }
            }
            tag = writer_update(tag, &view, NONCE, &current, &new).unwrap();
            current = new;
        }
        (tag, current)
    }

    #[test]
    fn honest_chain_verifies() {
        let s = session();
        let data = segments(&s, &[0xca, 0xfe, 0xba, 0xbe]);
        let (tag, received) = run_honest(&s, &data, None);
        let receiver = TagContextView::receiver(&s.matrix, &s.layout).unwrap();
        assert!(receiver_verify(tag, &receiver, NONCE, &received).unwrap());
    }

    #[test]
    fn writer_rewrite_verifies_and_changed_data_arrives() {
        let s = session();
        let data = segments(&s, &[0xca, 0xfe, 0xba, 0xbe]);
        let (tag, received) = run_honest(&s, &data, Some((1, Bits::from_bytes(&[0x5a]))));
        assert_ne!(received[1], data[1]);
        let receiver = TagContextView::receiver(&s.matrix, &s.layout).unwrap();
        assert!(receiver_verify(tag, &receiver, NONCE, &received).unwrap());
    }

    #[test]
    fn no_middlebox_session_verifies_against_initial_tag() {
        let matrix =
            derive_key_matrix(b"s", &BTreeMap::new(), b"n", &AccessRights::new(), 2, &[ContextId(0)])
                .unwrap();
        let layout = SegmentationInfo::from_pairs(&[(32, 0)]).unwrap();
        let data = vec![Bits::from_bytes(&[9, 9, 9, 9])];
        let sender = TagContextView::sender(&matrix, &layout).unwrap();
        let receiver = TagContextView::receiver(&matrix, &layout).unwrap();
        let t = initial_tag(&sender, NONCE, &data).unwrap();
        assert!(receiver_verify(t, &receiver, NONCE, &data).unwrap());
    }

    #[test]
    fn ephemeral_change_is_detected() {
        // Data altered before the reader and restored afterwards: every
        // verification input at the receiver matches the original, but the
        // reader rotated its tag over the altered bytes.
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let sender = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let tag = initial_tag(&sender, NONCE, &data).unwrap();

        let mut tampered = data.clone();
        tampered[0].flip(3);

        let reader = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(1)).unwrap();
        let tag = reader_update(tag, &reader, NONCE, &tampered).unwrap();

        // Restored before the writer and the receiver.
        let writer = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(2)).unwrap();
        let tag = reader_update(tag, &writer, NONCE, &data).unwrap();
        let tag = writer_update(tag, &writer, NONCE, &data, &data).unwrap();

        let receiver = TagContextView::receiver(&s.matrix, &s.layout).unwrap();
        assert!(!receiver_verify(tag, &receiver, NONCE, &data).unwrap());
    }

    #[test]
    fn reader_with_no_matching_segments_leaves_tag_unchanged() {
        let s = session();
        // A layout entirely in context 1: entity 1 reads only context 0.
        let layout = SegmentationInfo::from_pairs(&[(16, 1)]).unwrap();
        let data = vec![Bits::from_bytes(&[7, 7])];
        let sender = TagContextView::sender(&s.matrix, &layout).unwrap();
        let t = initial_tag(&sender, NONCE, &data).unwrap();
        let view = TagContextView::middlebox(&s.matrix, &s.rights, &layout, EntityId(1)).unwrap();
        assert_eq!(reader_update(t, &view, NONCE, &data).unwrap(), t);
    }

    #[test]
    fn writer_noop_still_rotates_keys() {
        // C' = C must still be applied: downstream predecessor resolution
        // points at the writer's keys.
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let sender = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let reader = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(1)).unwrap();
        let writer = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(2)).unwrap();
        let receiver = TagContextView::receiver(&s.matrix, &s.layout).unwrap();

        let tag = initial_tag(&sender, NONCE, &data).unwrap();
        let tag = reader_update(tag, &reader, NONCE, &data).unwrap();
        // Writer skipped entirely: receiver must reject.
        assert!(!receiver_verify(tag, &receiver, NONCE, &data).unwrap());
        // Writer applied with unchanged data: receiver accepts.
        let tag = writer_update(tag, &writer, NONCE, &data, &data).unwrap();
        assert!(receiver_verify(tag, &receiver, NONCE, &data).unwrap());
    }

    #[test]
    fn unauthorized_bit_flips_are_rejected_everywhere() {
        let s = session();
        let data = segments(&s, &[0xde, 0xad, 0xbe, 0xef]);
        let (tag, received) = run_honest(&s, &data, None);
        let receiver = TagContextView::receiver(&s.matrix, &s.layout).unwrap();

        for seg in 0..received.len() {
            for bit in 0..received[seg].len() {
                let mut flipped = received.clone();
                flipped[seg].flip(bit);
                assert!(
                    !receiver_verify(tag, &receiver, NONCE, &flipped).unwrap(),
                    "flip of segment {seg} bit {bit} was accepted"
                );
            }
        }
    }

    #[test]
    fn writer_update_rejects_length_changes() {
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let view = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(2)).unwrap();
        let mut grown = data.clone();
        grown[1] = Bits::from_bytes(&[1, 2]);
        let err = writer_update(AggregatedTag(PartialTag::ZERO), &view, NONCE, &data, &grown)
            .unwrap_err();
        assert_eq!(err, TagError::LengthChanged(1));
    }

    #[test]
    fn writer_update_rejects_rewrites_outside_write_set() {
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let view = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(2)).unwrap();
        let mut outside = data.clone();
        outside[0].flip(0);
        let err = writer_update(AggregatedTag(PartialTag::ZERO), &view, NONCE, &data, &outside)
            .unwrap_err();
        assert_eq!(err, TagError::NonWriteSegmentChanged(0));
    }

    #[test]
    fn oracle_tracks_live_tags_through_a_writer_hop() {
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let mut oracle = TagOracle::new();
        oracle.issue(&s.matrix, &s.layout, NONCE, &data).unwrap();

        let mut rewritten = data.clone();
        rewritten[1] = Bits::from_bytes(&[0xff]);
        oracle
            .hop(&s.matrix, &s.rights, EntityId(1), &s.layout, NONCE, &data, &data)
            .unwrap();
        oracle
            .hop(&s.matrix, &s.rights, EntityId(2), &s.layout, NONCE, &data, &rewritten)
            .unwrap();
        // Two live tags per segment throughout.
        assert_eq!(oracle.live_count(), 6);

        let (tag, received) = run_honest(&s, &data, Some((1, Bits::from_bytes(&[0xff]))));
        assert_eq!(received, rewritten);
        assert_eq!(oracle.aggregated(), tag);
    }

    #[test]
    fn oracle_rejects_empty_messages() {
        let s = session();
        let mut oracle = TagOracle::new();
        assert_eq!(
            oracle.issue(&s.matrix, &s.layout, NONCE, &[]).unwrap_err(),
            oracle::OracleError::EmptyMessage
        );
    }

    #[test]
    fn oracle_flags_unexpected_removals() {
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let mut oracle = TagOracle::new();
        oracle.issue(&s.matrix, &s.layout, NONCE, &data).unwrap();
        // A flipped bit makes the reader's removal miss the live tag.
        let mut flipped = data.clone();
        flipped[0].flip(0);
        let err = oracle
            .hop(&s.matrix, &s.rights, EntityId(1), &s.layout, NONCE, &flipped, &flipped)
            .unwrap_err();
        assert!(matches!(err, oracle::OracleError::TagNotLive { .. }));
    }

    // Middlebox tag (t_j) cases.

    #[test]
    fn selfverify_needs_no_extra_mac_calls() {
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let view = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let tags = SenderTags::compute(&view, NONCE, &data).unwrap();

        let before = crate::crypto::metrics::snapshot();
        let target = AccessSets::of(&s.rights, &s.layout, EntityId(1));
        let _main = tags.main_tag();
        let _tj = tags.selfverify(&target);
        let delta = crate::crypto::metrics::snapshot().delta_since(before);
        assert_eq!(delta.mac_calls, 0);
    }

    #[test]
    fn selfverify_read_only_target_has_read_terms_only() {
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let view = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let tags = SenderTags::compute(&view, NONCE, &data).unwrap();
        let target = AccessSets::of(&s.rights, &s.layout, EntityId(1));
        assert!(target.write.is_empty());

        // Manual reconstruction: read-key tags over segments 0 and 2.
        let mut expected = PartialTag::ZERO;
        for i in [0usize, 2] {
            let key = s.matrix.read_key(ContextId(0), EntityId(0)).unwrap();
            expected.xor_assign(segment_mac(key, NONCE, i, &data[i]));
        }
        assert_eq!(tags.selfverify(&target), expected);
    }

    #[test]
    fn identical_rights_produce_identical_sender_tags() {
        // The sender-issued middlebox tag depends on the access sets, not
        // the target's identity.
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let view = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let tags = SenderTags::compute(&view, NONCE, &data).unwrap();
        let sets = AccessSets::of(&s.rights, &s.layout, EntityId(1));
        assert_eq!(tags.selfverify(&sets), tags.selfverify(&sets.clone()));
    }

    #[test]
    fn disjoint_access_leaves_selfverify_unchanged() {
        // Intermediary 1 touches only context 0; target 2 only context 1.
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let sender = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let tags = SenderTags::compute(&sender, NONCE, &data).unwrap();
        let target = AccessSets::of(&s.rights, &s.layout, EntityId(2));
        let tj = tags.selfverify(&target);

        let intermediary =
            TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(1)).unwrap();
        let updated = selfverify_update(tj, &intermediary, &target, NONCE, &data, &data).unwrap();
        assert_eq!(updated, tj);
    }

    /// Three middleboxes on one shared context: a pure reader, a writer,
    /// then a self-verifying writer. Exercises the case where the read
    /// predecessor of the target is not the previous writer.
    fn shared_context_session() -> Session {
        let mut rights = AccessRights::new();
        rights.grant(ContextId(0), EntityId(1), Access::Read);
        rights.grant(ContextId(0), EntityId(2), Access::Write);
        rights.grant(ContextId(0), EntityId(3), Access::Write);
        let mut psks = BTreeMap::new();
        for m in 1..=3u8 {
            psks.insert(EntityId(m), vec![m; 16]);
        }
        let matrix =
            derive_key_matrix(b"svf secret", &psks, b"svf nonce", &rights, 5, &[ContextId(0)])
                .unwrap();
        let layout = SegmentationInfo::from_pairs(&[(32, 0)]).unwrap();
        Session {
            matrix,
            rights,
            layout,
        }
    }

    #[test]
    fn selfverify_accepts_after_intermediary_writer_modifies_shared_context() {
        let s = shared_context_session();
        let data = vec![Bits::from_bytes(&[1, 2, 3, 4])];
        let target_entity = EntityId(3);
        let target = AccessSets::of(&s.rights, &s.layout, target_entity);

        let sender = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let tags = SenderTags::compute(&sender, NONCE, &data).unwrap();
        let mut tj = tags.selfverify(&target);

        // Hop 1: pure reader.
        let reader = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(1)).unwrap();
        tj = selfverify_update(tj, &reader, &target, NONCE, &data, &data).unwrap();

        // Hop 2: writer rewrites the segment.
        let writer = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(2)).unwrap();
        let rewritten = vec![Bits::from_bytes(&[9, 9, 9, 9])];
        tj = selfverify_update(tj, &writer, &target, NONCE, &data, &rewritten).unwrap();

        // Target verifies the rewritten data.
        let target_view =
            TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, target_entity).unwrap();
        assert!(selfverify_check(&target_view, NONCE, &rewritten, tj).unwrap());
        assert!(!selfverify_check(&target_view, NONCE, &data, tj).unwrap());
    }

    #[test]
    fn selfverify_rejects_tamper_on_shared_segment() {
        let s = shared_context_session();
        let data = vec![Bits::from_bytes(&[1, 2, 3, 4])];
        let target_entity = EntityId(3);
        let target = AccessSets::of(&s.rights, &s.layout, target_entity);

        let sender = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let mut tj = SenderTags::compute(&sender, NONCE, &data).unwrap().selfverify(&target);
        let reader = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(1)).unwrap();
        tj = selfverify_update(tj, &reader, &target, NONCE, &data, &data).unwrap();
        let writer = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(2)).unwrap();
        tj = selfverify_update(tj, &writer, &target, NONCE, &data, &data).unwrap();

        let target_view =
            TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, target_entity).unwrap();
        for bit in 0..32 {
            let mut tampered = data.clone();
            tampered[0].flip(bit);
            assert!(
                !selfverify_check(&target_view, NONCE, &tampered, tj).unwrap(),
                "tamper on bit {bit} accepted by the target"
            );
        }
    }

    #[test]
    fn selfverify_scoped_to_accessible_segments() {
        // Tamper outside the target's access: target accepts, receiver
        // rejects.
        let s = session();
        let data = segments(&s, &[1, 2, 3, 4]);
        let target_entity = EntityId(1);
        let target = AccessSets::of(&s.rights, &s.layout, target_entity);

        let sender = TagContextView::sender(&s.matrix, &s.layout).unwrap();
        let computed = SenderTags::compute(&sender, NONCE, &data).unwrap();
        let tj = computed.selfverify(&target);
        let main = computed.main_tag();

        // Attacker flips a bit in segment 1 (context 1, not readable by 1).
        let mut tampered = data.clone();
        tampered[1].flip(2);

        let target_view =
            TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, target_entity).unwrap();
        assert!(selfverify_check(&target_view, NONCE, &tampered, tj).unwrap());

        // The receiver still notices.
        let receiver = TagContextView::receiver(&s.matrix, &s.layout).unwrap();
        let tag = reader_update(main, &target_view, NONCE, &tampered).unwrap();
        let writer = TagContextView::middlebox(&s.matrix, &s.rights, &s.layout, EntityId(2)).unwrap();
        let tag = writer_update(tag, &writer, NONCE, &tampered, &tampered).unwrap();
        assert!(!receiver_verify(tag, &receiver, NONCE, &tampered).unwrap());
    }
}
