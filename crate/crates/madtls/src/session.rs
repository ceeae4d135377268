//! Established-session endpoints: protecting, forwarding, and opening
//! records.
//!
//! [`SenderSession`] turns plaintexts into protected records and issues
//! injection templates. [`MiddleboxSession`] processes records in transit —
//! decrypting what it may read, rewriting what it may write, rotating the
//! aggregated tag, and maintaining downstream middlebox tags — and injects
//! messages from its templates. [`ReceiverSession`] verifies, replay-checks,
//! and decrypts. All three are transport-agnostic: bytes in, bytes out.

use std::collections::BTreeMap;
use thiserror::Error;

use crate::access::{
    Access, AccessError, ConfigError, ContextId, EntityId, KeyMatrix, MiddleboxKeySet,
    SegmentationInfo, SessionConfig,
};
use crate::bits::Bits;
use crate::crypto::{CryptoError, MacKey, Nonce, PartialTag};
use crate::handshake::{MiddleboxSessionState, SessionState};
use crate::inject::{
    self, ControlMessage, EpochAllocator, InjectError, MessageTemplate, SegmentKind,
};
use crate::record::{
    content_type, decode_plain_record, decode_record, decrypt_segments_for, encode_plain_record,
    encode_record, encrypt_segments, join_segments, split_segments, LayoutRef, PlainRecord,
    ProtectedRecord, RecordError,
};
use crate::replay::EpochWindows;
use crate::tag::{
    reader_update, receiver_verify, selfverify_check, selfverify_update, writer_update,
    AccessSets, AggregatedTag, SenderTags, TagContextView, TagError,
};

/// First regular data epoch after the handshake.
pub const DATA_EPOCH: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("template {0} is not in the session table")]
    UnknownTemplate(u8),
    #[error("template {0} was not issued to this middlebox")]
    NotOurTemplate(u8),
    #[error("rewrite changed the bit length of segment {0}")]
    RewriteLength(usize),
    #[error("sequence space exhausted")]
    SequenceExhausted,
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Why the receiver (or a middlebox) refused a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    TagMismatch,
    Replay,
    /// Content type and epoch disagree: regular records must use the data
    /// epoch, injected records a registered injection epoch.
    EpochMismatch,
    UnknownInjectionEpoch,
    ControlAuthFailure,
    Malformed(String),
    MiddleboxTagMismatch,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::TagMismatch => write!(f, "aggregated tag mismatch"),
            RejectReason::Replay => write!(f, "replayed sequence number"),
            RejectReason::EpochMismatch => write!(f, "content type does not match the epoch"),
            RejectReason::UnknownInjectionEpoch => write!(f, "unregistered injection epoch"),
            RejectReason::ControlAuthFailure => write!(f, "control record failed authentication"),
            RejectReason::Malformed(what) => write!(f, "malformed record: {what}"),
            RejectReason::MiddleboxTagMismatch => write!(f, "middlebox tag mismatch"),
        }
    }
}

/// Sending endpoint of an established session.
pub struct SenderSession {
    matrix: KeyMatrix,
    config: SessionConfig,
    epoch: u16,
    next_seq: u64,
    allocator: EpochAllocator,
    issued: BTreeMap<u8, MessageTemplate>,
}

impl SenderSession {
    pub fn new(state: SessionState) -> Self {
        Self {
            matrix: state.matrix,
            config: state.config,
            epoch: DATA_EPOCH,
            next_seq: 0,
            allocator: EpochAllocator::new(),
            issued: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn matrix(&self) -> &KeyMatrix {
        &self.matrix
    }

    fn allocate_seq(&mut self) -> Result<Nonce, SessionError> {
        if self.next_seq >= 1 << 48 {
            return Err(SessionError::SequenceExhausted);
        }
        let nonce = Nonce::new(self.epoch, self.next_seq);
        self.next_seq += 1;
        Ok(nonce)
    }

    fn resolve_layout(&self, layout_ref: &LayoutRef) -> Result<SegmentationInfo, SessionError> {
        match layout_ref {
            LayoutRef::Template(id) => self
                .config
                .templates
                .get(*id)
                .cloned()
                .ok_or(SessionError::UnknownTemplate(*id)),
            LayoutRef::Explicit(layout) => Ok(layout.clone()),
        }
    }

    /// Protects one message: per-segment encryption, the aggregated tag,
    /// and one tag per self-verifying middlebox.
    pub fn protect(
        &mut self,
        layout_ref: LayoutRef,
        plaintext: &Bits,
    ) -> Result<Vec<u8>, SessionError> {
        let layout = self.resolve_layout(&layout_ref)?;
        let nonce = self.allocate_seq()?;
        let ciphertext = encrypt_segments(plaintext, &layout, &self.matrix, nonce)?;
        let segments = split_segments(&ciphertext, &layout)?;

        let view = TagContextView::sender(&self.matrix, &layout)?;
        let tags = SenderTags::compute(&view, nonce, &segments)?;
        let mut selfverify_tags = Vec::new();
        for &target in &self.config.selfverify {
            let sets = AccessSets::of(&self.config.rights, &layout, target);
            selfverify_tags.push((target, tags.selfverify(&sets)));
        }

        let record = ProtectedRecord {
            content_type: content_type::DATA,
            nonce,
            m_flag: !selfverify_tags.is_empty(),
            layout_ref,
            ciphertext,
            selfverify_tags,
            main_tag: tags.main_tag().0,
        };
        Ok(encode_record(&record)?)
    }

    /// Issues an injection template for `injector` over the table layout
    /// `template_id`, with tags for sequences `1..=count`. Returns the
    /// issuer's copy and the control records that carry the registration
    /// and the tag stream to the middlebox and the receiver.
    pub fn issue_template(
        &mut self,
        template_id: u8,
        kinds: Vec<SegmentKind>,
        injector: EntityId,
        fixed_plaintext: &BTreeMap<usize, Bits>,
        count: u64,
    ) -> Result<Vec<Vec<u8>>, SessionError> {
        let layout = self
            .config
            .templates
            .get(template_id)
            .cloned()
            .ok_or(SessionError::UnknownTemplate(template_id))?;
        let epoch = self.allocator.allocate(self.epoch)?;
        let template = inject::issue_template(
            &self.matrix,
            &self.config.rights,
            template_id,
            &layout,
            kinds,
            injector,
            epoch,
            fixed_plaintext,
            1..count + 1,
        )?;

        let kd = self
            .matrix
            .kd_key(injector)
            .ok_or(AccessError::AccessViolation {
                context: 0,
                entity: injector.index(),
                kind: crate::access::KeyKind::Write,
            })?
            .clone();
        let register = ControlMessage::RegisterTemplate {
            template_id,
            epoch,
            injector,
            kinds: template.kinds.clone(),
            fixed_ciphertext: template.fixed_ciphertext.clone(),
        };
        let range = ControlMessage::TagRange {
            template_id,
            start: 1,
            tags: template.base_tags.values().map(|t| t.0).collect(),
        };
        let mut records = Vec::new();
        for msg in [register, range] {
            records.push(self.control_record(&msg, &kd)?);
        }
        self.issued.insert(template_id, template);
        Ok(records)
    }

    /// Ships base tags for the next `count` sequences of an already issued
    /// template, without retransmitting the template.
    pub fn extend_tag_stream(
        &mut self,
        template_id: u8,
        count: u64,
    ) -> Result<Vec<u8>, SessionError> {
        let template = self
            .issued
            .get_mut(&template_id)
            .ok_or(SessionError::UnknownTemplate(template_id))?;
        let start = template.highest_issued().map_or(1, |h| h + 1);
        inject::extend_template(&self.matrix, template, start..start + count)?;
        let kd = self
            .matrix
            .kd_key(template.injector)
            .expect("issued template implies a kd key")
            .clone();
        let tags = (start..start + count)
            .map(|s| template.base_tags[&s].0)
            .collect();
        let msg = ControlMessage::TagRange {
            template_id,
            start,
            tags,
        };
        self.control_record(&msg, &kd)
    }

    fn control_record(&mut self, msg: &ControlMessage, kd: &MacKey) -> Result<Vec<u8>, SessionError> {
        let nonce = self.allocate_seq()?;
        let payload = inject::encode_control(msg, kd, nonce);
        Ok(encode_plain_record(&PlainRecord {
            content_type: content_type::TAG_STREAM,
            nonce,
            payload,
        })?)
    }
}

/// What a middlebox should do when its own tag check fails.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TamperPolicy {
    /// Consume the record and report; downstream never sees it.
    #[default]
    DropAndReport,
    /// Report but forward (updates applied), leaving the decision to the
    /// receiver.
    ForwardAndReport,
}

/// How a middlebox handled one record.
#[derive(Debug)]
pub struct MiddleboxOutcome {
    /// The record as forwarded, or `None` if consumed.
    pub forward: Option<Vec<u8>>,
    /// Decrypted plaintext of each readable segment.
    pub view: BTreeMap<usize, Bits>,
    /// Result of this middlebox's own tag check, when it is self-verifying
    /// and the record carried its tag.
    pub selfverify: Option<bool>,
    /// Total payload bits of a processed data record.
    pub payload_bits: Option<u64>,
}

type RewriteHook<'a> = &'a mut dyn FnMut(usize, ContextId, &Bits) -> Option<Bits>;

/// A middlebox on the established path.
pub struct MiddleboxSession {
    keys: MiddleboxKeySet,
    config: SessionConfig,
    entity: EntityId,
    kd: MacKey,
    pub policy: TamperPolicy,
    /// Templates this middlebox may inject from.
    own_templates: BTreeMap<u8, MessageTemplate>,
    /// Advisory (unauthenticated) registrations observed in transit, for
    /// decrypting other injectors' records: epoch to (template id, kinds).
    observed_registrations: BTreeMap<u16, (u8, Vec<SegmentKind>)>,
}

impl MiddleboxSession {
    pub fn new(state: MiddleboxSessionState) -> Self {
        Self {
            keys: state.keys,
            config: state.config,
            entity: state.entity,
            kd: state.kd,
            policy: TamperPolicy::default(),
            own_templates: BTreeMap::new(),
            observed_registrations: BTreeMap::new(),
        }
    }

    pub fn entity(&self) -> EntityId {
        self.entity
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Injects sequence `sequence` of an issued template, consuming its
    /// pre-issued tag.
    pub fn inject(
        &mut self,
        template_id: u8,
        sequence: u64,
        values: &BTreeMap<usize, Bits>,
    ) -> Result<Vec<u8>, SessionError> {
        let template = self
            .own_templates
            .get_mut(&template_id)
            .ok_or(SessionError::NotOurTemplate(template_id))?;
        let base = template.consume(sequence)?;
        let nonce = Nonce::new(template.epoch, sequence);
        let old = template.skeleton();
        let new = inject::fill_placeholders(&self.keys, template, sequence, values)?;

        let view = TagContextView::from_key_set(&self.keys, &template.layout);
        let tag = reader_update(base, &view, nonce, &old)?;
        let tag = writer_update(tag, &view, nonce, &old, &new)?;

        let record = ProtectedRecord {
            content_type: content_type::INJECTED,
            nonce,
            m_flag: false,
            layout_ref: LayoutRef::Template(template_id),
            ciphertext: join_segments(&new),
            selfverify_tags: Vec::new(),
            main_tag: tag.0,
        };
        Ok(encode_record(&record)?)
    }

    /// Processes one in-flight record.
    pub fn process(
        &mut self,
        wire: &[u8],
        rewrite: RewriteHook<'_>,
    ) -> Result<MiddleboxOutcome, SessionError> {
        let Some(first) = wire.first() else {
            return Ok(self.forward_unchanged(wire));
        };
        match *first {
            content_type::TAG_STREAM => self.process_control(wire),
            content_type::DATA | content_type::INJECTED => self.process_data(wire, rewrite),
            _ => Ok(self.forward_unchanged(wire)),
        }
    }

    fn forward_unchanged(&self, wire: &[u8]) -> MiddleboxOutcome {
        MiddleboxOutcome {
            forward: Some(wire.to_vec()),
            view: BTreeMap::new(),
            selfverify: None,
            payload_bits: None,
        }
    }

    fn process_control(&mut self, wire: &[u8]) -> Result<MiddleboxOutcome, SessionError> {
        let Ok(record) = decode_plain_record(wire) else {
            return Ok(self.forward_unchanged(wire));
        };
        // Try first as the addressee (authenticated), then as an observer.
        let own = inject::decode_control(
            &record.payload,
            &self.config.templates,
            Some(&self.kd),
            record.nonce,
        );
        let msg = match own {
            Ok(msg) => Some((msg, true)),
            Err(_) => inject::decode_control(
                &record.payload,
                &self.config.templates,
                None,
                record.nonce,
            )
            .ok()
            .map(|msg| (msg, false)),
        };
        if let Some((msg, authenticated)) = msg {
            match &msg {
                ControlMessage::RegisterTemplate {
                    template_id,
                    epoch,
                    injector,
                    kinds,
                    ..
                } => {
                    self.observed_registrations
                        .insert(*epoch, (*template_id, kinds.clone()));
                    if authenticated && *injector == self.entity {
                        let template =
                            inject::template_from_control(&msg, &self.config.templates)?;
                        self.own_templates.insert(*template_id, template);
                    }
                }
                ControlMessage::TagRange { template_id, .. } => {
                    if authenticated {
                        if let Some(template) = self.own_templates.get_mut(template_id) {
                            inject::absorb_tag_range(template, &msg)?;
                        }
                    }
                }
            }
        }
        Ok(self.forward_unchanged(wire))
    }

    fn process_data(
        &mut self,
        wire: &[u8],
        rewrite: RewriteHook<'_>,
    ) -> Result<MiddleboxOutcome, SessionError> {
        let Ok((record, layout)) = decode_record(wire, &self.config.templates) else {
            // Unparseable records are forwarded untouched; the receiver
            // rejects them.
            return Ok(self.forward_unchanged(wire));
        };
        let nonce = record.nonce;
        let old = split_segments(&record.ciphertext, &layout)?;
        let view = TagContextView::from_key_set(&self.keys, &layout);

        // Own tag check first: a side-effecting middlebox must not act on
        // unverified data.
        let mut selfverify = None;
        let mut remaining_tags = record.selfverify_tags.clone();
        if let Some(pos) = remaining_tags.iter().position(|(e, _)| *e == self.entity) {
            let (_, tag) = remaining_tags.remove(pos);
            let ok = selfverify_check(&view, nonce, &old, tag)?;
            selfverify = Some(ok);
            if !ok && self.policy == TamperPolicy::DropAndReport {
                return Ok(MiddleboxOutcome {
                    forward: None,
                    view: BTreeMap::new(),
                    selfverify,
                    payload_bits: Some(layout.total_bits()),
                });
            }
        }

        // Decrypt the readable segments.
        let plain_view = if record.content_type == content_type::INJECTED {
            match self.observed_registrations.get(&nonce.epoch) {
                Some((_, kinds)) => inject::decrypt_injected_for(
                    &self.keys,
                    &record.ciphertext,
                    &layout,
                    kinds,
                    nonce.epoch,
                    nonce.sequence,
                )?,
                None => BTreeMap::new(),
            }
        } else {
            decrypt_segments_for(&self.keys, &record.ciphertext, &layout, nonce)?
        };

        // Rewrite writable segments and re-encrypt.
        let mut new = old.clone();
        for (i, seg) in layout.segments().iter().enumerate() {
            if self.config.rights.get(seg.context, self.entity) != Some(Access::Write) {
                continue;
            }
            let Some(plaintext) = plain_view.get(&i) else {
                continue;
            };
            if let Some(replacement) = rewrite(i, seg.context, plaintext) {
                if replacement.len() != plaintext.len() {
                    return Err(SessionError::RewriteLength(i));
                }
                // Same keystream bits as decryption used.
                let delta = replacement.xor(plaintext);
                new[i] = old[i].xor(&delta);
            }
        }

        // Rotate the aggregated tag and every downstream middlebox tag.
        let mut tag = AggregatedTag(record.main_tag);
        tag = reader_update(tag, &view, nonce, &old)?;
        tag = writer_update(tag, &view, nonce, &old, &new)?;

        let mut forwarded_tags: Vec<(EntityId, PartialTag)> = Vec::new();
        for (target, tj) in remaining_tags {
            if target > self.entity {
                let sets = AccessSets::of(&self.config.rights, &layout, target);
                let updated = selfverify_update(tj, &view, &sets, nonce, &old, &new)?;
                forwarded_tags.push((target, updated));
            } else {
                forwarded_tags.push((target, tj));
            }
        }

        let forwarded = ProtectedRecord {
            content_type: record.content_type,
            nonce,
            m_flag: record.m_flag,
            layout_ref: record.layout_ref,
            ciphertext: join_segments(&new),
            selfverify_tags: forwarded_tags,
            main_tag: tag.0,
        };
        Ok(MiddleboxOutcome {
            forward: Some(encode_record(&forwarded)?),
            view: plain_view,
            selfverify,
            payload_bits: Some(layout.total_bits()),
        })
    }
}

/// The record as accepted (or not) by the receiving endpoint.
#[derive(Debug, PartialEq, Eq)]
pub enum Opened {
    Data {
        plaintext: Bits,
        nonce: Nonce,
        injected: bool,
    },
    Rejected(RejectReason),
    /// A session control record, consumed.
    Control,
    /// Not a protected record (handshake retransmissions and the like).
    Ignored(u8),
}

struct RegisteredInjection {
    template: MessageTemplate,
}

/// Receiving endpoint of an established session.
pub struct ReceiverSession {
    matrix: KeyMatrix,
    config: SessionConfig,
    windows: EpochWindows,
    injections: BTreeMap<u16, RegisteredInjection>,
}

impl ReceiverSession {
    pub fn new(state: SessionState) -> Self {
        Self {
            matrix: state.matrix,
            config: state.config,
            windows: EpochWindows::new(),
            injections: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Verifies, replay-checks, and decrypts one record.
    pub fn open(&mut self, wire: &[u8]) -> Result<Opened, SessionError> {
        let Some(first) = wire.first() else {
            return Ok(Opened::Rejected(RejectReason::Malformed("empty".into())));
        };
        match *first {
            content_type::TAG_STREAM => self.open_control(wire),
            content_type::DATA | content_type::INJECTED => self.open_data(wire),
            other => Ok(Opened::Ignored(other)),
        }
    }

    fn open_control(&mut self, wire: &[u8]) -> Result<Opened, SessionError> {
        let record = match decode_plain_record(wire) {
            Ok(r) => r,
            Err(e) => return Ok(Opened::Rejected(RejectReason::Malformed(e.to_string()))),
        };
        // Replay protection shares the regular stream's window: control
        // records ride the sender's data-epoch sequence space.
        // Peek the injector to pick the right verification key.
        let unauthenticated = match inject::decode_control(
            &record.payload,
            &self.config.templates,
            None,
            record.nonce,
        ) {
            Ok(msg) => msg,
            Err(e) => return Ok(Opened::Rejected(RejectReason::Malformed(e.to_string()))),
        };
        let injector = match &unauthenticated {
            ControlMessage::RegisterTemplate { injector, .. } => *injector,
            ControlMessage::TagRange { template_id, .. } => {
                match self
                    .injections
                    .values()
                    .find(|r| r.template.template_id == *template_id)
                {
                    Some(r) => r.template.injector,
                    None => {
                        return Ok(Opened::Rejected(RejectReason::Malformed(
                            "tag range for unregistered template".into(),
                        )))
                    }
                }
            }
        };
        let Some(kd) = self.matrix.kd_key(injector) else {
            return Ok(Opened::Rejected(RejectReason::ControlAuthFailure));
        };
        let msg = match inject::decode_control(
            &record.payload,
            &self.config.templates,
            Some(kd),
            record.nonce,
        ) {
            Ok(msg) => msg,
            Err(InjectError::ControlAuthFailure) => {
                return Ok(Opened::Rejected(RejectReason::ControlAuthFailure))
            }
            Err(e) => return Ok(Opened::Rejected(RejectReason::Malformed(e.to_string()))),
        };
        if !self
            .windows
            .check_and_update(record.nonce.epoch, record.nonce.sequence)
        {
            return Ok(Opened::Rejected(RejectReason::Replay));
        }
        match &msg {
            ControlMessage::RegisterTemplate { epoch, .. } => {
                let template = inject::template_from_control(&msg, &self.config.templates)?;
                self.injections.insert(*epoch, RegisteredInjection { template });
            }
            ControlMessage::TagRange { .. } => {
                // The receiver verifies records directly; tag ranges are
                // consumed for completeness only.
            }
        }
        Ok(Opened::Control)
    }

    fn open_data(&mut self, wire: &[u8]) -> Result<Opened, SessionError> {
        let (record, layout) = match decode_record(wire, &self.config.templates) {
            Ok(r) => r,
            Err(e) => return Ok(Opened::Rejected(RejectReason::Malformed(e.to_string()))),
        };
        let nonce = record.nonce;
        let injected = record.content_type == content_type::INJECTED;

        // Content type and epoch must agree.
        if injected {
            if nonce.epoch == DATA_EPOCH {
                return Ok(Opened::Rejected(RejectReason::EpochMismatch));
            }
            if !self.injections.contains_key(&nonce.epoch) {
                return Ok(Opened::Rejected(RejectReason::UnknownInjectionEpoch));
            }
            if nonce.sequence == inject::TEMPLATE_SEQUENCE {
                return Ok(Opened::Rejected(RejectReason::EpochMismatch));
            }
        } else if nonce.epoch != DATA_EPOCH {
            return Ok(Opened::Rejected(RejectReason::EpochMismatch));
        }

        let segments = split_segments(&record.ciphertext, &layout)?;
        let view = TagContextView::receiver(&self.matrix, &layout)?;
        if !receiver_verify(AggregatedTag(record.main_tag), &view, nonce, &segments)? {
            return Ok(Opened::Rejected(RejectReason::TagMismatch));
        }
        // Window update only after successful verification, so forged
        // sequence numbers cannot poison it.
        if !self.windows.check_and_update(nonce.epoch, nonce.sequence) {
            return Ok(Opened::Rejected(RejectReason::Replay));
        }

        let plaintext = if injected {
            let registration = &self.injections[&nonce.epoch];
            let parts = inject::decrypt_injected_for(
                &self.matrix,
                &record.ciphertext,
                &layout,
                &registration.template.kinds,
                nonce.epoch,
                nonce.sequence,
            )?;
            join_segments(&parts.into_values().collect::<Vec<_>>())
        } else {
            let parts = decrypt_segments_for(&self.matrix, &record.ciphertext, &layout, nonce)?;
            join_segments(&parts.into_values().collect::<Vec<_>>())
        };
        Ok(Opened::Data {
            plaintext,
            nonce,
            injected,
        })
    }
}
