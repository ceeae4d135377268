//! Scenario execution: handshake, template issuance, traffic with attacks.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

use super::report::{BlindingStats, HopTrace, MessageReport, RunReport};
use super::transport::{DatagramWire, MemoryWire, Wire};
use super::{
    ActualOutcome, AttackDirective, Scenario, ScenarioError, Transform, TrafficItem, TrafficKind,
    TransportKind,
};
use crate::access::{
    Access, AccessRights, ContextId, EntityId, KeyKind, KeyMatrix, SegmentationInfo,
    SessionConfig, TemplateTable,
};
use crate::bits::Bits;
use crate::crypto::{domain, mac, metrics, PartialTag};
use crate::handshake::{
    run_handshake, AuthMode, ClientHandshake, HandshakeOutcome, HelloExtension, MiddleboxAddr,
    MiddleboxObserver, ServerAdditions, ServerHandshake, SUITE_AES256CTR_HMACSHA256,
};
use crate::inject::SegmentKind;
use crate::record::{decode_record, encode_record, split_segments};
use crate::session::{
    MiddleboxSession, Opened, ReceiverSession, SenderSession, SessionError,
};

struct Runtime {
    scenario: Scenario,
    config: SessionConfig,
    matrix: KeyMatrix,
    sender: SenderSession,
    middleboxes: Vec<MiddleboxSession>,
    receiver: ReceiverSession,
    wire: Box<dyn Wire>,
    rng: ChaCha20Rng,
    handshake_flights: usize,
    /// Issued injection templates: name -> (table id, kinds).
    issued: BTreeMap<String, (u8, Vec<SegmentKind>)>,
    blinding: BTreeMap<String, BlindingStats>,
}

/// Validates and executes a scenario.
pub fn run_scenario(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    let violations = validate(scenario);
    if !violations.is_empty() {
        return Err(ScenarioError::Invalid { violations });
    }
    let mut runtime = establish(scenario.clone())?;
    runtime.issue_templates()?;

    let mut messages = Vec::new();
    for (index, item) in runtime.scenario.traffic.clone().iter().enumerate() {
        messages.push(runtime.execute(index, item)?);
    }
    Ok(RunReport {
        scenario: runtime.scenario.name.clone(),
        handshake_flights: runtime.handshake_flights,
        messages,
        blinding: runtime.blinding,
    })
}

fn validate(s: &Scenario) -> Vec<String> {
    let mut v = Vec::new();
    if s.entities.len() < 2 {
        v.push("need at least a sender and a receiver".into());
    }
    for (i, e) in s.entities.iter().enumerate() {
        if s.entities.iter().skip(i + 1).any(|o| o.name == e.name) {
            v.push(format!("duplicate entity `{}`", e.name));
        }
        if e.selfverify && (i == 0 || i + 1 == s.entities.len()) {
            v.push(format!("endpoint `{}` cannot be self-verifying", e.name));
        }
    }
    for (i, c) in s.contexts.iter().enumerate() {
        if s.contexts.iter().skip(i + 1).any(|o| o == c) {
            v.push(format!("duplicate context `{c}`"));
        }
    }
    let is_middlebox = |name: &str|

        s.entity_index(name).is_some_and(|e| {
            e.index() > 0 && usize::from(e.index()) + 1 < s.entities.len()
        });
    for (entity, ctx, _) in &s.rights {
        if !is_middlebox(entity) {
            v.push(format!("rights for `{entity}`, which is not a middlebox"));
        }
        if s.context_index(ctx).is_none() {
            v.push(format!("rights on undeclared context `{ctx}`"));
        }
    }
    for (name, pairs) in &s.templates {
        for (ctx, bits) in pairs {
            if s.context_index(ctx).is_none() {
                v.push(format!("template `{name}` references undeclared context `{ctx}`"));
            }
            if *bits == 0 {
                v.push(format!("template `{name}` has a zero-length segment"));
            }
        }
    }
    for (entity, ctx, Transform::Xor(delta)) in &s.transforms {
        if !s
            .rights
            .iter()
            .any(|(e, c, a)| e == entity && c == ctx && *a == Access::Write)
        {
            v.push(format!("transform by `{entity}` on `{ctx}` without write access"));
        }
        for (name, pairs) in &s.templates {
            for (c, bits) in pairs {
                if c == ctx && *bits as usize != delta.len() {
                    v.push(format!(
                        "transform delta for `{ctx}` is {} bits but template `{name}` gives it {bits}",
                        delta.len()
                    ));
                }
            }
        }
    }
    for decl in &s.injections {
        if s.template_id(&decl.template).is_none() {
            v.push(format!("injection references unknown template `{}`", decl.template));
        }
        if !is_middlebox(&decl.injector) {
            v.push(format!("injector `{}` is not a middlebox", decl.injector));
        }
        for ctx in decl.fixed.keys() {
            if s.context_index(ctx).is_none() {
                v.push(format!("fixed payload for undeclared context `{ctx}`"));
            }
        }
    }
    for (i, item) in s.traffic.iter().enumerate() {
        match &item.kind {
            TrafficKind::Regular { template, payload } => {
                match s.templates.iter().find(|(n, _)| n == template) {
                    None => v.push(format!("message {i} uses unknown template `{template}`")),
                    Some((_, pairs)) => {
                        let total: u64 = pairs.iter().map(|(_, b)| u64::from(*b)).sum();
                        if payload.len() as u64 != total {
                            v.push(format!(
                                "message {i} payload is {} bits, template `{template}` needs {total}",
                                payload.len()
                            ));
                        }
                    }
                }
            }
            TrafficKind::Injected { by, template, .. } => {
                match s.injections.iter().find(|d| &d.template == template) {
                    None => v.push(format!("message {i} injects undeclared template `{template}`")),
                    Some(decl) => {
                        if &decl.injector != by {
                            v.push(format!(
                                "message {i} injected by `{by}` but `{template}` was issued to `{}`",
                                decl.injector
                            ));
                        }
                    }
                }
            }
        }
        for attack in &item.attacks {
            if let AttackDirective::Collude { context, .. } = attack {
                if s.context_index(context).is_none() {
                    v.push(format!("message {i} colludes on undeclared context `{context}`"));
                }
            }
        }
        if let super::ExpectedOutcome::RejectAtMiddlebox(name)
        | super::ExpectedOutcome::Dropped(name) = &item.expect
        {
            if !is_middlebox(name) {
                v.push(format!("message {i} expects a verdict at unknown middlebox `{name}`"));
            }
        }
    }
    v
}

fn build_config(s: &Scenario) -> Result<SessionConfig, ScenarioError> {
    let mut rights = AccessRights::new();
    for (entity, ctx, access) in &s.rights {
        rights.grant(
            s.context_index(ctx).expect("validated"),
            s.entity_index(entity).expect("validated"),
            *access,
        );
    }
    let mut templates = TemplateTable::new();
    for (_, pairs) in &s.templates {
        let resolved: Vec<(u32, u8)> = pairs
            .iter()
            .map(|(ctx, bits)| (*bits, s.context_index(ctx).expect("validated").index()))
            .collect();
        templates.append(SegmentationInfo::from_pairs(&resolved)?)?;
    }
    let config = SessionConfig {
        entity_count: s.entities.len() as u8,
        contexts: (0..s.contexts.len() as u8).map(ContextId).collect(),
        rights,
        templates,
        selfverify: s
            .entities
            .iter()
            .enumerate()
            .filter(|(_, e)| e.selfverify)
            .map(|(i, _)| EntityId(i as u8))
            .collect(),
    };
    config.validate()?;
    Ok(config)
}

fn establish(scenario: Scenario) -> Result<Runtime, ScenarioError> {
    let config = build_config(&scenario)?;
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);

    let mut psk_sr = vec![0u8; 32];
    rng.fill_bytes(&mut psk_sr);
    let mut psks_sm = BTreeMap::new();
    let mut addrs = Vec::new();
    for m in config.middleboxes() {
        let mut psk = vec![0u8; 32];
        rng.fill_bytes(&mut psk);
        psks_sm.insert(m, psk);
        addrs.push(MiddleboxAddr {
            ip: [10, 0, 0, m.index()],
            port: 4433 + u16::from(m.index()),
        });
    }

    let extension = HelloExtension {
        middleboxes: addrs.clone(),
        selfverify: config
            .middleboxes()
            .map(|m| config.selfverify.contains(&m))
            .collect(),
        context_rows: config
            .contexts
            .iter()
            .map(|ctx| {
                config
                    .middleboxes()
                    .map(|m| config.rights.get(*ctx, m))
                    .collect()
            })
            .collect(),
        templates: config
            .templates
            .iter()
            .map(|(_, layout)| layout.clone())
            .collect(),
    };

    let mut client_random = [0u8; 32];
    rng.fill_bytes(&mut client_random);
    let mut server_random = [0u8; 32];
    rng.fill_bytes(&mut server_random);

    let client = ClientHandshake::new(
        extension,
        psk_sr.clone(),
        psks_sm.clone(),
        b"pre-exchanged cookie".to_vec(),
        vec![SUITE_AES256CTR_HMACSHA256],
        client_random,
        AuthMode::PresharedKeys,
    );
    let server = ServerHandshake::new(
        psk_sr,
        psks_sm.clone(),
        vec![SUITE_AES256CTR_HMACSHA256],
        ServerAdditions::default(),
        server_random,
    );
    let mut observers: Vec<MiddleboxObserver> = config
        .middleboxes()
        .map(|m| {
            MiddleboxObserver::new(
                addrs[usize::from(m.index()) - 1],
                psks_sm[&m].clone(),
            )
        })
        .collect();

    let HandshakeOutcome {
        client: client_session,
        server: server_session,
        middleboxes,
        flights,
    } = run_handshake(client, server, &mut observers, |_, _| {})
        .map_err(|e| ScenarioError::Execution(format!("handshake failed: {e}")))?;

    let matrix = client_session.matrix.clone();
    let wire: Box<dyn Wire> = match scenario.transport {
        TransportKind::Memory => Box::new(MemoryWire {
            loss_percent: scenario.loss_percent,
        }),
        TransportKind::Datagram => Box::new(DatagramWire::bind(
            scenario.entities.len(),
            scenario.loss_percent,
        )?),
    };
    let blinding = scenario
        .entities
        .iter()
        .enumerate()
        .filter(|(i, _)| *i > 0 && i + 1 < scenario.entities.len())
        .map(|(_, e)| (e.name.clone(), BlindingStats::default()))
        .collect();

    Ok(Runtime {
        scenario,
        config,
        matrix,
        sender: SenderSession::new(client_session),
        middleboxes: middleboxes.into_iter().map(MiddleboxSession::new).collect(),
        receiver: ReceiverSession::new(server_session),
        wire,
        rng,
        handshake_flights: flights,
        issued: BTreeMap::new(),
        blinding,
    })
}

impl Runtime {
    fn middlebox_mut(&mut self, entity: EntityId) -> &mut MiddleboxSession {
        &mut self.middleboxes[usize::from(entity.index()) - 1]
    }

    /// Issues every declared injection template and pushes the control
    /// records through the (lossless) pipeline.
    fn issue_templates(&mut self) -> Result<(), ScenarioError> {
        for decl in self.scenario.injections.clone() {
            let template_id = self.scenario.template_id(&decl.template).expect("validated");
            let injector = self.scenario.entity_index(&decl.injector).expect("validated");
            let layout = self
                .config
                .templates
                .get(template_id)
                .expect("validated")
                .clone();

            let mut kinds = Vec::new();
            let mut fixed_plaintext = BTreeMap::new();
            for (i, seg) in layout.segments().iter().enumerate() {
                let ctx_name = &self.scenario.contexts[usize::from(seg.context.index())];
                match decl.fixed.get(ctx_name) {
                    Some(payload) => {
                        kinds.push(SegmentKind::Fixed);
                        fixed_plaintext.insert(i, payload.clone());
                    }
                    None => kinds.push(SegmentKind::Placeholder),
                }
            }

            let records = self
                .sender
                .issue_template(template_id, kinds.clone(), injector, &fixed_plaintext, decl.sequences)
                .map_err(|e| {
                    ScenarioError::Execution(format!(
                        "issuing template `{}` failed: {e}",
                        decl.template
                    ))
                })?;
            for record in records {
                let mut current = record;
                for idx in 1..self.scenario.entities.len() - 1 {
                    let outcome = self.middleboxes[idx - 1]
                        .process(&current, &mut |_, _, _| None)
                        .map_err(to_exec)?;
                    current = outcome.forward.ok_or_else(|| {
                        ScenarioError::Execution("control record consumed mid-path".into())
                    })?;
                }
                match self.receiver.open(&current).map_err(to_exec)? {
                    Opened::Control => {}
                    other => {
                        return Err(ScenarioError::Execution(format!(
                            "control record not accepted: {other:?}"
                        )))
                    }
                }
            }
            self.issued.insert(decl.template.clone(), (template_id, kinds));
        }
        Ok(())
    }

    fn execute(
        &mut self,
        index: usize,
        item: &TrafficItem,
    ) -> Result<MessageReport, ScenarioError> {
        let (initial, start, description) = match &item.kind {
            TrafficKind::Regular { template, payload } => {
                let template_id = self.scenario.template_id(template).expect("validated");
                let before = metrics::snapshot();
                let wire = self
                    .sender
                    .protect(crate::record::LayoutRef::Template(template_id), payload)
                    .map_err(to_exec)?;
                let delta = metrics::snapshot().delta_since(before);
                let trace = HopTrace {
                    entity: self.scenario.entities[0].name.clone(),
                    wire_in: 0,
                    wire_out: Some(wire.len()),
                    mac_calls: delta.mac_calls,
                    cipher_blocks: delta.cipher_blocks,
                    selfverify: None,
                };
                (Ok((wire, trace)), 0usize, format!("regular template={template}"))
            }
            TrafficKind::Injected {
                by,
                template,
                sequence,
                values,
            } => {
                let injector = self.scenario.entity_index(by).expect("validated");
                let (template_id, kinds) = self.issued[template].clone();
                let layout = self.config.templates.get(template_id).unwrap().clone();
                let mut by_segment = BTreeMap::new();
                for (i, seg) in layout.segments().iter().enumerate() {
                    if kinds[i] != SegmentKind::Placeholder {
                        continue;
                    }
                    let ctx_name = &self.scenario.contexts[usize::from(seg.context.index())];
                    if let Some(value) = values.get(ctx_name) {
                        by_segment.insert(i, value.clone());
                    }
                }
                let before = metrics::snapshot();
                let result = self
                    .middlebox_mut(injector)
                    .inject(template_id, *sequence, &by_segment);
                let delta = metrics::snapshot().delta_since(before);
                let description = format!("injected template={template} seq={sequence}");
                match result {
                    Ok(wire) => {
                        let trace = HopTrace {
                            entity: by.clone(),
                            wire_in: 0,
                            wire_out: Some(wire.len()),
                            mac_calls: delta.mac_calls,
                            cipher_blocks: delta.cipher_blocks,
                            selfverify: None,
                        };
                        (Ok((wire, trace)), usize::from(injector.index()), description)
                    }
                    Err(e) => (Err((by.clone(), e)), usize::from(injector.index()), description),
                }
            }
        };

        let (wire, first_trace) = match initial {
            Ok(pair) => pair,
            Err((entity, _err)) => {
                // Local injection refusal (budget/replay) counts as a
                // rejection at that middlebox.
                return Ok(MessageReport {
                    index,
                    description,
                    expected: item.expect.clone(),
                    actual: ActualOutcome::RejectedAtMiddlebox(entity),
                    wire_bytes: 0,
                    hops: Vec::new(),
                });
            }
        };

        let wire_bytes = wire.len();
        let mut hops = vec![first_trace];
        let actual = self.walk(wire, start, &item.attacks, &mut hops)?;
        Ok(MessageReport {
            index,
            description,
            expected: item.expect.clone(),
            actual,
            wire_bytes,
            hops,
        })
    }

    /// Drives one record from path position `start` to the receiver,
    /// applying attack directives between hops.
    fn walk(
        &mut self,
        wire: Vec<u8>,
        start: usize,
        attacks: &[AttackDirective],
        hops: &mut Vec<HopTrace>,
    ) -> Result<ActualOutcome, ScenarioError> {
        let entity_count = self.scenario.entities.len();

        // Visit order: middleboxes after `start` in path order, adjusted by
        // reorder/skip directives, then the receiver.
        let mut order: Vec<usize> = (start + 1..entity_count - 1).collect();
        for attack in attacks {
            match attack {
                AttackDirective::Reorder { first, second } => {
                    let a = order.iter().position(|&p| p == usize::from(first.index()));
                    let b = order.iter().position(|&p| p == usize::from(second.index()));
                    if let (Some(a), Some(b)) = (a, b) {
                        order.swap(a, b);
                    }
                }
                AttackDirective::Skip { entity } => {
                    order.retain(|&p| p != usize::from(entity.index()));
                }
                _ => {}
            }
        }

        let mut current = wire;
        let mut from = start;
        let mut active_flips: Vec<usize> = Vec::new();
        let mut collusion_pending: Option<(EntityId, ContextId, Bits)> = None;

        for (step, &pos) in order.iter().chain(std::iter::once(&(entity_count - 1))).enumerate() {
            let link = step; // link k = after the k-th processor in visit order
            let to_receiver = pos == entity_count - 1;

            // Wire-level attacks on this link.
            for attack in attacks {
                match attack {
                    AttackDirective::Flip { link: l, bits } if *l == link => {
                        current = self.flip_bits(&current, bits)?;
                        active_flips.extend(bits.iter().copied());
                    }
                    AttackDirective::Revert { link: l } if *l == link => {
                        let bits = std::mem::take(&mut active_flips);
                        current = self.flip_bits(&current, &bits)?;
                    }
                    AttackDirective::Forge { link: l } if *l == link => {
                        current = self.forge(&current)?;
                    }
                    _ => {}
                }
            }

            // Collusion: revert side, applied before `second` processes.
            if let Some((second, ctx, delta)) = collusion_pending.clone() {
                if usize::from(second.index()) == pos {
                    current = self.collusion_patch(&current, second, ctx, &delta, false)?;
                    collusion_pending = None;
                }
            }

            // Transport.
            let delivered = self
                .wire
                .transfer(from, pos, &current, &mut self.rng)?;
            let Some(delivered) = delivered else {
                return Ok(ActualOutcome::NotDelivered);
            };
            current = delivered;

            if to_receiver {
                break;
            }

            // Hop processing.
            let entity = EntityId(pos as u8);
            let entity_name = self.scenario.entity_name(entity).to_string();
            let transforms: Vec<(ContextId, Bits)> = self
                .scenario
                .transforms
                .iter()
                .filter(|(e, _, _)| e == &entity_name)
                .map(|(_, ctx, Transform::Xor(delta))| {
                    (self.scenario.context_index(ctx).expect("validated"), delta.clone())
                })
                .collect();
            let mut hook = |_i: usize, ctx: ContextId, plain: &Bits| {
                transforms
                    .iter()
                    .find(|(c, _)| *c == ctx)
                    .map(|(_, delta)| plain.xor(delta))
            };

            let wire_in = current.len();
            let before = metrics::snapshot();
            let outcome = self
                .middlebox_mut(entity)
                .process(&current, &mut hook)
                .map_err(to_exec)?;
            let delta = metrics::snapshot().delta_since(before);

            if let Some(bits) = outcome.payload_bits {
                let stats = self.blinding.get_mut(&entity_name).expect("initialized");
                stats.total_bits += bits;
                stats.readable_bits += outcome.view.values().map(|b| b.len() as u64).sum::<u64>();
            }
            hops.push(HopTrace {
                entity: entity_name.clone(),
                wire_in,
                wire_out: outcome.forward.as_ref().map(Vec::len),
                mac_calls: delta.mac_calls,
                cipher_blocks: delta.cipher_blocks,
                selfverify: outcome.selfverify,
            });

            let Some(forwarded) = outcome.forward else {
                return Ok(if outcome.selfverify == Some(false) {
                    ActualOutcome::RejectedAtMiddlebox(entity_name)
                } else {
                    ActualOutcome::DroppedAtMiddlebox(entity_name)
                });
            };
            current = forwarded;

            // Benign drop directive: consume after processing.
            if attacks.iter().any(
                |a| matches!(a, AttackDirective::Drop { entity: e } if *e == entity),
            ) {
                return Ok(ActualOutcome::DroppedAtMiddlebox(entity_name));
            }

            // Collusion: alter side, applied after `first` processed.
            for attack in attacks {
                if let AttackDirective::Collude {
                    first,
                    second,
                    context,
                    delta,
                } = attack
                {
                    if *first == entity {
                        let ctx = self.scenario.context_index(context).expect("validated");
                        current = self.collusion_patch(&current, *first, ctx, delta, true)?;
                        collusion_pending = Some((*second, ctx, delta.clone()));
                    }
                }
            }

            from = pos;
        }

        // Receiver verdict; a replay directive delivers the same bytes a
        // second time and the expectation applies to that copy.
        let mut verdict = self.open_at_receiver(&current)?;
        if attacks.iter().any(|a| matches!(a, AttackDirective::Replay)) {
            verdict = self.open_at_receiver(&current)?;
        }
        Ok(verdict)
    }

    fn open_at_receiver(&mut self, wire: &[u8]) -> Result<ActualOutcome, ScenarioError> {
        let before = metrics::snapshot();
        let opened = self.receiver.open(wire).map_err(to_exec)?;
        let _ = metrics::snapshot().delta_since(before);
        Ok(match opened {
            Opened::Data { .. } => ActualOutcome::Accepted,
            Opened::Rejected(reason) => ActualOutcome::RejectedAtReceiver(reason.to_string()),
            Opened::Control => ActualOutcome::RejectedAtReceiver("unexpected control".into()),
            Opened::Ignored(ct) => {
                ActualOutcome::RejectedAtReceiver(format!("ignored content type {ct:#04x}"))
            }
        })
    }

    /// Flips ciphertext bits of an in-flight record.
    fn flip_bits(&self, wire: &[u8], bits: &[usize]) -> Result<Vec<u8>, ScenarioError> {
        let (mut record, layout) = decode_record(wire, &self.config.templates)
            .map_err(|e| ScenarioError::Execution(format!("attack cannot parse record: {e}")))?;
        let _ = layout;
        for &bit in bits {
            if bit >= record.ciphertext.len() {
                return Err(ScenarioError::Execution(format!(
                    "flip bit {bit} outside the {}-bit ciphertext",
                    record.ciphertext.len()
                )));
            }
            record.ciphertext.flip(bit);
        }
        encode_record(&record).map_err(|e| ScenarioError::Execution(e.to_string()))
    }

    /// Replaces the record with a keyless forgery: same header and layout,
    /// random ciphertext and tag.
    fn forge(&mut self, wire: &[u8]) -> Result<Vec<u8>, ScenarioError> {
        let (mut record, _) = decode_record(wire, &self.config.templates)
            .map_err(|e| ScenarioError::Execution(format!("attack cannot parse record: {e}")))?;
        let len = record.ciphertext.len();
        record.ciphertext = (0..len).map(|_| self.rng.gen_bool(0.5)).collect();
        let mut tag = [0u8; 16];
        self.rng.fill_bytes(&mut tag);
        record.main_tag = PartialTag(tag);
        encode_record(&record).map_err(|e| ScenarioError::Execution(e.to_string()))
    }

    /// One colluder's half of the ephemeral-change forgery on the first
    /// segment of `ctx`. The alter side XORs `delta` in and patches the tag
    /// with its own read key; the revert side XORs it back out and patches
    /// with its read-key predecessor. A colluder without the read key
    /// changes the data but cannot fix the tag.
    fn collusion_patch(
        &mut self,
        wire: &[u8],
        colluder: EntityId,
        ctx: ContextId,
        delta: &Bits,
        alter: bool,
    ) -> Result<Vec<u8>, ScenarioError> {
        let (mut record, layout) = decode_record(wire, &self.config.templates)
            .map_err(|e| ScenarioError::Execution(format!("attack cannot parse record: {e}")))?;
        let Some(segment) = layout.segments().iter().position(|s| s.context == ctx) else {
            return Err(ScenarioError::Execution(
                "collusion context not in this record's layout".into(),
            ));
        };
        let segments = split_segments(&record.ciphertext, &layout)
            .map_err(|e| ScenarioError::Execution(e.to_string()))?;
        let old = segments[segment].clone();
        if old.len() != delta.len() {
            return Err(ScenarioError::Execution(format!(
                "collusion delta is {} bits, segment {segment} has {}",
                delta.len(),
                old.len()
            )));
        }
        let new = old.xor(delta);

        // Tag patch, only possible with the colluder's actual key material.
        let key = if alter {
            self.matrix.read_key(ctx, colluder).cloned()
        } else {
            self.matrix
                .predecessor_key(ctx, colluder, KeyKind::Read)
                .ok()
                .cloned()
        };
        if let Some(key) = key {
            let d = domain::record_segment(record.nonce, segment as u8);
            record.main_tag = record
                .main_tag
                .xor(mac(&key, &d, &old))
                .xor(mac(&key, &d, &new));
        }

        let mut rebuilt = Bits::new();
        for (i, seg) in segments.iter().enumerate() {
            rebuilt.extend(if i == segment { &new } else { seg });
        }
        record.ciphertext = rebuilt;
        encode_record(&record).map_err(|e| ScenarioError::Execution(e.to_string()))
    }
}

fn to_exec(e: SessionError) -> ScenarioError {
    ScenarioError::Execution(e.to_string())
}
