//! DTLS 1.2 handshake, extended for middlebox sessions.
//!
//! The standard four flights stay in place, so session establishment costs
//! no extra round trips:
//!
//! 1. `ClientHello` carrying the middlebox list (path order), per-context
//!    rights rows, self-verify flags, and the template table,
//! 2. `ServerHello` (suite selection, the replayed extension plus any
//!    server-added contexts/templates) and `ServerHelloDone`,
//! 3. `ClientKeyExchange` with one encrypted key blob per entitled
//!    middlebox, then `ChangeCipherSpec` and `Finished`,
//! 4. the server's `ChangeCipherSpec` and `Finished`.
//!
//! Middleboxes observe the flights in transit: the hellos tell them the
//! session's rights and layouts, and each extracts exactly its own blob from
//! the passing `ClientKeyExchange`. Both endpoints authenticate the whole
//! transcript through `Finished`; any in-flight modification of a flight
//! surfaces there.
//!
//! Authentication is by pre-shared secrets: one between the endpoints and
//! one per middlebox. Certificate-based middlebox authentication is not
//! supported and reports as such.

use std::collections::BTreeMap;
use thiserror::Error;

use crate::access::{
    derive_key_matrix, Access, AccessError, AccessRights, ConfigError, ContextId, EntityId,
    KeyMatrix, MiddleboxKeySet, SegmentationInfo, SessionConfig, TemplateTable, MAX_CONTEXTS,
    MAX_TEMPLATES,
};
use crate::bits::Bits;
use crate::crypto::{
    domain, kdf_mac_key, kdf_stream_key, keystream_xor, mac, CryptoError, MacKey, Nonce,
    PartialTag, TAG_LEN,
};
use crate::record::{
    content_type, decode_plain_record, encode_plain_record, PlainRecord, RecordError,
};
use crate::wire::{put_u16, Reader, WireError};
use sha2::{Digest, Sha256};

/// The one cipher suite this implementation speaks: AES-256-CTR segment
/// encryption with truncated HMAC-SHA256 segment tags.
pub const SUITE_AES256CTR_HMACSHA256: u16 = 0xfe01;

/// Handshake flights on each side, unchanged from plain DTLS 1.2 with a
/// pre-exchanged cookie.
pub const FLIGHT_COUNT: usize = 4;
pub const BASELINE_DTLS12_FLIGHT_COUNT: usize = 4;

pub const VERIFY_DATA_LEN: usize = 12;
const FINISHED_CLIENT: u8 = 1;
const FINISHED_SERVER: u8 = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("no mutually supported cipher suite")]
    NoCommonCipherSuite,
    #[error("unexpected handshake message; expected {expected}")]
    UnexpectedMessage { expected: &'static str },
    #[error("finished verify_data mismatch: transcript differs")]
    TranscriptMismatch,
    #[error("no key blob for entitled middlebox {0}")]
    MissingKeyBlob(u8),
    #[error("key blob for entity {0} failed authentication")]
    BlobAuthFailure(u8),
    #[error("key blob for entity {0} has the wrong length")]
    BlobLength(u8),
    #[error("key blob for entity {0} does not match the derived matrix")]
    BlobContentMismatch(u8),
    #[error("this middlebox's address is not in the announced path")]
    NotOnPath,
    #[error("certificate-based middlebox authentication is not supported; use pre-shared keys")]
    UnsupportedCertificateAuth,
    #[error("invalid rights value in context row")]
    InvalidRightsRow,
    #[error("missing null terminator after template layout")]
    MissingTemplateTerminator,
    #[error("server hello does not replay the client's fields")]
    ExtensionNotReplayed,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Access(#[from] AccessError),
}

/// Transport address announcing a middlebox in the hello; path order is
/// list order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiddleboxAddr {
    pub ip: [u8; 4],
    pub port: u16,
}

/// The session description carried in both hellos.
///
/// Context ids are implicit: row `i` describes context `i`. The server may
/// append rows and templates; it never reorders or removes the client's.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct HelloExtension {
    pub middleboxes: Vec<MiddleboxAddr>,
    /// Parallel to `middleboxes`: whether the sender attaches a dedicated
    /// verification tag for this middlebox.
    pub selfverify: Vec<bool>,
    /// Per context, one right per middlebox.
    pub context_rows: Vec<Vec<Option<Access>>>,
    pub templates: Vec<SegmentationInfo>,
}

impl HelloExtension {
    pub fn entity_count(&self) -> u8 {
        self.middleboxes.len() as u8 + 2
    }

    pub fn to_session_config(&self) -> Result<SessionConfig, ConfigError> {
        let mut rights = AccessRights::new();
        for (ctx, row) in self.context_rows.iter().enumerate() {
            for (m, access) in row.iter().enumerate() {
                if let Some(a) = access {
                    rights.grant(ContextId(ctx as u8), EntityId(m as u8 + 1), *a);
                }
            }
        }
        let mut templates = TemplateTable::new();
        for layout in &self.templates {
            templates.append(layout.clone())?;
        }
        let config = SessionConfig {
            entity_count: self.entity_count(),
            contexts: (0..self.context_rows.len() as u8).map(ContextId).collect(),
            rights,
            templates,
            selfverify: self
                .selfverify
                .iter()
                .enumerate()
                .filter(|(_, sv)| **sv)
                .map(|(m, _)| EntityId(m as u8 + 1))
                .collect(),
        };
        config.validate()?;
        Ok(config)
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.middleboxes.len() as u8);
        for mbx in &self.middleboxes {
            out.extend_from_slice(&mbx.ip);
            put_u16(out, mbx.port);
        }
        out.extend_from_slice(&pack_bitmap(&self.selfverify, self.middleboxes.len()));
        out.push(self.context_rows.len() as u8);
        for row in &self.context_rows {
            out.extend_from_slice(&pack_rights_row(row, self.middleboxes.len()));
        }
        out.push(self.templates.len() as u8);
        for layout in &self.templates {
            out.extend_from_slice(&crate::record::encode_layout(layout));
            out.push(0x00);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, HandshakeError> {
        let mbx_count = usize::from(r.u8()?);
        let mut middleboxes = Vec::with_capacity(mbx_count);
        for _ in 0..mbx_count {
            let ip_bytes = r.take(4)?;
            let mut ip = [0u8; 4];
            ip.copy_from_slice(ip_bytes);
            let port = r.u16()?;
            middleboxes.push(MiddleboxAddr { ip, port });
        }
        let selfverify = unpack_bitmap(r, mbx_count)?;
        let ctx_count = usize::from(r.u8()?);
        let mut context_rows = Vec::with_capacity(ctx_count);
        for _ in 0..ctx_count {
            context_rows.push(unpack_rights_row(r, mbx_count)?);
        }
        let template_count = usize::from(r.u8()?);
        let mut templates = Vec::with_capacity(template_count);
        for _ in 0..template_count {
            let layout = crate::record::decode_layout(r)?;
            if r.u8()? != 0x00 {
                return Err(HandshakeError::MissingTemplateTerminator);
            }
            templates.push(layout);
        }
        Ok(Self {
            middleboxes,
            selfverify,
            context_rows,
            templates,
        })
    }

    fn validate_sizes(&self) -> Result<(), ConfigError> {
        if self.context_rows.len() > usize::from(MAX_CONTEXTS) {
            return Err(ConfigError::TooManyContexts(self.context_rows.len()));
        }
        if self.templates.len() > MAX_TEMPLATES {
            return Err(ConfigError::TooManyTemplates);
        }
        Ok(())
    }

    /// True if `extended` equals `self` with zero or more rows/templates
    /// appended.
    fn is_extension_of(&self, extended: &HelloExtension) -> bool {
        extended.middleboxes == self.middleboxes
            && extended.selfverify == self.selfverify
            && extended.context_rows.len() >= self.context_rows.len()
            && extended.context_rows[..self.context_rows.len()] == self.context_rows[..]
            && extended.templates.len() >= self.templates.len()
            && extended.templates[..self.templates.len()] == self.templates[..]
    }
}

fn pack_bitmap(flags: &[bool], count: usize) -> Vec<u8> {
    let mut out = vec![0u8; count.div_ceil(8)];
    for (i, flag) in flags.iter().enumerate() {
        if *flag {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_bitmap(r: &mut Reader<'_>, count: usize) -> Result<Vec<bool>, HandshakeError> {
    let bytes = r.take(count.div_ceil(8))?;
    Ok((0..count).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect())
}

fn pack_rights_row(row: &[Option<Access>], count: usize) -> Vec<u8> {
    let mut out = vec![0u8; (2 * count).div_ceil(8)];
    for (i, access) in row.iter().enumerate() {
        let code: u8 = match access {
            None => 0,
            Some(Access::Read) => 1,
            Some(Access::Write) => 2,
        };
        out[i / 4] |= code << (6 - 2 * (i % 4));
    }
    out
}

fn unpack_rights_row(
    r: &mut Reader<'_>,
    count: usize,
) -> Result<Vec<Option<Access>>, HandshakeError> {
    let bytes = r.take((2 * count).div_ceil(8))?;
    (0..count)
        .map(|i| {
            let code = (bytes[i / 4] >> (6 - 2 * (i % 4))) & 0b11;
            match code {
                0 => Ok(None),
                1 => Ok(Some(Access::Read)),
                2 => Ok(Some(Access::Write)),
                _ => Err(HandshakeError::InvalidRightsRow),
            }
        })
        .collect()
}

/// One middlebox's encrypted keys inside `ClientKeyExchange`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyBlob {
    pub target: EntityId,
    pub ciphertext: Vec<u8>,
    pub tag: PartialTag,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HandshakeMessage {
    ClientHello {
        random: [u8; 32],
        cookie: Vec<u8>,
        cipher_suites: Vec<u16>,
        extension: HelloExtension,
    },
    ServerHello {
        random: [u8; 32],
        cipher_suite: u16,
        extension: HelloExtension,
    },
    ServerHelloDone,
    ClientKeyExchange {
        blobs: Vec<KeyBlob>,
    },
    Finished {
        verify_data: [u8; VERIFY_DATA_LEN],
    },
}

const MSG_CLIENT_HELLO: u8 = 1;
const MSG_SERVER_HELLO: u8 = 2;
const MSG_SERVER_HELLO_DONE: u8 = 14;
const MSG_CLIENT_KEY_EXCHANGE: u8 = 16;
const MSG_FINISHED: u8 = 20;

impl HandshakeMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let msg_type = match self {
            HandshakeMessage::ClientHello {
                random,
                cookie,
                cipher_suites,
                extension,
            } => {
                body.extend_from_slice(random);
                body.push(cookie.len() as u8);
                body.extend_from_slice(cookie);
                body.push(cipher_suites.len() as u8);
                for suite in cipher_suites {
                    put_u16(&mut body, *suite);
                }
                extension.encode(&mut body);
                MSG_CLIENT_HELLO
            }
            HandshakeMessage::ServerHello {
                random,
                cipher_suite,
                extension,
            } => {
                body.extend_from_slice(random);
                put_u16(&mut body, *cipher_suite);
                extension.encode(&mut body);
                MSG_SERVER_HELLO
            }
            HandshakeMessage::ServerHelloDone => MSG_SERVER_HELLO_DONE,
            HandshakeMessage::ClientKeyExchange { blobs } => {
                body.push(blobs.len() as u8);
                for blob in blobs {
                    body.push(blob.target.index());
                    put_u16(&mut body, blob.ciphertext.len() as u16);
                    body.extend_from_slice(&blob.ciphertext);
                    body.extend_from_slice(blob.tag.as_bytes());
                }
                MSG_CLIENT_KEY_EXCHANGE
            }
            HandshakeMessage::Finished { verify_data } => {
                body.extend_from_slice(verify_data);
                MSG_FINISHED
            }
        };
        let mut out = Vec::with_capacity(4 + body.len());
        out.push(msg_type);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, HandshakeError> {
        let mut r = Reader::new(bytes);
        let msg_type = r.u8()?;
        let len_bytes = r.take(3)?;
        let len = u32::from_be_bytes([0, len_bytes[0], len_bytes[1], len_bytes[2]]) as usize;
        let body = r.take(len)?;
        r.finish()?;
        let mut r = Reader::new(body);
        let msg = match msg_type {
            MSG_CLIENT_HELLO => {
                let mut random = [0u8; 32];
                random.copy_from_slice(r.take(32)?);
                let cookie_len = usize::from(r.u8()?);
                let cookie = r.take(cookie_len)?.to_vec();
                let suite_count = usize::from(r.u8()?);
                let mut cipher_suites = Vec::with_capacity(suite_count);
                for _ in 0..suite_count {
                    cipher_suites.push(r.u16()?);
                }
                let extension = HelloExtension::decode(&mut r)?;
                HandshakeMessage::ClientHello {
                    random,
                    cookie,
                    cipher_suites,
                    extension,
                }
            }
            MSG_SERVER_HELLO => {
                let mut random = [0u8; 32];
                random.copy_from_slice(r.take(32)?);
                let cipher_suite = r.u16()?;
                let extension = HelloExtension::decode(&mut r)?;
                HandshakeMessage::ServerHello {
                    random,
                    cipher_suite,
                    extension,
                }
            }
            MSG_SERVER_HELLO_DONE => HandshakeMessage::ServerHelloDone,
            MSG_CLIENT_KEY_EXCHANGE => {
                let blob_count = usize::from(r.u8()?);
                let mut blobs = Vec::with_capacity(blob_count);
                for _ in 0..blob_count {
                    let target = EntityId(r.u8()?);
                    let ct_len = usize::from(r.u16()?);
                    let ciphertext = r.take(ct_len)?.to_vec();
                    let mut tag = [0u8; TAG_LEN];
                    tag.copy_from_slice(r.take(TAG_LEN)?);
                    blobs.push(KeyBlob {
                        target,
                        ciphertext,
                        tag: PartialTag(tag),
                    });
                }
                HandshakeMessage::ClientKeyExchange { blobs }
            }
            MSG_FINISHED => {
                let mut verify_data = [0u8; VERIFY_DATA_LEN];
                verify_data.copy_from_slice(r.take(VERIFY_DATA_LEN)?);
                HandshakeMessage::Finished { verify_data }
            }
            _ => {
                return Err(HandshakeError::UnexpectedMessage {
                    expected: "a known handshake message type",
                })
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Key blob plaintext layout, all entries 32 bytes, counts implied by the
/// target's rights: own read keys, own write keys, predecessor read keys,
/// predecessor write keys, previous-writer read keys, context encryption
/// keys. Context order ascending within each group.
fn blob_plaintext(set: &MiddleboxKeySet) -> Vec<u8> {
    let mut out = Vec::new();
    let groups: [&BTreeMap<u8, MacKey>; 5] = [
        &set.own_read,
        &set.own_write,
        &set.predecessor_read,
        &set.predecessor_write,
        &set.prev_writer_read,
    ];
    for group in groups {
        for key in group.values() {
            out.extend_from_slice(key.as_bytes());
        }
    }
    for key in set.enc.values() {
        out.extend_from_slice(key.as_bytes());
    }
    out
}

fn blob_keys(kd: &MacKey) -> Result<(crate::crypto::StreamKey, MacKey), CryptoError> {
    Ok((
        kdf_stream_key(kd.as_bytes(), &[b"blob-enc"])?,
        kdf_mac_key(kd.as_bytes(), &[b"blob-mac"])?,
    ))
}

pub fn seal_key_blob(kd: &MacKey, set: &MiddleboxKeySet) -> Result<KeyBlob, HandshakeError> {
    let (enc_key, mac_key) = blob_keys(kd)?;
    let plaintext = blob_plaintext(set);
    let nonce = Nonce::new(0, u64::from(set.entity.index()));
    let ct_bits = keystream_xor(&enc_key, nonce, 0, 0, &Bits::from_bytes(&plaintext))?;
    let ciphertext = ct_bits.to_bytes();
    let tag = mac(
        &mac_key,
        &domain::key_blob(set.entity.index()),
        &Bits::from_bytes(&ciphertext),
    );
    Ok(KeyBlob {
        target: set.entity,
        ciphertext,
        tag,
    })
}

/// Decrypts and parses this middlebox's blob. The expected entry counts
/// come from the rights announced in the hellos.
pub fn open_key_blob(
    kd: &MacKey,
    blob: &KeyBlob,
    entity: EntityId,
    entity_count: u8,
    rights: &AccessRights,
) -> Result<MiddleboxKeySet, HandshakeError> {
    let (enc_key, mac_key) = blob_keys(kd)?;
    let expected_tag = mac(
        &mac_key,
        &domain::key_blob(blob.target.index()),
        &Bits::from_bytes(&blob.ciphertext),
    );
    if expected_tag != blob.tag {
        return Err(HandshakeError::BlobAuthFailure(blob.target.index()));
    }
    let nonce = Nonce::new(0, u64::from(blob.target.index()));
    let plaintext = keystream_xor(&enc_key, nonce, 0, 0, &Bits::from_bytes(&blob.ciphertext))?
        .to_bytes();

    let mut read_ctxs = Vec::new();
    let mut write_ctxs = Vec::new();
    for (ctx, mbx, access) in rights.entries() {
        if mbx != entity {
            continue;
        }
        read_ctxs.push(ctx.index());
        if access == Access::Write {
            write_ctxs.push(ctx.index());
        }
    }
    // own read + predecessor read + enc per rights context; own write +
    // predecessor write + previous-writer read per write context.
    let expected_len = 32 * (3 * read_ctxs.len() + 3 * write_ctxs.len());
    if plaintext.len() != expected_len {
        return Err(HandshakeError::BlobLength(blob.target.index()));
    }

    let mut r = Reader::new(&plaintext);
    let mut take_keys = |ctxs: &[u8]| -> Result<BTreeMap<u8, MacKey>, HandshakeError> {
        let mut map = BTreeMap::new();
        for &ctx in ctxs {
            let mut key = [0u8; 32];
            key.copy_from_slice(r.take(32)?);
            map.insert(ctx, MacKey::from_bytes(key));
        }
        Ok(map)
    };
    let own_read = take_keys(&read_ctxs)?;
    let own_write = take_keys(&write_ctxs)?;
    let predecessor_read = take_keys(&read_ctxs)?;
    let predecessor_write = take_keys(&write_ctxs)?;
    let prev_writer_read = take_keys(&write_ctxs)?;
    let mut enc = BTreeMap::new();
    for &ctx in &read_ctxs {
        let mut key = [0u8; 32];
        key.copy_from_slice(r.take(32)?);
        enc.insert(ctx, crate::crypto::StreamKey::from_bytes(key));
    }
    r.finish()?;
    Ok(MiddleboxKeySet {
        entity,
        entity_count,
        own_read,
        own_write,
        predecessor_read,
        predecessor_write,
        prev_writer_read,
        enc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Idle,
    HelloSent,
    HelloReceived,
    KeysDistributed,
    Established,
}

/// An endpoint's established session material.
#[derive(Clone, Debug)]
pub struct SessionState {
    pub phase: Phase,
    pub cipher_suite: u16,
    pub handshake_nonce: Vec<u8>,
    pub matrix: KeyMatrix,
    pub config: SessionConfig,
}

/// What a middlebox holds after the flights passed it.
#[derive(Clone, Debug)]
pub struct MiddleboxSessionState {
    pub entity: EntityId,
    pub keys: MiddleboxKeySet,
    pub config: SessionConfig,
    pub handshake_nonce: Vec<u8>,
    /// Key-distribution key, shared with the endpoints; authenticates
    /// session control records addressed to this middlebox.
    pub kd: MacKey,
}

fn master_key(psk_sr: &[u8], nonce: &[u8]) -> Result<MacKey, CryptoError> {
    kdf_mac_key(psk_sr, &[b"master", nonce])
}

fn finished_verify_data(master: &MacKey, role: u8, transcript: &[u8]) -> [u8; VERIFY_DATA_LEN] {
    let digest = Sha256::digest(transcript);
    let tag = mac(master, &domain::finished(role), &Bits::from_bytes(&digest));
    let mut out = [0u8; VERIFY_DATA_LEN];
    out.copy_from_slice(&tag.as_bytes()[..VERIFY_DATA_LEN]);
    out
}

/// How endpoints authenticate middleboxes. Only pre-shared keys are
/// implemented; the certificate path reports unsupported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AuthMode {
    #[default]
    PresharedKeys,
    Certificates,
}

pub struct ClientHandshake {
    extension: HelloExtension,
    psk_sr: Vec<u8>,
    psks_sm: BTreeMap<EntityId, Vec<u8>>,
    cookie: Vec<u8>,
    cipher_suites: Vec<u16>,
    random: [u8; 32],
    auth: AuthMode,
    transcript: Vec<u8>,
    phase: Phase,
    record_seq: u64,
    server_random: Option<[u8; 32]>,
    suite: Option<u16>,
    final_extension: Option<HelloExtension>,
    matrix: Option<KeyMatrix>,
}

impl ClientHandshake {
    pub fn new(
        extension: HelloExtension,
        psk_sr: Vec<u8>,
        psks_sm: BTreeMap<EntityId, Vec<u8>>,
        cookie: Vec<u8>,
        cipher_suites: Vec<u16>,
        random: [u8; 32],
        auth: AuthMode,
    ) -> Self {
        Self {
            extension,
            psk_sr,
            psks_sm,
            cookie,
            cipher_suites,
            random,
            auth,
            transcript: Vec::new(),
            phase: Phase::Idle,
            record_seq: 0,
            server_random: None,
            suite: None,
            final_extension: None,
            matrix: None,
        }
    }

    fn record(&mut self, content_type: u8, payload: Vec<u8>) -> Result<Vec<u8>, HandshakeError> {
        let record = PlainRecord {
            content_type,
            nonce: Nonce::new(0, self.record_seq),
            payload,
        };
        self.record_seq += 1;
        Ok(encode_plain_record(&record)?)
    }

    /// Flight 1.
    pub fn client_hello(&mut self) -> Result<Vec<Vec<u8>>, HandshakeError> {
        if self.auth == AuthMode::Certificates {
            return Err(HandshakeError::UnsupportedCertificateAuth);
        }
        self.extension.validate_sizes()?;
        self.extension.to_session_config()?;
        let msg = HandshakeMessage::ClientHello {
            random: self.random,
            cookie: self.cookie.clone(),
            cipher_suites: self.cipher_suites.clone(),
            extension: self.extension.clone(),
        };
        let bytes = msg.encode();
        self.transcript.extend_from_slice(&bytes);
        self.phase = Phase::HelloSent;
        Ok(vec![self.record(content_type::HANDSHAKE, bytes)?])
    }

    /// Flight 3, after the server's hello flight.
    pub fn handle_server_hello(
        &mut self,
        records: &[Vec<u8>],
    ) -> Result<Vec<Vec<u8>>, HandshakeError> {
        if self.phase != Phase::HelloSent {
            return Err(HandshakeError::UnexpectedMessage {
                expected: "client to have sent its hello first",
            });
        }
        let messages = decode_flight(records)?;
        let (random, suite, extension) = match messages.first() {
            Some((bytes, HandshakeMessage::ServerHello { random, cipher_suite, extension })) => {
                self.transcript.extend_from_slice(bytes);
                (*random, *cipher_suite, extension.clone())
            }
            _ => {
                return Err(HandshakeError::UnexpectedMessage {
                    expected: "ServerHello",
                })
            }
        };
        match messages.get(1) {
            Some((bytes, HandshakeMessage::ServerHelloDone)) => {
                self.transcript.extend_from_slice(bytes);
            }
            _ => {
                return Err(HandshakeError::UnexpectedMessage {
                    expected: "ServerHelloDone",
                })
            }
        }
        if !self.cipher_suites.contains(&suite) {
            return Err(HandshakeError::NoCommonCipherSuite);
        }
        if !self.extension.is_extension_of(&extension) {
            return Err(HandshakeError::ExtensionNotReplayed);
        }
        extension.validate_sizes()?;
        self.server_random = Some(random);
        self.suite = Some(suite);
        self.phase = Phase::HelloReceived;

        let nonce = self.handshake_nonce();
        let config = extension.to_session_config()?;
        let matrix = derive_key_matrix(
            &self.psk_sr,
            &self.psks_sm,
            &nonce,
            &config.rights,
            config.entity_count,
            &config.contexts,
        )?;

        let mut blobs = Vec::new();
        for mbx in config.rights.entitled_middleboxes() {
            let kd = matrix
                .kd_key(mbx)
                .ok_or(HandshakeError::MissingKeyBlob(mbx.index()))?;
            let set = matrix.middlebox_key_set(mbx, &config.rights)?;
            blobs.push(seal_key_blob(kd, &set)?);
        }
        let cke = HandshakeMessage::ClientKeyExchange { blobs }.encode();
        self.transcript.extend_from_slice(&cke);

        let master = master_key(&self.psk_sr, &nonce)?;
        let verify_data = finished_verify_data(&master, FINISHED_CLIENT, &self.transcript);
        let fin = HandshakeMessage::Finished { verify_data }.encode();
        self.transcript.extend_from_slice(&fin);

        self.final_extension = Some(extension);
        self.matrix = Some(matrix);
        self.phase = Phase::KeysDistributed;

        Ok(vec![
            self.record(content_type::HANDSHAKE, cke)?,
            self.record(content_type::CHANGE_CIPHER_SPEC, vec![1])?,
            self.record(content_type::HANDSHAKE, fin)?,
        ])
    }

    /// Consumes the server's final flight and establishes the session.
    pub fn handle_server_finished(
        &mut self,
        records: &[Vec<u8>],
    ) -> Result<SessionState, HandshakeError> {
        if self.phase != Phase::KeysDistributed {
            return Err(HandshakeError::UnexpectedMessage {
                expected: "client to have sent its key exchange first",
            });
        }
        let nonce = self.handshake_nonce();
        let master = master_key(&self.psk_sr, &nonce)?;
        let expected = finished_verify_data(&master, FINISHED_SERVER, &self.transcript);
        let messages = decode_flight(records)?;
        match messages.first() {
            Some((_, HandshakeMessage::Finished { verify_data })) => {
                if *verify_data != expected {
                    return Err(HandshakeError::TranscriptMismatch);
                }
            }
            _ => {
                return Err(HandshakeError::UnexpectedMessage {
                    expected: "server Finished",
                })
            }
        }
        self.phase = Phase::Established;
        let extension = self.final_extension.take().expect("set in KeysDistributed");
        Ok(SessionState {
            phase: Phase::Established,
            cipher_suite: self.suite.expect("set in HelloReceived"),
            handshake_nonce: nonce,
            matrix: self.matrix.take().expect("set in KeysDistributed"),
            config: extension.to_session_config()?,
        })
    }

    fn handshake_nonce(&self) -> Vec<u8> {
        let mut nonce = self.random.to_vec();
        nonce.extend_from_slice(&self.server_random.expect("server hello processed"));
        nonce
    }
}

/// Contexts and templates a server adds on top of the client's announcement.
#[derive(Clone, Debug, Default)]
pub struct ServerAdditions {
    pub context_rows: Vec<Vec<Option<Access>>>,
    pub templates: Vec<SegmentationInfo>,
}

pub struct ServerHandshake {
    psk_sr: Vec<u8>,
    psks_sm: BTreeMap<EntityId, Vec<u8>>,
    supported_suites: Vec<u16>,
    additions: ServerAdditions,
    random: [u8; 32],
    transcript: Vec<u8>,
    phase: Phase,
    record_seq: u64,
    client_random: Option<[u8; 32]>,
    suite: Option<u16>,
    extension: Option<HelloExtension>,
}

impl ServerHandshake {
    pub fn new(
        psk_sr: Vec<u8>,
        psks_sm: BTreeMap<EntityId, Vec<u8>>,
        supported_suites: Vec<u16>,
        additions: ServerAdditions,
        random: [u8; 32],
    ) -> Self {
        Self {
            psk_sr,
            psks_sm,
            supported_suites,
            additions,
            random,
            transcript: Vec::new(),
            phase: Phase::Idle,
            record_seq: 0,
            client_random: None,
            suite: None,
            extension: None,
        }
    }

    fn record(&mut self, content_type: u8, payload: Vec<u8>) -> Result<Vec<u8>, HandshakeError> {
        let record = PlainRecord {
            content_type,
            nonce: Nonce::new(0, self.record_seq),
            payload,
        };
        self.record_seq += 1;
        Ok(encode_plain_record(&record)?)
    }

    /// Flight 2, in response to the client hello as it arrived (middleboxes
    /// may have filtered the suite list in transit).
    pub fn handle_client_hello(
        &mut self,
        records: &[Vec<u8>],
    ) -> Result<Vec<Vec<u8>>, HandshakeError> {
        let messages = decode_flight(records)?;
        let (random, suites, extension) = match messages.first() {
            Some((bytes, HandshakeMessage::ClientHello { random, cipher_suites, extension, .. })) => {
                self.transcript.extend_from_slice(bytes);
                (*random, cipher_suites.clone(), extension.clone())
            }
            _ => {
                return Err(HandshakeError::UnexpectedMessage {
                    expected: "ClientHello",
                })
            }
        };
        let suite = *suites
            .iter()
            .find(|s| self.supported_suites.contains(s))
            .ok_or(HandshakeError::NoCommonCipherSuite)?;

        let mut extended = extension.clone();
        for row in &self.additions.context_rows {
            let mut row = row.clone();
            row.resize(extended.middleboxes.len(), None);
            extended.context_rows.push(row);
        }
        extended.templates.extend(self.additions.templates.iter().cloned());
        extended.validate_sizes()?;
        extended.to_session_config()?;

        let sh = HandshakeMessage::ServerHello {
            random: self.random,
            cipher_suite: suite,
            extension: extended.clone(),
        }
        .encode();
        self.transcript.extend_from_slice(&sh);
        let shd = HandshakeMessage::ServerHelloDone.encode();
        self.transcript.extend_from_slice(&shd);

        self.client_random = Some(random);
        self.suite = Some(suite);
        self.extension = Some(extended);
        self.phase = Phase::HelloReceived;

        Ok(vec![
            self.record(content_type::HANDSHAKE, sh)?,
            self.record(content_type::HANDSHAKE, shd)?,
        ])
    }

    /// The suite list as the server saw it; set once flight 1 is processed.
    pub fn observed_suites(&self) -> Option<u16> {
        self.suite
    }

    /// Flight 4: verifies the client's key exchange and Finished, answers
    /// with the server's, and establishes the session.
    ///
    /// The server independently derives every key-distribution key and the
    /// full matrix, so it verifies each blob against what the client should
    /// have sent.
    pub fn handle_client_flight(
        &mut self,
        records: &[Vec<u8>],
    ) -> Result<(SessionState, Vec<Vec<u8>>), HandshakeError> {
        if self.phase != Phase::HelloReceived {
            return Err(HandshakeError::UnexpectedMessage {
                expected: "server to have answered the hello first",
            });
        }
        let nonce = self.handshake_nonce();
        let extension = self.extension.clone().expect("set in HelloReceived");
        let config = extension.to_session_config()?;
        let matrix = derive_key_matrix(
            &self.psk_sr,
            &self.psks_sm,
            &nonce,
            &config.rights,
            config.entity_count,
            &config.contexts,
        )?;

        let messages = decode_flight(records)?;
        let blobs = match messages.first() {
            Some((bytes, HandshakeMessage::ClientKeyExchange { blobs })) => {
                self.transcript.extend_from_slice(bytes);
                blobs.clone()
            }
            _ => {
                return Err(HandshakeError::UnexpectedMessage {
                    expected: "ClientKeyExchange",
                })
            }
        };
        for mbx in config.rights.entitled_middleboxes() {
            let blob = blobs
                .iter()
                .find(|b| b.target == mbx)
                .ok_or(HandshakeError::MissingKeyBlob(mbx.index()))?;
            let kd = matrix
                .kd_key(mbx)
                .ok_or(HandshakeError::MissingKeyBlob(mbx.index()))?;
            let opened = open_key_blob(kd, blob, mbx, config.entity_count, &config.rights)?;
            let expected = matrix.middlebox_key_set(mbx, &config.rights)?;
            if opened != expected {
                return Err(HandshakeError::BlobContentMismatch(mbx.index()));
            }
        }

        let master = master_key(&self.psk_sr, &nonce)?;
        // Client Finished covers the transcript up to and excluding itself.
        let expected = finished_verify_data(&master, FINISHED_CLIENT, &self.transcript);
        match messages.get(1) {
            Some((bytes, HandshakeMessage::Finished { verify_data })) => {
                if *verify_data != expected {
                    return Err(HandshakeError::TranscriptMismatch);
                }
                self.transcript.extend_from_slice(bytes);
            }
            _ => {
                return Err(HandshakeError::UnexpectedMessage {
                    expected: "client Finished",
                })
            }
        }

        let verify_data = finished_verify_data(&master, FINISHED_SERVER, &self.transcript);
        let fin = HandshakeMessage::Finished { verify_data }.encode();
        self.transcript.extend_from_slice(&fin);
        let flight = vec![
            self.record(content_type::CHANGE_CIPHER_SPEC, vec![1])?,
            self.record(content_type::HANDSHAKE, fin)?,
        ];
        self.phase = Phase::Established;
        Ok((
            SessionState {
                phase: Phase::Established,
                cipher_suite: self.suite.expect("set in HelloReceived"),
                handshake_nonce: nonce,
                matrix,
                config,
            },
            flight,
        ))
    }

    fn handshake_nonce(&self) -> Vec<u8> {
        let mut nonce = self.client_random.expect("client hello processed").to_vec();
        nonce.extend_from_slice(&self.random);
        nonce
    }
}

/// A middlebox watching the flights pass. It learns the session layout from
/// the hellos and pulls its keys out of the `ClientKeyExchange`.
pub struct MiddleboxObserver {
    addr: MiddleboxAddr,
    psk_sm: Vec<u8>,
    entity: Option<EntityId>,
    client_random: Option<[u8; 32]>,
    server_random: Option<[u8; 32]>,
    extension: Option<HelloExtension>,
    keys: Option<MiddleboxKeySet>,
}

impl MiddleboxObserver {
    pub fn new(addr: MiddleboxAddr, psk_sm: Vec<u8>) -> Self {
        Self {
            addr,
            psk_sm,
            entity: None,
            client_random: None,
            server_random: None,
            extension: None,
            keys: None,
        }
    }

    /// Inspects one record of a passing flight.
    pub fn observe(&mut self, record_bytes: &[u8]) -> Result<(), HandshakeError> {
        let record = decode_plain_record(record_bytes)?;
        if record.content_type != content_type::HANDSHAKE {
            return Ok(());
        }
        match HandshakeMessage::decode(&record.payload)? {
            HandshakeMessage::ClientHello { random, extension, .. } => {
                let position = extension
                    .middleboxes
                    .iter()
                    .position(|m| *m == self.addr)
                    .ok_or(HandshakeError::NotOnPath)?;
                self.entity = Some(EntityId(position as u8 + 1));
                self.client_random = Some(random);
                self.extension = Some(extension);
            }
            HandshakeMessage::ServerHello { random, extension, .. } => {
                self.server_random = Some(random);
                self.extension = Some(extension);
            }
            HandshakeMessage::ClientKeyExchange { blobs } => {
                let entity = self.entity.ok_or(HandshakeError::UnexpectedMessage {
                    expected: "ClientHello before ClientKeyExchange",
                })?;
                let extension = self.extension.as_ref().ok_or(
                    HandshakeError::UnexpectedMessage {
                        expected: "hello extension before ClientKeyExchange",
                    },
                )?;
                let config = extension.to_session_config()?;
                let rights_here = config
                    .rights
                    .entries()
                    .any(|(_, mbx, _)| mbx == entity);
                let blob = blobs.iter().find(|b| b.target == entity);
                match (rights_here, blob) {
                    (false, _) => {}
                    (true, None) => return Err(HandshakeError::MissingKeyBlob(entity.index())),
                    (true, Some(blob)) => {
                        let nonce = self.handshake_nonce()?;
                        let kd = kdf_mac_key(&self.psk_sm, &[&nonce])?;
                        self.keys = Some(open_key_blob(
                            &kd,
                            blob,
                            entity,
                            config.entity_count,
                            &config.rights,
                        )?);
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn handshake_nonce(&self) -> Result<Vec<u8>, HandshakeError> {
        let (c, s) = self
            .client_random
            .zip(self.server_random)
            .ok_or(HandshakeError::UnexpectedMessage {
                expected: "both hellos before key material",
            })?;
        let mut nonce = c.to_vec();
        nonce.extend_from_slice(&s);
        Ok(nonce)
    }

    /// Finalizes after all flights have passed.
    pub fn into_session(self) -> Result<MiddleboxSessionState, HandshakeError> {
        let entity = self.entity.ok_or(HandshakeError::NotOnPath)?;
        let nonce = self.handshake_nonce()?;
        let extension = self.extension.ok_or(HandshakeError::UnexpectedMessage {
            expected: "a completed hello exchange",
        })?;
        let config = extension.to_session_config()?;
        let keys = match self.keys {
            Some(keys) => keys,
            None => MiddleboxKeySet {
                entity,
                entity_count: config.entity_count,
                own_read: BTreeMap::new(),
                own_write: BTreeMap::new(),
                predecessor_read: BTreeMap::new(),
                predecessor_write: BTreeMap::new(),
                prev_writer_read: BTreeMap::new(),
                enc: BTreeMap::new(),
            },
        };
        let kd = kdf_mac_key(&self.psk_sm, &[&nonce])?;
        Ok(MiddleboxSessionState {
            entity,
            keys,
            config,
            handshake_nonce: nonce,
            kd,
        })
    }
}

fn decode_flight(records: &[Vec<u8>]) -> Result<Vec<(Vec<u8>, HandshakeMessage)>, HandshakeError> {
    let mut out = Vec::new();
    for bytes in records {
        let record = decode_plain_record(bytes)?;
        if record.content_type != content_type::HANDSHAKE {
            continue; // change-cipher-spec
        }
        let msg = HandshakeMessage::decode(&record.payload)?;
        out.push((record.payload, msg));
    }
    Ok(out)
}

/// Result of a complete in-process handshake run.
#[derive(Debug)]
pub struct HandshakeOutcome {
    pub client: SessionState,
    pub server: SessionState,
    pub middleboxes: Vec<MiddleboxSessionState>,
    pub flights: usize,
}

/// Drives a full handshake, passing every flight through the middlebox
/// observers in path order (reverse order for server-to-client flights).
/// `tamper` may mutate each flight's records in transit; it runs after the
/// observers on client-to-server flights and before them otherwise.
pub fn run_handshake(
    mut client: ClientHandshake,
    mut server: ServerHandshake,
    observers: &mut [MiddleboxObserver],
    mut tamper: impl FnMut(usize, &mut Vec<Vec<u8>>),
) -> Result<HandshakeOutcome, HandshakeError> {
    let observe_all =
        |records: &[Vec<u8>], observers: &mut [MiddleboxObserver]| -> Result<(), HandshakeError> {
            for obs in observers.iter_mut() {
                for record in records {
                    obs.observe(record)?;
                }
            }
            Ok(())
        };

    let mut flight1 = client.client_hello()?;
    tamper(0, &mut flight1);
    observe_all(&flight1, observers)?;
    let mut flight2 = server.handle_client_hello(&flight1)?;
    tamper(1, &mut flight2);
    observe_all(&flight2, observers)?;
    let mut flight3 = client.handle_server_hello(&flight2)?;
    tamper(2, &mut flight3);
    observe_all(&flight3, observers)?;
    let (server_session, mut flight4) = server.handle_client_flight(&flight3)?;
    tamper(3, &mut flight4);
    observe_all(&flight4, observers)?;
    let client_session = client.handle_server_finished(&flight4)?;

    let middleboxes = observers
        .iter()
        .map(|obs| {
            MiddleboxObserver {
                addr: obs.addr,
                psk_sm: obs.psk_sm.clone(),
                entity: obs.entity,
                client_random: obs.client_random,
                server_random: obs.server_random,
                extension: obs.extension.clone(),
                keys: obs.keys.clone(),
            }
            .into_session()
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(HandshakeOutcome {
        client: client_session,
        server: server_session,
        middleboxes,
        flights: FLIGHT_COUNT,
    })
}

/// Convenience: the key-distribution key a middlebox derives for itself.
pub fn middlebox_kd_key(psk_sm: &[u8], handshake_nonce: &[u8]) -> Result<MacKey, CryptoError> {
    kdf_mac_key(psk_sm, &[handshake_nonce])
}
