//! Pipeline simulator: full sessions over in-memory or datagram transports,
//! with attack directives applied between hops.
//!
//! A [`Scenario`] declares the path, contexts, rights, templates, traffic,
//! and per-message attacks, plus the expected outcome of every message.
//! [`run_scenario`] establishes the session through the real handshake,
//! replays the traffic with the attacks applied, and reports actual against
//! expected verdicts together with per-hop wire sizes and primitive-call
//! counts.

mod engine;
mod parse;
mod report;
mod transport;

pub use engine::run_scenario;
pub use parse::parse_scenario;
pub use report::{HopTrace, MessageReport, RunReport};

use std::collections::BTreeMap;
use thiserror::Error;

use crate::access::{Access, ConfigError, EntityId};
use crate::bits::Bits;
use crate::session::TamperPolicy;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scenario validation failed:\n{}", violations.join("\n"))]
    Invalid { violations: Vec<String> },
    #[error("scenario execution failed: {0}")]
    Execution(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    Memory,
    Datagram,
}

#[derive(Clone, Debug)]
pub struct EntityDecl {
    pub name: String,
    pub selfverify: bool,
    pub policy: TamperPolicy,
}

/// A plaintext transform a writing middlebox applies to each segment of a
/// context (the middlebox functionality being simulated).
#[derive(Clone, Debug)]
pub enum Transform {
    Xor(Bits),
}

/// Between-hop attack directives. `link n` is the wire between path
/// positions `n` and `n + 1`.
#[derive(Clone, Debug)]
pub enum AttackDirective {
    /// Flip ciphertext bits in flight.
    Flip { link: usize, bits: Vec<usize> },
    /// Undo an earlier flip of this message (the ephemeral change).
    Revert { link: usize },
    /// Deliver around a middlebox, skipping its processing.
    Skip { entity: EntityId },
    /// Swap the processing order of two middleboxes.
    Reorder { first: EntityId, second: EntityId },
    /// Deliver the final record to the receiver a second time; the
    /// message's expected outcome applies to the replayed copy.
    Replay,
    /// Replace the record with a keyless forgery (randomized ciphertext
    /// and tag under the same header).
    Forge { link: usize },
    /// Two compromised middleboxes make an ephemeral change to a shared
    /// context: `first` alters the context's first segment by `delta` and
    /// patches the tag with its keys, `second` reverts symmetrically.
    Collude {
        first: EntityId,
        second: EntityId,
        context: String,
        delta: Bits,
    },
    /// A middlebox consumes the record without forwarding (benign drop).
    Drop { entity: EntityId },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExpectedOutcome {
    Accept,
    RejectAtReceiver,
    RejectAtMiddlebox(String),
    Dropped(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActualOutcome {
    Accepted,
    RejectedAtReceiver(String),
    RejectedAtMiddlebox(String),
    DroppedAtMiddlebox(String),
    /// Datagram loss; never counted as a mismatch.
    NotDelivered,
}

#[derive(Clone, Debug)]
pub enum TrafficKind {
    Regular {
        template: String,
        payload: Bits,
    },
    Injected {
        by: String,
        template: String,
        sequence: u64,
        /// Placeholder values by context name.
        values: BTreeMap<String, Bits>,
    },
}

#[derive(Clone, Debug)]
pub struct TrafficItem {
    pub kind: TrafficKind,
    pub expect: ExpectedOutcome,
    pub attacks: Vec<AttackDirective>,
}

/// Pre-issued injection template declaration.
#[derive(Clone, Debug)]
pub struct InjectionDecl {
    pub template: String,
    pub injector: String,
    pub sequences: u64,
    /// Fixed plaintext by context name; every other context of the layout
    /// is a placeholder.
    pub fixed: BTreeMap<String, Bits>,
}

#[derive(Clone, Debug, Default)]
pub struct Scenario {
    pub name: String,
    pub transport: TransportKind,
    pub seed: u64,
    /// Loss probability per link for the datagram transport, in percent.
    pub loss_percent: u8,
    pub entities: Vec<EntityDecl>,
    pub contexts: Vec<String>,
    pub rights: Vec<(String, String, Access)>,
    pub templates: Vec<(String, Vec<(String, u32)>)>,
    pub transforms: Vec<(String, String, Transform)>,
    pub injections: Vec<InjectionDecl>,
    pub traffic: Vec<TrafficItem>,
}

impl Scenario {
    pub fn entity_index(&self, name: &str) -> Option<EntityId> {
        self.entities
            .iter()
            .position(|e| e.name == name)
            .map(|i| EntityId(i as u8))
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[usize::from(id.index())].name
    }

    pub fn context_index(&self, name: &str) -> Option<crate::access::ContextId> {
        self.contexts
            .iter()
            .position(|c| c == name)
            .map(|i| crate::access::ContextId(i as u8))
    }

    pub fn template_id(&self, name: &str) -> Option<u8> {
        self.templates
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| i as u8)
    }
}
