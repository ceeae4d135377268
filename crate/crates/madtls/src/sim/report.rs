//! Run reports: verdict comparison, hop traces, overhead statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{ActualOutcome, ExpectedOutcome};

/// One entity's handling of one message.
#[derive(Clone, Debug)]
pub struct HopTrace {
    pub entity: String,
    pub wire_in: usize,
    /// Bytes forwarded; `None` when the record was consumed here.
    pub wire_out: Option<usize>,
    pub mac_calls: u64,
    pub cipher_blocks: u64,
    pub selfverify: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct MessageReport {
    pub index: usize,
    pub description: String,
    pub expected: ExpectedOutcome,
    pub actual: ActualOutcome,
    pub wire_bytes: usize,
    pub hops: Vec<HopTrace>,
}

impl MessageReport {
    pub fn matched(&self) -> bool {
        match (&self.expected, &self.actual) {
            (ExpectedOutcome::Accept, ActualOutcome::Accepted) => true,
            (ExpectedOutcome::RejectAtReceiver, ActualOutcome::RejectedAtReceiver(_)) => true,
            (ExpectedOutcome::RejectAtMiddlebox(e), ActualOutcome::RejectedAtMiddlebox(a)) => {
                e == a
            }
            (ExpectedOutcome::Dropped(e), ActualOutcome::DroppedAtMiddlebox(a)) => e == a,
            // Datagram loss is not a verdict mismatch.
            (_, ActualOutcome::NotDelivered) => true,
            _ => false,
        }
    }
}

/// Per-middlebox view statistics over the regular traffic.
#[derive(Clone, Debug, Default)]
pub struct BlindingStats {
    pub readable_bits: u64,
    pub total_bits: u64,
}

impl BlindingStats {
    /// Fraction of payload bits this middlebox cannot read.
    pub fn blinded_fraction(&self) -> f64 {
        if self.total_bits == 0 {
            return 0.0;
        }
        1.0 - self.readable_bits as f64 / self.total_bits as f64
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub scenario: String,
    pub handshake_flights: usize,
    pub messages: Vec<MessageReport>,
    pub blinding: BTreeMap<String, BlindingStats>,
}

impl RunReport {
    pub fn all_matched(&self) -> bool {
        self.messages.iter().all(MessageReport::matched)
    }

    pub fn matched_count(&self) -> usize {
        self.messages.iter().filter(|m| m.matched()).count()
    }

    /// Human-readable report followed by a machine-readable summary block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario {}", self.scenario);
        let _ = writeln!(out, "handshake flights {}", self.handshake_flights);
        for msg in &self.messages {
            let _ = writeln!(
                out,
                "msg {} {} expect={} actual={} {} wire={}B",
                msg.index,
                msg.description,
                describe_expected(&msg.expected),
                describe_actual(&msg.actual),
                if msg.matched() { "ok" } else { "MISMATCH" },
                msg.wire_bytes,
            );
            for hop in &msg.hops {
                let _ = writeln!(
                    out,
                    "  hop {} in={}B out={} mac={} cipher={}{}",
                    hop.entity,
                    hop.wire_in,
                    hop.wire_out
                        .map_or("consumed".to_string(), |b| format!("{b}B")),
                    hop.mac_calls,
                    hop.cipher_blocks,
                    match hop.selfverify {
                        None => String::new(),
                        Some(true) => " selfverify=ok".to_string(),
                        Some(false) => " selfverify=FAIL".to_string(),
                    },
                );
            }
        }
        for (entity, stats) in &self.blinding {
            let _ = writeln!(
                out,
                "blinding {} readable={}b total={}b fraction={:.3}",
                entity,
                stats.readable_bits,
                stats.total_bits,
                stats.blinded_fraction()
            );
        }
        let _ = writeln!(
            out,
            "RESULT {} ({}/{} matched)",
            if self.all_matched() { "PASS" } else { "FAIL" },
            self.matched_count(),
            self.messages.len()
        );

        let _ = writeln!(out, "\n[summary]");
        let _ = writeln!(out, "scenario={}", self.scenario);
        let _ = writeln!(out, "messages={}", self.messages.len());
        let _ = writeln!(out, "matched={}", self.matched_count());
        let _ = writeln!(
            out,
            "result={}",
            if self.all_matched() { "pass" } else { "fail" }
        );
        for (i, msg) in self.messages.iter().enumerate() {
            let _ = writeln!(
                out,
                "msg.{i}={}/{}/{}",
                describe_expected(&msg.expected),
                describe_actual(&msg.actual),
                if msg.matched() { "ok" } else { "mismatch" }
            );
        }
        for (entity, stats) in &self.blinding {
            let _ = writeln!(out, "blinding.{entity}={:.3}", stats.blinded_fraction());
        }
        out
    }
}

pub fn describe_expected(e: &ExpectedOutcome) -> String {
    match e {
        ExpectedOutcome::Accept => "accept".into(),
        ExpectedOutcome::RejectAtReceiver => "reject-at-receiver".into(),
        ExpectedOutcome::RejectAtMiddlebox(name) => format!("reject-at-middlebox:{name}"),
        ExpectedOutcome::Dropped(name) => format!("dropped:{name}"),
    }
}

pub fn describe_actual(a: &ActualOutcome) -> String {
    match a {
        ActualOutcome::Accepted => "accept".into(),
        ActualOutcome::RejectedAtReceiver(reason) => {
            format!("reject-at-receiver({reason})")
        }
        ActualOutcome::RejectedAtMiddlebox(name) => format!("reject-at-middlebox:{name}"),
        ActualOutcome::DroppedAtMiddlebox(name) => format!("dropped:{name}"),
        ActualOutcome::NotDelivered => "not-delivered".into(),
    }
}
