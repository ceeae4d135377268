//! Sliding-window anti-replay, DTLS 1.2 style.
//!
//! One 64-entry window per epoch. Injected traffic lives under its own
//! epochs, so its windows never interact with the regular stream's.

use std::collections::BTreeMap;

pub const WINDOW_SIZE: u64 = 64;

/// Window over one epoch's sequence numbers.
#[derive(Debug, Default, Clone)]
pub struct ReplayWindow {
    highest: u64,
    bitmap: u64,
    any_seen: bool,
}

impl ReplayWindow {
    pub fn new() -> Self {
        Self::default()
    }

    /// True if `sequence` is fresh; marks it seen. Duplicates and sequences
    /// older than the window are rejected.
    pub fn check_and_update(&mut self, sequence: u64) -> bool {
        if !self.any_seen {
            self.any_seen = true;
            self.highest = sequence;
            self.bitmap = 1;
            return true;
        }
        if sequence > self.highest {
            let shift = sequence - self.highest;
            self.bitmap = if shift >= WINDOW_SIZE {
                0
            } else {
                self.bitmap << shift
            };
            self.bitmap |= 1;
            self.highest = sequence;
            return true;
        }
        let offset = self.highest - sequence;
        if offset >= WINDOW_SIZE {
            return false;
        }
        let mask = 1u64 << offset;
        if self.bitmap & mask != 0 {
            return false;
        }
        self.bitmap |= mask;
        true
    }
}

/// Per-epoch windows.
#[derive(Debug, Default, Clone)]
pub struct EpochWindows {
    windows: BTreeMap<u16, ReplayWindow>,
}

impl EpochWindows {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check_and_update(&mut self, epoch: u16, sequence: u64) -> bool {
        self.windows
            .entry(epoch)
            .or_default()
            .check_and_update(sequence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_rejected() {
        let mut w = ReplayWindow::new();
        assert!(w.check_and_update(5));
        assert!(!w.check_and_update(5));
        assert!(w.check_and_update(6));
        assert!(!w.check_and_update(6));
    }

    #[test]
    fn out_of_order_within_window_accepted_once() {
        let mut w = ReplayWindow::new();
        for seq in [10u64, 7, 9, 8, 3] {
            assert!(w.check_and_update(seq), "seq {seq} rejected");
        }
        for seq in [10u64, 7, 9, 8, 3] {
            assert!(!w.check_and_update(seq), "seq {seq} replayed");
        }
    }

    #[test]
    fn older_than_window_rejected() {
        let mut w = ReplayWindow::new();
        assert!(w.check_and_update(100));
        assert!(!w.check_and_update(100 - WINDOW_SIZE));
        assert!(w.check_and_update(100 - WINDOW_SIZE + 1));
    }

    #[test]
    fn large_jump_clears_bitmap() {
        let mut w = ReplayWindow::new();
        assert!(w.check_and_update(1));
        assert!(w.check_and_update(1000));
        assert!(!w.check_and_update(1000));
        assert!(w.check_and_update(999));
    }

    #[test]
    fn sequence_zero_is_usable() {
        let mut w = ReplayWindow::new();
        assert!(w.check_and_update(0));
        assert!(!w.check_and_update(0));
        assert!(w.check_and_update(1));
    }

    #[test]
    fn epochs_are_independent() {
        let mut w = EpochWindows::new();
        assert!(w.check_and_update(1, 4));
        assert!(w.check_and_update(65535, 4));
        assert!(!w.check_and_update(1, 4));
        assert!(!w.check_and_update(65535, 4));
    }
}
