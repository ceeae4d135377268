//! Record delivery between adjacent entities: an in-memory hand-off or a
//! real loopback datagram per link, both with optional seeded loss.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::net::UdpSocket;
use std::time::Duration;

use super::ScenarioError;

pub trait Wire {
    /// Moves one record from entity `from` to entity `to`; `None` means the
    /// datagram was lost.
    fn transfer(
        &mut self,
        from: usize,
        to: usize,
        bytes: &[u8],
        rng: &mut ChaCha20Rng,
    ) -> Result<Option<Vec<u8>>, ScenarioError>;

    /// Per-link loss probability in percent.
    fn loss_percent(&self) -> u8;

    fn lost(&self, rng: &mut ChaCha20Rng) -> bool {
        self.loss_percent() > 0 && rng.gen_range(0..100u8) < self.loss_percent()
    }
}

pub struct MemoryWire {
    pub loss_percent: u8,
}

impl Wire for MemoryWire {
    fn transfer(
        &mut self,
        _from: usize,
        _to: usize,
        bytes: &[u8],
        rng: &mut ChaCha20Rng,
    ) -> Result<Option<Vec<u8>>, ScenarioError> {
        if self.lost(rng) {
            return Ok(None);
        }
        Ok(Some(bytes.to_vec()))
    }

    fn loss_percent(&self) -> u8 {
        self.loss_percent
    }
}

/// One loopback UDP socket per entity; a transfer is a real send/recv pair.
pub struct DatagramWire {
    sockets: Vec<UdpSocket>,
    loss_percent: u8,
}

impl DatagramWire {
    pub fn bind(entities: usize, loss_percent: u8) -> Result<Self, ScenarioError> {
        let mut sockets = Vec::with_capacity(entities);
        for _ in 0..entities {
            let socket = UdpSocket::bind(("127.0.0.1", 0))
                .map_err(|e| ScenarioError::Io(e.to_string()))?;
            socket
                .set_read_timeout(Some(Duration::from_secs(5)))
                .map_err(|e| ScenarioError::Io(e.to_string()))?;
            sockets.push(socket);
        }
        Ok(Self {
            sockets,
            loss_percent,
        })
    }
}

impl Wire for DatagramWire {
    fn transfer(
        &mut self,
        from: usize,
        to: usize,
        bytes: &[u8],
        rng: &mut ChaCha20Rng,
    ) -> Result<Option<Vec<u8>>, ScenarioError> {
        if self.lost(rng) {
            return Ok(None);
        }
        let dest = self.sockets[to]
            .local_addr()
            .map_err(|e| ScenarioError::Io(e.to_string()))?;
        self.sockets[from]
            .send_to(bytes, dest)
            .map_err(|e| ScenarioError::Io(e.to_string()))?;
        let mut buf = vec![0u8; 65536];
        let (n, _) = self.sockets[to]
            .recv_from(&mut buf)
            .map_err(|e| ScenarioError::Io(e.to_string()))?;
        buf.truncate(n);
        Ok(Some(buf))
    }

    fn loss_percent(&self) -> u8 {
        self.loss_percent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn datagram_round_trips_bytes() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut wire = DatagramWire::bind(3, 0).unwrap();
        let out = wire.transfer(0, 2, b"record bytes", &mut rng).unwrap();
        assert_eq!(out.as_deref(), Some(&b"record bytes"[..]));
    }

    #[test]
    fn memory_loss_is_seeded() {
        let mut wire = MemoryWire { loss_percent: 50 };
        let mut rng1 = ChaCha20Rng::seed_from_u64(9);
        let mut rng2 = ChaCha20Rng::seed_from_u64(9);
        let a: Vec<bool> = (0..64)
            .map(|_| wire.transfer(0, 1, b"x", &mut rng1).unwrap().is_some())
            .collect();
        let b: Vec<bool> = (0..64)
            .map(|_| wire.transfer(0, 1, b"x", &mut rng2).unwrap().is_some())
            .collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|d| *d) && a.iter().any(|d| !*d));
    }
}
