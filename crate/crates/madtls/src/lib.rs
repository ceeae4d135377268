pub mod access;
pub mod bits;
pub mod crypto;
pub mod handshake;
pub mod inject;
pub mod record;
pub mod replay;
pub mod session;
pub mod sim;
pub mod tag;
pub mod wire;
