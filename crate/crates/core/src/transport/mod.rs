//! Weight packets and the channels that carry them between institutions.

mod channel;
mod packet;

pub use channel::{read_frame, write_frame, MemoryTransport, SocketTransport, Transport, ACK_OK, ACK_REJECTED};
pub use packet::{deserialize, inspect, serialize, PacketMeta, FORMAT_VERSION, HEADER_LEN, MAGIC};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("not a weight packet: magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported packet version {0}")]
    UnsupportedVersion(u16),
    #[error("packet corrupt: stored crc {stored:#010x}, computed {computed:#010x}")]
    Corrupt { stored: u32, computed: u32 },
    #[error("architecture mismatch: receiver {expected:#018x}, packet {found:#018x}")]
    IncompatibleArchitecture { expected: u64, found: u64 },
    #[error("packet truncated: need at least {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("model contains non-finite values")]
    NonFinite,
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("no institution {0} on this channel")]
    UnknownInstitution(usize),
    #[error("transfer to institution {to} failed after {attempts} attempts: {reason}")]
    TransferFailed { to: usize, attempts: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes a packet to a `.fwt` file.
pub fn write_packet_file(path: &Path, bytes: &[u8]) -> Result<(), TransportError> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_packet_file(path: &Path) -> Result<Vec<u8>, TransportError> {
    Ok(std::fs::read(path)?)
}
