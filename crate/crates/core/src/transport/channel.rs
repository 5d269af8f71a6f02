//! Packet delivery. Frames are a u64 LE byte count followed by the packet;
//! the receiver answers with one ack byte after checking the packet.

use std::io::{ErrorKind, Read, Write};
use std::net::{Ipv4Addr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver};
use std::thread::JoinHandle;

use super::{inspect, TransportError};

pub const ACK_OK: u8 = 0;
pub const ACK_REJECTED: u8 = 1;
const MAX_ATTEMPTS: usize = 3;

pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> Result<(), TransportError> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before the length.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, TransportError> {
    let mut len = [0u8; 8];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u64::from_le_bytes(len) as usize;
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(TransportError::Truncated { expected: len, actual: buf.len() });
    }
    Ok(Some(buf))
}

/// Moves a serialized packet to an institution and returns the bytes it
/// received.
pub trait Transport {
    fn institutions(&self) -> usize;
    fn deliver(&mut self, to: usize, packet: Vec<u8>) -> Result<Vec<u8>, TransportError>;
}

/// Same-process hand-off.
#[derive(Debug, Clone)]
pub struct MemoryTransport {
    institutions: usize,
}

impl MemoryTransport {
    pub fn new(institutions: usize) -> Self {
        Self { institutions }
    }
}

impl Transport for MemoryTransport {
    fn institutions(&self) -> usize {
        self.institutions
    }

    fn deliver(&mut self, to: usize, packet: Vec<u8>) -> Result<Vec<u8>, TransportError> {
        if to >= self.institutions {
            return Err(TransportError::UnknownInstitution(to));
        }
        Ok(packet)
    }
}

struct Inbox {
    stream: TcpStream,
    received: Receiver<Vec<u8>>,
    worker: Option<JoinHandle<()>>,
}

/// Loopback TCP: one listener thread per institution. A thread verifies each
/// incoming packet, acks it, and queues accepted bytes for the coordinator.
pub struct SocketTransport {
    inboxes: Vec<Inbox>,
}

impl SocketTransport {
    pub fn new(institutions: usize) -> Result<Self, TransportError> {
        let mut inboxes = Vec::with_capacity(institutions);
        for _ in 0..institutions {
            let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?;
            let addr = listener.local_addr()?;
            let (tx, rx) = mpsc::channel();
            let worker = std::thread::spawn(move || {
                let Ok((mut conn, _)) = listener.accept() else { return };
                while let Ok(Some(frame)) = read_frame(&mut conn) {
                    let ack = if inspect(&frame).is_ok() { ACK_OK } else { ACK_REJECTED };
                    if ack == ACK_OK && tx.send(frame).is_err() {
                        return;
                    }
                    if conn.write_all(&[ack]).is_err() {
                        return;
                    }
                }
            });
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            inboxes.push(Inbox { stream, received: rx, worker: Some(worker) });
        }
        Ok(Self { inboxes })
    }

    fn attempt(inbox: &mut Inbox, packet: &[u8]) -> Result<Option<Vec<u8>>, TransportError> {
        write_frame(&mut inbox.stream, packet)?;
        let mut ack = [0u8; 1];
        inbox.stream.read_exact(&mut ack)?;
        if ack[0] != ACK_OK {
            return Ok(None);
        }
        inbox
            .received
            .recv()
            .map(Some)
            .map_err(|_| TransportError::Io(std::io::Error::new(ErrorKind::BrokenPipe, "inbox closed")))
    }
}

impl Transport for SocketTransport {
    fn institutions(&self) -> usize {
        self.inboxes.len()
    }

    fn deliver(&mut self, to: usize, packet: Vec<u8>) -> Result<Vec<u8>, TransportError> {
        let inbox = self.inboxes.get_mut(to).ok_or(TransportError::UnknownInstitution(to))?;
        let mut reason = String::new();
        for _ in 0..MAX_ATTEMPTS {
            match Self::attempt(inbox, &packet) {
                Ok(Some(bytes)) => return Ok(bytes),
                Ok(None) => reason = "receiver rejected the packet".into(),
                Err(e) => {
                    reason = e.to_string();
                    break;
                }
            }
        }
        Err(TransportError::TransferFailed { to, attempts: MAX_ATTEMPTS, reason })
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for inbox in &mut self.inboxes {
            let _ = inbox.stream.shutdown(std::net::Shutdown::Both);
            if let Some(w) = inbox.worker.take() {
                let _ = w.join();
            }
        }
    }
}
