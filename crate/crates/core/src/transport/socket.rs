//! TCP backend: a length-prefixed request/response protocol over one
//! connection per request. Round cadence is seconds, so per-call dials are
//! fine and keep the server loop trivial.
//!
//! Request:  u32 LE body length, then body = opcode u8 + payload.
//! Response: u32 LE body length, then body = status u8 + payload.
//! Opcodes: 0 PUT (key + blob), 1 GET (key), 2 POST (message),
//! 3 POLL (filter), 240 SHUTDOWN. Statuses: 0 OK, 1 NOT_FOUND, 2 ERROR.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Result};

use super::wire::{
    decode_filter, decode_key, decode_message, encode_filter, encode_key, encode_message,
    MESSAGE_WIRE_BYTES,
};
use super::{Backend, BlobKey, MessageFilter, SyncMessage};

const OP_PUT: u8 = 0;
const OP_GET: u8 = 1;
const OP_POST: u8 = 2;
const OP_POLL: u8 = 3;
const OP_SHUTDOWN: u8 = 240;

const STATUS_OK: u8 = 0;
const STATUS_NOT_FOUND: u8 = 1;
const STATUS_ERROR: u8 = 2;

const IO_TIMEOUT: Duration = Duration::from_secs(30);

fn write_frame(stream: &mut TcpStream, body: &[u8]) -> std::io::Result<()> {
    stream.write_all(&(body.len() as u32).to_le_bytes())?;
    stream.write_all(body)?;
    stream.flush()
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
    stream.read_exact(&mut body)?;
    Ok(body)
}

/// Client-side backend that dials the service address once per call.
pub struct SocketBackend {
    addr: String,
}

impl SocketBackend {
    pub fn new(addr: impl Into<String>) -> SocketBackend {
        SocketBackend { addr: addr.into() }
    }

    fn request(&self, body: Vec<u8>) -> Result<(u8, Vec<u8>)> {
        let mut stream = TcpStream::connect(&self.addr)
            .map_err(|e| Error::Protocol(format!("connect {}: {e}", self.addr)))?;
        stream.set_read_timeout(Some(IO_TIMEOUT)).ok();
        stream.set_write_timeout(Some(IO_TIMEOUT)).ok();
        write_frame(&mut stream, &body)
            .map_err(|e| Error::Protocol(format!("send request: {e}")))?;
        let mut response = read_frame(&mut stream)
            .map_err(|e| Error::Protocol(format!("read response: {e}")))?;
        if response.is_empty() {
            return Err(Error::Protocol("empty response".into()));
        }
        let status = response.remove(0);
        Ok((status, response))
    }

    fn expect_ok(&self, body: Vec<u8>, context: &str) -> Result<Vec<u8>> {
        let (status, payload) = self.request(body)?;
        match status {
            STATUS_OK => Ok(payload),
            STATUS_NOT_FOUND => Err(Error::BlobNotFound(context.to_owned())),
            _ => Err(Error::Protocol(format!(
                "{context}: {}",
                String::from_utf8_lossy(&payload)
            ))),
        }
    }
}

impl Backend for SocketBackend {
    fn blob_put(&self, key: &BlobKey, bytes: &[u8]) -> Result<()> {
        let mut body = Vec::with_capacity(10 + bytes.len());
        body.push(OP_PUT);
        body.extend_from_slice(&encode_key(key));
        body.extend_from_slice(bytes);
        self.expect_ok(body, &key.to_string())?;
        Ok(())
    }

    fn blob_get(&self, key: &BlobKey) -> Result<Vec<u8>> {
        let mut body = Vec::with_capacity(10);
        body.push(OP_GET);
        body.extend_from_slice(&encode_key(key));
        self.expect_ok(body, &key.to_string())
    }

    fn board_post(&self, msg: &SyncMessage) -> Result<()> {
        let mut body = Vec::with_capacity(18);
        body.push(OP_POST);
        body.extend_from_slice(&encode_message(msg));
        self.expect_ok(body, "board_post")?;
        Ok(())
    }

    fn board_poll(&self, filter: &MessageFilter) -> Result<Vec<SyncMessage>> {
        let mut body = Vec::with_capacity(11);
        body.push(OP_POLL);
        body.extend_from_slice(&encode_filter(filter));
        let payload = self.expect_ok(body, "board_poll")?;
        if payload.len() < 4 {
            return Err(Error::Protocol("short poll response".into()));
        }
        let count = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
        let records = &payload[4..];
        if records.len() != count * MESSAGE_WIRE_BYTES as usize {
            return Err(Error::Protocol("poll response length mismatch".into()));
        }
        records
            .chunks_exact(MESSAGE_WIRE_BYTES as usize)
            .map(decode_message)
            .collect()
    }
}

fn handle_request(backend: &dyn Backend, body: &[u8]) -> (u8, Vec<u8>) {
    let run = || -> Result<(u8, Vec<u8>)> {
        let (&opcode, payload) = body
            .split_first()
            .ok_or_else(|| Error::Protocol("empty request".into()))?;
        match opcode {
            OP_PUT => {
                if payload.len() < 9 {
                    return Err(Error::Protocol("short PUT".into()));
                }
                let key = decode_key(&payload[..9])?;
                backend.blob_put(&key, &payload[9..])?;
                Ok((STATUS_OK, Vec::new()))
            }
            OP_GET => {
                let key = decode_key(payload)?;
                match backend.blob_get(&key) {
                    Ok(bytes) => Ok((STATUS_OK, bytes)),
                    Err(Error::BlobNotFound(_)) => Ok((STATUS_NOT_FOUND, Vec::new())),
                    Err(e) => Err(e),
                }
            }
            OP_POST => {
                let msg = decode_message(payload)?;
                backend.board_post(&msg)?;
                Ok((STATUS_OK, Vec::new()))
            }
            OP_POLL => {
                let filter = decode_filter(payload)?;
                let msgs = backend.board_poll(&filter)?;
                let mut out = Vec::with_capacity(4 + msgs.len() * 17);
                out.extend_from_slice(&(msgs.len() as u32).to_le_bytes());
                for msg in &msgs {
                    out.extend_from_slice(&encode_message(msg));
                }
                Ok((STATUS_OK, out))
            }
            other => Err(Error::Protocol(format!("unknown opcode {other}"))),
        }
    };
    match run() {
        Ok(response) => response,
        Err(e) => (STATUS_ERROR, e.to_string().into_bytes()),
    }
}

/// Serves the four operations over TCP until a SHUTDOWN request arrives.
/// One request per connection.
pub fn serve(listener: TcpListener, backend: Arc<dyn Backend>) -> Result<()> {
    for stream in listener.incoming() {
        let mut stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        stream.set_read_timeout(Some(IO_TIMEOUT)).ok();
        stream.set_write_timeout(Some(IO_TIMEOUT)).ok();
        let body = match read_frame(&mut stream) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("bad request frame: {e}");
                continue;
            }
        };
        if body.first() == Some(&OP_SHUTDOWN) {
            let _ = write_frame(&mut stream, &[STATUS_OK]);
            return Ok(());
        }
        let (status, payload) = handle_request(backend.as_ref(), &body);
        let mut response = Vec::with_capacity(1 + payload.len());
        response.push(status);
        response.extend_from_slice(&payload);
        if let Err(e) = write_frame(&mut stream, &response) {
            log::warn!("send response failed: {e}");
        }
    }
    Ok(())
}

/// Asks a running service to stop accepting requests.
pub fn shutdown_server(addr: impl ToSocketAddrs) -> Result<()> {
    let mut stream =
        TcpStream::connect(addr).map_err(|e| Error::Protocol(format!("connect: {e}")))?;
    write_frame(&mut stream, &[OP_SHUTDOWN])
        .map_err(|e| Error::Protocol(format!("send shutdown: {e}")))?;
    let _ = read_frame(&mut stream);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{Endpoint, InMemoryBackend, MessageKind};

    fn spawn_server() -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let handle = std::thread::spawn(move || {
            serve(listener, Arc::new(InMemoryBackend::default())).unwrap();
        });
        (addr, handle)
    }

    #[test]
    fn socket_backend_round_trips_all_operations() {
        let (addr, handle) = spawn_server();
        let backend = SocketBackend::new(addr.clone());

        let key = BlobKey::Global { round: 1 };
        assert!(matches!(
            backend.blob_get(&key),
            Err(Error::BlobNotFound(_))
        ));
        backend.blob_put(&key, b"weights").unwrap();
        assert_eq!(backend.blob_get(&key).unwrap(), b"weights");

        let msg = SyncMessage {
            kind: MessageKind::GlobalPublished,
            round: 1,
            sender: Endpoint::Server,
            timestamp_ms: 42,
        };
        backend.board_post(&msg).unwrap();
        backend.board_post(&msg).unwrap();
        let polled = backend
            .board_poll(&MessageFilter::kind_round(MessageKind::GlobalPublished, 1))
            .unwrap();
        assert_eq!(polled, vec![msg]);
        let empty = backend
            .board_poll(&MessageFilter::kind_round(MessageKind::ClientDone, 1))
            .unwrap();
        assert!(empty.is_empty());

        shutdown_server(&addr).unwrap();
        handle.join().unwrap();
    }
}
