//! Blob store + message board abstraction with in-memory, filesystem, and
//! socket backends, binary parameter serialization, and a byte-exact
//! communication ledger.
//!
//! The two interfaces capture the roles cloud storage plays in the round
//! protocol: the blob store carries parameter payloads, the message board
//! carries the synchronization messages the barrier waits on. Every call is
//! accounted in the ledger with its exact payload size; an empty poll (or a
//! blob probe that comes back NotFound) costs a fixed 128-byte overhead on
//! the receiving side, which is what makes received bytes outgrow
//! transmitted bytes for clients that finish early and keep checking for
//! the next global model.

mod fs;
mod memory;
mod socket;
pub mod wire;

pub use fs::FilesystemBackend;
pub use memory::InMemoryBackend;
pub use socket::{serve, shutdown_server, SocketBackend};
pub use wire::{
    deserialize_params, infer_arch, serialize_params, MESSAGE_WIRE_BYTES,
};

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::Result;

/// Fixed accounting cost of a poll that returns nothing.
pub const POLL_OVERHEAD_BYTES: u64 = 128;

/// A participant in the ledger: the server or one client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Server,
    Client(u32),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Server => f.write_str("server"),
            Endpoint::Client(id) => write!(f, "client_{id}"),
        }
    }
}

/// Address of one stored payload. Global keys have no client; local keys
/// always carry one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlobKey {
    Global { round: u32 },
    Local { round: u32, client_id: u32 },
}

impl BlobKey {
    pub fn round(&self) -> u32 {
        match self {
            BlobKey::Global { round } | BlobKey::Local { round, .. } => *round,
        }
    }
}

impl std::fmt::Display for BlobKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlobKey::Global { round } => write!(f, "global_r{round}"),
            BlobKey::Local { round, client_id } => write!(f, "local_r{round}_c{client_id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    ClientDone,
    GlobalPublished,
}

/// One synchronization message. The board keeps at most one message per
/// (kind, round, sender); reposting is a no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncMessage {
    pub kind: MessageKind,
    pub round: u32,
    pub sender: Endpoint,
    pub timestamp_ms: u64,
}

impl SyncMessage {
    pub fn now(kind: MessageKind, round: u32, sender: Endpoint) -> SyncMessage {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        SyncMessage {
            kind,
            round,
            sender,
            timestamp_ms,
        }
    }

    fn dedup_key(&self) -> (MessageKind, u32, Endpoint) {
        (self.kind, self.round, self.sender)
    }
}

/// Which messages a poll returns; `None` fields match anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MessageFilter {
    pub kind: Option<MessageKind>,
    pub round: Option<u32>,
    pub sender: Option<Endpoint>,
}

impl MessageFilter {
    pub fn kind_round(kind: MessageKind, round: u32) -> MessageFilter {
        MessageFilter {
            kind: Some(kind),
            round: Some(round),
            sender: None,
        }
    }

    pub fn matches(&self, msg: &SyncMessage) -> bool {
        self.kind.is_none_or(|k| k == msg.kind)
            && self.round.is_none_or(|r| r == msg.round)
            && self.sender.is_none_or(|s| s == msg.sender)
    }
}

/// The storage operations a backend must provide. All four calls are atomic
/// per call; puts are last-writer-wins per key; the board is append-only
/// and deduplicates on (kind, round, sender).
pub trait Backend: Send + Sync {
    fn blob_put(&self, key: &BlobKey, bytes: &[u8]) -> Result<()>;
    fn blob_get(&self, key: &BlobKey) -> Result<Vec<u8>>;
    fn board_post(&self, msg: &SyncMessage) -> Result<()>;
    fn board_poll(&self, filter: &MessageFilter) -> Result<Vec<SyncMessage>>;
}

/// Byte counters for one (round, endpoint) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrafficCounters {
    pub transmitted_bytes: u64,
    pub received_bytes: u64,
    pub poll_count: u64,
    pub poll_overhead_bytes: u64,
}

impl TrafficCounters {
    fn absorb(&mut self, other: &TrafficCounters) {
        self.transmitted_bytes += other.transmitted_bytes;
        self.received_bytes += other.received_bytes;
        self.poll_count += other.poll_count;
        self.poll_overhead_bytes += other.poll_overhead_bytes;
    }
}

/// Per-(round, endpoint) byte ledger. Counters only ever grow.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    entries: BTreeMap<(u32, Endpoint), TrafficCounters>,
}

impl CommLedger {
    fn entry_mut(&mut self, round: u32, endpoint: Endpoint) -> &mut TrafficCounters {
        self.entries.entry((round, endpoint)).or_default()
    }

    pub fn record_transmit(&mut self, round: u32, endpoint: Endpoint, bytes: u64) {
        self.entry_mut(round, endpoint).transmitted_bytes += bytes;
    }

    pub fn record_receive(&mut self, round: u32, endpoint: Endpoint, bytes: u64) {
        self.entry_mut(round, endpoint).received_bytes += bytes;
    }

    /// A board poll (or blob probe): payload bytes received, plus the fixed
    /// overhead when nothing came back.
    pub fn record_poll(&mut self, round: u32, endpoint: Endpoint, payload_bytes: u64) {
        let entry = self.entry_mut(round, endpoint);
        entry.poll_count += 1;
        if payload_bytes == 0 {
            entry.poll_overhead_bytes += POLL_OVERHEAD_BYTES;
            entry.received_bytes += POLL_OVERHEAD_BYTES;
        } else {
            entry.received_bytes += payload_bytes;
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(u32, Endpoint), &TrafficCounters)> {
        self.entries.iter()
    }

    pub fn round_entries(&self, round: u32) -> Vec<(Endpoint, TrafficCounters)> {
        self.entries
            .range((round, Endpoint::Server)..=(round, Endpoint::Client(u32::MAX)))
            .map(|((_, ep), counters)| (*ep, *counters))
            .collect()
    }

    pub fn endpoint_counters(&self, round: u32, endpoint: Endpoint) -> TrafficCounters {
        self.entries
            .get(&(round, endpoint))
            .copied()
            .unwrap_or_default()
    }

    pub fn totals(&self) -> TrafficCounters {
        let mut total = TrafficCounters::default();
        for counters in self.entries.values() {
            total.absorb(counters);
        }
        total
    }

    pub fn rounds(&self) -> Vec<u32> {
        let mut rounds: Vec<u32> = self.entries.keys().map(|(r, _)| *r).collect();
        rounds.dedup();
        rounds
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One row of a ledger report.
#[derive(Debug, Clone, Serialize)]
pub struct LedgerRow {
    pub round: u32,
    pub endpoint: String,
    pub transmitted_bytes: u64,
    pub received_bytes: u64,
    pub poll_count: u64,
    pub poll_overhead_bytes: u64,
}

/// Per-round, per-endpoint byte summary with totals and per-round averages.
/// MB means 10^6 bytes.
#[derive(Debug, Clone, Serialize)]
pub struct LedgerReport {
    pub rows: Vec<LedgerRow>,
    pub total_transmitted_bytes: u64,
    pub total_received_bytes: u64,
    pub round_count: usize,
    pub avg_transmitted_mb_per_round: f64,
    pub avg_received_mb_per_round: f64,
}

pub fn ledger_report(ledger: &CommLedger) -> LedgerReport {
    let rows: Vec<LedgerRow> = ledger
        .entries()
        .map(|((round, endpoint), c)| LedgerRow {
            round: *round,
            endpoint: endpoint.to_string(),
            transmitted_bytes: c.transmitted_bytes,
            received_bytes: c.received_bytes,
            poll_count: c.poll_count,
            poll_overhead_bytes: c.poll_overhead_bytes,
        })
        .collect();
    let totals = ledger.totals();
    let round_count = ledger.rounds().len();
    let mb = 1e6;
    let per_round = |bytes: u64| {
        if round_count == 0 {
            0.0
        } else {
            bytes as f64 / mb / round_count as f64
        }
    };
    LedgerReport {
        rows,
        total_transmitted_bytes: totals.transmitted_bytes,
        total_received_bytes: totals.received_bytes,
        round_count,
        avg_transmitted_mb_per_round: per_round(totals.transmitted_bytes),
        avg_received_mb_per_round: per_round(totals.received_bytes),
    }
}

/// A backend plus the shared ledger. Endpoint-scoped handles do the actual
/// traffic and attribute it to the protocol round they are set to.
#[derive(Clone)]
pub struct Transport {
    backend: Arc<dyn Backend>,
    ledger: Arc<Mutex<CommLedger>>,
}

impl Transport {
    pub fn new(backend: Arc<dyn Backend>) -> Transport {
        Transport {
            backend,
            ledger: Arc::new(Mutex::new(CommLedger::default())),
        }
    }

    pub fn in_memory() -> Transport {
        Transport::new(Arc::new(InMemoryBackend::default()))
    }

    pub fn endpoint(&self, endpoint: Endpoint) -> EndpointTransport {
        EndpointTransport {
            endpoint,
            round: 0,
            backend: Arc::clone(&self.backend),
            ledger: Arc::clone(&self.ledger),
        }
    }

    pub fn ledger_snapshot(&self) -> CommLedger {
        self.ledger.lock().unwrap().clone()
    }
}

/// Transport handle bound to one endpoint and the round it is working in.
pub struct EndpointTransport {
    endpoint: Endpoint,
    round: u32,
    backend: Arc<dyn Backend>,
    ledger: Arc<Mutex<CommLedger>>,
}

impl EndpointTransport {
    pub fn endpoint(&self) -> Endpoint {
        self.endpoint
    }

    /// Sets the protocol round subsequent traffic is attributed to.
    pub fn set_round(&mut self, round: u32) {
        self.round = round;
    }

    fn ledger(&self) -> std::sync::MutexGuard<'_, CommLedger> {
        self.ledger.lock().unwrap()
    }

    pub fn blob_put(&self, key: &BlobKey, bytes: &[u8]) -> Result<()> {
        self.backend.blob_put(key, bytes)?;
        self.ledger()
            .record_transmit(self.round, self.endpoint, bytes.len() as u64);
        Ok(())
    }

    /// Fetches a blob; a NotFound probe is accounted like an empty poll.
    pub fn blob_get(&self, key: &BlobKey) -> Result<Vec<u8>> {
        match self.backend.blob_get(key) {
            Ok(bytes) => {
                self.ledger()
                    .record_receive(self.round, self.endpoint, bytes.len() as u64);
                Ok(bytes)
            }
            Err(e @ crate::error::Error::BlobNotFound(_)) => {
                self.ledger().record_poll(self.round, self.endpoint, 0);
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    pub fn board_post(&self, msg: &SyncMessage) -> Result<()> {
        self.backend.board_post(msg)?;
        self.ledger()
            .record_transmit(self.round, self.endpoint, MESSAGE_WIRE_BYTES);
        Ok(())
    }

    pub fn post_now(&self, kind: MessageKind, round: u32) -> Result<()> {
        self.board_post(&SyncMessage::now(kind, round, self.endpoint))
    }

    pub fn board_poll(&self, filter: &MessageFilter) -> Result<Vec<SyncMessage>> {
        let msgs = self.backend.board_poll(filter)?;
        let payload = msgs.len() as u64 * MESSAGE_WIRE_BYTES;
        self.ledger().record_poll(self.round, self.endpoint, payload);
        Ok(msgs)
    }
}
