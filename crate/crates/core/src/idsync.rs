//! Cross-device identity registry.
//!
//! A single authoritative registry assigns stable integer IDs to embedding
//! vectors: a new embedding close enough to a known one (L2 distance on
//! L2-normalized vectors) resolves to the existing ID, anything else gets
//! the next fresh ID. Edge devices keep local snapshot caches and converge
//! to the registry in periodic sync rounds. A small TCP protocol (4-byte
//! big-endian length prefix + JSON body) exposes the registry over the
//! network; all registration goes through one lock, so assignment is
//! linearizable.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;
use thiserror::Error;

/// Default identity-matching threshold on L2 distance between normalized
/// embeddings (range (0, 2); two unit vectors are at most 2 apart).
pub const DEFAULT_ID_THRESHOLD: f64 = 0.6;

/// Upper bound on a single wire message body, to keep a bad length prefix
/// from allocating unbounded memory.
const MAX_MESSAGE_BYTES: u32 = 16 * 1024 * 1024;

/// Errors from the registry, device caches, or the wire protocol.
#[derive(Debug, Error)]
pub enum SyncError {
    #[error("embedding has dimension {got}, registry expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("threshold {0} outside (0, 2)")]
    InvalidThreshold(f64),
    #[error("device {0:?} unreachable; cache left stale")]
    DeviceUnreachable(String),
    #[error("wire protocol failure: {0}")]
    Wire(String),
    #[error("unexpected reply: {0}")]
    Protocol(String),
    #[error("registry rejected request: {0}")]
    Remote(String),
}

/// One identity known to the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    /// Assigned once, never reused or remapped.
    pub id: u64,
    /// Stored L2-normalized.
    pub embedding: Vec<f64>,
    /// Caller-supplied timestamp of first registration (seconds).
    pub first_seen: f64,
    /// Name of the device that first registered this identity.
    pub device_of_origin: String,
}

fn normalized(embedding: &[f64]) -> Result<Vec<f64>, SyncError> {
    if embedding.is_empty() {
        return Err(SyncError::InvalidEmbedding("empty vector".into()));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(SyncError::InvalidEmbedding(
            "non-finite component".into(),
        ));
    }
    let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(SyncError::InvalidEmbedding("zero vector".into()));
    }
    Ok(embedding.iter().map(|v| v / norm).collect())
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_threshold(threshold: f64) -> Result<(), SyncError> {
    if !(threshold > 0.0 && threshold < 2.0) {
        return Err(SyncError::InvalidThreshold(threshold));
    }
    Ok(())
}

/// Nearest record within `threshold` of the (normalized) query, among any
/// iterator of records; equally distant records resolve to the lowest id.
fn nearest_within<'a>(
    records: impl Iterator<Item = &'a IdentityRecord>,
    query: &[f64],
    threshold: f64,
) -> Option<u64> {
    let mut best: Option<(f64, u64)> = None;
    for rec in records {
        let d = l2_distance(&rec.embedding, query);
        if d <= threshold {
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && rec.id < bid),
            };
            if better {
                best = Some((d, rec.id));
            }
        }
    }
    best.map(|(_, id)| id)
}

#[derive(Debug)]
struct RegistryState {
    records: Vec<IdentityRecord>,
    next_id: u64,
}

/// The authoritative identity store. All mutation is serialized through an
/// internal lock, so concurrent registrations are linearizable: every
/// assignment happens at one atomic point, and IDs are handed out in strict
/// arrival order with no reuse.
#[derive(Debug)]
pub struct Registry {
    dim: usize,
    state: Mutex<RegistryState>,
}

impl Registry {
    /// A registry for embeddings of the given fixed dimension.
    pub fn new(dim: usize) -> Result<Self, SyncError> {
        if dim == 0 {
            return Err(SyncError::InvalidEmbedding(
                "dimension must be positive".into(),
            ));
        }
        Ok(Self {
            dim,
            state: Mutex::new(RegistryState {
                records: Vec::new(),
                next_id: 1,
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_dim(&self, embedding: &[f64]) -> Result<(), SyncError> {
        if embedding.len() != self.dim {
            return Err(SyncError::DimensionMismatch {
                expected: self.dim,
                got: embedding.len(),
            });
        }
        Ok(())
    }

    /// Resolves an embedding to an ID, minting a fresh one if nothing
    /// registered is within `threshold`. Returns the ID and whether it was
    /// newly created. Identical embeddings always resolve to the same ID.
    pub fn register_or_lookup(
        &self,
        embedding: &[f64],
        threshold: f64,
        device: &str,
        timestamp: f64,
    ) -> Result<(u64, bool), SyncError> {
        self.check_dim(embedding)?;
        check_threshold(threshold)?;
        let query = normalized(embedding)?;
        let mut state = self.state.lock().expect("registry lock poisoned");
        if let Some(id) = nearest_within(state.records.iter(), &query, threshold) {
            return Ok((id, false));
        }
        let id = state.next_id;
        state.next_id += 1;
        state.records.push(IdentityRecord {
            id,
            embedding: query,
            first_seen: timestamp,
            device_of_origin: device.to_string(),
        });
        Ok((id, true))
    }

    /// Pure query: the ID the embedding would resolve to, if any. Never
    /// creates a record.
    pub fn lookup(&self, embedding: &[f64], threshold: f64) -> Result<Option<u64>, SyncError> {
        self.check_dim(embedding)?;
        check_threshold(threshold)?;
        let query = normalized(embedding)?;
        let state = self.state.lock().expect("registry lock poisoned");
        Ok(nearest_within(state.records.iter(), &query, threshold))
    }

    /// A point-in-time copy of every record, in ID order.
    pub fn snapshot(&self) -> Vec<IdentityRecord> {
        self.state
            .lock()
            .expect("registry lock poisoned")
            .records
            .clone()
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("registry lock poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Device caches and sync rounds
// ---------------------------------------------------------------------------

/// An edge device's local view of the registry: the snapshot from its last
/// successful sync round. Lookups against the cache need no network.
#[derive(Debug, Clone)]
pub struct DeviceCache {
    pub name: String,
    pub records: Vec<IdentityRecord>,
    /// Simulated link state; an unreachable device misses the round and
    /// keeps its stale cache.
    pub reachable: bool,
}

impl DeviceCache {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            records: Vec::new(),
            reachable: true,
        }
    }

    /// Resolves an embedding against the cached snapshot (same matching
    /// rule as the registry). `None` means this device has not yet seen a
    /// matching identity.
    pub fn lookup_local(
        &self,
        embedding: &[f64],
        threshold: f64,
    ) -> Result<Option<u64>, SyncError> {
        check_threshold(threshold)?;
        let query = normalized(embedding)?;
        if let Some(rec) = self.records.first() {
            if rec.embedding.len() != embedding.len() {
                return Err(SyncError::DimensionMismatch {
                    expected: rec.embedding.len(),
                    got: embedding.len(),
                });
            }
        }
        Ok(nearest_within(self.records.iter(), &query, threshold))
    }
}

/// One synchronization round: every reachable device's cache is replaced by
/// a single registry snapshot taken at the start of the round. Unreachable
/// devices keep their stale cache and get a [`SyncError::DeviceUnreachable`]
/// in their slot of the result. Zero devices is a no-op.
pub fn sync_round(devices: &mut [DeviceCache], registry: &Registry) -> Vec<Result<(), SyncError>> {
    let snapshot = registry.snapshot();
    devices
        .iter_mut()
        .map(|dev| {
            if !dev.reachable {
                return Err(SyncError::DeviceUnreachable(dev.name.clone()));
            }
            dev.records = snapshot.clone();
            Ok(())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Wire protocol
// ---------------------------------------------------------------------------

/// Protocol messages. Each request kind has exactly one reply kind:
/// `REGISTER` and `LOOKUP` are answered by `ASSIGNED`, `SNAPSHOT` by
/// `SNAPSHOT_REPLY`. Replies echo the `request_id` of their request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SyncMessage {
    #[serde(rename = "REGISTER")]
    Register {
        request_id: u64,
        embedding: Vec<f64>,
        threshold: f64,
        device: String,
        timestamp: f64,
    },
    #[serde(rename = "LOOKUP")]
    Lookup {
        request_id: u64,
        embedding: Vec<f64>,
        threshold: f64,
    },
    #[serde(rename = "SNAPSHOT")]
    Snapshot { request_id: u64 },
    #[serde(rename = "ASSIGNED")]
    Assigned {
        request_id: u64,
        /// `None` on a lookup miss or a rejected request.
        id: Option<u64>,
        created: bool,
        /// Set when the registry rejected the request (bad dimension,
        /// threshold, or embedding).
        error: Option<String>,
    },
    #[serde(rename = "SNAPSHOT_REPLY")]
    SnapshotReply {
        request_id: u64,
        records: Vec<IdentityRecord>,
    },
}

/// Writes one length-prefixed message: 4-byte big-endian body length, then
/// the JSON body.
pub fn write_message(w: &mut impl Write, msg: &SyncMessage) -> Result<(), SyncError> {
    let body = serde_json::to_vec(msg).map_err(|e| SyncError::Wire(e.to_string()))?;
    let len = u32::try_from(body.len()).map_err(|_| SyncError::Wire("message too large".into()))?;
    if len > MAX_MESSAGE_BYTES {
        return Err(SyncError::Wire("message too large".into()));
    }
    w.write_all(&len.to_be_bytes())
        .and_then(|_| w.write_all(&body))
        .and_then(|_| w.flush())
        .map_err(|e| SyncError::Wire(e.to_string()))
}

/// Reads one length-prefixed message; `Ok(None)` on clean end-of-stream
/// (the peer closed between messages).
pub fn read_message(r: &mut impl Read) -> Result<Option<SyncMessage>, SyncError> {
    let mut len_bytes = [0u8; 4];
    match r.read_exact(&mut len_bytes) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(SyncError::Wire(e.to_string())),
    }
    let len = u32::from_be_bytes(len_bytes);
    if len > MAX_MESSAGE_BYTES {
        return Err(SyncError::Wire(format!("length prefix {len} too large")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)
        .map_err(|e| SyncError::Wire(format!("truncated body: {e}")))?;
    let msg = serde_json::from_slice(&body).map_err(|e| SyncError::Wire(e.to_string()))?;
    Ok(Some(msg))
}

/// The reply a registry produces for one request message.
pub fn handle_message(registry: &Registry, msg: &SyncMessage) -> SyncMessage {
    match msg {
        SyncMessage::Register {
            request_id,
            embedding,
            threshold,
            device,
            timestamp,
        } => match registry.register_or_lookup(embedding, *threshold, device, *timestamp) {
            Ok((id, created)) => SyncMessage::Assigned {
                request_id: *request_id,
                id: Some(id),
                created,
                error: None,
            },
            Err(e) => SyncMessage::Assigned {
                request_id: *request_id,
                id: None,
                created: false,
                error: Some(e.to_string()),
            },
        },
        SyncMessage::Lookup {
            request_id,
            embedding,
            threshold,
        } => match registry.lookup(embedding, *threshold) {
            Ok(id) => SyncMessage::Assigned {
                request_id: *request_id,
                id,
                created: false,
                error: None,
            },
            Err(e) => SyncMessage::Assigned {
                request_id: *request_id,
                id: None,
                created: false,
                error: Some(e.to_string()),
            },
        },
        SyncMessage::Snapshot { request_id } => SyncMessage::SnapshotReply {
            request_id: *request_id,
            records: registry.snapshot(),
        },
        // A reply arriving where a request belongs is a protocol error;
        // answer it like a rejected request so the peer can tell.
        SyncMessage::Assigned { request_id, .. }
        | SyncMessage::SnapshotReply { request_id, .. } => SyncMessage::Assigned {
            request_id: *request_id,
            id: None,
            created: false,
            error: Some("reply kinds are not valid requests".into()),
        },
    }
}

// ---------------------------------------------------------------------------
// TCP server and client
// ---------------------------------------------------------------------------

/// A running TCP front end for a shared registry. Each connection gets its
/// own thread; registration stays linearizable because every connection
/// funnels into the same registry lock.
pub struct RegistryServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_handle: Option<JoinHandle<()>>,
}

impl RegistryServer {
    /// Binds 127.0.0.1 on the given port (0 picks a free port) and starts
    /// serving the registry.
    pub fn serve(registry: Arc<Registry>, port: u16) -> Result<Self, SyncError> {
        let listener = TcpListener::bind(("127.0.0.1", port))
            .map_err(|e| SyncError::Wire(format!("bind failed: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| SyncError::Wire(e.to_string()))?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let accept_shutdown = shutdown.clone();
        let accept_handle = thread::Builder::new()
            .name("idsync-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if accept_shutdown.load(Ordering::Relaxed) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let registry = registry.clone();
                    let _ = thread::Builder::new()
                        .name("idsync-conn".into())
                        .spawn(move || serve_connection(stream, &registry));
                }
            })
            .map_err(|e| SyncError::Wire(format!("spawn failed: {e}")))?;
        Ok(Self {
            addr,
            shutdown,
            accept_handle: Some(accept_handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting new connections and joins the accept thread.
    /// Connections already open finish on their own.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shutdown.swap(true, Ordering::Relaxed) {
            return;
        }
        // Nudge the blocking accept() so the thread observes the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for RegistryServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_connection(mut stream: TcpStream, registry: &Registry) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    loop {
        match read_message(&mut stream) {
            Ok(Some(msg)) => {
                let reply = handle_message(registry, &msg);
                if write_message(&mut stream, &reply).is_err() {
                    return;
                }
            }
            Ok(None) | Err(_) => return,
        }
    }
}

/// A blocking client for one registry connection.
pub struct RegistryClient {
    stream: TcpStream,
    next_request: AtomicU64,
}

impl RegistryClient {
    pub fn connect(addr: SocketAddr) -> Result<Self, SyncError> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| SyncError::Wire(format!("connect failed: {e}")))?;
        stream
            .set_read_timeout(Some(Duration::from_secs(30)))
            .map_err(|e| SyncError::Wire(e.to_string()))?;
        Ok(Self {
            stream,
            next_request: AtomicU64::new(1),
        })
    }

    fn round_trip(&mut self, msg: &SyncMessage) -> Result<SyncMessage, SyncError> {
        write_message(&mut self.stream, msg)?;
        read_message(&mut self.stream)?
            .ok_or_else(|| SyncError::Wire("server closed the connection".into()))
    }

    fn check_request_id(sent: u64, got: u64) -> Result<(), SyncError> {
        if sent != got {
            return Err(SyncError::Protocol(format!(
                "reply for request {got}, expected {sent}"
            )));
        }
        Ok(())
    }

    /// Remote [`Registry::register_or_lookup`].
    pub fn register(
        &mut self,
        embedding: &[f64],
        threshold: f64,
        device: &str,
        timestamp: f64,
    ) -> Result<(u64, bool), SyncError> {
        let request_id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let reply = self.round_trip(&SyncMessage::Register {
            request_id,
            embedding: embedding.to_vec(),
            threshold,
            device: device.to_string(),
            timestamp,
        })?;
        match reply {
            SyncMessage::Assigned {
                request_id: rid,
                id,
                created,
                error,
            } => {
                Self::check_request_id(request_id, rid)?;
                if let Some(e) = error {
                    return Err(SyncError::Remote(e));
                }
                let id = id.ok_or_else(|| {
                    SyncError::Protocol("registration reply carried no id".into())
                })?;
                Ok((id, created))
            }
            other => Err(SyncError::Protocol(format!(
                "expected ASSIGNED, got {other:?}"
            ))),
        }
    }

    /// Remote [`Registry::lookup`].
    pub fn lookup(
        &mut self,
        embedding: &[f64],
        threshold: f64,
    ) -> Result<Option<u64>, SyncError> {
        let request_id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let reply = self.round_trip(&SyncMessage::Lookup {
            request_id,
            embedding: embedding.to_vec(),
            threshold,
        })?;
        match reply {
            SyncMessage::Assigned {
                request_id: rid,
                id,
                error,
                ..
            } => {
                Self::check_request_id(request_id, rid)?;
                if let Some(e) = error {
                    return Err(SyncError::Remote(e));
                }
                Ok(id)
            }
            other => Err(SyncError::Protocol(format!(
                "expected ASSIGNED, got {other:?}"
            ))),
        }
    }

    /// Remote [`Registry::snapshot`].
    pub fn snapshot(&mut self) -> Result<Vec<IdentityRecord>, SyncError> {
        let request_id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let reply = self.round_trip(&SyncMessage::Snapshot { request_id })?;
        match reply {
            SyncMessage::SnapshotReply {
                request_id: rid,
                records,
            } => {
                Self::check_request_id(request_id, rid)?;
                Ok(records)
            }
            other => Err(SyncError::Protocol(format!(
                "expected SNAPSHOT_REPLY, got {other:?}"
            ))),
        }
    }
}
