//! Ordered, reliable links between clients and the server.
//!
//! Both realizations hand inbound traffic to the protocol loop through a
//! crossbeam channel: one per client, and one shared by all connections on
//! the server side. Channels are strictly FIFO per direction and pair;
//! prioritizing messages is the server's job.

pub mod memory;
pub mod tcp;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crossbeam_channel::Receiver;

use crate::crypto::ClientId;
use crate::protocol::Kind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("channel closed")]
pub struct Closed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inbound {
    Message(Vec<u8>),
    /// The peer went away; nothing follows.
    Closed,
}

/// Sending half of a link.
pub trait Outbox: Send + Sync {
    fn send(&self, bytes: Vec<u8>) -> Result<(), Closed>;
}

/// Per-kind message counters, counted when a message is handed to a link.
#[derive(Clone, Default)]
pub struct WireStats {
    counts: Arc<[AtomicU64; 6]>,
}

impl WireStats {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(bytes: &[u8]) -> usize {
        Kind::of_bytes(bytes).map_or(0, |k| k.tag() as usize)
    }

    pub fn record(&self, bytes: &[u8]) {
        self.counts[Self::slot(bytes)].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, kind: Kind) -> u64 {
        self.counts[kind.tag() as usize].load(Ordering::Relaxed)
    }

    /// All protocol messages; frames of unknown kind are not included.
    pub fn total(&self) -> u64 {
        Kind::ALL.iter().map(|k| self.count(*k)).sum()
    }

    pub fn unknown(&self) -> u64 {
        self.counts[0].load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        for c in self.counts.iter() {
            c.store(0, Ordering::Relaxed);
        }
    }
}

impl fmt::Debug for WireStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for k in Kind::ALL {
            m.entry(&k, &self.count(k));
        }
        m.finish()
    }
}

/// A client's end of its link to the server.
pub struct ClientLink {
    pub outbox: Box<dyn Outbox>,
    pub inbox: Receiver<Inbound>,
}

/// Routes server messages to connected clients.
#[derive(Clone, Default)]
pub struct Router {
    routes: Arc<Mutex<HashMap<ClientId, Arc<dyn Outbox>>>>,
}

impl Router {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, id: ClientId, outbox: Arc<dyn Outbox>) {
        self.routes.lock().unwrap().insert(id, outbox);
    }

    pub fn remove(&self, id: ClientId) {
        self.routes.lock().unwrap().remove(&id);
    }

    pub fn send(&self, to: ClientId, bytes: Vec<u8>) -> Result<(), Closed> {
        let outbox = self.routes.lock().unwrap().get(&to).cloned().ok_or(Closed)?;
        outbox.send(bytes)
    }

    /// Drops every route; clients see their inbox disconnect.
    pub fn clear(&self) {
        self.routes.lock().unwrap().clear();
    }

    pub fn connected(&self) -> Vec<ClientId> {
        let mut ids: Vec<_> = self.routes.lock().unwrap().keys().copied().collect();
        ids.sort();
        ids
    }
}

/// The server's view of all client links.
pub struct ServerLinks {
    pub inbox: Receiver<(ClientId, Inbound)>,
    pub router: Router,
    pub stats: WireStats,
}

/// An outbox that counts what passes through it.
struct Counting<O> {
    inner: O,
    stats: WireStats,
}

impl<O: Outbox> Outbox for Counting<O> {
    fn send(&self, bytes: Vec<u8>) -> Result<(), Closed> {
        self.stats.record(&bytes);
        self.inner.send(bytes)
    }
}
