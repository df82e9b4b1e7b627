//! In-process links over crossbeam channels.

use std::sync::Arc;

use crossbeam_channel::{unbounded, Sender};

use super::{ClientLink, Closed, Counting, Inbound, Outbox, Router, ServerLinks, WireStats};
use crate::crypto::ClientId;

struct ToServer {
    id: ClientId,
    tx: Sender<(ClientId, Inbound)>,
}

impl Outbox for ToServer {
    fn send(&self, bytes: Vec<u8>) -> Result<(), Closed> {
        self.tx.send((self.id, Inbound::Message(bytes))).map_err(|_| Closed)
    }
}

impl Drop for ToServer {
    fn drop(&mut self) {
        let _ = self.tx.send((self.id, Inbound::Closed));
    }
}

struct ToClient {
    tx: Sender<Inbound>,
}

impl Outbox for ToClient {
    fn send(&self, bytes: Vec<u8>) -> Result<(), Closed> {
        self.tx.send(Inbound::Message(bytes)).map_err(|_| Closed)
    }
}

/// Hands out client links to one in-process server.
#[derive(Clone)]
pub struct MemoryNetwork {
    to_server: Sender<(ClientId, Inbound)>,
    router: Router,
    stats: WireStats,
}

pub fn network() -> (MemoryNetwork, ServerLinks) {
    let (tx, rx) = unbounded();
    let router = Router::new();
    let stats = WireStats::new();
    let net = MemoryNetwork {
        to_server: tx,
        router: router.clone(),
        stats: stats.clone(),
    };
    (net, ServerLinks { inbox: rx, router, stats })
}

impl MemoryNetwork {
    pub fn connect(&self, id: ClientId) -> ClientLink {
        let (tx, rx) = unbounded();
        self.router.register(
            id,
            Arc::new(Counting {
                inner: ToClient { tx },
                stats: self.stats.clone(),
            }),
        );
        ClientLink {
            outbox: Box::new(Counting {
                inner: ToServer {
                    id,
                    tx: self.to_server.clone(),
                },
                stats: self.stats.clone(),
            }),
            inbox: rx,
        }
    }

    pub fn stats(&self) -> &WireStats {
        &self.stats
    }
}
