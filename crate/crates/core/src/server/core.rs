//! The server protocol state machine, free of I/O.

use std::collections::{BTreeMap, VecDeque};

use crate::ads::Ads;
use crate::crypto::{ClientId, CryptoError, Domain, KeyConfig, KeyRing};
use crate::protocol::{
    genesis, invoke_payload, AuthRecord, Commit, CommitAuth, Genesis, Invoke, Kind, Message, OpRecord,
    PendingRecord, Reply, Status, UpdateAuth,
};
use crate::wire::{Decode, DecodeError};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Invokes beyond this many pending ops wait in a buffer.
    pub pending_limit: usize,
    pub query_fast_path: bool,
    pub prune_aborted: bool,
    /// Clients whose cleared positions bound garbage collection of `O`.
    /// Empty disables that collection.
    pub clients: Vec<ClientId>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            pending_limit: 128,
            query_fast_path: false,
            prune_aborted: false,
            clients: Vec::new(),
        }
    }
}

/// Why a client message was dropped.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServerError {
    #[error("undecodable message from {0}: {1}")]
    Decode(ClientId, DecodeError),
    #[error("{kind} is not a client message")]
    Direction { kind: Kind },
    #[error("bad invoke signature from {0}")]
    BadInvokeSig(ClientId),
    #[error("client {client} claims cleared {cleared} beyond applied {applied}")]
    ClearedAhead {
        client: ClientId,
        cleared: u64,
        applied: u64,
    },
    #[error("client {client} cleared up to {cleared}, which was already collected")]
    Forgotten { client: ClientId, cleared: u64 },
    #[error("commit from {client} for seqno {seqno} does not match a pending op")]
    StrayCommit { client: ClientId, seqno: u64 },
    #[error("commit-auth from {0} not expected")]
    StrayCommitAuth(ClientId),
    #[error("state refresh failed at seqno {0}: {1}")]
    Refresh(u64, String),
    #[error("writing the log failed at seqno {0}: {1}")]
    Log(u64, String),
}

impl ServerError {
    /// Errors after which the server state can no longer be trusted.
    pub fn is_fatal(&self) -> bool {
        matches!(self, ServerError::Refresh(..) | ServerError::Log(..))
    }
}

pub type Outgoing<A> = (ClientId, Message<A>);

/// Priority classes of the intake queue: completion messages before new work.
struct Intake<A: Ads> {
    urgent: VecDeque<(ClientId, Message<A>)>,
    invokes: VecDeque<(ClientId, Invoke<A>)>,
}

impl<A: Ads> Intake<A> {
    fn new() -> Self {
        Intake {
            urgent: VecDeque::new(),
            invokes: VecDeque::new(),
        }
    }
}

/// An applied operation, for the optional server log.
#[derive(Clone, Debug)]
pub struct Applied<O> {
    pub seqno: u64,
    pub record: OpRecord<O>,
    pub auth: Option<AuthRecord>,
}

pub struct ServerCore<A: Ads> {
    cfg: ServerConfig,
    /// Present when the server holds keys it can check invoke signatures with.
    ring: Option<KeyRing>,
    genesis: Genesis<A::Op>,
    /// `t`
    invoked_upto: u64,
    /// `b`
    applied: u64,
    /// `d`: last position that went through the passive phase.
    anchor: u64,
    invoked: BTreeMap<u64, PendingRecord<A::Op>>,
    committed: BTreeMap<u64, OpRecord<A::Op>>,
    auths: BTreeMap<u64, AuthRecord>,
    state: A::State,
    cleared: BTreeMap<ClientId, u64>,
    /// Seqno whose update-auth is out.
    awaiting: Option<u64>,
    intake: Intake<A>,
    /// Invokes held back by the pending limit.
    buffered: VecDeque<(ClientId, Invoke<A>)>,
    applied_log: Vec<Applied<A::Op>>,
    keep_log: bool,
}

impl<A: Ads> Clone for ServerCore<A> {
    fn clone(&self) -> Self {
        ServerCore {
            cfg: self.cfg.clone(),
            ring: self.ring.clone(),
            genesis: self.genesis.clone(),
            invoked_upto: self.invoked_upto,
            applied: self.applied,
            anchor: self.anchor,
            invoked: self.invoked.clone(),
            committed: self.committed.clone(),
            auths: self.auths.clone(),
            state: self.state.clone(),
            cleared: self.cleared.clone(),
            awaiting: self.awaiting,
            intake: Intake {
                urgent: self.intake.urgent.clone(),
                invokes: self.intake.invokes.clone(),
            },
            buffered: self.buffered.clone(),
            applied_log: self.applied_log.clone(),
            keep_log: self.keep_log,
        }
    }
}

impl<A: Ads> ServerCore<A> {
    pub fn new(cfg: ServerConfig, genesis: Genesis<A::Op>, ring: Option<KeyRing>) -> Self {
        let mut committed = BTreeMap::new();
        committed.insert(0, genesis.record.clone());
        let mut auths = BTreeMap::new();
        auths.insert(0, genesis.auth.clone());
        let cleared = cfg.clients.iter().map(|c| (*c, 0)).collect();
        ServerCore {
            ring: ring.filter(KeyRing::can_verify),
            genesis,
            invoked_upto: 0,
            applied: 0,
            anchor: 0,
            invoked: BTreeMap::new(),
            committed,
            auths,
            state: A::initial_state(),
            cleared,
            awaiting: None,
            intake: Intake::new(),
            buffered: VecDeque::new(),
            applied_log: Vec::new(),
            keep_log: false,
            cfg,
        }
    }

    /// A server using the public part of `keys`.
    pub fn from_keys(keys: &KeyConfig, cfg: ServerConfig) -> Result<Self, CryptoError> {
        let keys = keys.for_server();
        Ok(Self::new(cfg, genesis::<A>(&keys)?, Some(keys.ring()?)))
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    /// Collects applied operations for [`ServerCore::drain_applied`].
    pub fn keep_applied_log(&mut self, on: bool) {
        self.keep_log = on;
    }

    pub fn drain_applied(&mut self) -> Vec<Applied<A::Op>> {
        std::mem::take(&mut self.applied_log)
    }

    pub fn state(&self) -> &A::State {
        &self.state
    }

    pub fn invoked_upto(&self) -> u64 {
        self.invoked_upto
    }

    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn pending_len(&self) -> usize {
        (self.invoked_upto - self.applied) as usize
    }

    pub fn buffered_len(&self) -> usize {
        self.buffered.len()
    }

    pub fn retained(&self) -> (usize, usize, usize) {
        (self.invoked.len(), self.committed.len(), self.auths.len())
    }

    /// Whether nothing is queued, buffered or waiting for a client.
    pub fn is_quiescent(&self) -> bool {
        self.intake.urgent.is_empty()
            && self.intake.invokes.is_empty()
            && self.buffered.is_empty()
            && self.applied == self.invoked_upto
    }

    pub fn has_queued(&self) -> bool {
        !self.intake.urgent.is_empty() || !self.intake.invokes.is_empty()
    }

    /// Decodes and queues a client message.
    pub fn enqueue_bytes(&mut self, from: ClientId, bytes: &[u8]) -> Result<(), ServerError> {
        let msg = Message::<A>::from_bytes(bytes).map_err(|e| ServerError::Decode(from, e))?;
        self.enqueue(from, msg)
    }

    pub fn enqueue(&mut self, from: ClientId, msg: Message<A>) -> Result<(), ServerError> {
        match msg {
            Message::Invoke(m) => self.intake.invokes.push_back((from, m)),
            m @ (Message::Commit(_) | Message::CommitAuth(_)) => self.intake.urgent.push_back((from, m)),
            m => return Err(ServerError::Direction { kind: m.kind() }),
        }
        Ok(())
    }

    /// Processes the highest-priority queued message. Returns `None` when
    /// the queue is empty; the kind tells which class was served.
    pub fn step(&mut self) -> Option<(Kind, Result<Vec<Outgoing<A>>, ServerError>)> {
        if let Some((from, msg)) = self.intake.urgent.pop_front() {
            let kind = msg.kind();
            return Some((kind, self.handle(from, msg)));
        }
        let (from, m) = self.intake.invokes.pop_front()?;
        Some((Kind::Invoke, self.handle(from, Message::Invoke(m))))
    }

    /// Handles one message immediately, bypassing the intake queue.
    pub fn handle(&mut self, from: ClientId, msg: Message<A>) -> Result<Vec<Outgoing<A>>, ServerError> {
        let mut out = Vec::new();
        match msg {
            Message::Invoke(m) => {
                if let Some(ring) = &self.ring {
                    let payload = invoke_payload(&m.op, from);
                    if m.invoke_sig.signer != from || !ring.verify(from, Domain::Invoke, &payload, &m.invoke_sig) {
                        return Err(ServerError::BadInvokeSig(from));
                    }
                }
                if m.cleared > self.applied {
                    return Err(ServerError::ClearedAhead {
                        client: from,
                        cleared: m.cleared,
                        applied: self.applied,
                    });
                }
                if !self.buffered.is_empty() || self.pending_len() >= self.cfg.pending_limit {
                    self.buffered.push_back((from, m));
                } else {
                    out.push(self.on_invoke(from, m)?);
                }
            }
            Message::Commit(m) => {
                self.on_commit(from, m)?;
                self.advance(&mut out)?;
            }
            Message::CommitAuth(m) => {
                self.on_commit_auth(from, m)?;
                self.advance(&mut out)?;
            }
            m => return Err(ServerError::Direction { kind: m.kind() }),
        }
        Ok(out)
    }

    fn on_invoke(&mut self, from: ClientId, m: Invoke<A>) -> Result<Outgoing<A>, ServerError> {
        let c = m.cleared;
        let b = self.applied;
        if !self.committed.contains_key(&(if b == c { b } else { c + 1 })) {
            return Err(ServerError::Forgotten { client: from, cleared: c });
        }
        let prev = self.cleared.entry(from).or_insert(0);
        *prev = (*prev).max(c);
        self.invoked_upto += 1;
        let t = self.invoked_upto;
        self.invoked.insert(
            t,
            PendingRecord {
                op: m.op,
                invoke_sig: m.invoke_sig,
                client: from,
                abort_mark: None,
            },
        );
        let cleared_ops: Vec<_> = if b == c {
            vec![self.committed[&b].clone()]
        } else {
            (c + 1..=b).map(|l| self.committed[&l].clone()).collect()
        };
        let mut pending = Vec::with_capacity((t - b) as usize);
        let mut mu = Vec::new();
        for l in b + 1..=t {
            let mut rec = self.invoked[&l].clone();
            let committed = self.committed.get(&l);
            if rec.client == from {
                // FIFO: our own earlier ops were committed before this invoke
                let ok = l == t || committed.is_some_and(|o| o.status == Status::Success);
                if ok {
                    mu.push(rec.op.clone());
                }
            } else if self.cfg.prune_aborted {
                if let Some(o) = committed.filter(|o| o.status == Status::Abort) {
                    rec.abort_mark = Some(o.commit_sig.clone());
                }
            }
            pending.push(rec);
        }
        let (response, proof) = A::query(&self.state, &mu);
        let d = if self.cfg.query_fast_path { self.anchor } else { b };
        let anchor = self
            .cfg
            .query_fast_path
            .then(|| (d, self.committed[&d].clone()));
        let reply = Reply {
            cleared_ops,
            applied: b,
            auth: self.auths[&d].clone(),
            anchor,
            pending,
            seqno: t,
            response,
            proof,
        };
        Ok((from, Message::Reply(reply)))
    }

    fn on_commit(&mut self, from: ClientId, m: Commit<A>) -> Result<(), ServerError> {
        let q = m.seqno;
        if q <= self.applied {
            return Ok(());
        }
        let stray = || ServerError::StrayCommit { client: from, seqno: q };
        let pending = self.invoked.get(&q).ok_or_else(stray)?;
        if pending.client != from || pending.op != m.op {
            return Err(stray());
        }
        self.committed.insert(
            q,
            OpRecord {
                op: m.op,
                status: m.status,
                commit_sig: m.commit_sig,
                client: from,
            },
        );
        Ok(())
    }

    fn on_commit_auth(&mut self, from: ClientId, m: CommitAuth<A>) -> Result<(), ServerError> {
        let q = self.applied + 1;
        let rec = match (self.awaiting, self.committed.get(&q)) {
            (Some(w), Some(rec)) if w == q && rec.client == from => rec.clone(),
            _ => return Err(ServerError::StrayCommitAuth(from)),
        };
        if rec.status == Status::Success {
            A::refresh(&mut self.state, &rec.op, m.update.as_ref())
                .map_err(|e| ServerError::Refresh(q, e.0))?;
        }
        let auth = AuthRecord {
            authenticator: m.authenticator,
            sig: m.auth_sig,
        };
        self.auths.insert(q, auth.clone());
        self.awaiting = None;
        self.applied = q;
        self.anchor = q;
        if self.keep_log {
            self.applied_log.push(Applied {
                seqno: q,
                record: rec,
                auth: Some(auth),
            });
        }
        Ok(())
    }

    /// Runs the passive phase as far as possible and admits buffered invokes.
    fn advance(&mut self, out: &mut Vec<Outgoing<A>>) -> Result<(), ServerError> {
        while self.awaiting.is_none() {
            let q = self.applied + 1;
            let Some(rec) = self.committed.get(&q).cloned() else {
                break;
            };
            if self.cfg.query_fast_path && A::is_query(&rec.op) {
                self.applied = q;
                if self.keep_log {
                    self.applied_log.push(Applied {
                        seqno: q,
                        record: rec,
                        auth: None,
                    });
                }
                continue;
            }
            let (response, proof) = match rec.status {
                Status::Success => {
                    let (r, p) = A::query(&self.state, std::slice::from_ref(&rec.op));
                    (Some(r), Some(p))
                }
                Status::Abort => (None, None),
            };
            let d = self.anchor;
            out.push((
                rec.client,
                Message::UpdateAuth(UpdateAuth {
                    op: rec.op,
                    response,
                    proof,
                    commit_sig: rec.commit_sig,
                    seqno: q,
                    prev_seqno: d,
                    prev: self.committed[&d].clone(),
                    prev_auth: self.auths[&d].clone(),
                }),
            ));
            self.awaiting = Some(q);
        }
        while self.pending_len() < self.cfg.pending_limit {
            let Some((from, m)) = self.buffered.pop_front() else {
                break;
            };
            out.push(self.on_invoke(from, m)?);
        }
        self.collect_garbage();
        Ok(())
    }

    fn collect_garbage(&mut self) {
        let b = self.applied;
        self.invoked = self.invoked.split_off(&(b + 1));
        self.auths = self.auths.split_off(&self.anchor);
        if self.cfg.clients.is_empty() {
            return;
        }
        let min_cleared = self.cleared.values().copied().min().unwrap_or(0);
        let floor = min_cleared.min(self.anchor).min(b);
        self.committed = self.committed.split_off(&floor);
    }

    /// The op at `seqno`, with its status once committed.
    pub fn op_at(&self, seqno: u64) -> Option<(ClientId, &A::Op, Option<Status>)> {
        if let Some(o) = self.committed.get(&seqno) {
            return Some((o.client, &o.op, Some(o.status)));
        }
        self.invoked.get(&seqno).map(|p| (p.client, &p.op, None))
    }

    /// Rebuilds a server from its log of applied operations. Each update is
    /// re-executed and must reproduce the logged authenticator.
    pub fn restore(
        cfg: ServerConfig,
        genesis: Genesis<A::Op>,
        ring: Option<KeyRing>,
        log: impl IntoIterator<Item = Applied<A::Op>>,
    ) -> Result<Self, ServerError> {
        let mut core = Self::new(cfg, genesis, ring);
        for entry in log {
            let q = core.applied + 1;
            if entry.seqno != q {
                return Err(ServerError::Refresh(entry.seqno, format!("log skips to {} after {}", entry.seqno, q - 1)));
            }
            let rec = entry.record;
            match entry.auth {
                None => {
                    if !(core.cfg.query_fast_path && A::is_query(&rec.op)) {
                        return Err(ServerError::Refresh(q, "update logged without authenticator".into()));
                    }
                }
                Some(auth) => {
                    let prev = core.auths[&core.anchor].authenticator;
                    if rec.status == Status::Abort && auth.authenticator != prev {
                        return Err(ServerError::Refresh(q, "aborted op changed the authenticator".into()));
                    }
                    if rec.status == Status::Success {
                        let (r, p) = A::query(&core.state, std::slice::from_ref(&rec.op));
                        let exec = A::authexec(std::slice::from_ref(&rec.op), &prev, &r, &p);
                        if !exec.valid || exec.authenticator != auth.authenticator {
                            return Err(ServerError::Refresh(q, "logged authenticator does not match".into()));
                        }
                        A::refresh(&mut core.state, &rec.op, exec.aux.as_ref())
                            .map_err(|e| ServerError::Refresh(q, e.0))?;
                    }
                    core.auths.insert(q, auth);
                    core.anchor = q;
                }
            }
            core.committed.insert(q, rec);
            core.applied = q;
            core.invoked_upto = q;
        }
        core.auths = core.auths.split_off(&core.anchor);
        Ok(core)
    }

    pub fn genesis(&self) -> &Genesis<A::Op> {
        &self.genesis
    }
}
