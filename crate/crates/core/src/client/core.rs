//! The client protocol state machine, free of I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::ads::{Ads, Outcome, Relation};
use crate::crypto::{ClientId, CryptoError, Digest, Domain, KeyConfig, KeyRing};
use crate::protocol::{
    auth_payload, chain_hash, commit_payload, genesis, invoke_payload, Commit, CommitAuth, Genesis,
    Invoke, Message, OpRecord, Reply, Status, UpdateAuth,
};
use crate::wire::Decode;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum AlarmKind {
    HashChain,
    BadSignature,
    BadProof,
    BadPending,
    ProtocolOrder,
    /// A server message that does not decode.
    Malformed,
}

impl fmt::Display for AlarmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlarmKind::HashChain => "hash-chain-mismatch",
            AlarmKind::BadSignature => "bad-signature",
            AlarmKind::BadProof => "bad-proof",
            AlarmKind::BadPending => "bad-pending",
            AlarmKind::ProtocolOrder => "protocol-order",
            AlarmKind::Malformed => "malformed",
        })
    }
}

/// Evidence that the server misbehaved. Once raised, the client stops.
#[derive(Clone, PartialEq, Eq, Debug, thiserror::Error)]
#[error("fault alarm ({kind}) at seqno {seqno:?}: {context}")]
pub struct FaultAlarm {
    pub kind: AlarmKind,
    pub seqno: Option<u64>,
    pub context: String,
}

impl FaultAlarm {
    pub fn new(kind: AlarmKind, seqno: Option<u64>, context: impl Into<String>) -> Self {
        FaultAlarm {
            kind,
            seqno,
            context: context.into(),
        }
    }
}

fn alarm<T>(kind: AlarmKind, seqno: u64, context: &str) -> Result<T, FaultAlarm> {
    Err(FaultAlarm::new(kind, Some(seqno), context))
}

fn ensure(cond: bool, kind: AlarmKind, seqno: u64, context: &str) -> Result<(), FaultAlarm> {
    if cond {
        Ok(())
    } else {
        alarm(kind, seqno, context)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InvokeError {
    #[error("an operation is already in flight")]
    Busy,
    #[error(transparent)]
    Alarmed(#[from] FaultAlarm),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

pub struct ClientConfig<A: Ads> {
    /// Queries skip the passive phase; must match the server.
    pub query_fast_path: bool,
    /// The server may mark committed-aborted pending ops; must match the server.
    pub prune_aborted: bool,
    /// Decides whether the current op may proceed past pending ops of others.
    pub relation: Relation<A>,
}

impl<A: Ads> Clone for ClientConfig<A> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<A: Ads> Copy for ClientConfig<A> {}

impl<A: Ads> Default for ClientConfig<A> {
    fn default() -> Self {
        ClientConfig {
            query_fast_path: false,
            prune_aborted: false,
            relation: A::compatible,
        }
    }
}

impl<A: Ads> fmt::Debug for ClientConfig<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientConfig")
            .field("query_fast_path", &self.query_fast_path)
            .field("prune_aborted", &self.prune_aborted)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChainEntry {
    pub hash: Digest,
    pub is_query: bool,
}

/// What handling a server message produced.
pub struct Step<A: Ads> {
    pub send: Option<Message<A>>,
    /// Set when the active phase of the current operation ends.
    pub completed: Option<Completed<A>>,
}

impl<A: Ads> Step<A> {
    fn send(msg: Message<A>) -> Self {
        Step {
            send: Some(msg),
            completed: None,
        }
    }
}

pub struct Completed<A: Ads> {
    pub op: A::Op,
    pub seqno: u64,
    pub outcome: Outcome<A::Response>,
}

impl<A: Ads> fmt::Debug for Completed<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Completed")
            .field("op", &self.op)
            .field("seqno", &self.seqno)
            .field("outcome", &self.outcome)
            .finish()
    }
}

/// Persistable part of the client state.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct Snapshot {
    pub cleared: u64,
    pub anchor: u64,
    pub chain: BTreeMap<u64, ChainEntry>,
    pub status: BTreeMap<u64, bool>,
}

pub struct ClientCore<A: Ads> {
    id: ClientId,
    ring: KeyRing,
    genesis: Genesis<A::Op>,
    cfg: ClientConfig<A>,
    /// `c`: last cleared sequence number.
    cleared: u64,
    /// Latest position whose authenticator the server has shown this
    /// client; the chain is kept from just before it on.
    anchor: u64,
    /// `H`, with the op kind at each position.
    chain: BTreeMap<u64, ChainEntry>,
    /// `Z`.
    status: BTreeMap<u64, Status>,
    /// `u`.
    current: Option<A::Op>,
    /// Own committed ops still waiting for their update-auth.
    passive: BTreeSet<u64>,
    alarm: Option<FaultAlarm>,
}

impl<A: Ads> Clone for ClientCore<A> {
    fn clone(&self) -> Self {
        ClientCore {
            id: self.id,
            ring: self.ring.clone(),
            genesis: self.genesis.clone(),
            cfg: self.cfg,
            cleared: self.cleared,
            anchor: self.anchor,
            chain: self.chain.clone(),
            status: self.status.clone(),
            current: self.current.clone(),
            passive: self.passive.clone(),
            alarm: self.alarm.clone(),
        }
    }
}

impl<A: Ads> ClientCore<A> {
    pub fn new(id: ClientId, ring: KeyRing, genesis: Genesis<A::Op>, cfg: ClientConfig<A>) -> Self {
        let mut chain = BTreeMap::new();
        chain.insert(
            0,
            ChainEntry {
                hash: Digest::NULL,
                is_query: A::is_query(&genesis.record.op),
            },
        );
        ClientCore {
            id,
            ring,
            genesis,
            cfg,
            cleared: 0,
            anchor: 0,
            chain,
            status: BTreeMap::new(),
            current: None,
            passive: BTreeSet::new(),
            alarm: None,
        }
    }

    /// A client with its keys from `keys`, a shared key file.
    pub fn from_keys(keys: &KeyConfig, id: ClientId, cfg: ClientConfig<A>) -> Result<Self, CryptoError> {
        let ring = keys.for_client(id).ring()?;
        if !ring.can_sign(id) {
            return Err(CryptoError::MissingKey(id));
        }
        Ok(Self::new(id, ring, genesis::<A>(keys)?, cfg))
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn config(&self) -> &ClientConfig<A> {
        &self.cfg
    }

    pub fn cleared(&self) -> u64 {
        self.cleared
    }

    pub fn chain_entry(&self, seqno: u64) -> Option<Digest> {
        self.chain.get(&seqno).map(|e| e.hash)
    }

    pub fn status_of(&self, seqno: u64) -> Option<Status> {
        self.status.get(&seqno).copied()
    }

    pub fn alarm(&self) -> Option<&FaultAlarm> {
        self.alarm.as_ref()
    }

    pub fn is_busy(&self) -> bool {
        self.current.is_some()
    }

    /// No operation in flight and no passive phase outstanding.
    pub fn is_idle(&self) -> bool {
        self.current.is_none() && self.passive.is_empty()
    }

    /// Records an alarm raised outside the protocol, e.g. by a layer that
    /// found stored data not matching its authenticated digest.
    pub fn raise(&mut self, alarm: FaultAlarm) {
        self.alarm.get_or_insert(alarm);
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            cleared: self.cleared,
            anchor: self.anchor,
            chain: self.chain.clone(),
            status: self
                .status
                .iter()
                .map(|(k, v)| (*k, *v == Status::Success))
                .collect(),
        }
    }

    pub fn restore(&mut self, snap: Snapshot) {
        self.cleared = snap.cleared;
        self.anchor = snap.anchor;
        self.chain = snap.chain;
        self.status = snap
            .status
            .into_iter()
            .map(|(k, ok)| (k, if ok { Status::Success } else { Status::Abort }))
            .collect();
    }

    /// Starts the active phase of `op`.
    pub fn invoke(&mut self, op: A::Op) -> Result<Message<A>, InvokeError> {
        if let Some(a) = &self.alarm {
            return Err(a.clone().into());
        }
        if self.current.is_some() {
            return Err(InvokeError::Busy);
        }
        let invoke_sig = self
            .ring
            .sign(self.id, Domain::Invoke, &invoke_payload(&op, self.id))?;
        self.current = Some(op.clone());
        Ok(Message::Invoke(Invoke {
            op,
            invoke_sig,
            cleared: self.cleared,
        }))
    }

    /// Handles raw bytes from the server; undecodable input is an alarm.
    pub fn on_bytes(&mut self, bytes: &[u8]) -> Result<Step<A>, FaultAlarm> {
        if let Some(a) = &self.alarm {
            return Err(a.clone());
        }
        match Message::<A>::from_bytes(bytes) {
            Ok(msg) => self.on_message(msg),
            Err(e) => self.fail(FaultAlarm::new(AlarmKind::Malformed, None, e.to_string())),
        }
    }

    pub fn on_message(&mut self, msg: Message<A>) -> Result<Step<A>, FaultAlarm> {
        if let Some(a) = &self.alarm {
            return Err(a.clone());
        }
        let out = match msg {
            Message::Reply(m) => self.on_reply(m),
            Message::UpdateAuth(m) => self.on_update_auth(m),
            other => Err(FaultAlarm::new(
                AlarmKind::ProtocolOrder,
                None,
                format!("unexpected {} from server", other.kind()),
            )),
        };
        match out {
            Ok(step) => {
                self.collect_garbage();
                Ok(step)
            }
            Err(a) => self.fail(a),
        }
    }

    fn fail<T>(&mut self, a: FaultAlarm) -> Result<T, FaultAlarm> {
        log::warn!("client {}: {a}", self.id);
        self.alarm = Some(a.clone());
        self.current = None;
        Err(a)
    }

    fn entry(&self, seqno: u64) -> Result<ChainEntry, FaultAlarm> {
        self.chain
            .get(&seqno)
            .copied()
            .ok_or_else(|| FaultAlarm::new(AlarmKind::ProtocolOrder, Some(seqno), "hash chain entry unknown"))
    }

    /// Extends `H` by `(op, l, j)` or checks it against the existing entry.
    fn extend_chain(&mut self, op: &A::Op, l: u64, j: ClientId) -> Result<Digest, FaultAlarm> {
        if l == 0 {
            ensure(self.genesis.is_genesis(op, j), AlarmKind::HashChain, 0, "not the genesis record")?;
            return Ok(Digest::NULL);
        }
        ensure(j != ClientId::GENESIS, AlarmKind::HashChain, l, "genesis client past position 0")?;
        let prev = self.entry(l - 1)?.hash;
        let h = chain_hash(&prev, op, l, j);
        match self.chain.get(&l) {
            Some(e) if e.hash != h => alarm(AlarmKind::HashChain, l, "server replies are inconsistent"),
            Some(_) => Ok(h),
            None => {
                self.chain.insert(
                    l,
                    ChainEntry {
                        hash: h,
                        is_query: A::is_query(op),
                    },
                );
                Ok(h)
            }
        }
    }

    fn verify_commit(&self, rec: &OpRecord<A::Op>, l: u64, chain: &Digest) -> Result<(), FaultAlarm> {
        let payload = commit_payload(l, &rec.op, rec.client, rec.status, chain);
        ensure(
            self.ring.verify(rec.client, Domain::Commit, &payload, &rec.commit_sig),
            AlarmKind::BadSignature,
            l,
            "commit signature",
        )
    }

    /// Verifies an authenticator signed at position `d` by the op in `rec`,
    /// where every position in `(d, upto]` must hold a query.
    fn verify_anchor(
        &mut self,
        d: u64,
        rec: &OpRecord<A::Op>,
        auth: &crate::protocol::AuthRecord,
        upto: u64,
    ) -> Result<(), FaultAlarm> {
        ensure(d <= upto, AlarmKind::ProtocolOrder, d, "authenticator from the future")?;
        if d < upto {
            ensure(self.cfg.query_fast_path, AlarmKind::ProtocolOrder, d, "stale authenticator")?;
            for l in d + 1..=upto {
                ensure(self.entry(l)?.is_query, AlarmKind::ProtocolOrder, l, "update skipped by authenticator")?;
            }
        }
        // the anchor must already be on the chain; this never extends it
        let known = self.entry(d)?.hash;
        ensure(self.extend_chain(&rec.op, d, rec.client)? == known, AlarmKind::HashChain, d, "anchor")?;
        self.verify_commit(rec, d, &known)?;
        let payload = auth_payload(&rec.op, d, &known, &auth.authenticator);
        ensure(
            self.ring.verify(rec.client, Domain::Auth, &payload, &auth.sig),
            AlarmKind::BadSignature,
            d,
            "auth signature",
        )?;
        self.anchor = self.anchor.max(d);
        Ok(())
    }

    fn check_view(&mut self, m: &Reply<A>) -> Result<(), FaultAlarm> {
        let b = m.applied;
        ensure(!m.cleared_ops.is_empty(), AlarmKind::ProtocolOrder, b, "empty cleared list")?;
        ensure(b >= self.cleared, AlarmKind::ProtocolOrder, b, "applied position went backwards")?;
        let start = if b == self.cleared { self.cleared } else { self.cleared + 1 };
        ensure(
            start + m.cleared_ops.len() as u64 - 1 == b,
            AlarmKind::ProtocolOrder,
            b,
            "cleared list does not end at the applied position",
        )?;
        for (k, rec) in m.cleared_ops.iter().enumerate() {
            let l = start + k as u64;
            let h = self.extend_chain(&rec.op, l, rec.client)?;
            self.verify_commit(rec, l, &h)?;
            if let Some(z) = self.status.get(&l) {
                ensure(rec.client == self.id && *z == rec.status, AlarmKind::HashChain, l, "own status")?;
            }
        }
        match (&m.anchor, self.cfg.query_fast_path) {
            (Some((d, rec)), true) => self.verify_anchor(*d, rec, &m.auth, b)?,
            (None, false) => {
                let last = m.cleared_ops.last().expect("non-empty");
                self.verify_anchor(b, last, &m.auth, b)?;
            }
            _ => return alarm(AlarmKind::ProtocolOrder, b, "anchor presence"),
        }
        self.cleared = b;
        Ok(())
    }

    fn on_reply(&mut self, m: Reply<A>) -> Result<Step<A>, FaultAlarm> {
        let Some(u) = self.current.clone() else {
            return alarm(AlarmKind::ProtocolOrder, m.seqno, "reply without an operation in flight");
        };
        self.check_view(&m)?;

        // check-pending
        let base = self.cleared;
        ensure(!m.pending.is_empty(), AlarmKind::BadPending, base, "empty pending list")?;
        let t = base + m.pending.len() as u64;
        ensure(m.seqno == t, AlarmKind::BadPending, t, "sequence number disagrees with pending list")?;
        let mut mu = Vec::new();
        let mut gamma = Vec::new();
        for (k, rec) in m.pending.iter().enumerate() {
            let l = base + 1 + k as u64;
            let h = self.extend_chain(&rec.op, l, rec.client)?;
            ensure(
                self.ring.verify(rec.client, Domain::Invoke, &invoke_payload(&rec.op, rec.client), &rec.invoke_sig),
                AlarmKind::BadSignature,
                l,
                "invoke signature",
            )?;
            let last = l == t;
            if last {
                ensure(rec.op == u && rec.client == self.id, AlarmKind::BadPending, l, "last pending op is not ours")?;
            }
            let aborted_mark = match &rec.abort_mark {
                None => false,
                Some(sig) => {
                    ensure(self.cfg.prune_aborted && !last, AlarmKind::BadPending, l, "unexpected abort mark")?;
                    let payload = commit_payload(l, &rec.op, rec.client, Status::Abort, &h);
                    ensure(
                        self.ring.verify(rec.client, Domain::Commit, &payload, sig),
                        AlarmKind::BadSignature,
                        l,
                        "abort mark",
                    )?;
                    true
                }
            };
            // separate-pending
            if rec.client == self.id {
                if last {
                    mu.push(rec.op.clone());
                } else {
                    match self.status.get(&l) {
                        Some(Status::Success) => mu.push(rec.op.clone()),
                        Some(Status::Abort) => {}
                        None => return alarm(AlarmKind::ProtocolOrder, l, "own pending op never committed"),
                    }
                }
            } else if !aborted_mark {
                gamma.push(rec.op.clone());
            }
        }

        // the response is checked even when the op aborts, so a tampered
        // reply never goes unnoticed
        let exec = A::authexec(&mu, &m.auth.authenticator, &m.response, &m.proof);
        ensure(exec.valid, AlarmKind::BadProof, t, "response does not verify")?;
        let (z, outcome) = if (self.cfg.relation)(&gamma, &u) {
            (Status::Success, Outcome::Done(m.response))
        } else {
            (Status::Abort, Outcome::Abort)
        };
        self.status.insert(t, z);
        if !(self.cfg.query_fast_path && A::is_query(&u)) {
            self.passive.insert(t);
        }
        let h = self.entry(t)?.hash;
        let commit_sig = self
            .ring
            .sign(self.id, Domain::Commit, &commit_payload(t, &u, self.id, z, &h))
            .map_err(|e| FaultAlarm::new(AlarmKind::ProtocolOrder, Some(t), e.to_string()))?;
        self.current = None;
        Ok(Step {
            send: Some(Message::Commit(Commit {
                op: u.clone(),
                seqno: t,
                status: z,
                commit_sig,
            })),
            completed: Some(Completed {
                op: u,
                seqno: t,
                outcome,
            }),
        })
    }

    fn on_update_auth(&mut self, m: UpdateAuth<A>) -> Result<Step<A>, FaultAlarm> {
        let q = m.seqno;
        ensure(self.passive.contains(&q), AlarmKind::ProtocolOrder, q, "update-auth for an op not awaiting one")?;
        let Some(z) = self.status.get(&q).copied() else {
            return alarm(AlarmKind::ProtocolOrder, q, "update-auth for an op we did not commit");
        };
        let h = self.entry(q)?.hash;
        let own = OpRecord {
            op: m.op.clone(),
            status: z,
            commit_sig: m.commit_sig.clone(),
            client: self.id,
        };
        ensure(m.commit_sig.signer == self.id, AlarmKind::BadSignature, q, "commit signature")?;
        self.verify_commit(&own, q, &h)?;
        ensure(q >= 1 && m.prev_seqno < q, AlarmKind::ProtocolOrder, q, "predecessor position")?;
        if !self.cfg.query_fast_path {
            ensure(m.prev_seqno == q - 1, AlarmKind::ProtocolOrder, q, "predecessor position")?;
        }
        self.verify_anchor(m.prev_seqno, &m.prev, &m.prev_auth, q - 1)?;
        let a = m.prev_auth.authenticator;
        let (a_next, update) = match (z, m.response, m.proof) {
            (Status::Success, Some(r), Some(p)) => {
                let exec = A::authexec(std::slice::from_ref(&m.op), &a, &r, &p);
                ensure(exec.valid, AlarmKind::BadProof, q, "update does not verify")?;
                (exec.authenticator, exec.aux)
            }
            (Status::Abort, None, None) => (a, None),
            _ => return alarm(AlarmKind::ProtocolOrder, q, "update-auth payload does not match status"),
        };
        let auth_sig = self
            .ring
            .sign(self.id, Domain::Auth, &auth_payload(&m.op, q, &h, &a_next))
            .map_err(|e| FaultAlarm::new(AlarmKind::ProtocolOrder, Some(q), e.to_string()))?;
        // the anchor moves only on what the server shows: it may answer
        // others before our commit-auth arrives
        self.passive.remove(&q);
        Ok(Step::send(Message::CommitAuth(CommitAuth {
            authenticator: a_next,
            update,
            auth_sig,
        })))
    }

    /// Drops `H` and `Z` entries nobody can ask about any more.
    fn collect_garbage(&mut self) {
        // the anchor's predecessor is needed to recheck the anchor record
        let floor = self.cleared.min(self.anchor).saturating_sub(1);
        self.chain = self.chain.split_off(&floor);
        self.status = self.status.split_off(&floor);
    }

    pub fn chain_len(&self) -> usize {
        self.chain.len()
    }
}
