//! Records, messages and signed payloads shared by client and server.

use std::fmt;

use crate::ads::Ads;
use crate::crypto::{hash, ClientId, CryptoError, Digest, Domain, KeyConfig, KeyRing, Signature};
use crate::wire::{Decode, DecodeError, Encode, Reader, Writer, WIRE_VERSION};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Status {
    Success,
    Abort,
}

impl Encode for Status {
    fn encode(&self, w: &mut Writer) {
        w.u8(match self {
            Status::Success => 0,
            Status::Abort => 1,
        });
    }
}

impl Decode for Status {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Status::Success),
            1 => Ok(Status::Abort),
            tag => Err(DecodeError::BadTag { what: "status", tag }),
        }
    }
}

/// `H[l] = hash(H[l-1] || o || l || j)`.
pub fn chain_hash<O: Encode>(prev: &Digest, op: &O, seqno: u64, client: ClientId) -> Digest {
    let mut w = Writer::new();
    w.put(prev).bytes(&op.to_bytes()).u64(seqno).put(&client);
    hash(&w.finish())
}

pub fn invoke_payload<O: Encode>(op: &O, client: ClientId) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&op.to_bytes()).put(&client);
    w.finish()
}

pub fn commit_payload<O: Encode>(
    seqno: u64,
    op: &O,
    client: ClientId,
    status: Status,
    chain: &Digest,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(seqno)
        .bytes(&op.to_bytes())
        .put(&client)
        .put(&status)
        .put(chain);
    w.finish()
}

pub fn auth_payload<O: Encode>(op: &O, seqno: u64, chain: &Digest, authenticator: &Digest) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&op.to_bytes()).u64(seqno).put(chain).put(authenticator);
    w.finish()
}

/// An entry of `O` and of the cleared list in REPLY.
#[derive(Clone, PartialEq, Debug)]
pub struct OpRecord<O> {
    pub op: O,
    pub status: Status,
    pub commit_sig: Signature,
    pub client: ClientId,
}

impl<O: Encode> Encode for OpRecord<O> {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.op)
            .put(&self.status)
            .put(&self.commit_sig)
            .put(&self.client);
    }
}

impl<O: Decode> Decode for OpRecord<O> {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(OpRecord {
            op: r.get()?,
            status: r.get()?,
            commit_sig: r.get()?,
            client: r.get()?,
        })
    }
}

/// An entry of `I` and of the pending list in REPLY.
#[derive(Clone, PartialEq, Debug)]
pub struct PendingRecord<O> {
    pub op: O,
    pub invoke_sig: Signature,
    pub client: ClientId,
    /// With aborted-op pruning: the commit signature of an op already
    /// committed as aborted, so the receiver may ignore it.
    pub abort_mark: Option<Signature>,
}

impl<O: Encode> Encode for PendingRecord<O> {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.op)
            .put(&self.invoke_sig)
            .put(&self.client)
            .put(&self.abort_mark);
    }
}

impl<O: Decode> Decode for PendingRecord<O> {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(PendingRecord {
            op: r.get()?,
            invoke_sig: r.get()?,
            client: r.get()?,
            abort_mark: r.get()?,
        })
    }
}

/// An entry of `A`: an authenticator and the auth signature over it.
#[derive(Clone, PartialEq, Debug)]
pub struct AuthRecord {
    pub authenticator: Digest,
    pub sig: Signature,
}

impl Encode for AuthRecord {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.authenticator).put(&self.sig);
    }
}

impl Decode for AuthRecord {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(AuthRecord {
            authenticator: r.get()?,
            sig: r.get()?,
        })
    }
}

pub struct Invoke<A: Ads> {
    pub op: A::Op,
    pub invoke_sig: Signature,
    pub cleared: u64,
}

pub struct Reply<A: Ads> {
    /// Operations applied since the client's last cleared one.
    pub cleared_ops: Vec<OpRecord<A::Op>>,
    pub applied: u64,
    pub auth: AuthRecord,
    /// With the query fast path: the last op that went through the passive
    /// phase, which `auth` belongs to.
    pub anchor: Option<(u64, OpRecord<A::Op>)>,
    pub pending: Vec<PendingRecord<A::Op>>,
    pub seqno: u64,
    pub response: A::Response,
    pub proof: A::Proof,
}

pub struct Commit<A: Ads> {
    pub op: A::Op,
    pub seqno: u64,
    pub status: Status,
    pub commit_sig: Signature,
}

pub struct UpdateAuth<A: Ads> {
    pub op: A::Op,
    /// Absent for aborted operations.
    pub response: Option<A::Response>,
    pub proof: Option<A::Proof>,
    pub commit_sig: Signature,
    pub seqno: u64,
    /// Sequence number of `prev`: `seqno - 1`, or earlier with the fast path.
    pub prev_seqno: u64,
    pub prev: OpRecord<A::Op>,
    pub prev_auth: AuthRecord,
}

pub struct CommitAuth<A: Ads> {
    pub authenticator: Digest,
    pub update: Option<A::UpdateProof>,
    pub auth_sig: Signature,
}

pub enum Message<A: Ads> {
    Invoke(Invoke<A>),
    Reply(Reply<A>),
    Commit(Commit<A>),
    UpdateAuth(UpdateAuth<A>),
    CommitAuth(CommitAuth<A>),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Invoke,
    Reply,
    Commit,
    UpdateAuth,
    CommitAuth,
}

impl Kind {
    pub const ALL: [Kind; 5] = [
        Kind::Invoke,
        Kind::Reply,
        Kind::Commit,
        Kind::UpdateAuth,
        Kind::CommitAuth,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Kind::Invoke => 1,
            Kind::Reply => 2,
            Kind::Commit => 3,
            Kind::UpdateAuth => 4,
            Kind::CommitAuth => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.tag() == tag)
    }

    /// Kind of an encoded message, from its header alone.
    pub fn of_bytes(bytes: &[u8]) -> Option<Kind> {
        match bytes {
            [WIRE_VERSION, tag, ..] => Kind::from_tag(*tag),
            _ => None,
        }
    }

    /// Sent by clients, as opposed to by the server.
    pub fn from_client(self) -> bool {
        matches!(self, Kind::Invoke | Kind::Commit | Kind::CommitAuth)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Invoke => "invoke",
            Kind::Reply => "reply",
            Kind::Commit => "commit",
            Kind::UpdateAuth => "update-auth",
            Kind::CommitAuth => "commit-auth",
        })
    }
}

impl<A: Ads> Message<A> {
    pub fn kind(&self) -> Kind {
        match self {
            Message::Invoke(_) => Kind::Invoke,
            Message::Reply(_) => Kind::Reply,
            Message::Commit(_) => Kind::Commit,
            Message::UpdateAuth(_) => Kind::UpdateAuth,
            Message::CommitAuth(_) => Kind::CommitAuth,
        }
    }
}

impl<A: Ads> Encode for Message<A> {
    fn encode(&self, w: &mut Writer) {
        w.u8(WIRE_VERSION).u8(self.kind().tag());
        match self {
            Message::Invoke(m) => {
                w.put(&m.op).put(&m.invoke_sig).u64(m.cleared);
            }
            Message::Reply(m) => {
                w.put(&m.cleared_ops)
                    .u64(m.applied)
                    .put(&m.auth)
                    .put(&m.anchor)
                    .put(&m.pending)
                    .u64(m.seqno)
                    .put(&m.response)
                    .put(&m.proof);
            }
            Message::Commit(m) => {
                w.put(&m.op).u64(m.seqno).put(&m.status).put(&m.commit_sig);
            }
            Message::UpdateAuth(m) => {
                w.put(&m.op)
                    .put(&m.response)
                    .put(&m.proof)
                    .put(&m.commit_sig)
                    .u64(m.seqno)
                    .u64(m.prev_seqno)
                    .put(&m.prev)
                    .put(&m.prev_auth);
            }
            Message::CommitAuth(m) => {
                w.put(&m.authenticator).put(&m.update).put(&m.auth_sig);
            }
        }
    }
}

impl<A: Ads> Decode for Message<A> {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(DecodeError::BadVersion(version));
        }
        let tag = r.u8()?;
        let kind = Kind::from_tag(tag).ok_or(DecodeError::BadTag { what: "message", tag })?;
        Ok(match kind {
            Kind::Invoke => Message::Invoke(Invoke {
                op: r.get()?,
                invoke_sig: r.get()?,
                cleared: r.u64()?,
            }),
            Kind::Reply => Message::Reply(Reply {
                cleared_ops: r.get()?,
                applied: r.u64()?,
                auth: r.get()?,
                anchor: r.get()?,
                pending: r.get()?,
                seqno: r.u64()?,
                response: r.get()?,
                proof: r.get()?,
            }),
            Kind::Commit => Message::Commit(Commit {
                op: r.get()?,
                seqno: r.u64()?,
                status: r.get()?,
                commit_sig: r.get()?,
            }),
            Kind::UpdateAuth => Message::UpdateAuth(UpdateAuth {
                op: r.get()?,
                response: r.get()?,
                proof: r.get()?,
                commit_sig: r.get()?,
                seqno: r.u64()?,
                prev_seqno: r.u64()?,
                prev: r.get()?,
                prev_auth: r.get()?,
            }),
            Kind::CommitAuth => Message::CommitAuth(CommitAuth {
                authenticator: r.get()?,
                update: r.get()?,
                auth_sig: r.get()?,
            }),
        })
    }
}

// Manual impls: deriving would demand `A: Clone`.
impl<A: Ads> Clone for Invoke<A> {
    fn clone(&self) -> Self {
        Invoke {
            op: self.op.clone(),
            invoke_sig: self.invoke_sig.clone(),
            cleared: self.cleared,
        }
    }
}

impl<A: Ads> Clone for Reply<A> {
    fn clone(&self) -> Self {
        Reply {
            cleared_ops: self.cleared_ops.clone(),
            applied: self.applied,
            auth: self.auth.clone(),
            anchor: self.anchor.clone(),
            pending: self.pending.clone(),
            seqno: self.seqno,
            response: self.response.clone(),
            proof: self.proof.clone(),
        }
    }
}

impl<A: Ads> Clone for Commit<A> {
    fn clone(&self) -> Self {
        Commit {
            op: self.op.clone(),
            seqno: self.seqno,
            status: self.status,
            commit_sig: self.commit_sig.clone(),
        }
    }
}

impl<A: Ads> Clone for UpdateAuth<A> {
    fn clone(&self) -> Self {
        UpdateAuth {
            op: self.op.clone(),
            response: self.response.clone(),
            proof: self.proof.clone(),
            commit_sig: self.commit_sig.clone(),
            seqno: self.seqno,
            prev_seqno: self.prev_seqno,
            prev: self.prev.clone(),
            prev_auth: self.prev_auth.clone(),
        }
    }
}

impl<A: Ads> Clone for CommitAuth<A> {
    fn clone(&self) -> Self {
        CommitAuth {
            authenticator: self.authenticator,
            update: self.update.clone(),
            auth_sig: self.auth_sig.clone(),
        }
    }
}

impl<A: Ads> Clone for Message<A> {
    fn clone(&self) -> Self {
        match self {
            Message::Invoke(m) => Message::Invoke(m.clone()),
            Message::Reply(m) => Message::Reply(m.clone()),
            Message::Commit(m) => Message::Commit(m.clone()),
            Message::UpdateAuth(m) => Message::UpdateAuth(m.clone()),
            Message::CommitAuth(m) => Message::CommitAuth(m.clone()),
        }
    }
}

impl<A: Ads> fmt::Debug for Message<A> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Invoke(m) => f
                .debug_struct("Invoke")
                .field("op", &m.op)
                .field("cleared", &m.cleared)
                .finish(),
            Message::Reply(m) => f
                .debug_struct("Reply")
                .field("cleared_ops", &m.cleared_ops.len())
                .field("applied", &m.applied)
                .field("anchor", &m.anchor.as_ref().map(|a| a.0))
                .field("pending", &m.pending.len())
                .field("seqno", &m.seqno)
                .field("response", &m.response)
                .finish(),
            Message::Commit(m) => f
                .debug_struct("Commit")
                .field("op", &m.op)
                .field("seqno", &m.seqno)
                .field("status", &m.status)
                .finish(),
            Message::UpdateAuth(m) => f
                .debug_struct("UpdateAuth")
                .field("op", &m.op)
                .field("seqno", &m.seqno)
                .field("prev_seqno", &m.prev_seqno)
                .finish(),
            Message::CommitAuth(m) => f
                .debug_struct("CommitAuth")
                .field("authenticator", &m.authenticator)
                .finish(),
        }
    }
}

/// The records at sequence number 0, signed once at setup by the genesis key.
#[derive(Clone, Debug)]
pub struct Genesis<O> {
    pub record: OpRecord<O>,
    pub auth: AuthRecord,
}

impl<O: Encode + PartialEq> Genesis<O> {
    pub fn is_genesis(&self, op: &O, client: ClientId) -> bool {
        client == ClientId::GENESIS && *op == self.record.op
    }
}

/// Signs the genesis records with the setup-time ring and stores the
/// signatures in `cfg`.
pub fn seal_genesis<A: Ads>(cfg: &mut KeyConfig, genesis_ring: &KeyRing) -> Result<(), CryptoError> {
    let op = A::genesis_op();
    let g = ClientId::GENESIS;
    let commit = genesis_ring.sign(g, Domain::Commit, &commit_payload(0, &op, g, Status::Success, &Digest::NULL))?;
    let auth = genesis_ring.sign(
        g,
        Domain::Auth,
        &auth_payload(&op, 0, &Digest::NULL, &A::initial_authenticator()),
    )?;
    let entry = cfg.genesis.get_or_insert_with(|| crate::crypto::GenesisEntry {
        verifying_key: None,
        commit_sig: String::new(),
        auth_sig: String::new(),
    });
    entry.commit_sig = hex::encode(commit.bytes);
    entry.auth_sig = hex::encode(auth.bytes);
    Ok(())
}

pub fn genesis<A: Ads>(cfg: &KeyConfig) -> Result<Genesis<A::Op>, CryptoError> {
    let entry = cfg
        .genesis
        .as_ref()
        .ok_or_else(|| CryptoError::Parse("missing genesis signatures".into()))?;
    let sig = |s: &str| -> Result<Signature, CryptoError> {
        Ok(Signature {
            signer: ClientId::GENESIS,
            scheme: cfg.mode,
            bytes: hex::decode(s).map_err(|_| CryptoError::BadHex("genesis"))?,
        })
    };
    Ok(Genesis {
        record: OpRecord {
            op: A::genesis_op(),
            status: Status::Success,
            commit_sig: sig(&entry.commit_sig)?,
            client: ClientId::GENESIS,
        },
        auth: AuthRecord {
            authenticator: A::initial_authenticator(),
            sig: sig(&entry.auth_sig)?,
        },
    })
}

/// Fresh keys for `clients` clients with sealed genesis records.
pub fn setup<A: Ads, R: rand::RngCore + rand::CryptoRng>(
    mode: crate::crypto::Scheme,
    clients: u64,
    rng: &mut R,
) -> KeyConfig {
    let (mut cfg, ring) = KeyConfig::generate(mode, clients, rng);
    seal_genesis::<A>(&mut cfg, &ring).expect("genesis ring can sign");
    cfg
}
