//! Recorded client histories and the sequential reference they are judged by.

use std::collections::BTreeMap;

use crate::adict::{AdictOp, AdictResponse, Key};
use crate::ads::Outcome;
use crate::crypto::ClientId;

/// One operation as seen by its client. Times come from a single global
/// clock, so `a.response < b.invoke` means `a` precedes `b` in real time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpEvent {
    pub client: ClientId,
    pub op: AdictOp,
    pub invoke: u64,
    /// `None` for an operation that never completed.
    pub response: Option<u64>,
    pub outcome: Option<Outcome<AdictResponse>>,
    /// Position the server assigned, when known.
    pub seqno: Option<u64>,
}

impl OpEvent {
    pub fn is_complete(&self) -> bool {
        self.response.is_some()
    }

    pub fn is_aborted(&self) -> bool {
        matches!(self.outcome, Some(Outcome::Abort))
    }

    pub fn precedes(&self, other: &OpEvent) -> bool {
        self.response.is_some_and(|r| r < other.invoke)
    }
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub ops: Vec<OpEvent>,
    open: BTreeMap<ClientId, usize>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts an operation.
    ///
    /// # Panics
    /// If `client` already has one open.
    pub fn invoke(&mut self, client: ClientId, op: AdictOp, at: u64) {
        assert!(!self.open.contains_key(&client), "{client} invoked twice");
        self.open.insert(client, self.ops.len());
        self.ops.push(OpEvent {
            client,
            op,
            invoke: at,
            response: None,
            outcome: None,
            seqno: None,
        });
    }

    /// Completes the open operation of `client`.
    pub fn respond(&mut self, client: ClientId, seqno: u64, outcome: Outcome<AdictResponse>, at: u64) {
        let i = self.open.remove(&client).expect("no open operation");
        let e = &mut self.ops[i];
        e.response = Some(at);
        e.seqno = Some(seqno);
        e.outcome = Some(outcome);
    }

    pub fn of(&self, client: ClientId) -> impl Iterator<Item = &OpEvent> {
        self.ops.iter().filter(move |e| e.client == client)
    }

    pub fn completed(&self) -> usize {
        self.ops.iter().filter(|e| e.is_complete()).count()
    }
}

/// The plain key-value store every history must be explainable by.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Kvs(pub BTreeMap<Key, Vec<u8>>);

impl Kvs {
    pub fn apply(&mut self, op: &AdictOp) -> AdictResponse {
        match op {
            AdictOp::Put { key, value } => {
                self.0.insert(key.clone(), value.clone());
                AdictResponse::Nil
            }
            AdictOp::Get { key } => match self.0.get(key) {
                Some(v) => AdictResponse::Value(v.clone()),
                None => AdictResponse::Nil,
            },
            AdictOp::Del { key } => {
                self.0.remove(key);
                AdictResponse::Nil
            }
            AdictOp::List => AdictResponse::Keys(self.0.keys().cloned().collect()),
        }
    }

    /// Response of the last of `ops` when all run in order.
    pub fn run(&self, ops: &[AdictOp]) -> AdictResponse {
        let mut s = self.clone();
        let mut r = AdictResponse::Nil;
        for op in ops {
            r = s.apply(op);
        }
        r
    }
}
