//! The authenticated data structure contract the integrity protocol is generic over.
//!
//! The server holds the full state and answers with a response plus proof
//! material (`query`). A client checks that response against a short
//! authenticator and derives the authenticator of the post-state
//! (`authexec`). The server then applies the operation using the client's
//! output (`refresh`). Queries and authenticated execution work on
//! sequences so that a client can verify its own not-yet-applied
//! operations together with the current one.

use std::fmt::Debug;

use crate::crypto::Digest;
use crate::wire::{Decode, Encode};

/// What a client hands back to the caller: either the data structure's
/// response or the distinguished abort value, which no legal response equals.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Outcome<R> {
    Done(R),
    Abort,
}

impl<R> Outcome<R> {
    pub fn is_abort(&self) -> bool {
        matches!(self, Outcome::Abort)
    }

    pub fn done(self) -> Option<R> {
        match self {
            Outcome::Done(r) => Some(r),
            Outcome::Abort => None,
        }
    }

    pub fn map<T>(self, f: impl FnOnce(R) -> T) -> Outcome<T> {
        match self {
            Outcome::Done(r) => Outcome::Done(f(r)),
            Outcome::Abort => Outcome::Abort,
        }
    }
}

/// Output of authenticated execution.
#[derive(Clone, Debug)]
pub struct AuthExec<U> {
    /// Authenticator of the state after the whole sequence.
    pub authenticator: Digest,
    /// Material the server needs to refresh its state for the last operation.
    pub aux: Option<U>,
    pub valid: bool,
}

impl<U> AuthExec<U> {
    pub fn invalid() -> Self {
        AuthExec {
            authenticator: Digest::NULL,
            aux: None,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("refresh rejected: {0}")]
pub struct RefreshError(pub String);

pub trait Ads: Send + Sync + 'static {
    type Op: Clone + PartialEq + Eq + Debug + Encode + Decode + Send + Sync + 'static;
    type State: Clone + Debug + Send + 'static;
    type Response: Clone + PartialEq + Eq + Debug + Encode + Decode + Send + Sync + 'static;
    /// Proof material accompanying a response.
    type Proof: Clone + PartialEq + Debug + Encode + Decode + Send + Sync + 'static;
    /// Material a client returns so the server can apply an update.
    type UpdateProof: Clone + PartialEq + Debug + Encode + Decode + Send + Sync + 'static;

    fn initial_state() -> Self::State;

    fn initial_authenticator() -> Digest;

    /// The operation recorded at sequence number 0.
    fn genesis_op() -> Self::Op;

    /// Queries never change the state.
    fn is_query(op: &Self::Op) -> bool;

    /// Response of the last operation in `ops` as if all of them ran on `state`.
    fn query(state: &Self::State, ops: &[Self::Op]) -> (Self::Response, Self::Proof);

    fn authexec(
        ops: &[Self::Op],
        auth: &Digest,
        response: &Self::Response,
        proof: &Self::Proof,
    ) -> AuthExec<Self::UpdateProof>;

    fn refresh(
        state: &mut Self::State,
        op: &Self::Op,
        aux: Option<&Self::UpdateProof>,
    ) -> Result<(), RefreshError>;

    /// Whether running `pending` before `current` can never change the
    /// response of `current`.
    fn compatible(pending: &[Self::Op], current: &Self::Op) -> bool;
}

/// Relation a client uses to decide whether its operation may complete
/// despite pending operations of other clients.
pub type Relation<A> = fn(&[<A as Ads>::Op], &<A as Ads>::Op) -> bool;
