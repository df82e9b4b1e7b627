//! Authenticated dictionary: a key-value map with a Merkle treap over it.

mod tree;

use std::collections::BTreeMap;
use std::fmt;

pub use tree::{entry_hash, Lookup, NodeKey, Tree, TreeError, Walk};

use crate::ads::{Ads, AuthExec, RefreshError};
use crate::crypto::{hash, Digest};
use crate::wire::{Decode, DecodeError, Encode, Reader, Writer};

/// Dictionary key, ordered bytewise.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(pub Vec<u8>);

impl Key {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for Key {
    fn from(s: &str) -> Self {
        Key(s.as_bytes().to_vec())
    }
}

impl From<String> for Key {
    fn from(s: String) -> Self {
        Key(s.into_bytes())
    }
}

impl From<Vec<u8>> for Key {
    fn from(v: Vec<u8>) -> Self {
        Key(v)
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) if s.chars().all(|c| !c.is_control()) => write!(f, "{s:?}"),
            _ => write!(f, "0x{}", hex::encode(&self.0)),
        }
    }
}

impl Encode for Key {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.0);
    }
}

impl Decode for Key {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Key(r.bytes()?))
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum AdictOp {
    Put { key: Key, value: Vec<u8> },
    Get { key: Key },
    Del { key: Key },
    List,
}

impl AdictOp {
    pub fn put(key: impl Into<Key>, value: impl Into<Vec<u8>>) -> Self {
        AdictOp::Put {
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn get(key: impl Into<Key>) -> Self {
        AdictOp::Get { key: key.into() }
    }

    pub fn del(key: impl Into<Key>) -> Self {
        AdictOp::Del { key: key.into() }
    }

    pub fn key(&self) -> Option<&Key> {
        match self {
            AdictOp::Put { key, .. } | AdictOp::Get { key } | AdictOp::Del { key } => Some(key),
            AdictOp::List => None,
        }
    }

    pub fn is_update(&self) -> bool {
        matches!(self, AdictOp::Put { .. } | AdictOp::Del { .. })
    }
}

impl Encode for AdictOp {
    fn encode(&self, w: &mut Writer) {
        match self {
            AdictOp::Put { key, value } => {
                w.u8(0).put(key).bytes(value);
            }
            AdictOp::Get { key } => {
                w.u8(1).put(key);
            }
            AdictOp::Del { key } => {
                w.u8(2).put(key);
            }
            AdictOp::List => {
                w.u8(3);
            }
        }
    }
}

impl Decode for AdictOp {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(AdictOp::Put {
                key: r.get()?,
                value: r.bytes()?,
            }),
            1 => Ok(AdictOp::Get { key: r.get()? }),
            2 => Ok(AdictOp::Del { key: r.get()? }),
            3 => Ok(AdictOp::List),
            tag => Err(DecodeError::BadTag { what: "adict op", tag }),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum AdictResponse {
    /// Acknowledgement of an update, or a get on an absent key.
    Nil,
    Value(Vec<u8>),
    Keys(Vec<Key>),
}

impl Encode for AdictResponse {
    fn encode(&self, w: &mut Writer) {
        match self {
            AdictResponse::Nil => {
                w.u8(0);
            }
            AdictResponse::Value(v) => {
                w.u8(1).bytes(v);
            }
            AdictResponse::Keys(ks) => {
                w.u8(2).put(ks);
            }
        }
    }
}

impl Decode for AdictResponse {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(AdictResponse::Nil),
            1 => Ok(AdictResponse::Value(r.bytes()?)),
            2 => Ok(AdictResponse::Keys(r.get()?)),
            tag => Err(DecodeError::BadTag { what: "adict response", tag }),
        }
    }
}

/// Proof for one operation of a sequence.
#[derive(Clone, PartialEq, Debug)]
pub enum StepProof {
    /// The tree pruned to the nodes the operation visits.
    Path(Tree),
    /// All entries as (key, value digest), for list.
    Listing(Vec<(Key, Digest)>),
}

impl Encode for StepProof {
    fn encode(&self, w: &mut Writer) {
        match self {
            StepProof::Path(t) => {
                w.u8(0).put(t);
            }
            StepProof::Listing(es) => {
                w.u8(1).put(es);
            }
        }
    }
}

impl Decode for StepProof {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(StepProof::Path(r.get()?)),
            1 => Ok(StepProof::Listing(r.get()?)),
            tag => Err(DecodeError::BadTag { what: "step proof", tag }),
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct AdictProof {
    pub steps: Vec<StepProof>,
}

impl Encode for AdictProof {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.steps);
    }
}

impl Decode for AdictProof {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(AdictProof { steps: r.get()? })
    }
}

/// The pruned tree after an update, which the server checks its own
/// recomputation against.
#[derive(Clone, PartialEq, Debug)]
pub struct UpdatedPath(pub Tree);

impl Encode for UpdatedPath {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.0);
    }
}

impl Decode for UpdatedPath {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(UpdatedPath(r.get()?))
    }
}

#[derive(Clone)]
pub struct AdictState {
    values: BTreeMap<Key, Vec<u8>>,
    tree: Tree,
}

impl Default for AdictState {
    fn default() -> Self {
        AdictState {
            values: BTreeMap::new(),
            tree: Tree::genesis(),
        }
    }
}

impl fmt::Debug for AdictState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdictState")
            .field("keys", &self.values.len())
            .field("root", &self.tree.hash())
            .finish()
    }
}

impl AdictState {
    pub fn from_map(values: BTreeMap<Key, Vec<u8>>) -> Self {
        let entries: Vec<_> = values.iter().map(|(k, v)| (k.clone(), hash(v))).collect();
        let tree = Tree::from_entries(&entries).expect("map keys are sorted");
        AdictState { values, tree }
    }

    pub fn root(&self) -> Digest {
        self.tree.hash()
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn get(&self, key: &Key) -> Option<&[u8]> {
        self.values.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> Vec<Key> {
        self.values.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &BTreeMap<Key, Vec<u8>> {
        &self.values
    }

    /// Response and proof for `op`, plus the successor state if asked for.
    fn prove(&self, op: &AdictOp, want_next: bool) -> (AdictResponse, StepProof, Option<Self>) {
        const FULL: &str = "server tree has no stubs";
        let mut walk = Walk::recording();
        let (resp, next) = match op {
            AdictOp::Get { key } => {
                walk.lookup(&self.tree, key).expect(FULL);
                let resp = match self.values.get(key) {
                    Some(v) => AdictResponse::Value(v.clone()),
                    None => AdictResponse::Nil,
                };
                (resp, None)
            }
            AdictOp::Put { key, value } => {
                let tree = walk.insert(&self.tree, key, hash(value)).expect(FULL);
                let next = want_next.then(|| {
                    let mut values = self.values.clone();
                    values.insert(key.clone(), value.clone());
                    AdictState { values, tree }
                });
                (AdictResponse::Nil, next)
            }
            AdictOp::Del { key } => {
                let tree = walk.remove(&self.tree, key).expect(FULL);
                let next = want_next.then(|| {
                    let mut values = self.values.clone();
                    values.remove(key);
                    AdictState { values, tree }
                });
                (AdictResponse::Nil, next)
            }
            AdictOp::List => {
                let entries = self.tree.entries().expect(FULL);
                return (
                    AdictResponse::Keys(self.keys()),
                    StepProof::Listing(entries),
                    None,
                );
            }
        };
        let step = StepProof::Path(self.tree.prune(&walk.into_touched()));
        (resp, step, next)
    }
}

/// Checks one step against `auth`; returns the post-step tree root and,
/// for updates, the pruned post-step tree.
fn verify_step(
    op: &AdictOp,
    auth: &Digest,
    step: &StepProof,
    response: Option<&AdictResponse>,
) -> Option<(Digest, Option<Tree>)> {
    match (op, step) {
        (AdictOp::List, StepProof::Listing(entries)) => {
            let tree = Tree::from_entries(entries).ok()?;
            if tree.hash() != *auth {
                return None;
            }
            if let Some(resp) = response {
                let keys: Vec<Key> = entries.iter().map(|(k, _)| k.clone()).collect();
                if *resp != AdictResponse::Keys(keys) {
                    return None;
                }
            }
            Some((*auth, None))
        }
        (AdictOp::Get { key }, StepProof::Path(tree)) => {
            if tree.hash() != *auth {
                return None;
            }
            let found = Walk::plain().lookup(tree, key).ok()?.value();
            match (response, found) {
                (None, _) | (Some(AdictResponse::Nil), None) => {}
                (Some(AdictResponse::Value(v)), Some(d)) if hash(v) == d => {}
                _ => return None,
            }
            Some((*auth, None))
        }
        (AdictOp::Put { key, value }, StepProof::Path(tree)) => {
            if tree.hash() != *auth || response.is_some_and(|r| *r != AdictResponse::Nil) {
                return None;
            }
            let next = Walk::plain().insert(tree, key, hash(value)).ok()?;
            Some((next.hash(), Some(next)))
        }
        (AdictOp::Del { key }, StepProof::Path(tree)) => {
            if tree.hash() != *auth || response.is_some_and(|r| *r != AdictResponse::Nil) {
                return None;
            }
            let next = Walk::plain().remove(tree, key).ok()?;
            Some((next.hash(), Some(next)))
        }
        _ => None,
    }
}

/// Whether `earlier` and `later` commute: running them in either order
/// gives the same responses and the same final state.
pub fn commutes(earlier: &AdictOp, later: &AdictOp) -> bool {
    use AdictOp::*;
    match (earlier, later) {
        (Get { .. } | List, Get { .. } | List) => true,
        (List, _) | (_, List) => false,
        (Del { .. }, Del { .. }) => true,
        _ => earlier.key() != later.key(),
    }
}

/// Write-read conflict test for a single pair.
pub fn compatible_pair(earlier: &AdictOp, later: &AdictOp) -> bool {
    if !earlier.is_update() {
        return true;
    }
    match later {
        AdictOp::List => false,
        AdictOp::Get { key } => earlier.key() != Some(key),
        _ => true,
    }
}

/// Commutativity lifted to sequences, for the operation-commutativity baseline.
pub fn commutes_with_all(pending: &[AdictOp], current: &AdictOp) -> bool {
    pending.iter().all(|p| commutes(p, current))
}

pub struct Adict;

impl Ads for Adict {
    type Op = AdictOp;
    type State = AdictState;
    type Response = AdictResponse;
    type Proof = AdictProof;
    type UpdateProof = UpdatedPath;

    fn initial_state() -> AdictState {
        AdictState::default()
    }

    fn initial_authenticator() -> Digest {
        Tree::genesis().hash()
    }

    fn genesis_op() -> AdictOp {
        AdictOp::List
    }

    fn is_query(op: &AdictOp) -> bool {
        !op.is_update()
    }

    fn query(state: &AdictState, ops: &[AdictOp]) -> (AdictResponse, AdictProof) {
        let mut steps = Vec::with_capacity(ops.len());
        let mut scratch: Option<AdictState> = None;
        let mut resp = AdictResponse::Nil;
        for (i, op) in ops.iter().enumerate() {
            let last = i + 1 == ops.len();
            let cur = scratch.as_ref().unwrap_or(state);
            let (r, step, next) = cur.prove(op, !last && op.is_update());
            if next.is_some() {
                scratch = next;
            }
            steps.push(step);
            resp = r;
        }
        (resp, AdictProof { steps })
    }

    fn authexec(
        ops: &[AdictOp],
        auth: &Digest,
        response: &AdictResponse,
        proof: &AdictProof,
    ) -> AuthExec<UpdatedPath> {
        if ops.is_empty() || ops.len() != proof.steps.len() {
            return AuthExec::invalid();
        }
        let mut cur = *auth;
        let mut aux = None;
        for (i, (op, step)) in ops.iter().zip(&proof.steps).enumerate() {
            let last = i + 1 == ops.len();
            let Some((next, tree)) = verify_step(op, &cur, step, last.then_some(response)) else {
                return AuthExec::invalid();
            };
            cur = next;
            if last {
                aux = tree.map(UpdatedPath);
            }
        }
        AuthExec {
            authenticator: cur,
            aux,
            valid: true,
        }
    }

    fn refresh(
        state: &mut AdictState,
        op: &AdictOp,
        aux: Option<&UpdatedPath>,
    ) -> Result<(), RefreshError> {
        let tree = match op {
            AdictOp::Get { .. } | AdictOp::List => return Ok(()),
            AdictOp::Put { key, value } => Walk::plain().insert(&state.tree, key, hash(value)),
            AdictOp::Del { key } => Walk::plain().remove(&state.tree, key),
        }
        .map_err(|e| RefreshError(e.to_string()))?;
        let Some(UpdatedPath(claimed)) = aux else {
            return Err(RefreshError("update without post-state".into()));
        };
        if claimed.hash() != tree.hash() {
            return Err(RefreshError("post-state root mismatch".into()));
        }
        match op {
            AdictOp::Put { key, value } => {
                state.values.insert(key.clone(), value.clone());
            }
            AdictOp::Del { key } => {
                state.values.remove(key);
            }
            _ => unreachable!(),
        }
        state.tree = tree;
        Ok(())
    }

    fn compatible(pending: &[AdictOp], current: &AdictOp) -> bool {
        pending.iter().all(|p| compatible_pair(p, current))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(state: &mut AdictState, auth: &mut Digest, op: AdictOp) -> AdictResponse {
        let ops = [op.clone()];
        let (resp, proof) = Adict::query(state, &ops);
        let out = Adict::authexec(&ops, auth, &resp, &proof);
        assert!(out.valid, "{op:?}");
        Adict::refresh(state, &op, out.aux.as_ref()).unwrap();
        *auth = out.authenticator;
        assert_eq!(*auth, state.root());
        resp
    }

    #[test]
    fn empty_dictionary() {
        let s = Adict::initial_state();
        assert_eq!(s.root(), Adict::initial_authenticator());
        let (r, p) = Adict::query(&s, &[AdictOp::List]);
        assert_eq!(r, AdictResponse::Keys(vec![]));
        assert!(Adict::authexec(&[AdictOp::List], &s.root(), &r, &p).valid);
        let (r, p) = Adict::query(&s, &[AdictOp::get("k")]);
        assert_eq!(r, AdictResponse::Nil);
        let out = Adict::authexec(&[AdictOp::get("k")], &s.root(), &r, &p);
        assert!(out.valid && out.aux.is_none());
        assert_eq!(out.authenticator, s.root());
    }

    #[test]
    fn read_your_write_in_sequence() {
        let s = Adict::initial_state();
        let ops = [AdictOp::put("k", "v"), AdictOp::get("k")];
        let (r, p) = Adict::query(&s, &ops);
        assert_eq!(r, AdictResponse::Value(b"v".to_vec()));
        let out = Adict::authexec(&ops, &s.root(), &r, &p);
        assert!(out.valid);
        assert_ne!(out.authenticator, s.root());
    }

    #[test]
    fn delete_of_absent_key_is_identity() {
        let mut s = Adict::initial_state();
        let mut a = s.root();
        run(&mut s, &mut a, AdictOp::put("a", "1"));
        let before = a;
        assert_eq!(run(&mut s, &mut a, AdictOp::del("zz")), AdictResponse::Nil);
        assert_eq!(a, before);
    }

    #[test]
    fn update_must_carry_post_state() {
        let mut s = Adict::initial_state();
        assert!(Adict::refresh(&mut s, &AdictOp::put("a", "1"), None).is_err());
        let wrong = UpdatedPath(Tree::genesis());
        assert!(Adict::refresh(&mut s, &AdictOp::put("a", "1"), Some(&wrong)).is_err());
        assert!(s.is_empty());
    }

    #[test]
    fn proof_step_count_must_match() {
        let s = Adict::initial_state();
        let (r, mut p) = Adict::query(&s, &[AdictOp::get("a")]);
        p.steps.push(p.steps[0].clone());
        assert!(!Adict::authexec(&[AdictOp::get("a")], &s.root(), &r, &p).valid);
    }

    #[test]
    fn wire_round_trip() {
        let mut s = Adict::initial_state();
        let mut a = s.root();
        for k in ["a", "b", "c", "d"] {
            run(&mut s, &mut a, AdictOp::put(k, k));
        }
        let ops = [AdictOp::del("b"), AdictOp::List];
        let (r, p) = Adict::query(&s, &ops);
        assert_eq!(AdictProof::from_bytes(&p.to_bytes()).unwrap(), p);
        assert_eq!(AdictResponse::from_bytes(&r.to_bytes()).unwrap(), r);
        for op in [AdictOp::put("x", vec![0, 1]), AdictOp::get("x"), AdictOp::del("x"), AdictOp::List] {
            assert_eq!(AdictOp::from_bytes(&op.to_bytes()).unwrap(), op);
        }
    }

    #[test]
    fn compatibility_examples() {
        let x = || Key::from("x");
        assert!(Adict::compatible(&[], &AdictOp::List));
        assert!(!Adict::compatible(&[AdictOp::put(x(), "1")], &AdictOp::get(x())));
        assert!(Adict::compatible(&[AdictOp::put(x(), "1")], &AdictOp::put(x(), "2")));
        assert!(Adict::compatible(&[AdictOp::del(x())], &AdictOp::get("y")));
        assert!(!Adict::compatible(&[AdictOp::put(x(), "1")], &AdictOp::List));
        assert!(!Adict::compatible(
            &[AdictOp::get("y"), AdictOp::del(x())],
            &AdictOp::get(x())
        ));
    }
}
