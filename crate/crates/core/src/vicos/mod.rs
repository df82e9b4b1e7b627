//! An integrity-checked object store: object bytes live in an untrusted
//! object store under a fresh name per write, and a record of that name and
//! the object's hash goes through the authenticated dictionary.

mod cos;

pub use cos::{Cos, CosError, FsCos, MemoryCos};

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::RngCore;

use crate::adict::{Adict, AdictOp, AdictResponse, Key};
use crate::ads::Outcome;
use crate::client::{AlarmKind, Client, ClientError, FaultAlarm, RetryPolicy};
use crate::crypto::{Digest, Hasher, DIGEST_LEN};

pub const NONCE_LEN: usize = 16;

/// Separates the logical key from the nonce in object store names; it may
/// not occur in logical keys.
pub const SEPARATOR: u8 = 0;

pub const DEFAULT_MAX_OBJECT: usize = 64 << 20;

const CHUNK: usize = 64 << 10;

/// What the dictionary stores for each object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectRecord {
    pub nonce: [u8; NONCE_LEN],
    pub hash: Digest,
}

impl ObjectRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(NONCE_LEN + DIGEST_LEN);
        v.extend_from_slice(&self.nonce);
        v.extend_from_slice(self.hash.as_bytes());
        v
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != NONCE_LEN + DIGEST_LEN {
            return None;
        }
        Some(ObjectRecord {
            nonce: b[..NONCE_LEN].try_into().ok()?,
            hash: Digest(b[NONCE_LEN..].try_into().ok()?),
        })
    }

    /// Name of the object in the object store.
    pub fn cos_key(&self, key: &Key) -> Vec<u8> {
        let mut v = key.as_bytes().to_vec();
        v.push(SEPARATOR);
        v.extend_from_slice(hex::encode(self.nonce).as_bytes());
        v
    }
}

/// Hash of an object, computed piecewise.
pub fn object_hash(value: &[u8]) -> Digest {
    let mut h = Hasher::new();
    for chunk in value.chunks(CHUNK) {
        h.update(chunk);
    }
    h.finalize()
}

/// Splits an object store name into logical key and nonce.
pub fn parse_cos_key(name: &[u8]) -> Option<(Key, [u8; NONCE_LEN])> {
    let at = name.iter().position(|b| *b == SEPARATOR)?;
    let nonce = hex::decode(&name[at + 1..]).ok()?.try_into().ok()?;
    (at > 0).then(|| (Key::from(name[..at].to_vec()), nonce))
}

#[derive(Debug, thiserror::Error)]
pub enum VicosError {
    /// The server or the object store misbehaved.
    #[error(transparent)]
    Alarm(FaultAlarm),
    /// The object store failed; this says nothing about integrity.
    #[error(transparent)]
    Storage(#[from] CosError),
    #[error("invalid key: {0}")]
    InvalidKey(&'static str),
    #[error("object of {size} bytes exceeds the limit of {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error(transparent)]
    Client(ClientError),
}

impl From<ClientError> for VicosError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Alarm(a) => VicosError::Alarm(a),
            e => VicosError::Client(e),
        }
    }
}

pub fn check_key(key: &[u8]) -> Result<(), VicosError> {
    if key.is_empty() {
        return Err(VicosError::InvalidKey("empty"));
    }
    if key.contains(&SEPARATOR) {
        return Err(VicosError::InvalidKey("contains a zero byte"));
    }
    Ok(())
}

/// An object written to the store but not yet recorded in the dictionary.
#[derive(Clone, Debug)]
pub struct Staged {
    pub key: Key,
    pub record: ObjectRecord,
}

impl Staged {
    pub fn op(&self) -> AdictOp {
        AdictOp::Put {
            key: self.key.clone(),
            value: self.record.to_bytes(),
        }
    }
}

/// First half of a put: writes `value` under a fresh name.
pub fn stage_put(cos: &dyn Cos, rng: &mut dyn RngCore, key: &[u8], value: &[u8]) -> Result<Staged, VicosError> {
    check_key(key)?;
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let staged = Staged {
        key: Key::from(key.to_vec()),
        record: ObjectRecord {
            nonce,
            hash: object_hash(value),
        },
    };
    cos.put(&staged.record.cos_key(&staged.key), value)?;
    Ok(staged)
}

/// Second half of a put that aborted: removes the staged object again.
/// Failure leaves an orphan for [`Vicos::collect_orphans`].
pub fn compensate(cos: &dyn Cos, staged: &Staged) {
    if let Err(e) = cos.del(&staged.record.cos_key(&staged.key)) {
        log::warn!("could not remove aborted object {:?}: {e}", staged.key);
    }
}

/// Second half of a get: fetches the object the dictionary answered with
/// and checks it against the recorded hash.
pub fn fetch(cos: &dyn Cos, key: &Key, response: &AdictResponse) -> Result<Option<Vec<u8>>, VicosError> {
    let alarm = |ctx: &str| VicosError::Alarm(FaultAlarm::new(AlarmKind::BadProof, None, ctx.to_string()));
    let bytes = match response {
        AdictResponse::Nil => return Ok(None),
        AdictResponse::Value(b) => b,
        AdictResponse::Keys(_) => return Err(alarm("list response to a get")),
    };
    let record = ObjectRecord::from_bytes(bytes).ok_or_else(|| alarm("malformed object record"))?;
    let value = cos
        .get(&record.cos_key(key))?
        .ok_or_else(|| alarm("object missing from the store"))?;
    if object_hash(&value) != record.hash {
        return Err(alarm("object does not match its hash"));
    }
    Ok(Some(value))
}

/// Object store names that no live record points to. `live` maps each
/// logical key to its current nonce, or to `None` when the key is absent.
pub fn orphans(names: &[Vec<u8>], live: &BTreeMap<Key, Option<[u8; NONCE_LEN]>>) -> Vec<Vec<u8>> {
    names
        .iter()
        .filter(|n| match parse_cos_key(n) {
            Some((k, nonce)) => live.get(&k).is_some_and(|cur| *cur != Some(nonce)),
            None => false,
        })
        .cloned()
        .collect()
}

/// Client of the integrity-checked object store.
pub struct Vicos<C: Cos> {
    aip: Client<Adict>,
    cos: C,
    max_object: usize,
    retry: Option<RetryPolicy>,
    timeout: Option<Duration>,
    defer_cleanup: bool,
}

impl<C: Cos> Vicos<C> {
    pub fn new(aip: Client<Adict>, cos: C) -> Self {
        Vicos {
            aip,
            cos,
            max_object: DEFAULT_MAX_OBJECT,
            retry: None,
            timeout: None,
            defer_cleanup: false,
        }
    }

    pub fn with_max_object(mut self, bytes: usize) -> Self {
        self.max_object = bytes;
        self
    }

    /// Gives up on an operation whose reply takes longer than `timeout`;
    /// the client cannot be used afterwards. Without it, a server that
    /// stops answering blocks forever.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    /// Retries aborted operations under `policy`.
    pub fn with_retry(mut self, policy: RetryPolicy) -> Self {
        self.retry = Some(policy);
        self
    }

    /// Leaves the objects of deleted keys to [`Vicos::collect_orphans`].
    /// Deleting them right away can remove the object of a put to the same
    /// key that another client staged before the delete and recorded after
    /// it; that put's readers then raise an alarm.
    pub fn with_deferred_cleanup(mut self) -> Self {
        self.defer_cleanup = true;
        self
    }

    pub fn cos(&self) -> &C {
        &self.cos
    }

    pub fn client(&self) -> &Client<Adict> {
        &self.aip
    }

    pub fn into_parts(self) -> (Client<Adict>, C) {
        (self.aip, self.cos)
    }

    fn run(&self, op: AdictOp) -> Result<Outcome<AdictResponse>, VicosError> {
        let policy = self.retry.unwrap_or(RetryPolicy {
            attempts: 1,
            ..RetryPolicy::default()
        });
        let done = self.aip.invoke_with_retry(op, policy, self.timeout)?;
        Ok(done.outcome)
    }

    /// Stops the client for good after the store misbehaved.
    fn raised(&self, e: VicosError) -> VicosError {
        if let VicosError::Alarm(a) = &e {
            self.aip.raise(a.clone());
        }
        e
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<Outcome<()>, VicosError> {
        if value.len() > self.max_object {
            return Err(VicosError::TooLarge {
                size: value.len(),
                limit: self.max_object,
            });
        }
        let staged = stage_put(&self.cos, &mut rand::thread_rng(), key, value)?;
        let out = self.run(staged.op());
        match out {
            Ok(Outcome::Done(_)) => Ok(Outcome::Done(())),
            Ok(Outcome::Abort) => {
                compensate(&self.cos, &staged);
                Ok(Outcome::Abort)
            }
            Err(e) => Err(e),
        }
    }

    pub fn get(&self, key: &[u8]) -> Result<Outcome<Option<Vec<u8>>>, VicosError> {
        check_key(key)?;
        let key = Key::from(key.to_vec());
        match self.run(AdictOp::Get { key: key.clone() })? {
            Outcome::Abort => Ok(Outcome::Abort),
            Outcome::Done(r) => fetch(&self.cos, &key, &r).map(Outcome::Done).map_err(|e| self.raised(e)),
        }
    }

    pub fn del(&self, key: &[u8]) -> Result<Outcome<()>, VicosError> {
        check_key(key)?;
        let key = Key::from(key.to_vec());
        match self.run(AdictOp::Del { key: key.clone() })? {
            Outcome::Abort => Ok(Outcome::Abort),
            Outcome::Done(_) if self.defer_cleanup => Ok(Outcome::Done(())),
            Outcome::Done(_) => {
                let mut prefix = key.as_bytes().to_vec();
                prefix.push(SEPARATOR);
                if let Err(e) = self.cos.del_prefix(&prefix) {
                    log::warn!("could not remove objects of {key:?}: {e}");
                }
                Ok(Outcome::Done(()))
            }
        }
    }

    pub fn list(&self) -> Result<Outcome<Vec<Key>>, VicosError> {
        match self.run(AdictOp::List)? {
            Outcome::Abort => Ok(Outcome::Abort),
            Outcome::Done(AdictResponse::Keys(ks)) => Ok(Outcome::Done(ks)),
            Outcome::Done(_) => unreachable!("verified list responses are key lists"),
        }
    }

    /// Deletes objects no record points to, such as leftovers of aborted
    /// puts whose cleanup failed. Keys whose lookup aborts are skipped.
    /// A put running concurrently may lose its object, so run this while
    /// no other client writes.
    pub fn collect_orphans(&self) -> Result<usize, VicosError> {
        let names = self.cos.list()?;
        let keys: BTreeSet<Key> = names.iter().filter_map(|n| parse_cos_key(n)).map(|(k, _)| k).collect();
        let mut live = BTreeMap::new();
        for key in keys {
            match self.run(AdictOp::Get { key: key.clone() })? {
                Outcome::Abort => {}
                Outcome::Done(AdictResponse::Nil) => {
                    live.insert(key, None);
                }
                Outcome::Done(AdictResponse::Value(v)) => {
                    let rec = ObjectRecord::from_bytes(&v);
                    live.insert(key, rec.map(|r| r.nonce));
                }
                Outcome::Done(AdictResponse::Keys(_)) => unreachable!("verified get responses are values"),
            }
        }
        let doomed = orphans(&names, &live);
        for n in &doomed {
            self.cos.del(n)?;
        }
        Ok(doomed.len())
    }
}

