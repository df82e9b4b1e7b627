//! Hashing and per-client signatures.
//!
//! Two signature schemes are supported. In `mac` mode every client shares a
//! single 128-bit HMAC-SHA256 key and the server holds no key at all, so it
//! cannot verify (or forge) anything. In `public-key` mode every client owns
//! an Ed25519 keypair and all parties, the server included, hold the
//! verifying keys.
//!
//! Every signed byte string is `len(tag) || tag || signer || len(msg) || msg`,
//! so a signature made under one domain tag never verifies under another.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

pub const DIGEST_LEN: usize = 32;
pub const MAC_KEY_LEN: usize = 16;

type HmacSha256 = Hmac<Sha256>;

/// A SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl serde::Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl Digest {
    /// The null digest, `H[0]` of every hash chain.
    pub const NULL: Digest = Digest([0; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s).map_err(|_| CryptoError::BadHex("digest"))?;
        let arr: [u8; DIGEST_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::BadHex("digest"))?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Incremental hashing, for values that arrive in pieces.
#[derive(Clone, Default)]
pub struct Hasher(Sha256);

impl Hasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finalize(self) -> Digest {
        Digest(self.0.finalize().into())
    }
}

/// Identity of a client. Client 0 is reserved for the genesis records.
#[derive(
    Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClientId(pub u64);

impl ClientId {
    pub const GENESIS: ClientId = ClientId(0);
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Mac,
    PublicKey,
}

impl Scheme {
    pub fn tag(self) -> u8 {
        match self {
            Scheme::Mac => 0,
            Scheme::PublicKey => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Scheme::Mac),
            1 => Some(Scheme::PublicKey),
            _ => None,
        }
    }
}

/// Domain separation labels for the three kinds of signed statements.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Domain {
    Invoke,
    Commit,
    Auth,
}

impl Domain {
    pub fn label(self) -> &'static str {
        match self {
            Domain::Invoke => "invoke",
            Domain::Commit => "commit",
            Domain::Auth => "auth",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Signature {
    pub signer: ClientId,
    pub scheme: Scheme,
    pub bytes: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum CryptoError {
    #[error("no signing key for client {0}")]
    MissingKey(ClientId),
    #[error("malformed hex in {0}")]
    BadHex(&'static str),
    #[error("malformed key for client {0}")]
    BadKey(ClientId),
    #[error("key file: {0}")]
    Io(#[from] std::io::Error),
    #[error("key file: {0}")]
    Parse(String),
}

fn signing_input(signer: ClientId, domain: Domain, message: &[u8]) -> Vec<u8> {
    let label = domain.label().as_bytes();
    let mut out = Vec::with_capacity(16 + label.len() + message.len());
    out.extend_from_slice(&(label.len() as u32).to_be_bytes());
    out.extend_from_slice(label);
    out.extend_from_slice(&signer.0.to_be_bytes());
    out.extend_from_slice(&(message.len() as u32).to_be_bytes());
    out.extend_from_slice(message);
    out
}

/// Key material held by one party.
#[derive(Clone)]
pub struct KeyRing {
    scheme: Scheme,
    mac_key: Option<[u8; MAC_KEY_LEN]>,
    signing: BTreeMap<ClientId, SigningKey>,
    verifying: BTreeMap<ClientId, VerifyingKey>,
}

impl fmt::Debug for KeyRing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyRing")
            .field("scheme", &self.scheme)
            .field("has_mac_key", &self.mac_key.is_some())
            .field("signers", &self.signing.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl KeyRing {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Whether this ring can check signatures at all. A server in MAC mode cannot.
    pub fn can_verify(&self) -> bool {
        match self.scheme {
            Scheme::Mac => self.mac_key.is_some(),
            Scheme::PublicKey => true,
        }
    }

    pub fn can_sign(&self, signer: ClientId) -> bool {
        match self.scheme {
            Scheme::Mac => self.mac_key.is_some(),
            Scheme::PublicKey => self.signing.contains_key(&signer),
        }
    }

    pub fn sign(
        &self,
        signer: ClientId,
        domain: Domain,
        message: &[u8],
    ) -> Result<Signature, CryptoError> {
        let input = signing_input(signer, domain, message);
        let bytes = match self.scheme {
            Scheme::Mac => {
                let key = self.mac_key.ok_or(CryptoError::MissingKey(signer))?;
                let mut mac = HmacSha256::new_from_slice(&key).expect("hmac accepts any key length");
                mac.update(&input);
                mac.finalize().into_bytes().to_vec()
            }
            Scheme::PublicKey => {
                let key = self
                    .signing
                    .get(&signer)
                    .ok_or(CryptoError::MissingKey(signer))?;
                key.sign(&input).to_bytes().to_vec()
            }
        };
        Ok(Signature {
            signer,
            scheme: self.scheme,
            bytes,
        })
    }

    /// Never panics; anything malformed is simply `false`.
    pub fn verify(&self, signer: ClientId, domain: Domain, message: &[u8], sig: &Signature) -> bool {
        if sig.signer != signer || sig.scheme != self.scheme {
            return false;
        }
        let input = signing_input(signer, domain, message);
        match self.scheme {
            Scheme::Mac => {
                let Some(key) = self.mac_key else {
                    return false;
                };
                let mut mac = HmacSha256::new_from_slice(&key).expect("hmac accepts any key length");
                mac.update(&input);
                mac.verify_slice(&sig.bytes).is_ok()
            }
            Scheme::PublicKey => {
                let Some(key) = self.verifying.get(&signer) else {
                    return false;
                };
                let Ok(raw) = <[u8; 64]>::try_from(sig.bytes.as_slice()) else {
                    return false;
                };
                key.verify(&input, &ed25519_dalek::Signature::from_bytes(&raw))
                    .is_ok()
            }
        }
    }
}

/// On-disk key configuration (TOML).
///
/// ```toml
/// mode = "public-key"
///
/// [[client]]
/// id = 1
/// verifying_key = "..."
/// signing_key = "..."   # present only in that client's copy
///
/// [genesis]
/// verifying_key = "..."
/// commit_sig = "..."
/// auth_sig = "..."
/// ```
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeyConfig {
    pub mode: Scheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mac_key: Option<String>,
    #[serde(default, rename = "client")]
    pub clients: Vec<ClientKeyEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genesis: Option<GenesisEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientKeyEntry {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifying_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signing_key: Option<String>,
}

/// Signatures over the genesis records `O[0]` and `A[0]`, made once at setup.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenesisEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifying_key: Option<String>,
    pub commit_sig: String,
    pub auth_sig: String,
}

impl KeyConfig {
    /// Fresh keys for clients `1..=clients`. The returned ring can sign as
    /// the genesis client 0 and should be dropped once the genesis records
    /// have been signed.
    pub fn generate<R: RngCore + CryptoRng>(
        mode: Scheme,
        clients: u64,
        rng: &mut R,
    ) -> (KeyConfig, KeyRing) {
        match mode {
            Scheme::Mac => {
                let mut key = [0u8; MAC_KEY_LEN];
                rng.fill_bytes(&mut key);
                let cfg = KeyConfig {
                    mode,
                    mac_key: Some(hex::encode(key)),
                    clients: (1..=clients)
                        .map(|id| ClientKeyEntry {
                            id,
                            verifying_key: None,
                            signing_key: None,
                        })
                        .collect(),
                    genesis: None,
                };
                let ring = KeyRing {
                    scheme: mode,
                    mac_key: Some(key),
                    signing: BTreeMap::new(),
                    verifying: BTreeMap::new(),
                };
                (cfg, ring)
            }
            Scheme::PublicKey => {
                let genesis_key = SigningKey::generate(rng);
                let mut entries = Vec::new();
                for id in 1..=clients {
                    let sk = SigningKey::generate(rng);
                    entries.push(ClientKeyEntry {
                        id,
                        verifying_key: Some(hex::encode(sk.verifying_key().to_bytes())),
                        signing_key: Some(hex::encode(sk.to_bytes())),
                    });
                }
                let mut ring = KeyRing {
                    scheme: mode,
                    mac_key: None,
                    signing: BTreeMap::new(),
                    verifying: BTreeMap::new(),
                };
                ring.verifying
                    .insert(ClientId::GENESIS, genesis_key.verifying_key());
                ring.signing.insert(ClientId::GENESIS, genesis_key.clone());
                let cfg = KeyConfig {
                    mode,
                    mac_key: None,
                    clients: entries,
                    genesis: Some(GenesisEntry {
                        verifying_key: Some(hex::encode(genesis_key.verifying_key().to_bytes())),
                        commit_sig: String::new(),
                        auth_sig: String::new(),
                    }),
                };
                (cfg, ring)
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, CryptoError> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| CryptoError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CryptoError> {
        let text = toml::to_string_pretty(self).map_err(|e| CryptoError::Parse(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        self.clients.iter().map(|c| ClientId(c.id)).collect()
    }

    /// The copy handed to client `id`: every other client's secret removed.
    pub fn for_client(&self, id: ClientId) -> KeyConfig {
        let mut cfg = self.clone();
        for c in &mut cfg.clients {
            if c.id != id.0 {
                c.signing_key = None;
            }
        }
        cfg
    }

    /// The copy handed to the server: no secrets at all.
    pub fn for_server(&self) -> KeyConfig {
        let mut cfg = self.clone();
        cfg.mac_key = None;
        for c in &mut cfg.clients {
            c.signing_key = None;
        }
        cfg
    }

    /// Builds the ring with whatever key material this config carries.
    pub fn ring(&self) -> Result<KeyRing, CryptoError> {
        let mut ring = KeyRing {
            scheme: self.mode,
            mac_key: None,
            signing: BTreeMap::new(),
            verifying: BTreeMap::new(),
        };
        if let Some(k) = &self.mac_key {
            let raw = hex::decode(k).map_err(|_| CryptoError::BadHex("mac_key"))?;
            let key: [u8; MAC_KEY_LEN] = raw.try_into().map_err(|_| CryptoError::BadHex("mac_key"))?;
            ring.mac_key = Some(key);
        }
        if self.mode == Scheme::PublicKey {
            if let Some(g) = self.genesis.as_ref().and_then(|g| g.verifying_key.as_ref()) {
                ring.verifying
                    .insert(ClientId::GENESIS, parse_verifying(ClientId::GENESIS, g)?);
            }
            for c in &self.clients {
                let id = ClientId(c.id);
                if let Some(vk) = &c.verifying_key {
                    ring.verifying.insert(id, parse_verifying(id, vk)?);
                }
                if let Some(sk) = &c.signing_key {
                    let raw = hex::decode(sk).map_err(|_| CryptoError::BadKey(id))?;
                    let raw: [u8; 32] = raw.try_into().map_err(|_| CryptoError::BadKey(id))?;
                    ring.signing.insert(id, SigningKey::from_bytes(&raw));
                }
            }
        }
        Ok(ring)
    }
}

fn parse_verifying(id: ClientId, s: &str) -> Result<VerifyingKey, CryptoError> {
    let raw = hex::decode(s).map_err(|_| CryptoError::BadKey(id))?;
    let raw: [u8; 32] = raw.try_into().map_err(|_| CryptoError::BadKey(id))?;
    VerifyingKey::from_bytes(&raw).map_err(|_| CryptoError::BadKey(id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rings(mode: Scheme) -> (KeyRing, KeyRing, KeyRing) {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (cfg, _) = KeyConfig::generate(mode, 2, &mut rng);
        (
            cfg.for_client(ClientId(1)).ring().unwrap(),
            cfg.for_client(ClientId(2)).ring().unwrap(),
            cfg.for_server().ring().unwrap(),
        )
    }

    #[test]
    fn sha256_empty_vector() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(hash(b"abc"), hash(b"abc"));
        assert_ne!(hash(b"a"), hash(b"b"));
    }

    #[test]
    fn incremental_matches_oneshot() {
        let mut h = Hasher::new();
        h.update(b"hello ");
        h.update(b"world");
        assert_eq!(h.finalize(), hash(b"hello world"));
    }

    #[test]
    fn round_trip_both_schemes() {
        for mode in [Scheme::Mac, Scheme::PublicKey] {
            let (c1, c2, _) = rings(mode);
            let sig = c1.sign(ClientId(1), Domain::Invoke, b"m").unwrap();
            assert!(c1.verify(ClientId(1), Domain::Invoke, b"m", &sig));
            assert!(c2.verify(ClientId(1), Domain::Invoke, b"m", &sig));
            assert!(!c2.verify(ClientId(2), Domain::Invoke, b"m", &sig));
            assert!(!c2.verify(ClientId(1), Domain::Commit, b"m", &sig));
        }
    }

    #[test]
    fn public_key_signers_are_distinct() {
        let (c1, c2, server) = rings(Scheme::PublicKey);
        let sig = c1.sign(ClientId(1), Domain::Invoke, b"m").unwrap();
        let mut relabeled = sig.clone();
        relabeled.signer = ClientId(2);
        assert!(!c2.verify(ClientId(2), Domain::Invoke, b"m", &relabeled));
        // only the owner can sign
        assert!(matches!(
            c1.sign(ClientId(2), Domain::Invoke, b"m"),
            Err(CryptoError::MissingKey(_))
        ));
        assert!(server.can_verify());
        assert!(server.verify(ClientId(1), Domain::Invoke, b"m", &sig));
        assert!(server.sign(ClientId(1), Domain::Invoke, b"m").is_err());
    }

    #[test]
    fn mac_server_cannot_sign_or_verify() {
        let (c1, _, server) = rings(Scheme::Mac);
        let sig = c1.sign(ClientId(1), Domain::Auth, b"x").unwrap();
        assert!(!server.can_verify());
        assert!(!server.verify(ClientId(1), Domain::Auth, b"x", &sig));
        assert!(server.sign(ClientId(1), Domain::Auth, b"x").is_err());
    }

    #[test]
    fn malformed_signatures_are_rejected() {
        for mode in [Scheme::Mac, Scheme::PublicKey] {
            let (c1, _, _) = rings(mode);
            let mut sig = c1.sign(ClientId(1), Domain::Commit, b"payload").unwrap();
            sig.bytes.truncate(sig.bytes.len() - 1);
            assert!(!c1.verify(ClientId(1), Domain::Commit, b"payload", &sig));
            sig.bytes.clear();
            assert!(!c1.verify(ClientId(1), Domain::Commit, b"payload", &sig));
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (cfg, _) = KeyConfig::generate(Scheme::PublicKey, 3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.toml");
        cfg.save(&path).unwrap();
        let back = KeyConfig::load(&path).unwrap();
        assert_eq!(back.client_ids(), vec![ClientId(1), ClientId(2), ClientId(3)]);
        let a = cfg.for_client(ClientId(3)).ring().unwrap();
        let b = back.for_server().ring().unwrap();
        let sig = a.sign(ClientId(3), Domain::Auth, b"z").unwrap();
        assert!(b.verify(ClientId(3), Domain::Auth, b"z", &sig));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn verify_accepts_only_the_signed_message(
            m in proptest::collection::vec(any::<u8>(), 0..64),
            flip in any::<usize>(),
            pk in any::<bool>(),
        ) {
            let (c1, c2, _) = rings(if pk { Scheme::PublicKey } else { Scheme::Mac });
            let sig = c1.sign(ClientId(1), Domain::Invoke, &m).unwrap();
            prop_assert!(c2.verify(ClientId(1), Domain::Invoke, &m, &sig));
            let mut other = m.clone();
            if other.is_empty() {
                other.push(0);
            } else {
                let bit = flip % (other.len() * 8);
                other[bit / 8] ^= 1 << (bit % 8);
            }
            prop_assert!(!c2.verify(ClientId(1), Domain::Invoke, &other, &sig));
        }
    }
}
