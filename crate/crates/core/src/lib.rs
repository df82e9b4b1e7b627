//! Fork-linearizable integrity protocol over authenticated data structures,
//! and an integrity-checked object store built on it.

pub mod adict;
pub mod bench;
pub mod ads;
pub mod client;
pub mod crypto;
pub mod harness;
pub mod protocol;
pub mod server;
pub mod transport;
pub mod vicos;
pub mod wire;

pub use adict::{Adict, AdictOp, AdictResponse, Key};
pub use ads::{Ads, AuthExec, Outcome, Relation};
pub use crypto::{ClientId, Digest, KeyConfig, KeyRing, Scheme};
