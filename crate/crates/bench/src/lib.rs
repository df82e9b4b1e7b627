//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vicos_core::adict::AdictState;
use vicos_core::client::{Client, ClientConfig, ClientCore};
use vicos_core::protocol::setup;
use vicos_core::server::{Server, ServerConfig, ServerCore};
use vicos_core::transport::memory;
use vicos_core::vicos::{MemoryCos, Vicos};
use vicos_core::{Adict, AdictOp, Ads, ClientId, Digest, Scheme};

pub fn key(i: u64) -> String {
    format!("key{i:08}")
}

/// A dictionary holding `n` keys with 32-byte values, and its root.
pub fn populated(n: u64) -> (AdictState, Digest) {
    let mut state = Adict::initial_state();
    let mut auth = Adict::initial_authenticator();
    for i in 0..n {
        let op = AdictOp::put(key(i), vec![i as u8; 32]);
        let (r, p) = Adict::query(&state, std::slice::from_ref(&op));
        let exec = Adict::authexec(std::slice::from_ref(&op), &auth, &r, &p);
        assert!(exec.valid);
        Adict::refresh(&mut state, &op, exec.aux.as_ref()).expect("refresh");
        auth = exec.authenticator;
    }
    (state, auth)
}

/// An in-process server with `clients` store handles over one in-memory
/// object store.
pub struct Deployment {
    pub stores: Vec<Vicos<Arc<MemoryCos>>>,
    _server: Server<Adict>,
}

pub fn deploy(clients: u64, scheme: Scheme, query_fast_path: bool) -> Deployment {
    let keys = setup::<Adict, _>(scheme, clients, &mut ChaCha8Rng::seed_from_u64(1));
    let (net, links) = memory::network();
    let scfg = ServerConfig {
        query_fast_path,
        clients: keys.client_ids(),
        ..ServerConfig::default()
    };
    let server = Server::spawn(ServerCore::<Adict>::from_keys(&keys, scfg).unwrap(), links, None);
    let ccfg = ClientConfig {
        query_fast_path,
        ..ClientConfig::default()
    };
    let cos = Arc::new(MemoryCos::new());
    let stores = (1..=clients)
        .map(|i| {
            let core = ClientCore::<Adict>::from_keys(&keys, ClientId(i), ccfg).unwrap();
            Vicos::new(Client::spawn(core, net.connect(ClientId(i))), cos.clone())
        })
        .collect();
    Deployment { stores, _server: server }
}
