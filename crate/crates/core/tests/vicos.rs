use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vicos_core::adict::{self, Key};
use vicos_core::client::{AlarmKind, Client, ClientConfig, ClientCore, Completed};
use vicos_core::harness::{check_linearizable, History, OpEvent, Verdict};
use vicos_core::protocol::{setup, Kind};
use vicos_core::server::{Server, ServerConfig, ServerCore};
use vicos_core::transport::memory;
use vicos_core::vicos::{
    compensate, fetch, orphans, parse_cos_key, stage_put, Cos, CosError, FsCos, MemoryCos, ObjectRecord, Staged,
    Vicos, VicosError,
};
use vicos_core::wire::Encode;
use vicos_core::{Adict, AdictOp, AdictResponse, ClientId, KeyConfig, Outcome, Scheme};

fn keys(n: u64) -> KeyConfig {
    setup::<Adict, _>(Scheme::Mac, n, &mut ChaCha8Rng::seed_from_u64(11))
}

struct Store<C: Cos> {
    vicos: Vec<Vicos<C>>,
    _server: Server<Adict>,
}

fn store<C: Cos + Clone>(n: u64, cos: C) -> Store<C> {
    let keys = keys(n);
    let (net, links) = memory::network();
    let server = Server::spawn(
        ServerCore::<Adict>::from_keys(&keys, ServerConfig::default()).unwrap(),
        links,
        None,
    );
    let vicos = (1..=n)
        .map(|i| {
            let core = ClientCore::<Adict>::from_keys(&keys, ClientId(i), ClientConfig::default()).unwrap();
            Vicos::new(Client::spawn(core, net.connect(ClientId(i))), cos.clone())
        })
        .collect();
    Store {
        vicos,
        _server: server,
    }
}

fn done<T>(r: Result<Outcome<T>, VicosError>) -> T {
    r.unwrap().done().expect("not aborted")
}

type Shared = Arc<MemoryCos>;

#[test]
fn put_get_del_list_round_trip() {
    let s = store(1, Shared::default());
    let v = &s.vicos[0];
    assert_eq!(done(v.list()), Vec::<Key>::new());
    assert_eq!(done(v.get(b"nothing")), None);
    for k in ["a", "c", "b"] {
        done(v.put(k.as_bytes(), format!("value of {k}").as_bytes()));
    }
    assert_eq!(done(v.list()), vec![Key::from("a"), Key::from("b"), Key::from("c")]);
    assert_eq!(done(v.get(b"b")), Some(b"value of b".to_vec()));

    done(v.put(b"b", b"second"));
    assert_eq!(done(v.get(b"b")), Some(b"second".to_vec()));
    // The superseded version stays until the key is deleted.
    assert_eq!(v.cos().len(), 4);

    done(v.del(b"b"));
    assert_eq!(done(v.get(b"b")), None);
    assert_eq!(v.cos().len(), 2);
    done(v.del(b"b"));
    done(v.del(b"never"));
    assert_eq!(done(v.list()), vec![Key::from("a"), Key::from("c")]);
}

#[test]
fn empty_objects_and_binary_keys() {
    let s = store(1, Shared::default());
    let v = &s.vicos[0];
    done(v.put(&[0xff, 0x01], b""));
    assert_eq!(done(v.get(&[0xff, 0x01])), Some(Vec::new()));
}

#[test]
fn invalid_keys_and_oversized_objects_are_rejected() {
    let s = store(1, Shared::default());
    let v = s.vicos.into_iter().next().unwrap().with_max_object(8);
    assert!(matches!(v.put(b"", b"x"), Err(VicosError::InvalidKey(_))));
    assert!(matches!(v.put(b"a\0b", b"x"), Err(VicosError::InvalidKey(_))));
    assert!(matches!(v.get(b""), Err(VicosError::InvalidKey(_))));
    assert!(matches!(
        v.put(b"a", &[0; 9]),
        Err(VicosError::TooLarge { size: 9, limit: 8 })
    ));
    assert!(v.cos().is_empty());
    done(v.put(b"a", &[0; 8]));
}

#[test]
fn filesystem_backend_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cos = FsCos::open(dir.path()).unwrap();
    let keys = keys(1);
    let (net, links) = memory::network();
    let _server = Server::spawn(
        ServerCore::<Adict>::from_keys(&keys, ServerConfig::default()).unwrap(),
        links,
        None,
    );
    let core = ClientCore::<Adict>::from_keys(&keys, ClientId(1), ClientConfig::default()).unwrap();
    let v = Vicos::new(Client::spawn(core, net.connect(ClientId(1))), cos);
    let big: Vec<u8> = (0..300_000u32).map(|i| (i % 251) as u8).collect();
    done(v.put(b"big", &big));
    done(v.put(b"small", b"s"));
    assert_eq!(done(v.get(b"big")), Some(big));
    done(v.del(b"big"));
    assert_eq!(done(v.get(b"big")), None);
    assert_eq!(v.cos().list().unwrap().len(), 1);
}

fn only_object(cos: &MemoryCos) -> Vec<u8> {
    let names = cos.list().unwrap();
    assert_eq!(names.len(), 1);
    names[0].clone()
}

#[test]
fn flipped_object_byte_raises_alarm() {
    let s = store(1, Shared::default());
    let v = &s.vicos[0];
    done(v.put(b"k", b"precious bytes"));
    let name = only_object(v.cos());
    let mut bytes = v.cos().get(&name).unwrap().unwrap();
    bytes[3] ^= 0x10;
    v.cos().put(&name, &bytes).unwrap();

    match v.get(b"k") {
        Err(VicosError::Alarm(a)) => assert_eq!(a.kind, AlarmKind::BadProof),
        other => panic!("expected an alarm, got {other:?}"),
    }
    // The client stays stopped.
    assert!(matches!(v.list(), Err(VicosError::Alarm(_))));
}

#[test]
fn missing_object_raises_alarm() {
    let s = store(1, Shared::default());
    let v = &s.vicos[0];
    done(v.put(b"k", b"v"));
    v.cos().del(&only_object(v.cos())).unwrap();
    assert!(matches!(v.get(b"k"), Err(VicosError::Alarm(_))));
}

#[test]
fn swapped_object_raises_alarm() {
    let s = store(1, Shared::default());
    let v = &s.vicos[0];
    done(v.put(b"k", b"old"));
    let old = only_object(v.cos());
    done(v.put(b"k", b"new"));
    let new = v.cos().list().unwrap().into_iter().find(|n| *n != old).unwrap();
    v.cos().put(&new, b"old").unwrap();
    assert!(matches!(v.get(b"k"), Err(VicosError::Alarm(_))));
}

/// A backend that refuses some operations.
#[derive(Clone, Default)]
struct Faulty {
    inner: Shared,
    fail_put: bool,
    fail_del: bool,
}

impl Cos for Faulty {
    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), CosError> {
        if self.fail_put {
            return Err(CosError::Backend("refused".into()));
        }
        self.inner.put(key, value)
    }
    fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, CosError> {
        self.inner.get(key)
    }
    fn del(&self, key: &[u8]) -> Result<(), CosError> {
        if self.fail_del {
            return Err(CosError::Backend("refused".into()));
        }
        self.inner.del(key)
    }
    fn list(&self) -> Result<Vec<Vec<u8>>, CosError> {
        self.inner.list()
    }
    fn del_prefix(&self, prefix: &[u8]) -> Result<usize, CosError> {
        if self.fail_del {
            return Err(CosError::Backend("refused".into()));
        }
        self.inner.del_prefix(prefix)
    }
}

#[test]
fn backend_failure_is_a_storage_error() {
    let s = store(
        1,
        Faulty {
            fail_put: true,
            ..Faulty::default()
        },
    );
    let v = &s.vicos[0];
    assert!(matches!(v.put(b"k", b"v"), Err(VicosError::Storage(_))));
    // Nothing reached the dictionary.
    assert_eq!(done(v.list()), Vec::<Key>::new());
}

#[test]
fn failed_cleanup_leaves_orphans_for_collection() {
    let backend = Shared::default();
    let s = store(
        1,
        Faulty {
            inner: backend.clone(),
            fail_del: true,
            ..Faulty::default()
        },
    );
    let v = &s.vicos[0];
    done(v.put(b"gone", b"1"));
    done(v.put(b"kept", b"1"));
    done(v.put(b"kept", b"2"));
    done(v.del(b"gone"));
    // A leftover of a put whose record never landed.
    let stray = ObjectRecord {
        nonce: [7; 16],
        hash: vicos_core::vicos::object_hash(b"x"),
    };
    backend.put(&stray.cos_key(&Key::from("stray")), b"x").unwrap();
    backend.put(b"not-ours", b"x").unwrap();
    assert_eq!(backend.len(), 5);

    let (client, _) = s.vicos.into_iter().next().unwrap().into_parts();
    let v = Vicos::new(client, backend.clone());
    assert_eq!(v.collect_orphans().unwrap(), 3);
    let left = backend.list().unwrap();
    assert_eq!(left.len(), 2);
    assert!(left.contains(&b"not-ours".to_vec()));
    assert_eq!(done(v.get(b"kept")), Some(b"2".to_vec()));
    assert_eq!(v.collect_orphans().unwrap(), 0);
}

#[test]
fn orphan_selection() {
    let rec = |n: u8| ObjectRecord {
        nonce: [n; 16],
        hash: vicos_core::crypto::Digest::NULL,
    };
    let k = Key::from("k");
    let names = vec![rec(1).cos_key(&k), rec(2).cos_key(&k), b"junk".to_vec()];
    let mut live = std::collections::BTreeMap::new();
    assert!(orphans(&names, &live).is_empty());
    live.insert(k.clone(), Some([2; 16]));
    assert_eq!(orphans(&names, &live), vec![names[0].clone()]);
    live.insert(k.clone(), None);
    assert_eq!(orphans(&names, &live).len(), 2);
    assert_eq!(parse_cos_key(&names[1]), Some((k, [2; 16])));
    assert_eq!(parse_cos_key(b"\0abcd"), None);
}

#[test]
fn prefix_cleanup_races_with_a_staged_put() {
    let s = store(2, Shared::default());
    let (a, b) = (&s.vicos[0], &s.vicos[1]);
    done(a.put(b"k", b"old"));
    let staged = stage_put(a.cos(), &mut ChaCha8Rng::seed_from_u64(1), b"k", b"new").unwrap();
    done(b.del(b"k"));
    a.client().invoke(staged.op()).unwrap();
    assert!(matches!(b.get(b"k"), Err(VicosError::Alarm(_))));
}

#[test]
fn deferred_cleanup_keeps_staged_objects() {
    let mut s = store(2, Shared::default());
    let b = s.vicos.pop().unwrap().with_deferred_cleanup();
    let a = &s.vicos[0];
    done(a.put(b"k", b"old"));
    let staged = stage_put(a.cos(), &mut ChaCha8Rng::seed_from_u64(1), b"k", b"new").unwrap();
    done(b.del(b"k"));
    a.client().invoke(staged.op()).unwrap();
    assert_eq!(done(b.get(b"k")), Some(b"new".to_vec()));
    assert_eq!(b.collect_orphans().unwrap(), 1);
    assert_eq!(done(a.get(b"k")), Some(b"new".to_vec()));
}

#[test]
fn concurrent_clients_are_linearizable() {
    const CLIENTS: u64 = 4;
    let mut s = store(CLIENTS, Shared::default());
    s.vicos = s.vicos.into_iter().map(Vicos::with_deferred_cleanup).collect();
    let clock = AtomicU64::new(0);
    let ops: Vec<OpEvent> = thread::scope(|scope| {
        let handles: Vec<_> = s
            .vicos
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let clock = &clock;
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                    let id = ClientId(i as u64 + 1);
                    let mut events = Vec::new();
                    for n in 0..30 {
                        let key = format!("k{}", rng.gen_range(0..3));
                        let op = match rng.gen_range(0..10) {
                            0..=3 => AdictOp::put(key.as_str(), format!("{id}-{n}").into_bytes()),
                            4..=7 => AdictOp::get(key.as_str()),
                            8 => AdictOp::del(key.as_str()),
                            _ => AdictOp::List,
                        };
                        let invoke = clock.fetch_add(1, Ordering::SeqCst);
                        let outcome = match &op {
                            AdictOp::Put { key, value } => v
                                .put(key.as_bytes(), value)
                                .unwrap()
                                .map(|()| AdictResponse::Nil),
                            AdictOp::Get { key } => v
                                .get(key.as_bytes())
                                .unwrap()
                                .map(|r| r.map_or(AdictResponse::Nil, AdictResponse::Value)),
                            AdictOp::Del { key } => v.del(key.as_bytes()).unwrap().map(|()| AdictResponse::Nil),
                            AdictOp::List => v.list().unwrap().map(AdictResponse::Keys),
                        };
                        events.push(OpEvent {
                            client: id,
                            op,
                            invoke,
                            response: Some(clock.fetch_add(1, Ordering::SeqCst)),
                            outcome: Some(outcome),
                            seqno: None,
                        });
                    }
                    events
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    assert!(ops.iter().any(|o| !o.is_aborted()));
    let mut history = History::new();
    history.ops = ops;
    assert_eq!(check_linearizable(&history, 5_000_000), Verdict::Linearizable);
}

// Lockstep exploration of two clients putting the same key while a third
// reads it. Every interleaving of object store accesses and of the server
// steps that decide statuses (INVOKE, COMMIT) is tried. Steps that touch only
// one client, and the passive phase, which changes no status or state a
// response depends on, run as soon as they are enabled.

#[derive(Debug)]
enum Prog {
    Stage(&'static [u8]),
    Invoke(AdictOp),
    Wait,
    Settle(Option<Staged>, Completed<Adict>),
    Fetch(Completed<Adict>),
    Done,
}

#[derive(Clone)]
struct Lockstep {
    server: ServerCore<Adict>,
    clients: Vec<ClientCore<Adict>>,
    to_server: Vec<VecDeque<Vec<u8>>>,
    progs: Vec<Prog>,
    staged: Vec<Option<Staged>>,
    cos: MemoryCos,
    /// Successful puts as (seqno, value); the read as (seqno, value).
    puts: Vec<(u64, &'static [u8])>,
    read: Option<(u64, Option<Vec<u8>>)>,
    nonces: u64,
}

impl Clone for Prog {
    fn clone(&self) -> Self {
        match self {
            Prog::Stage(v) => Prog::Stage(v),
            Prog::Invoke(op) => Prog::Invoke(op.clone()),
            Prog::Wait => Prog::Wait,
            Prog::Settle(s, c) => Prog::Settle(s.clone(), copy(c)),
            Prog::Fetch(c) => Prog::Fetch(copy(c)),
            Prog::Done => Prog::Done,
        }
    }
}

fn copy(c: &Completed<Adict>) -> Completed<Adict> {
    Completed {
        op: c.op.clone(),
        seqno: c.seqno,
        outcome: c.outcome.clone(),
    }
}

const V0: &[u8] = b"initial";
const V1: &[u8] = b"first writer";
const V2: &[u8] = b"second writer";

impl Lockstep {
    fn new(cfg: ClientConfig<Adict>) -> Self {
        let keys = keys(3);
        let server = ServerCore::<Adict>::from_keys(&keys, ServerConfig::default()).unwrap();
        let clients = (1..=3)
            .map(|i| ClientCore::<Adict>::from_keys(&keys, ClientId(i), cfg).unwrap())
            .collect();
        let mut w = Lockstep {
            server,
            clients,
            to_server: vec![VecDeque::new(); 3],
            progs: vec![Prog::Stage(V0), Prog::Done, Prog::Done],
            staged: vec![None; 3],
            cos: MemoryCos::new(),
            puts: Vec::new(),
            read: None,
            nonces: 0,
        };
        w.run_alone(0);
        w.puts.clear();
        w.progs = vec![
            Prog::Stage(V1),
            Prog::Stage(V2),
            Prog::Invoke(AdictOp::get("k")),
        ];
        w.eager();
        w
    }

    fn enabled(&self) -> Vec<(usize, bool)> {
        let mut v = Vec::new();
        for i in 0..3 {
            if !matches!(self.progs[i], Prog::Wait | Prog::Done) {
                v.push((i, true));
            }
            if !self.to_server[i].is_empty() {
                v.push((i, false));
            }
        }
        v
    }

    fn act(&mut self, i: usize, local: bool) {
        if local {
            self.local(i)
        } else {
            self.deliver(i)
        }
        self.eager();
    }

    fn eager(&mut self) {
        loop {
            let mut moved = false;
            for i in 0..3 {
                if let Prog::Invoke(_) = self.progs[i] {
                    self.local(i);
                    moved = true;
                }
                let passive = self.to_server[i]
                    .front()
                    .is_some_and(|b| Kind::of_bytes(b) == Some(Kind::CommitAuth));
                if passive {
                    self.deliver(i);
                    moved = true;
                }
            }
            if !moved {
                return;
            }
        }
    }

    fn local(&mut self, i: usize) {
        match std::mem::replace(&mut self.progs[i], Prog::Done) {
            Prog::Stage(value) => {
                self.nonces += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(self.nonces);
                let s = stage_put(&self.cos, &mut rng, b"k", value).unwrap();
                self.progs[i] = Prog::Invoke(s.op());
                self.staged[i] = Some(s);
            }
            Prog::Invoke(op) => {
                let msg = self.clients[i].invoke(op).unwrap();
                self.to_server[i].push_back(msg.to_bytes());
                self.progs[i] = Prog::Wait;
            }
            Prog::Settle(staged, c) => {
                let staged = staged.unwrap();
                match c.outcome {
                    Outcome::Abort => compensate(&self.cos, &staged),
                    Outcome::Done(_) => {
                        let value = [V0, V1, V2]
                            .into_iter()
                            .find(|v| vicos_core::vicos::object_hash(v) == staged.record.hash)
                            .unwrap();
                        self.puts.push((c.seqno, value));
                    }
                }
            }
            Prog::Fetch(c) => {
                let key = Key::from("k");
                if let Outcome::Done(r) = &c.outcome {
                    match fetch(&self.cos, &key, r) {
                        Ok(v) => self.read = Some((c.seqno, v)),
                        Err(e) => panic!("reader saw {e}"),
                    }
                }
            }
            p => unreachable!("{p:?} is not a local step"),
        }
    }

    fn deliver(&mut self, i: usize) {
        let bytes = self.to_server[i].pop_front().unwrap();
        self.server.enqueue_bytes(ClientId(i as u64 + 1), &bytes).unwrap();
        while let Some((_, out)) = self.server.step() {
            for (to, msg) in out.unwrap() {
                let j = (to.0 - 1) as usize;
                let step = self.clients[j]
                    .on_bytes(&msg.to_bytes())
                    .unwrap_or_else(|a| panic!("client {to} alarmed: {a}"));
                if let Some(m) = step.send {
                    self.to_server[j].push_back(m.to_bytes());
                }
                if let Some(c) = step.completed {
                    self.progs[j] = match self.staged[j].take() {
                        Some(s) => Prog::Settle(Some(s), c),
                        None => Prog::Fetch(c),
                    };
                }
            }
        }
    }

    fn run_alone(&mut self, i: usize) {
        while let Some(&(j, local)) = self.enabled().iter().find(|(j, _)| *j == i) {
            self.act(j, local);
        }
    }

    /// Value the final state must hold.
    fn expected(&self) -> &'static [u8] {
        self.puts.iter().max().map_or(V0, |(_, v)| v)
    }
}

fn explore(w: Lockstep, leaves: &mut u64, check: &dyn Fn(&Lockstep)) {
    let enabled = w.enabled();
    if enabled.is_empty() {
        *leaves += 1;
        check(&w);
        return;
    }
    for (i, local) in enabled {
        let mut next = w.clone();
        next.act(i, local);
        explore(next, leaves, check);
    }
}

fn final_read(w: &Lockstep) -> Option<Vec<u8>> {
    let mut w = w.clone();
    w.progs[2] = Prog::Invoke(AdictOp::get("k"));
    w.read = None;
    w.run_alone(2);
    w.read.expect("final read succeeds").1
}

fn check_isolation(w: &Lockstep) {
    assert!(w.clients.iter().all(|c| c.alarm().is_none()));
    if let Some((seqno, value)) = &w.read {
        let want = w
            .puts
            .iter()
            .filter(|(s, _)| s < seqno)
            .max()
            .map_or(V0, |(_, v)| v);
        assert_eq!(value.as_deref(), Some(want));
    }
    assert_eq!(final_read(w).as_deref(), Some(w.expected()));
}

#[test]
fn same_key_puts_never_expose_mismatched_objects() {
    let commutative = ClientConfig::<Adict> {
        relation: adict::commutes_with_all,
        ..ClientConfig::default()
    };
    let mut leaves = 0;
    explore(Lockstep::new(commutative), &mut leaves, &check_isolation);
    assert!(leaves > 1000, "{leaves} interleavings");

    // Some schedule does abort one of the puts.
    let mut w = Lockstep::new(commutative);
    for (i, local) in [(0, true), (1, true), (0, false), (1, false)] {
        w.act(i, local);
    }
    for i in 0..3 {
        w.run_alone(i);
    }
    assert_eq!(w.puts.len(), 1);
    check_isolation(&w);
    // Its compensation removed its object.
    assert_eq!(w.cos.len(), 2);
}

#[test]
fn compatible_same_key_puts_both_land() {
    let mut leaves = 0;
    explore(Lockstep::new(ClientConfig::default()), &mut leaves, &|w| {
        check_isolation(w);
        assert_eq!(w.puts.len(), 2);
        // Three versions under three distinct names.
        assert_eq!(w.cos.len(), 3);
    });
    assert!(leaves > 1000, "{leaves} interleavings");
}
