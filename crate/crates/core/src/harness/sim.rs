//! A deterministic simulator: clients and one or more server replicas
//! exchange encoded messages through per-client FIFO queues, and a seeded
//! scheduler picks which enabled event runs next. An [`Adversary`] sees
//! every message in transit and may pass, drop, rewrite or multiply it,
//! and may split the server into forks.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::history::{History, Kvs};
use super::lincheck::ViewEntry;
use crate::adict::{Adict, AdictOp, AdictResponse};
use crate::ads::{Outcome, Relation};
use crate::client::{ClientConfig, ClientCore, FaultAlarm};
use crate::crypto::{ClientId, Digest, KeyConfig, Scheme};
use crate::protocol::{chain_hash, setup, Kind, Message, Status};
use crate::server::{ServerConfig, ServerCore};
use crate::wire::{Decode, Encode};

#[derive(Clone, Copy)]
pub struct SimConfig {
    pub clients: u64,
    pub mode: Scheme,
    pub query_fast_path: bool,
    pub prune_aborted: bool,
    pub pending_limit: usize,
    pub relation: Relation<Adict>,
    /// Hard stop, in scheduler steps.
    pub max_steps: u64,
    /// `None`: every enabled step is equally likely. `Some(d)`: each
    /// message and each client's next invoke becomes due 1 to `d` time
    /// units after it was sent or enabled, and the earliest due step runs.
    pub latency: Option<u64>,
    /// Under a latency schedule, a client's next invoke becomes due 1 to
    /// `think` time units after its previous operation completed; 0 uses
    /// the message latency. Stands in for work outside the protocol, such
    /// as object store transfers.
    pub think: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            clients: 3,
            mode: Scheme::Mac,
            query_fast_path: false,
            prune_aborted: false,
            pending_limit: 128,
            relation: <Adict as crate::ads::Ads>::compatible,
            max_steps: 1_000_000,
            latency: None,
            think: 0,
        }
    }
}

/// Server replicas and which client talks to which. Forking clones the
/// replica of a group, so both sides start from the same state.
pub struct World {
    pub rng: ChaCha8Rng,
    pub now: u64,
    pub servers: Vec<ServerCore<Adict>>,
    /// While set, no client starts a new operation.
    pub hold: bool,
    partition: BTreeMap<ClientId, usize>,
    completed: BTreeMap<ClientId, u64>,
}

impl World {
    pub fn server_of(&self, client: ClientId) -> &ServerCore<Adict> {
        &self.servers[self.partition[&client]]
    }

    pub fn replica_of(&self, client: ClientId) -> usize {
        self.partition[&client]
    }

    pub fn clients(&self) -> Vec<ClientId> {
        self.partition.keys().copied().collect()
    }

    /// Moves `group` onto a fresh copy of the replica its first member uses.
    pub fn fork(&mut self, group: &[ClientId]) -> usize {
        let from = self.partition[&group[0]];
        self.servers.push(self.servers[from].clone());
        let idx = self.servers.len() - 1;
        for c in group {
            self.partition.insert(*c, idx);
        }
        idx
    }

    /// Points `client` at replica `idx`.
    pub fn attach(&mut self, client: ClientId, idx: usize) {
        self.partition.insert(client, idx);
    }

    /// Operations `client` has completed so far.
    pub fn completed(&self, client: ClientId) -> u64 {
        self.completed.get(&client).copied().unwrap_or(0)
    }
}

/// Direction of a message in transit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ToClient,
    ToServer,
}

/// The network between clients and the server replicas.
pub trait Adversary {
    /// Returns what to deliver in place of `msg`: nothing drops it, and
    /// several messages are delivered in order.
    fn intercept(&mut self, world: &mut World, dir: Direction, client: ClientId, msg: Vec<u8>) -> Vec<Vec<u8>> {
        let _ = (world, dir, client);
        vec![msg]
    }

    /// Called before every scheduling step; `quiet` when no message is in
    /// transit or queued at any replica.
    fn tick(&mut self, world: &mut World, quiet: bool) {
        let _ = (world, quiet);
    }

    /// How many times the adversary deviated from honest behavior.
    fn fired(&self) -> u64 {
        0
    }
}

/// Passes everything through.
pub struct Honest;

impl Adversary for Honest {}

/// A completed operation whose response differs from what the replica's
/// state implied when it answered.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corruption {
    pub client: ClientId,
    pub seqno: u64,
    pub got: AdictResponse,
    pub expected: AdictResponse,
}

struct InTransit {
    due: u64,
    bytes: Vec<u8>,
    /// Reference response for a REPLY, computed from the replica's state
    /// by the plain store when the reply was made.
    expected: Option<AdictResponse>,
    tampered: bool,
}

struct SimClient {
    core: ClientCore<Adict>,
    script: VecDeque<AdictOp>,
    to_server: VecDeque<(u64, Vec<u8>)>,
    to_client: VecDeque<InTransit>,
    invoke_due: u64,
    /// Own completed ops: seqno → (op, success).
    done: BTreeMap<u64, (AdictOp, bool)>,
    /// Replica that produced the last completed reply.
    last_replica: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Invoke(ClientId),
    ToServer(ClientId),
    ToClient(ClientId),
    Serve(usize),
}

pub struct Sim {
    cfg: SimConfig,
    pub world: World,
    keys: KeyConfig,
    clients: BTreeMap<ClientId, SimClient>,
    history: History,
    alarms: BTreeMap<ClientId, FaultAlarm>,
    corrupted: Vec<Corruption>,
    served: Vec<Kind>,
    steps: u64,
    delivered: u64,
    /// Virtual time of the latency schedule.
    clock: u64,
}

/// Everything a run produced.
pub struct ScenarioOutcome {
    pub alarms: BTreeMap<ClientId, FaultAlarm>,
    pub history: History,
    /// Completed operations with a wrong response; must stay empty.
    pub corrupted: Vec<Corruption>,
    /// Kinds in the order the replicas dequeued them.
    pub served: Vec<Kind>,
    /// Messages handed to a client or replica, after interception.
    pub delivered: u64,
    pub steps: u64,
    /// Script operations never started, per client.
    pub left: BTreeMap<ClientId, usize>,
    pub fired: u64,
    /// Per-client views reconstructed from the replicas, checked against
    /// each client's hash chain; `Err` names a client whose chain does not
    /// match.
    pub views: Result<BTreeMap<ClientId, Vec<ViewEntry>>, ClientId>,
}

impl ScenarioOutcome {
    pub fn alarmed(&self) -> bool {
        !self.alarms.is_empty()
    }
}

impl Sim {
    /// A fresh system with keys derived from `seed`; `scripts[i]` is the
    /// workload of client `i + 1`.
    pub fn new(cfg: SimConfig, seed: u64, scripts: Vec<Vec<AdictOp>>) -> Self {
        assert_eq!(scripts.len() as u64, cfg.clients, "one script per client");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = setup::<Adict, _>(cfg.mode, cfg.clients, &mut rng);
        let scfg = ServerConfig {
            pending_limit: cfg.pending_limit,
            query_fast_path: cfg.query_fast_path,
            prune_aborted: cfg.prune_aborted,
            // keep every record so views can be rebuilt afterwards
            clients: Vec::new(),
        };
        let server = ServerCore::from_keys(&keys, scfg).expect("fresh keys");
        let ccfg = ClientConfig {
            query_fast_path: cfg.query_fast_path,
            prune_aborted: cfg.prune_aborted,
            relation: cfg.relation,
        };
        let mut clients = BTreeMap::new();
        let mut partition = BTreeMap::new();
        for (i, script) in scripts.into_iter().enumerate() {
            let id = ClientId(i as u64 + 1);
            let core = ClientCore::from_keys(&keys, id, ccfg).expect("fresh keys");
            clients.insert(
                id,
                SimClient {
                    core,
                    script: script.into(),
                    to_server: VecDeque::new(),
                    to_client: VecDeque::new(),
                    invoke_due: 0,
                    done: BTreeMap::new(),
                    last_replica: None,
                },
            );
            partition.insert(id, 0);
        }
        Sim {
            cfg,
            world: World {
                rng,
                now: 0,
                servers: vec![server],
                hold: false,
                partition,
                completed: BTreeMap::new(),
            },
            keys,
            clients,
            history: History::new(),
            alarms: BTreeMap::new(),
            corrupted: Vec::new(),
            served: Vec::new(),
            steps: 0,
            delivered: 0,
            clock: 0,
        }
    }

    pub fn keys(&self) -> &KeyConfig {
        &self.keys
    }

    fn quiet(&self) -> bool {
        self.clients
            .values()
            .all(|c| c.to_server.is_empty() && c.to_client.is_empty())
            && self.world.servers.iter().all(|s| !s.has_queued())
    }

    /// Enabled steps with the time they are due.
    fn enabled(&self) -> Vec<(Event, u64)> {
        let mut ev = Vec::new();
        for (id, c) in &self.clients {
            let alarmed = self.alarms.contains_key(id);
            if !alarmed && !self.world.hold && !c.core.is_busy() && !c.script.is_empty() {
                ev.push((Event::Invoke(*id), c.invoke_due));
            }
            if let Some((due, _)) = c.to_server.front() {
                ev.push((Event::ToServer(*id), *due));
            }
            if let Some(m) = c.to_client.front() {
                ev.push((Event::ToClient(*id), m.due));
            }
        }
        for (i, s) in self.world.servers.iter().enumerate() {
            if s.has_queued() {
                ev.push((Event::Serve(i), self.clock));
            }
        }
        ev
    }

    /// When something sent now behind `tail` becomes due.
    fn due(&mut self, tail: Option<u64>) -> u64 {
        match self.cfg.latency {
            None => 0,
            Some(d) => (self.clock + self.world.rng.gen_range(1..=d.max(1))).max(tail.unwrap_or(0)),
        }
    }

    fn pick(&mut self) -> Option<Event> {
        let ev = self.enabled();
        if self.cfg.latency.is_none() {
            return ev.choose(&mut self.world.rng).map(|(e, _)| *e);
        }
        let first = ev.iter().map(|(_, due)| *due).min()?;
        let ready: Vec<Event> = ev.into_iter().filter(|(_, due)| *due == first).map(|(e, _)| e).collect();
        self.clock = self.clock.max(first);
        ready.choose(&mut self.world.rng).copied()
    }

    /// Runs until nothing is enabled or the step limit is hit.
    pub fn run(mut self, adversary: &mut dyn Adversary) -> ScenarioOutcome {
        while self.steps < self.cfg.max_steps {
            let quiet = self.quiet();
            adversary.tick(&mut self.world, quiet);
            let Some(e) = self.pick() else {
                break;
            };
            self.steps += 1;
            self.world.now += 1;
            match e {
                Event::Invoke(id) => self.invoke(id),
                Event::ToServer(id) => self.deliver_to_server(id, adversary),
                Event::ToClient(id) => self.deliver_to_client(id, adversary),
                Event::Serve(i) => self.serve(i),
            }
        }
        self.finish(adversary)
    }

    fn invoke(&mut self, id: ClientId) {
        let tail = self.clients[&id].to_server.back().map(|m| m.0);
        let due = self.due(tail);
        let c = self.clients.get_mut(&id).expect("known client");
        let op = c.script.pop_front().expect("enabled");
        match c.core.invoke(op.clone()) {
            Ok(msg) => {
                c.to_server.push_back((due, msg.to_bytes()));
                self.history.invoke(id, op, self.world.now);
            }
            Err(e) => log::debug!("{id} could not invoke: {e}"),
        }
    }

    fn deliver_to_server(&mut self, id: ClientId, adversary: &mut dyn Adversary) {
        let (_, bytes) = self.clients.get_mut(&id).and_then(|c| c.to_server.pop_front()).expect("enabled");
        for b in adversary.intercept(&mut self.world, Direction::ToServer, id, bytes) {
            self.delivered += 1;
            let idx = self.world.partition[&id];
            if let Err(e) = self.world.servers[idx].enqueue_bytes(id, &b) {
                log::debug!("replica {idx}: {e}");
            }
        }
    }

    fn serve(&mut self, idx: usize) {
        let Some((kind, out)) = self.world.servers[idx].step() else {
            return;
        };
        self.served.push(kind);
        let out = match out {
            Ok(out) => out,
            Err(e) => {
                log::debug!("replica {idx}: {e}");
                return;
            }
        };
        for (to, msg) in out {
            let expected = match &msg {
                Message::Reply(r) => Some(self.reference(idx, to, r)),
                _ => None,
            };
            let Some(tail) = self.clients.get(&to).map(|c| c.to_client.back().map(|m| m.due)) else {
                continue;
            };
            let due = self.due(tail);
            if let Some(c) = self.clients.get_mut(&to) {
                c.to_client.push_back(InTransit {
                    due,
                    bytes: msg.to_bytes(),
                    expected,
                    tampered: false,
                });
            }
        }
    }

    /// What the plain store says `to`'s reply should contain: its own
    /// successful pending ops and the current op, run on the replica state.
    fn reference(&self, idx: usize, to: ClientId, r: &crate::protocol::Reply<Adict>) -> AdictResponse {
        let done = &self.clients[&to].done;
        let base = r.applied;
        let last = r.pending.len() - 1;
        let mu: Vec<AdictOp> = r
            .pending
            .iter()
            .enumerate()
            .filter(|(k, p)| {
                p.client == to && (*k == last || done.get(&(base + 1 + *k as u64)).is_some_and(|(_, ok)| *ok))
            })
            .map(|(_, p)| p.op.clone())
            .collect();
        Kvs(self.world.servers[idx].state().values().clone()).run(&mu)
    }

    fn deliver_to_client(&mut self, id: ClientId, adversary: &mut dyn Adversary) {
        let msg = self.clients.get_mut(&id).and_then(|c| c.to_client.pop_front()).expect("enabled");
        let original = msg.bytes.clone();
        let out = adversary.intercept(&mut self.world, Direction::ToClient, id, msg.bytes);
        let tampered = msg.tampered || out.len() != 1 || out[0] != original;
        let replica = self.world.partition[&id];
        for bytes in out {
            let tail = self.clients[&id].to_server.back().map(|m| m.0);
            let due = self.due(tail);
            let think = (self.cfg.think > 0).then(|| self.clock + self.world.rng.gen_range(1..=self.cfg.think));
            self.delivered += 1;
            if self.alarms.contains_key(&id) {
                continue;
            }
            let c = self.clients.get_mut(&id).expect("known client");
            match c.core.on_bytes(&bytes) {
                Ok(step) => {
                    if let Some(m) = step.send {
                        c.to_server.push_back((due, m.to_bytes()));
                    }
                    if let Some(done) = step.completed {
                        c.invoke_due = think.unwrap_or(due);
                        let success = !done.outcome.is_abort();
                        c.done.insert(done.seqno, (done.op.clone(), success));
                        c.last_replica = Some(replica);
                        *self.world.completed.entry(id).or_default() += 1;
                        if let (Outcome::Done(got), Some(expected)) = (&done.outcome, &msg.expected) {
                            if got != expected {
                                if !tampered {
                                    log::error!("{id}: honest reply disagrees with the plain store");
                                }
                                self.corrupted.push(Corruption {
                                    client: id,
                                    seqno: done.seqno,
                                    got: got.clone(),
                                    expected: expected.clone(),
                                });
                            }
                        }
                        self.history.respond(id, done.seqno, done.outcome, self.world.now);
                    }
                }
                Err(a) => {
                    self.alarms.insert(id, a);
                }
            }
        }
    }

    /// Rebuilds what each client saw from the replica that served its last
    /// completed operation, and checks it against the client's hash chain.
    fn views(&self) -> Result<BTreeMap<ClientId, Vec<ViewEntry>>, ClientId> {
        let mut views = BTreeMap::new();
        for (id, c) in &self.clients {
            let (Some(idx), Some((&t, _))) = (c.last_replica, c.done.last_key_value()) else {
                views.insert(*id, Vec::new());
                continue;
            };
            let server = &self.world.servers[idx];
            let mut h = Digest::NULL;
            let mut view = Vec::new();
            for l in 1..=t {
                let Some((client, op, status)) = server.op_at(l) else {
                    return Err(*id);
                };
                h = chain_hash(&h, op, l, client);
                // ops never committed took no effect anywhere
                if let Some(status) = status {
                    view.push(ViewEntry {
                        seqno: l,
                        client,
                        op: op.clone(),
                        success: status == Status::Success,
                    });
                }
            }
            if c.core.chain_entry(t) != Some(h) {
                return Err(*id);
            }
            views.insert(*id, view);
        }
        Ok(views)
    }

    fn finish(self, adversary: &mut dyn Adversary) -> ScenarioOutcome {
        let views = self.views();
        ScenarioOutcome {
            left: self.clients.iter().map(|(id, c)| (*id, c.script.len())).collect(),
            alarms: self.alarms,
            history: self.history,
            corrupted: self.corrupted,
            served: self.served,
            delivered: self.delivered,
            steps: self.steps,
            fired: adversary.fired(),
            views,
        }
    }
}

/// A random workload over `keys` keys: puts, gets, deletes and lists.
pub fn random_script(rng: &mut impl Rng, ops: usize, keys: usize) -> Vec<AdictOp> {
    (0..ops)
        .map(|_| {
            let key = format!("k{}", rng.gen_range(0..keys));
            match rng.gen_range(0..10) {
                0..=3 => AdictOp::put(key.as_str(), vec![rng.gen(); rng.gen_range(1..4)]),
                4..=6 => AdictOp::get(key.as_str()),
                7..=8 => AdictOp::del(key.as_str()),
                _ => AdictOp::List,
            }
        })
        .collect()
}

/// Decodes, rewrites and re-encodes a message. `None` when it does not
/// decode or `f` declines by returning `false`.
pub fn rewrite(bytes: &[u8], f: impl FnOnce(&mut Message<Adict>) -> bool) -> Option<Vec<u8>> {
    let mut m = Message::<Adict>::from_bytes(bytes).ok()?;
    f(&mut m).then(|| m.to_bytes())
}
