//! Declarative attack scripts and the catalog the harness runs them from.
//!
//! A script is a list of rules, each matching messages in transit by
//! direction, kind and client, and rewriting the matched ones. Attacks
//! therefore start from the honest server's traffic. A script may also
//! split the server into two forks and later merge them again.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::sim::{rewrite, Adversary, Direction, World};
use crate::adict::{AdictProof, AdictResponse, Key};
use crate::crypto::ClientId;
use crate::protocol::{AuthRecord, Kind, Message, Status};

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttackScript {
    pub name: String,
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub split: Option<SplitView>,
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rule {
    #[serde(default = "to_client")]
    pub direction: Direction,
    #[serde(default)]
    pub kind: Option<Kind>,
    #[serde(default)]
    pub client: Option<u64>,
    /// Matching messages to let through before acting.
    #[serde(default)]
    pub skip: u64,
    /// How many times to act.
    #[serde(default = "once")]
    pub times: u64,
    pub action: Action,
}

fn to_client() -> Direction {
    Direction::ToClient
}

fn once() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Action {
    Drop,
    /// Deliver the matching message from `ago` matches back instead.
    Replay { ago: usize },
    Mutate { mutation: Mutation },
    /// Flip one random bit.
    FlipBit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Change the response in a reply.
    TamperResponse,
    /// Change the response in an update-auth.
    TamperUpdate,
    /// Use the proof from an earlier reply.
    SwapProof,
    /// Use an earlier authenticator in a reply.
    StaleAuth,
    /// Use an earlier authenticator as the predecessor in an update-auth.
    StaleUpdateAuth,
    /// Swap two pending operations.
    ReorderPending,
    /// Leave out a pending operation of another client.
    OmitPending,
    /// Flip the status of a cleared operation.
    FlipStatus,
    /// Empty a signature in a reply.
    StripSignature,
    /// Claim a later sequence number.
    SkipSeqno,
}

/// Fork the server once `after_ops` operations completed in total, putting
/// a random proper subset of clients on a copy; merge the forks back once
/// both sides completed `ops_each` more operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitView {
    pub after_ops: u64,
    pub ops_each: u64,
}

impl AttackScript {
    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scripts serialize")
    }

    fn single(name: &str, kind: Kind, skip: u64, action: Action) -> Self {
        AttackScript {
            name: name.into(),
            rules: vec![Rule {
                direction: Direction::ToClient,
                kind: Some(kind),
                client: None,
                skip,
                times: 1,
                action,
            }],
            split: None,
        }
    }

    fn mutate(name: &str, kind: Kind, skip: u64, mutation: Mutation) -> Self {
        Self::single(name, kind, skip, Action::Mutate { mutation })
    }
}

/// The fixed set of message-level attacks. `skip` moves the point of attack.
/// Tampering with stored objects lives with the object store.
pub fn catalog(skip: u64) -> Vec<AttackScript> {
    use Mutation::*;
    vec![
        AttackScript::mutate("response-tamper", Kind::Reply, skip, TamperResponse),
        AttackScript::mutate("update-response-tamper", Kind::UpdateAuth, skip, TamperUpdate),
        AttackScript::mutate("proof-swap", Kind::Reply, skip, SwapProof),
        AttackScript::mutate("stale-auth-reply", Kind::Reply, skip, StaleAuth),
        AttackScript::mutate("stale-auth-update", Kind::UpdateAuth, skip, StaleUpdateAuth),
        AttackScript::mutate("pending-reorder", Kind::Reply, skip, ReorderPending),
        AttackScript::mutate("operation-omission", Kind::Reply, skip, OmitPending),
        AttackScript::mutate("status-flip", Kind::Reply, skip, FlipStatus),
        AttackScript::mutate("signature-strip", Kind::Reply, skip, StripSignature),
        AttackScript::mutate("seqno-skip", Kind::Reply, skip, SkipSeqno),
        AttackScript::single("reply-replay", Kind::Reply, skip, Action::Replay { ago: 1 }),
        split_view(skip),
    ]
}

pub fn split_view(after_ops: u64) -> AttackScript {
    AttackScript {
        name: "split-view-fork".into(),
        rules: Vec::new(),
        split: Some(SplitView {
            after_ops,
            ops_each: 1,
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Before,
    Forked,
    Joined,
}

/// Runs an [`AttackScript`] inside the simulator.
pub struct Scripted {
    script: AttackScript,
    matched: Vec<u64>,
    acted: Vec<u64>,
    /// Earlier matches per rule and client, for replays.
    seen: Vec<BTreeMap<ClientId, Vec<Vec<u8>>>>,
    proofs: Vec<AdictProof>,
    auths: Vec<AuthRecord>,
    fired: u64,
    phase: Phase,
    groups: (Vec<ClientId>, Vec<ClientId>),
    base: BTreeMap<ClientId, u64>,
}

impl Scripted {
    pub fn new(script: AttackScript) -> Self {
        let n = script.rules.len();
        Scripted {
            script,
            matched: vec![0; n],
            acted: vec![0; n],
            seen: vec![BTreeMap::new(); n],
            proofs: Vec::new(),
            auths: Vec::new(),
            fired: 0,
            phase: Phase::Before,
            groups: (Vec::new(), Vec::new()),
            base: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.script.name
    }

    /// Remembers material a later mutation may reuse.
    fn observe(&mut self, bytes: &[u8]) {
        let Some(Kind::Reply | Kind::UpdateAuth) = Kind::of_bytes(bytes) else {
            return;
        };
        let Some(m) = rewrite_peek(bytes) else {
            return;
        };
        match m {
            Message::Reply(r) => {
                self.proofs.push(r.proof);
                self.auths.push(r.auth);
            }
            Message::UpdateAuth(u) => self.auths.push(u.prev_auth),
            _ => {}
        }
    }

    fn apply(&self, rng: &mut impl Rng, mutation: Mutation, bytes: &[u8]) -> Option<Vec<u8>> {
        rewrite(bytes, |m| mutate(rng, mutation, m, &self.proofs, &self.auths))
    }

    fn tick_split(&mut self, world: &mut World, quiet: bool) {
        let Some(split) = self.script.split else {
            return;
        };
        let total = |w: &World| w.clients().iter().map(|c| w.completed(*c)).sum::<u64>();
        match self.phase {
            Phase::Before if total(world) >= split.after_ops => {
                world.hold = true;
                if quiet {
                    let mut ids = world.clients();
                    if ids.len() < 2 {
                        world.hold = false;
                        return;
                    }
                    ids.shuffle(&mut world.rng);
                    let cut = world.rng.gen_range(1..ids.len());
                    let b = ids.split_off(cut);
                    world.fork(&b);
                    self.base = world.clients().iter().map(|c| (*c, world.completed(*c))).collect();
                    self.groups = (ids, b);
                    self.phase = Phase::Forked;
                    self.fired += 1;
                    world.hold = false;
                }
            }
            Phase::Forked => {
                let progressed = |g: &[ClientId], w: &World| {
                    g.iter().map(|c| w.completed(*c) - self.base[c]).sum::<u64>() >= split.ops_each
                };
                if progressed(&self.groups.0, world) && progressed(&self.groups.1, world) {
                    world.hold = true;
                    if quiet {
                        let target = world.replica_of(self.groups.0[0]);
                        for c in &self.groups.1 {
                            world.attach(*c, target);
                        }
                        self.phase = Phase::Joined;
                        self.fired += 1;
                        world.hold = false;
                    }
                }
            }
            _ => {}
        }
    }
}

fn rewrite_peek(bytes: &[u8]) -> Option<Message<crate::adict::Adict>> {
    use crate::wire::Decode;
    Message::from_bytes(bytes).ok()
}

fn tamper(r: &mut AdictResponse) {
    match r {
        AdictResponse::Nil => *r = AdictResponse::Value(b"forged".to_vec()),
        AdictResponse::Value(v) => {
            if v.is_empty() {
                v.push(0);
            } else {
                v[0] ^= 1;
            }
        }
        AdictResponse::Keys(ks) => {
            if ks.pop().is_none() {
                ks.push(Key::from("forged"));
            }
        }
    }
}

/// Applies `mutation` in place; `false` when it does not apply to `m`.
fn mutate(
    rng: &mut impl Rng,
    mutation: Mutation,
    m: &mut Message<crate::adict::Adict>,
    proofs: &[AdictProof],
    auths: &[AuthRecord],
) -> bool {
    use Mutation::*;
    match (mutation, m) {
        (TamperResponse, Message::Reply(r)) => {
            tamper(&mut r.response);
            true
        }
        (TamperUpdate, Message::UpdateAuth(u)) => match &mut u.response {
            Some(r) => {
                tamper(r);
                true
            }
            None => false,
        },
        (SwapProof, Message::Reply(r)) => {
            let other: Vec<_> = proofs.iter().filter(|p| **p != r.proof).collect();
            match other.choose(rng) {
                Some(p) => {
                    r.proof = (*p).clone();
                    true
                }
                None => false,
            }
        }
        (StaleAuth, Message::Reply(r)) => {
            let other: Vec<_> = auths.iter().filter(|a| **a != r.auth).collect();
            match other.choose(rng) {
                Some(a) => {
                    r.auth = (*a).clone();
                    true
                }
                None => false,
            }
        }
        (StaleUpdateAuth, Message::UpdateAuth(u)) => {
            let other: Vec<_> = auths.iter().filter(|a| **a != u.prev_auth).collect();
            match other.choose(rng) {
                Some(a) => {
                    u.prev_auth = (*a).clone();
                    true
                }
                None => false,
            }
        }
        (ReorderPending, Message::Reply(r)) => {
            let n = r.pending.len();
            let pairs: Vec<(usize, usize)> = (0..n.saturating_sub(1))
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|(i, j)| r.pending[*i] != r.pending[*j])
                .collect();
            match pairs.choose(rng) {
                Some(&(i, j)) => {
                    r.pending.swap(i, j);
                    true
                }
                None => false,
            }
        }
        (OmitPending, Message::Reply(r)) => {
            let me = r.pending.last().map(|p| p.client);
            let others: Vec<usize> = (0..r.pending.len().saturating_sub(1))
                .filter(|k| Some(r.pending[*k].client) != me)
                .collect();
            match others.choose(rng) {
                Some(&k) => {
                    r.pending.remove(k);
                    r.seqno -= 1;
                    true
                }
                None => false,
            }
        }
        (FlipStatus, Message::Reply(r)) => {
            let targets: Vec<usize> = (0..r.cleared_ops.len())
                .filter(|k| r.cleared_ops[*k].client != ClientId::GENESIS)
                .collect();
            match targets.choose(rng) {
                Some(&k) => {
                    let rec = &mut r.cleared_ops[k];
                    rec.status = match rec.status {
                        Status::Success => Status::Abort,
                        Status::Abort => Status::Success,
                    };
                    true
                }
                None => false,
            }
        }
        (StripSignature, Message::Reply(r)) => {
            let k = rng.gen_range(0..r.pending.len());
            r.pending[k].invoke_sig.bytes.clear();
            true
        }
        (SkipSeqno, Message::Reply(r)) => {
            r.seqno += 1;
            true
        }
        _ => false,
    }
}

impl Adversary for Scripted {
    fn intercept(&mut self, world: &mut World, dir: Direction, client: ClientId, msg: Vec<u8>) -> Vec<Vec<u8>> {
        let kind = Kind::of_bytes(&msg);
        let mut out = msg;
        if dir == Direction::ToServer && self.phase == Phase::Joined && kind == Some(Kind::Invoke) {
            // a merged replica may lag behind what the client cleared
            let applied = world.server_of(client).applied();
            if let Some(b) = rewrite(&out, |m| match m {
                Message::Invoke(i) if i.cleared > applied => {
                    i.cleared = applied;
                    true
                }
                _ => false,
            }) {
                out = b;
            }
        }
        for i in 0..self.script.rules.len() {
            let rule = &self.script.rules[i];
            if rule.direction != dir
                || rule.kind.is_some_and(|k| Some(k) != kind)
                || rule.client.is_some_and(|c| c != client.0)
            {
                continue;
            }
            let history = self.seen[i].entry(client).or_default();
            history.push(out.clone());
            self.matched[i] += 1;
            if self.matched[i] <= rule.skip || self.acted[i] >= rule.times {
                continue;
            }
            let result = match &rule.action {
                Action::Drop => Some(Vec::new()),
                Action::Replay { ago } => {
                    let n = history.len();
                    (n > *ago && history[n - 1 - ago] != out).then(|| vec![history[n - 1 - ago].clone()])
                }
                Action::Mutate { mutation } => {
                    let mutation = *mutation;
                    self.apply(&mut world.rng, mutation, &out).map(|b| vec![b])
                }
                Action::FlipBit => {
                    let mut b = out.clone();
                    let bit = world.rng.gen_range(0..b.len() * 8);
                    b[bit / 8] ^= 1 << (bit % 8);
                    Some(vec![b])
                }
            };
            if let Some(r) = result {
                self.acted[i] += 1;
                self.fired += 1;
                if dir == Direction::ToClient {
                    self.observe(&out);
                }
                return r;
            }
        }
        if dir == Direction::ToClient {
            self.observe(&out);
        }
        vec![out]
    }

    fn tick(&mut self, world: &mut World, quiet: bool) {
        self.tick_split(world, quiet);
    }

    fn fired(&self) -> u64 {
        self.fired
    }
}
