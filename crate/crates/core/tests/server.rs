use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vicos_core::client::{ClientConfig, ClientCore};
use vicos_core::protocol::{setup, Kind, Message};
use vicos_core::server::{ServerConfig, ServerCore, ServerError};
use vicos_core::wire::{Decode, Encode};
use vicos_core::{Adict, AdictOp, AdictResponse, ClientId, KeyConfig, Outcome, Scheme};

fn keys(n: u64) -> KeyConfig {
    setup::<Adict, _>(Scheme::PublicKey, n, &mut ChaCha8Rng::seed_from_u64(11))
}

fn client(keys: &KeyConfig, i: u64) -> ClientCore<Adict> {
    ClientCore::from_keys(keys, ClientId(i), ClientConfig::default()).unwrap()
}

fn server(keys: &KeyConfig, pending_limit: usize) -> ServerCore<Adict> {
    let cfg = ServerConfig {
        pending_limit,
        ..ServerConfig::default()
    };
    ServerCore::from_keys(keys, cfg).unwrap()
}

fn copy(m: &Message<Adict>) -> Message<Adict> {
    Message::from_bytes(&m.to_bytes()).unwrap()
}

/// Delivers messages between `clients` and `server` until nothing moves.
/// Returns the completed outcomes in completion order.
fn settle(
    server: &mut ServerCore<Adict>,
    clients: &mut [ClientCore<Adict>],
    mut wire: VecDeque<(ClientId, Message<Adict>)>,
) -> Vec<(ClientId, Outcome<AdictResponse>)> {
    let mut done = Vec::new();
    while let Some((to, msg)) = wire.pop_front() {
        let c = &mut clients[to.0 as usize - 1];
        let step = c.on_message(msg).unwrap();
        if let Some(m) = step.send {
            for (to, reply) in server.handle(to, m).unwrap() {
                wire.push_back((to, reply));
            }
        }
        if let Some(d) = step.completed {
            done.push((to, d.outcome));
        }
    }
    done
}

#[test]
fn invokes_beyond_the_pending_limit_wait_in_a_buffer() {
    let keys = keys(3);
    let mut s = server(&keys, 1);
    let mut cs: Vec<_> = (1..=3).map(|i| client(&keys, i)).collect();

    let mut wire = VecDeque::new();
    for (i, c) in cs.iter_mut().enumerate() {
        let m = c.invoke(AdictOp::put(format!("k{i}").into_bytes(), vec![i as u8])).unwrap();
        wire.extend(s.handle(c.id(), m).unwrap());
    }
    assert_eq!(wire.len(), 1, "only the first invoke is answered");
    assert_eq!((s.pending_len(), s.buffered_len()), (1, 2));

    let done = settle(&mut s, &mut cs, wire);
    assert_eq!(done.len(), 3);
    assert!(done.iter().all(|(_, o)| matches!(o, Outcome::Done(_))), "no aborts with one op pending at a time");
    assert_eq!(s.buffered_len(), 0);
    assert_eq!(s.applied(), 3);
    assert!(s.is_quiescent());
}

#[test]
fn commits_are_served_before_queued_invokes() {
    let keys = keys(2);
    let mut s = server(&keys, 128);
    let mut a = client(&keys, 1);
    let mut b = client(&keys, 2);

    let inv = a.invoke(AdictOp::put("x", b"1".to_vec())).unwrap();
    let (_, reply) = s.handle(a.id(), inv).unwrap().pop().unwrap();
    let commit = a.on_message(reply).unwrap().send.unwrap();
    assert_eq!(commit.kind(), Kind::Commit);

    let late = b.invoke(AdictOp::get("x")).unwrap();
    s.enqueue(b.id(), late).unwrap();
    s.enqueue(a.id(), commit).unwrap();
    let (kind, out) = s.step().unwrap();
    assert_eq!(kind, Kind::Commit);
    assert_eq!(out.unwrap()[0].1.kind(), Kind::UpdateAuth);
    let (kind, out) = s.step().unwrap();
    assert_eq!(kind, Kind::Invoke);
    assert_eq!(out.unwrap()[0].1.kind(), Kind::Reply);
    assert!(s.step().is_none());
    assert!(!s.has_queued());
}

#[test]
fn malformed_and_misdirected_messages_are_rejected() {
    let keys = keys(2);
    let mut s = server(&keys, 128);
    let mut a = client(&keys, 1);

    assert!(matches!(
        s.enqueue_bytes(ClientId(1), &[0xde, 0xad]),
        Err(ServerError::Decode(ClientId(1), _))
    ));

    let inv = a.invoke(AdictOp::put("x", b"1".to_vec())).unwrap();
    let (_, reply) = s.handle(a.id(), inv).unwrap().pop().unwrap();
    assert_eq!(
        s.enqueue(ClientId(1), copy(&reply)).unwrap_err(),
        ServerError::Direction { kind: Kind::Reply }
    );

    // the same commit, sent by someone else
    let commit = a.on_message(reply).unwrap().send.unwrap();
    assert!(matches!(
        s.handle(ClientId(2), copy(&commit)),
        Err(ServerError::StrayCommit { client: ClientId(2), seqno: 1 })
    ));
    let (_, update) = s.handle(ClientId(1), commit).unwrap().pop().unwrap();
    let commit_auth = a.on_message(update).unwrap().send.unwrap();
    assert_eq!(commit_auth.kind(), Kind::CommitAuth);
    assert_eq!(
        s.handle(ClientId(2), copy(&commit_auth)).unwrap_err(),
        ServerError::StrayCommitAuth(ClientId(2))
    );
    assert!(s.handle(ClientId(1), commit_auth).is_ok());
    assert_eq!(s.applied(), 1);
}

#[test]
fn invoke_signed_as_another_client_is_rejected() {
    let keys = keys(2);
    let mut s = server(&keys, 128);
    let mut a = client(&keys, 1);
    let inv = a.invoke(AdictOp::get("x")).unwrap();
    assert_eq!(s.handle(ClientId(2), inv).unwrap_err(), ServerError::BadInvokeSig(ClientId(2)));
    assert_eq!(s.invoked_upto(), 0);
}
