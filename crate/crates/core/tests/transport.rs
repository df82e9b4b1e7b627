use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vicos_core::client::{Client, ClientConfig, ClientCore};
use vicos_core::protocol::{setup, Kind};
use vicos_core::server::{Server, ServerConfig, ServerCore};
use vicos_core::transport::{memory, tcp, ClientLink, Inbound, ServerLinks};
use vicos_core::{Adict, AdictOp, AdictResponse, ClientId, Outcome, Scheme};

const CLIENTS: u64 = 3;
const PER_CLIENT: u32 = 500;
const WAIT: Duration = Duration::from_secs(10);

fn frame(client: u64, i: u32) -> Vec<u8> {
    let mut v = vec![0xff];
    v.extend(client.to_le_bytes());
    v.extend(i.to_le_bytes());
    v
}

/// Every client sends a numbered stream; the server echoes each frame
/// back to its sender. Both directions must arrive complete and in order.
fn check_fifo_echo(links: ServerLinks, clients: Vec<(ClientId, ClientLink)>) {
    let echo = thread::spawn(move || {
        let mut closed = 0;
        let mut seen = vec![0u32; CLIENTS as usize + 1];
        while closed < CLIENTS {
            match links.inbox.recv_timeout(WAIT).expect("server inbox stalled") {
                (id, Inbound::Message(bytes)) => {
                    assert_eq!(bytes, frame(id.0, seen[id.0 as usize]), "out of order from {id}");
                    seen[id.0 as usize] += 1;
                    links.router.send(id, bytes).unwrap();
                }
                (_, Inbound::Closed) => closed += 1,
            }
        }
        seen
    });
    let senders: Vec<_> = clients
        .into_iter()
        .map(|(id, link)| {
            thread::spawn(move || {
                for i in 0..PER_CLIENT {
                    link.outbox.send(frame(id.0, i)).unwrap();
                }
                for i in 0..PER_CLIENT {
                    match link.inbox.recv_timeout(WAIT).expect("client inbox stalled") {
                        Inbound::Message(b) => assert_eq!(b, frame(id.0, i)),
                        Inbound::Closed => panic!("{id}: closed early"),
                    }
                }
            })
        })
        .collect();
    for s in senders {
        s.join().unwrap();
    }
    let seen = echo.join().unwrap();
    assert!(seen[1..].iter().all(|&n| n == PER_CLIENT), "{seen:?}");
}

#[test]
fn memory_links_are_fifo_and_report_closing() {
    let (net, links) = memory::network();
    let clients = (1..=CLIENTS).map(|i| (ClientId(i), net.connect(ClientId(i)))).collect();
    check_fifo_echo(links, clients);
    // frames of unknown kind are counted apart from protocol messages
    assert_eq!(net.stats().unknown(), 2 * CLIENTS * PER_CLIENT as u64);
    assert_eq!(net.stats().total(), 0);
}

#[test]
fn tcp_links_are_fifo_and_report_closing() {
    let (addr, links) = tcp::listen("127.0.0.1:0").unwrap();
    let clients = (1..=CLIENTS)
        .map(|i| (ClientId(i), tcp::connect(addr, ClientId(i)).unwrap()))
        .collect();
    check_fifo_echo(links, clients);
}

#[test]
fn tcp_client_sees_server_going_away() {
    let (addr, links) = tcp::listen("127.0.0.1:0").unwrap();
    let link = tcp::connect(addr, ClientId(1)).unwrap();
    link.outbox.send(frame(1, 0)).unwrap();
    let (id, _) = links.inbox.recv_timeout(WAIT).unwrap();
    assert_eq!(id, ClientId(1));
    links.router.clear();
    assert_eq!(link.inbox.recv_timeout(WAIT).unwrap(), Inbound::Closed);
}

#[test]
fn protocol_runs_over_tcp() {
    let keys = setup::<Adict, _>(Scheme::PublicKey, 2, &mut ChaCha8Rng::seed_from_u64(3));
    let (addr, links) = tcp::listen("127.0.0.1:0").unwrap();
    let stats = links.stats.clone();
    let server = Server::spawn(
        ServerCore::<Adict>::from_keys(&keys, ServerConfig::default()).unwrap(),
        links,
        None,
    );
    let client = |i| {
        let core = ClientCore::<Adict>::from_keys(&keys, ClientId(i), ClientConfig::default()).unwrap();
        Client::spawn(core, tcp::connect(addr, ClientId(i)).unwrap())
    };
    let (a, b) = (client(1), client(2));
    assert!(a.invoke(AdictOp::put("k", b"tcp".to_vec())).unwrap().outcome.done().is_some());
    a.wait_idle().unwrap();
    let got = b.invoke(AdictOp::get("k")).unwrap().outcome;
    assert_eq!(got, Outcome::Done(AdictResponse::Value(b"tcp".to_vec())));
    b.wait_idle().unwrap();
    // server-side counters see only what the server sends
    assert_eq!(stats.count(Kind::Reply), 2);
    assert_eq!(stats.count(Kind::UpdateAuth), 2);
    assert_eq!(stats.count(Kind::Invoke), 0);
    drop((a, b));
    assert_eq!(server.stop().unwrap().applied(), 2);
}
