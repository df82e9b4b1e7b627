//! TCP links: each frame is a 4-byte big-endian length and the message.
//!
//! A connection opens with a hello frame naming the client.

use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use crossbeam_channel::{unbounded, Sender};

use super::{ClientLink, Closed, Counting, Inbound, Outbox, Router, ServerLinks, WireStats};
use crate::crypto::ClientId;
use crate::wire::WIRE_VERSION;

/// Upper bound on a single frame.
pub const MAX_FRAME: usize = 256 << 20;

const HELLO_TAG: u8 = 0;

pub fn write_frame(w: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    let len = u32::try_from(bytes.len())
        .ok()
        .filter(|n| (*n as usize) <= MAX_FRAME)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

fn hello(id: ClientId) -> Vec<u8> {
    let mut v = vec![WIRE_VERSION, HELLO_TAG];
    v.extend_from_slice(&id.0.to_be_bytes());
    v
}

fn parse_hello(frame: &[u8]) -> Option<ClientId> {
    match frame {
        [WIRE_VERSION, HELLO_TAG, rest @ ..] => Some(ClientId(u64::from_be_bytes(rest.try_into().ok()?))),
        _ => None,
    }
}

struct StreamOutbox {
    stream: Mutex<TcpStream>,
}

impl Outbox for StreamOutbox {
    fn send(&self, bytes: Vec<u8>) -> Result<(), Closed> {
        let mut s = self.stream.lock().unwrap();
        write_frame(&mut *s, &bytes).map_err(|_| Closed)
    }
}

impl Drop for StreamOutbox {
    fn drop(&mut self) {
        if let Ok(s) = self.stream.lock() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Accepts client connections in the background.
pub fn listen(addr: impl ToSocketAddrs) -> io::Result<(SocketAddr, ServerLinks)> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let (tx, rx) = unbounded();
    let router = Router::new();
    let stats = WireStats::new();
    {
        let router = router.clone();
        let stats = stats.clone();
        thread::Builder::new()
            .name("tcp-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (tx, router, stats) = (tx.clone(), router.clone(), stats.clone());
                    let _ = thread::Builder::new()
                        .name("tcp-conn".into())
                        .spawn(move || serve_connection(stream, tx, router, stats));
                }
            })?;
    }
    Ok((local, ServerLinks { inbox: rx, router, stats }))
}

fn serve_connection(
    stream: TcpStream,
    tx: Sender<(ClientId, Inbound)>,
    router: Router,
    stats: WireStats,
) {
    let _ = stream.set_nodelay(true);
    let Ok(writer) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let id = match read_frame(&mut reader) {
        Ok(Some(f)) => match parse_hello(&f) {
            Some(id) => id,
            None => return,
        },
        _ => return,
    };
    router.register(
        id,
        Arc::new(Counting {
            inner: StreamOutbox {
                stream: Mutex::new(writer),
            },
            stats,
        }),
    );
    while let Ok(Some(frame)) = read_frame(&mut reader) {
        if tx.send((id, Inbound::Message(frame))).is_err() {
            break;
        }
    }
    router.remove(id);
    let _ = tx.send((id, Inbound::Closed));
}

/// Connects as client `id`.
pub fn connect(addr: impl ToSocketAddrs, id: ClientId) -> io::Result<ClientLink> {
    connect_counted(addr, id, WireStats::new())
}

pub fn connect_counted(addr: impl ToSocketAddrs, id: ClientId, stats: WireStats) -> io::Result<ClientLink> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    write_frame(&mut stream, &hello(id))?;
    let reader = stream.try_clone()?;
    let (tx, rx) = unbounded();
    thread::Builder::new()
        .name(format!("tcp-client-{id}"))
        .spawn(move || {
            let mut reader = BufReader::new(reader);
            while let Ok(Some(frame)) = read_frame(&mut reader) {
                if tx.send(Inbound::Message(frame)).is_err() {
                    return;
                }
            }
            let _ = tx.send(Inbound::Closed);
        })?;
    Ok(ClientLink {
        outbox: Box::new(Counting {
            inner: StreamOutbox {
                stream: Mutex::new(stream),
            },
            stats,
        }),
        inbox: rx,
    })
}
