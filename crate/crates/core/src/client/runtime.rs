//! A client event loop on its own thread, driving [`ClientCore`] over a
//! [`ClientLink`].

use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender};
use rand::Rng;

use super::{ClientCore, Completed, FaultAlarm, InvokeError, Snapshot};
use crate::ads::{Ads, Outcome};
use crate::crypto::{ClientId, CryptoError};
use crate::transport::{ClientLink, Inbound};
use crate::wire::Encode;

#[derive(Debug, Clone, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Alarm(#[from] FaultAlarm),
    #[error("an operation is already in flight")]
    Busy,
    #[error("disconnected from server")]
    Disconnected,
    #[error("timed out")]
    Timeout,
    #[error("{0}")]
    Crypto(String),
}

impl From<CryptoError> for ClientError {
    fn from(e: CryptoError) -> Self {
        ClientError::Crypto(e.to_string())
    }
}

/// Randomized exponential backoff for retrying aborted operations.
#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base: Duration::from_millis(10),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `n` (from 1): uniform in `[0, base * 2^n)`.
    pub fn delay(&self, n: u32, rng: &mut impl Rng) -> Duration {
        let cap = self.base.saturating_mul(1 << n.min(16));
        cap.mul_f64(rng.gen::<f64>())
    }
}

type Reply<T> = Sender<Result<T, ClientError>>;

enum Request<A: Ads> {
    Invoke(A::Op, Reply<Completed<A>>),
    WaitIdle(Reply<()>),
    Raise(FaultAlarm),
    Snapshot(Sender<Snapshot>),
    Shutdown,
}

/// Handle to a running client. Operations block the caller; the passive
/// phase runs in the background.
pub struct Client<A: Ads> {
    id: ClientId,
    requests: Sender<Request<A>>,
    thread: Option<JoinHandle<ClientCore<A>>>,
}

impl<A: Ads> Client<A> {
    pub fn spawn(core: ClientCore<A>, link: ClientLink) -> Self {
        let id = core.id();
        let (tx, rx) = unbounded();
        let thread = thread::Builder::new()
            .name(format!("client-{id}"))
            .spawn(move || EventLoop::new(core, link).run(rx))
            .expect("spawn client thread");
        Client {
            id,
            requests: tx,
            thread: Some(thread),
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Request<A>) -> Result<T, ClientError> {
        let (tx, rx) = bounded(1);
        self.requests.send(make(tx)).map_err(|_| ClientError::Disconnected)?;
        rx.recv().map_err(|_| ClientError::Disconnected)?
    }

    /// Runs the active phase of `op`.
    pub fn invoke(&self, op: A::Op) -> Result<Completed<A>, ClientError> {
        self.call(|tx| Request::Invoke(op, tx))
    }

    /// Like [`Client::invoke`], but gives up waiting after `timeout`. The
    /// operation stays in flight; a server that withholds replies leaves the
    /// client unable to proceed.
    pub fn invoke_timeout(&self, op: A::Op, timeout: Duration) -> Result<Completed<A>, ClientError> {
        let (tx, rx) = bounded(1);
        self.requests
            .send(Request::Invoke(op, tx))
            .map_err(|_| ClientError::Disconnected)?;
        match rx.recv_timeout(timeout) {
            Ok(r) => r,
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Err(ClientError::Timeout),
            Err(_) => Err(ClientError::Disconnected),
        }
    }

    /// Invokes `op` until it does not abort or the attempts run out. With
    /// a timeout, each attempt waits at most that long for its reply.
    pub fn invoke_with_retry(
        &self,
        op: A::Op,
        policy: RetryPolicy,
        timeout: Option<Duration>,
    ) -> Result<Completed<A>, ClientError> {
        let mut rng = rand::thread_rng();
        let mut n = 1;
        loop {
            let done = match timeout {
                Some(t) => self.invoke_timeout(op.clone(), t)?,
                None => self.invoke(op.clone())?,
            };
            if matches!(done.outcome, Outcome::Done(_)) || n >= policy.attempts {
                return Ok(done);
            }
            thread::sleep(policy.delay(n, &mut rng));
            n += 1;
        }
    }

    /// Blocks until no operation is in flight and every passive phase of
    /// this client has completed.
    pub fn wait_idle(&self) -> Result<(), ClientError> {
        self.call(Request::WaitIdle)
    }

    pub fn wait_idle_timeout(&self, timeout: Duration) -> Result<(), ClientError> {
        let (tx, rx) = bounded(1);
        self.requests
            .send(Request::WaitIdle(tx))
            .map_err(|_| ClientError::Disconnected)?;
        match rx.recv_timeout(timeout) {
            Ok(r) => r,
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Err(ClientError::Timeout),
            Err(_) => Err(ClientError::Disconnected),
        }
    }

    /// Raises an alarm found outside the protocol; the client stops.
    pub fn raise(&self, alarm: FaultAlarm) {
        let _ = self.requests.send(Request::Raise(alarm));
    }

    pub fn snapshot(&self) -> Result<Snapshot, ClientError> {
        let (tx, rx) = bounded(1);
        self.requests
            .send(Request::Snapshot(tx))
            .map_err(|_| ClientError::Disconnected)?;
        rx.recv().map_err(|_| ClientError::Disconnected)
    }

    /// Stops the event loop and returns the protocol state.
    pub fn shutdown(mut self) -> ClientCore<A> {
        let _ = self.requests.send(Request::Shutdown);
        self.thread
            .take()
            .expect("joined once")
            .join()
            .expect("client thread panicked")
    }
}

impl<A: Ads> Drop for Client<A> {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = self.requests.send(Request::Shutdown);
            let _ = t.join();
        }
    }
}

struct EventLoop<A: Ads> {
    core: ClientCore<A>,
    link: ClientLink,
    in_flight: Option<Reply<Completed<A>>>,
    idle_waiters: Vec<Reply<()>>,
    disconnected: bool,
}

impl<A: Ads> EventLoop<A> {
    fn new(core: ClientCore<A>, link: ClientLink) -> Self {
        EventLoop {
            core,
            link,
            in_flight: None,
            idle_waiters: Vec::new(),
            disconnected: false,
        }
    }

    fn run(mut self, requests: Receiver<Request<A>>) -> ClientCore<A> {
        let inbox = self.link.inbox.clone();
        loop {
            if self.disconnected {
                match requests.recv() {
                    Ok(Request::Shutdown) | Err(_) => break,
                    Ok(req) => self.on_request(req),
                }
                continue;
            }
            select! {
                recv(requests) -> req => match req {
                    Ok(Request::Shutdown) | Err(_) => break,
                    Ok(req) => self.on_request(req),
                },
                recv(inbox) -> msg => match msg {
                    Ok(Inbound::Message(bytes)) => self.on_bytes(&bytes),
                    Ok(Inbound::Closed) | Err(_) => self.on_disconnect(),
                },
            }
            self.notify_idle();
        }
        self.core
    }

    fn failure(&self) -> ClientError {
        match self.core.alarm() {
            Some(a) => ClientError::Alarm(a.clone()),
            None => ClientError::Disconnected,
        }
    }

    fn on_request(&mut self, req: Request<A>) {
        match req {
            Request::Invoke(op, reply) => {
                if self.disconnected || self.core.alarm().is_some() {
                    let _ = reply.send(Err(self.failure()));
                    return;
                }
                match self.core.invoke(op) {
                    Ok(msg) => {
                        if self.link.outbox.send(msg.to_bytes()).is_err() {
                            let _ = reply.send(Err(ClientError::Disconnected));
                            self.on_disconnect();
                        } else {
                            self.in_flight = Some(reply);
                        }
                    }
                    Err(InvokeError::Busy) => {
                        let _ = reply.send(Err(ClientError::Busy));
                    }
                    Err(InvokeError::Alarmed(a)) => {
                        let _ = reply.send(Err(ClientError::Alarm(a)));
                    }
                    Err(InvokeError::Crypto(e)) => {
                        let _ = reply.send(Err(e.into()));
                    }
                }
            }
            Request::WaitIdle(reply) => {
                if self.disconnected || self.core.alarm().is_some() {
                    let _ = reply.send(Err(self.failure()));
                } else {
                    self.idle_waiters.push(reply);
                }
            }
            Request::Raise(alarm) => {
                self.core.raise(alarm);
                self.fail_all();
            }
            Request::Snapshot(reply) => {
                let _ = reply.send(self.core.snapshot());
            }
            Request::Shutdown => unreachable!("handled by the loop"),
        }
    }

    fn on_bytes(&mut self, bytes: &[u8]) {
        match self.core.on_bytes(bytes) {
            Ok(step) => {
                if let Some(msg) = step.send {
                    if self.link.outbox.send(msg.to_bytes()).is_err() {
                        self.on_disconnect();
                        return;
                    }
                }
                if let Some(done) = step.completed {
                    if let Some(reply) = self.in_flight.take() {
                        let _ = reply.send(Ok(done));
                    }
                }
            }
            Err(_) => self.fail_all(),
        }
    }

    fn on_disconnect(&mut self) {
        self.disconnected = true;
        self.fail_all();
    }

    fn fail_all(&mut self) {
        let err = self.failure();
        if let Some(reply) = self.in_flight.take() {
            let _ = reply.send(Err(err.clone()));
        }
        for w in self.idle_waiters.drain(..) {
            let _ = w.send(Err(err.clone()));
        }
    }

    fn notify_idle(&mut self) {
        if self.core.is_idle() {
            for w in self.idle_waiters.drain(..) {
                let _ = w.send(Ok(()));
            }
        }
    }
}
