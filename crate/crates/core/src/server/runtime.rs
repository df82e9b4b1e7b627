//! The server event loop: one thread, fed by all client links.

use std::thread::{self, JoinHandle};

use crossbeam_channel::{bounded, select, Receiver, Sender, TryRecvError};

use super::{ServerCore, ServerError, ServerLog};
use crate::ads::Ads;
use crate::crypto::ClientId;
use crate::transport::{Inbound, ServerLinks};
use crate::wire::Encode;

pub struct Server<A: Ads> {
    stop: Sender<()>,
    thread: Option<JoinHandle<Result<ServerCore<A>, ServerError>>>,
}

impl<A: Ads> Server<A> {
    /// Runs `core` until [`Server::stop`]. With a log, every applied
    /// operation is appended to it.
    pub fn spawn(core: ServerCore<A>, links: ServerLinks, log: Option<ServerLog>) -> Self {
        let (stop, stopped) = bounded(1);
        let thread = thread::Builder::new()
            .name("server".into())
            .spawn(move || run(core, links, log, stopped))
            .expect("spawn server thread");
        Server {
            stop,
            thread: Some(thread),
        }
    }

    /// Stops the loop and hands back the final state, or the fatal error
    /// that ended it earlier.
    pub fn stop(mut self) -> Result<ServerCore<A>, ServerError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<ServerCore<A>, ServerError> {
        let _ = self.stop.try_send(());
        self.thread
            .take()
            .expect("stopped once")
            .join()
            .expect("server thread panicked")
    }

    /// Whether the loop ended on its own after a fatal error.
    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().map_or(true, |t| t.is_finished())
    }
}

impl<A: Ads> Drop for Server<A> {
    fn drop(&mut self) {
        if self.thread.is_some() {
            let _ = self.shutdown();
        }
    }
}

fn intake<A: Ads>(core: &mut ServerCore<A>, links: &ServerLinks, from: ClientId, msg: Inbound) {
    match msg {
        Inbound::Message(bytes) => {
            if let Err(e) = core.enqueue_bytes(from, &bytes) {
                log::warn!("{e}");
            }
        }
        Inbound::Closed => links.router.remove(from),
    }
}

fn run<A: Ads>(
    mut core: ServerCore<A>,
    links: ServerLinks,
    mut log: Option<ServerLog>,
    stopped: Receiver<()>,
) -> Result<ServerCore<A>, ServerError> {
    core.keep_applied_log(log.is_some());
    let result = (|| loop {
        if !core.has_queued() {
            select! {
                recv(stopped) -> _ => return Ok(()),
                recv(links.inbox) -> m => match m {
                    Ok((from, msg)) => intake(&mut core, &links, from, msg),
                    Err(_) => return Ok(()),
                },
            }
        }
        // pull in everything that arrived so priorities apply across it
        loop {
            match links.inbox.try_recv() {
                Ok((from, msg)) => intake(&mut core, &links, from, msg),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    if !core.has_queued() {
                        return Ok(());
                    }
                    break;
                }
            }
        }
        let Some((_, out)) = core.step() else { continue };
        match out {
            Ok(out) => {
                if let Some(log) = log.as_mut() {
                    for entry in core.drain_applied() {
                        log.append(&entry).map_err(|e| ServerError::Log(entry.seqno, e.to_string()))?;
                    }
                }
                for (to, msg) in out {
                    if links.router.send(to, msg.to_bytes()).is_err() {
                        log::debug!("client {to} is gone");
                    }
                }
            }
            Err(e) if e.is_fatal() => {
                log::error!("{e}");
                return Err(e);
            }
            Err(e) => log::warn!("{e}"),
        }
    })();
    if let Some(log) = log.as_mut() {
        let _ = log.flush();
    }
    links.router.clear();
    result.map(|()| core)
}
