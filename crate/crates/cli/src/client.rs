//! One-shot store operations. Each run connects, performs one operation,
//! waits for its passive phase and saves the protocol state for the next.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use vicos_core::client::{Client, ClientConfig, ClientCore, ClientError, RetryPolicy, Snapshot};
use vicos_core::transport::tcp;
use vicos_core::vicos::{FsCos, Vicos, VicosError};
use vicos_core::{Adict, ClientId, KeyConfig, Outcome};

use crate::exit;

#[derive(clap::Args)]
pub struct ClientArgs {
    #[arg(long, default_value = "127.0.0.1:7000")]
    server: String,
    /// This client's key file written by keygen.
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    id: u64,
    /// Directory of the object store.
    #[arg(long)]
    objects: PathBuf,
    /// Protocol state kept between runs. Defaults to the key file with a
    /// `.state.json` extension.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Must match the server.
    #[arg(long)]
    query_fast_path: bool,
    /// Must match the server.
    #[arg(long)]
    prune_aborted: bool,
    /// Attempts for an operation that keeps aborting.
    #[arg(long, default_value_t = 3)]
    attempts: u32,
    /// Seconds to wait for the server's reply to an operation.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    /// Leave the objects of deleted keys for gc-orphans.
    #[arg(long)]
    defer_cleanup: bool,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SavedState {
    id: u64,
    snapshot: Snapshot,
    /// Set once the server was caught misbehaving; the client refuses to
    /// run again.
    alarm: Option<String>,
}

impl ClientArgs {
    fn state_path(&self) -> PathBuf {
        self.state.clone().unwrap_or_else(|| self.keys.with_extension("state.json"))
    }
}

fn load_state(path: &Path, id: u64) -> anyhow::Result<Option<SavedState>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    let state: SavedState = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    anyhow::ensure!(state.id == id, "{} holds the state of client {}", path.display(), state.id);
    Ok(Some(state))
}

fn save_state(path: &Path, state: &SavedState) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(state)?)?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

/// The saved state carries an alarm.
struct Refused;

/// Connects, runs `f` and saves the resulting state, also after an alarm.
fn session<T>(
    args: ClientArgs,
    f: impl FnOnce(&Vicos<FsCos>) -> Result<T, VicosError>,
) -> anyhow::Result<Result<Result<T, VicosError>, Refused>> {
    let path = args.state_path();
    let saved = load_state(&path, args.id)?;
    if let Some(alarm) = saved.as_ref().and_then(|s| s.alarm.as_ref()) {
        eprintln!("FAULT ALARM raised earlier, refusing to run: {alarm}");
        return Ok(Err(Refused));
    }
    let keys = KeyConfig::load(&args.keys).with_context(|| format!("loading {}", args.keys.display()))?;
    let cfg = ClientConfig::<Adict> {
        query_fast_path: args.query_fast_path,
        prune_aborted: args.prune_aborted,
        ..ClientConfig::default()
    };
    let id = ClientId(args.id);
    let mut core = ClientCore::<Adict>::from_keys(&keys, id, cfg)?;
    if let Some(s) = saved {
        core.restore(s.snapshot);
    }
    let link = tcp::connect(&args.server, id).with_context(|| format!("connecting to {}", args.server))?;
    let cos = FsCos::open(&args.objects)?;
    let mut store = Vicos::new(Client::spawn(core, link), cos).with_retry(RetryPolicy {
        attempts: args.attempts.max(1),
        ..RetryPolicy::default()
    })
    .with_timeout(Duration::from_secs_f64(args.timeout));
    if args.defer_cleanup {
        store = store.with_deferred_cleanup();
    }
    let timeout = args.timeout;
    let out = f(&store);
    let (client, _) = store.into_parts();
    // a timed-out operation leaves nothing worth waiting for
    if !matches!(out, Err(VicosError::Client(ClientError::Timeout))) {
        match client.wait_idle_timeout(Duration::from_secs_f64(timeout)) {
            Ok(()) | Err(ClientError::Alarm(_)) => {}
            Err(e) => log::warn!("passive phase did not finish: {e}"),
        }
    }
    let core = client.shutdown();
    save_state(
        &path,
        &SavedState {
            id: args.id,
            snapshot: core.snapshot(),
            alarm: core.alarm().map(|a| a.to_string()),
        },
    )?;
    Ok(Ok(out))
}

/// Maps an operation result to an exit code, reporting failures.
fn finish<T>(
    r: Result<Result<Outcome<T>, VicosError>, Refused>,
    on_done: impl FnOnce(T) -> anyhow::Result<()>,
) -> anyhow::Result<u8> {
    let Ok(r) = r else { return Ok(exit::ALARM) };
    match r {
        Ok(Outcome::Done(v)) => {
            on_done(v)?;
            Ok(0)
        }
        Ok(Outcome::Abort) => {
            eprintln!("aborted: conflicting operations of other clients");
            Ok(exit::ABORTED)
        }
        Err(VicosError::Alarm(a)) | Err(VicosError::Client(ClientError::Alarm(a))) => {
            eprintln!("FAULT ALARM: {a}");
            Ok(exit::ALARM)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn put(args: ClientArgs, key: &str, file: Option<PathBuf>, value: Option<String>) -> anyhow::Result<u8> {
    let data = match (file, value) {
        (Some(f), _) => fs::read(&f).with_context(|| format!("reading {}", f.display()))?,
        (None, Some(v)) => v.into_bytes(),
        (None, None) => {
            let mut buf = Vec::new();
            std::io::stdin().read_to_end(&mut buf)?;
            buf
        }
    };
    finish(session(args, |s| s.put(key.as_bytes(), &data))?, |()| Ok(()))
}

pub fn get(args: ClientArgs, key: &str, out: Option<PathBuf>) -> anyhow::Result<u8> {
    let r = session(args, |s| s.get(key.as_bytes()))?;
    if let Ok(Ok(Outcome::Done(None))) = r {
        eprintln!("not found: {key}");
        return Ok(exit::ERROR);
    }
    finish(r, |v| {
        let v = v.expect("absent handled above");
        match out {
            Some(p) => fs::write(&p, v).with_context(|| format!("writing {}", p.display())),
            None => Ok(std::io::stdout().write_all(&v)?),
        }
    })
}

pub fn del(args: ClientArgs, key: &str) -> anyhow::Result<u8> {
    finish(session(args, |s| s.del(key.as_bytes()))?, |()| Ok(()))
}

pub fn list(args: ClientArgs) -> anyhow::Result<u8> {
    finish(session(args, |s| s.list())?, |keys| {
        let mut out = std::io::stdout().lock();
        for k in keys {
            out.write_all(k.as_bytes())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn gc_orphans(args: ClientArgs) -> anyhow::Result<u8> {
    let r = session(args, |s| s.collect_orphans().map(Outcome::Done))?;
    finish(r, |n| {
        println!("removed {n} orphaned objects");
        Ok(())
    })
}
