use std::io::Write;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use anyhow::Context;
use vicos_core::protocol::genesis;
use vicos_core::server::{read_log, Server, ServerConfig, ServerCore, ServerLog};
use vicos_core::transport::tcp;
use vicos_core::{Adict, KeyConfig};

#[derive(clap::Args)]
pub struct ServerArgs {
    /// The server key file written by keygen.
    #[arg(long)]
    keys: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: String,
    #[arg(long, default_value_t = 128)]
    pending_limit: usize,
    #[arg(long)]
    query_fast_path: bool,
    #[arg(long)]
    prune_aborted: bool,
    /// Append applied operations here and recover from it on start.
    #[arg(long)]
    log: Option<PathBuf>,
}

pub fn run(args: ServerArgs) -> anyhow::Result<()> {
    let keys = KeyConfig::load(&args.keys).with_context(|| format!("loading {}", args.keys.display()))?;
    let cfg = ServerConfig {
        pending_limit: args.pending_limit,
        query_fast_path: args.query_fast_path,
        prune_aborted: args.prune_aborted,
        clients: keys.client_ids(),
    };
    let keys = keys.for_server();
    let (core, log) = match &args.log {
        Some(path) => {
            let entries = read_log(path).with_context(|| format!("reading {}", path.display()))?;
            let n = entries.len();
            let core = ServerCore::<Adict>::restore(cfg, genesis::<Adict>(&keys)?, Some(keys.ring()?), entries)?;
            if n > 0 {
                log::info!("recovered {n} operations from {}", path.display());
            }
            (core, Some(ServerLog::open(path)?))
        }
        None => (ServerCore::<Adict>::from_keys(&keys, cfg)?, None),
    };
    let (addr, links) = tcp::listen(&args.listen).with_context(|| format!("listening on {}", args.listen))?;
    println!("listening on {addr}");
    std::io::stdout().flush()?;
    let server = Server::spawn(core, links, log);
    while !server.is_finished() {
        thread::sleep(Duration::from_millis(200));
    }
    server.stop()?;
    Ok(())
}
