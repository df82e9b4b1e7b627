mod bench;
mod client;
mod server;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vicos_core::Scheme;

/// Integrity-checked object store over an untrusted server.
#[derive(Parser)]
#[command(name = "vicos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate key files for a server and its clients.
    Keygen(KeygenArgs),
    /// Run the untrusted server.
    Server(server::ServerArgs),
    /// Store an object.
    Put {
        #[command(flatten)]
        client: client::ClientArgs,
        key: String,
        /// Read the object from this file instead of standard input.
        #[arg(long, conflicts_with = "value")]
        file: Option<PathBuf>,
        /// The object contents, given inline.
        #[arg(long)]
        value: Option<String>,
    },
    /// Fetch and verify an object; it goes to standard output.
    Get {
        #[command(flatten)]
        client: client::ClientArgs,
        key: String,
        /// Write the object here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Delete an object.
    Del {
        #[command(flatten)]
        client: client::ClientArgs,
        key: String,
    },
    /// List stored keys.
    List {
        #[command(flatten)]
        client: client::ClientArgs,
    },
    /// Delete objects no record points to. Run while no other client writes.
    GcOrphans {
        #[command(flatten)]
        client: client::ClientArgs,
    },
    /// Run a read/write workload and report per-kind statistics as CSV.
    Bench(bench::BenchArgs),
    /// Print the rank histogram of the Zipf generator as CSV.
    Zipf(bench::ZipfArgs),
}

#[derive(clap::Args)]
struct KeygenArgs {
    #[arg(long, default_value_t = 1)]
    clients: u64,
    #[arg(long, value_enum, default_value_t = SchemeArg::Mac)]
    scheme: SchemeArg,
    /// Directory for server.toml and client-<id>.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SchemeArg {
    Mac,
    PublicKey,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Mac => Scheme::Mac,
            SchemeArg::PublicKey => Scheme::PublicKey,
        }
    }
}

/// Exit codes other than success.
pub mod exit {
    pub const ERROR: u8 = 1;
    pub const ALARM: u8 = 2;
    pub const ABORTED: u8 = 3;
}

fn keygen(args: KeygenArgs) -> anyhow::Result<()> {
    anyhow::ensure!(args.clients > 0, "need at least one client");
    std::fs::create_dir_all(&args.out)?;
    let keys = vicos_core::protocol::setup::<vicos_core::Adict, _>(args.scheme.into(), args.clients, &mut rand::rngs::OsRng);
    keys.for_server().save(&args.out.join("server.toml"))?;
    for id in keys.client_ids() {
        let path = args.out.join(format!("client-{}.toml", id.0));
        keys.for_client(id).save(&path)?;
        restrict(&path)?;
    }
    println!("wrote keys for {} clients to {}", args.clients, args.out.display());
    Ok(())
}

#[cfg(unix)]
fn restrict(path: &std::path::Path) -> std::io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))
}

#[cfg(not(unix))]
fn restrict(_: &std::path::Path) -> std::io::Result<()> {
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Keygen(a) => keygen(a).map(|()| 0),
        Command::Server(a) => server::run(a).map(|()| 0),
        Command::Put {
            client,
            key,
            file,
            value,
        } => client::put(client, &key, file, value),
        Command::Get { client, key, out } => client::get(client, &key, out),
        Command::Del { client, key } => client::del(client, &key),
        Command::List { client } => client::list(client),
        Command::GcOrphans { client } => client::gc_orphans(client),
        Command::Bench(a) => bench::run(a).map(|()| 0),
        Command::Zipf(a) => bench::zipf(a).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::ERROR)
        }
    }
}
