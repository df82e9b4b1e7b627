use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::ArgAction;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vicos_core::bench::{preload, run_bench, simulate_conflicts, ConflictMode, Length, OpKind, RunStats, WorkloadSpec, Zipf};
use vicos_core::client::{Client, ClientConfig, ClientCore};
use vicos_core::harness::SimConfig;
use vicos_core::protocol::setup;
use vicos_core::server::{Server, ServerConfig, ServerCore};
use vicos_core::transport::{memory, tcp};
use vicos_core::vicos::{Cos, FsCos, MemoryCos, Vicos};
use vicos_core::{Adict, ClientId, KeyConfig};

use crate::SchemeArg;

#[derive(clap::Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 16)]
    clients: u64,
    #[arg(long, default_value_t = 64)]
    objects: u64,
    #[arg(long, default_value_t = 10 << 10)]
    object_size: usize,
    /// Fraction of reads.
    #[arg(long, default_value_t = 0.5)]
    read_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    #[arg(long, value_parser = parse_mode, default_value = "compatible")]
    mode: ConflictMode,
    /// Operations per client; overrides the timed run.
    #[arg(long)]
    ops: Option<u64>,
    /// Seconds of unmeasured warm-up.
    #[arg(long, default_value_t = 5.0)]
    warmup: f64,
    /// Seconds of measurement.
    #[arg(long, default_value_t = 10.0)]
    measure: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip queries' passive phase. Must match the server when using --server.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    query_fast_path: bool,
    #[arg(long, value_enum, default_value_t = SchemeArg::Mac)]
    scheme: SchemeArg,
    /// Keep objects in this directory rather than in memory.
    #[arg(long)]
    store_dir: Option<PathBuf>,
    /// Use a running server instead of an in-process one.
    #[arg(long, requires_all = ["keys_dir", "store_dir"])]
    server: Option<String>,
    /// Directory with client-<id>.toml for clients 1..=clients.
    #[arg(long)]
    keys_dir: Option<PathBuf>,
    /// Run on the deterministic simulator (needs --ops); reports abort
    /// rates only.
    #[arg(long, conflicts_with = "server")]
    simulate: bool,
    /// Simulator: maximum message delay in steps.
    #[arg(long, default_value_t = 2)]
    latency: u64,
    /// Simulator: maximum steps between a client's operations.
    #[arg(long, default_value_t = 120)]
    think: u64,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<ConflictMode, String> {
    s.parse()
}

#[derive(clap::Args)]
pub struct ZipfArgs {
    #[arg(long, default_value_t = 64)]
    objects: u64,
    #[arg(long, default_value_t = 0.99)]
    theta: f64,
    #[arg(long, default_value_t = 100_000)]
    draws: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl BenchArgs {
    fn spec(&self) -> WorkloadSpec {
        let length = match self.ops {
            Some(n) => Length::Ops(n),
            None => Length::Timed {
                warmup: Duration::from_secs_f64(self.warmup),
                measure: Duration::from_secs_f64(self.measure),
            },
        };
        WorkloadSpec {
            clients: self.clients,
            objects: self.objects,
            object_size: self.object_size,
            read_ratio: self.read_ratio,
            theta: self.theta,
            length,
            mode: self.mode,
            seed: self.seed,
        }
    }

    fn client_config(&self) -> ClientConfig<Adict> {
        ClientConfig {
            query_fast_path: self.query_fast_path,
            relation: self.mode.relation(),
            ..ClientConfig::default()
        }
    }
}

pub fn run(args: BenchArgs) -> anyhow::Result<()> {
    let spec = args.spec();
    spec.validate()?;
    let stats = if args.simulate {
        let sim = SimConfig {
            query_fast_path: args.query_fast_path,
            latency: Some(args.latency.max(1)),
            think: args.think,
            ..SimConfig::default()
        };
        simulate_conflicts(&spec, sim)?
    } else if let Some(addr) = &args.server {
        let keys_dir = args.keys_dir.as_ref().expect("required by clap");
        let cos = Arc::new(FsCos::open(args.store_dir.as_ref().expect("required by clap"))?);
        let stores = (1..=spec.clients)
            .map(|i| {
                let path = keys_dir.join(format!("client-{i}.toml"));
                let keys = KeyConfig::load(&path).with_context(|| format!("loading {}", path.display()))?;
                let core = ClientCore::<Adict>::from_keys(&keys, ClientId(i), args.client_config())?;
                let link = tcp::connect(addr, ClientId(i)).with_context(|| format!("connecting to {addr}"))?;
                Ok(Vicos::new(Client::spawn(core, link), cos.clone()))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        measure(&spec, &stores)?
    } else {
        match &args.store_dir {
            Some(dir) => local(&args, &spec, Arc::new(FsCos::open(dir)?))?,
            None => local(&args, &spec, Arc::new(MemoryCos::new()))?,
        }
    };
    report(&args, &stats)
}

/// An in-process server over in-memory links.
fn local<C: Cos + ?Sized>(args: &BenchArgs, spec: &WorkloadSpec, cos: Arc<C>) -> anyhow::Result<RunStats> {
    let keys = setup::<Adict, _>(args.scheme.into(), spec.clients, &mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (net, links) = memory::network();
    let scfg = ServerConfig {
        query_fast_path: args.query_fast_path,
        clients: keys.client_ids(),
        ..ServerConfig::default()
    };
    let server = Server::spawn(ServerCore::<Adict>::from_keys(&keys, scfg)?, links, None);
    let stores = (1..=spec.clients)
        .map(|i| {
            let core = ClientCore::<Adict>::from_keys(&keys, ClientId(i), args.client_config())?;
            Ok(Vicos::new(Client::spawn(core, net.connect(ClientId(i))), cos.clone()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let stats = measure(spec, &stores)?;
    drop(stores);
    server.stop()?;
    Ok(stats)
}

fn measure<C: Cos>(spec: &WorkloadSpec, stores: &[Vicos<C>]) -> anyhow::Result<RunStats> {
    preload(spec, &stores[0]).context("preloading objects")?;
    Ok(run_bench(spec, stores)?)
}

fn report(args: &BenchArgs, stats: &RunStats) -> anyhow::Result<()> {
    match &args.csv {
        Some(path) => stats.write_csv(&mut File::create(path)?)?,
        None => stats.write_csv(&mut std::io::stdout().lock())?,
    }
    for kind in [OpKind::Read, OpKind::Write] {
        if let Some(rate) = stats.kind(kind).success_rate() {
            eprintln!("{} theta={} {kind}: success {:.1}%", args.mode, args.theta, rate * 100.0);
        }
    }
    Ok(())
}

pub fn zipf(args: ZipfArgs) -> anyhow::Result<()> {
    let z = Zipf::new(args.objects, args.theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut counts = vec![0u64; args.objects as usize];
    for _ in 0..args.draws {
        counts[z.sample(&mut rng) as usize - 1] += 1;
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "rank,count,frequency")?;
    for (i, c) in counts.iter().enumerate() {
        writeln!(out, "{},{c},{:.6}", i + 1, *c as f64 / args.draws.max(1) as f64)?;
    }
    Ok(())
}
