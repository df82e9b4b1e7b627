//! Workload generation and measurement: read/write mixes over a fixed set of
//! objects with Zipf-distributed popularity, comparing the compatibility
//! relation against plain commutativity.

mod stats;
mod zipf;

pub use stats::{KindStats, OpKind, RunStats};
pub use zipf::{zeta, Zipf, ZipfError};

use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adict::{self, Adict, AdictOp, AdictResponse, Key};
use crate::ads::{Ads, Outcome, Relation};
use crate::client::FaultAlarm;
use crate::harness::{Honest, Sim, SimConfig};
use crate::vicos::{object_hash, Cos, ObjectRecord, Vicos, VicosError, NONCE_LEN};

/// The baseline relation: an operation proceeds only if it commutes with
/// every pending operation.
pub fn acop(pending: &[AdictOp], current: &AdictOp) -> bool {
    adict::commutes_with_all(pending, current)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictMode {
    Compatible,
    Commutative,
}

impl ConflictMode {
    pub fn relation(self) -> Relation<Adict> {
        match self {
            ConflictMode::Compatible => <Adict as Ads>::compatible,
            ConflictMode::Commutative => acop,
        }
    }
}

impl fmt::Display for ConflictMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConflictMode::Compatible => "compatible",
            ConflictMode::Commutative => "commutative",
        })
    }
}

impl FromStr for ConflictMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "compatible" => Ok(ConflictMode::Compatible),
            "commutative" => Ok(ConflictMode::Commutative),
            _ => Err(format!("unknown conflict mode {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Length {
    /// Operations per client, all measured.
    Ops(u64),
    /// Unmeasured warm-up, then the measured interval.
    Timed { warmup: Duration, measure: Duration },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub clients: u64,
    pub objects: u64,
    pub object_size: usize,
    /// Fraction of reads, in `[0, 1]`.
    pub read_ratio: f64,
    pub theta: f64,
    pub length: Length,
    pub mode: ConflictMode,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            clients: 16,
            objects: 64,
            object_size: 10 << 10,
            read_ratio: 0.5,
            theta: 0.0,
            length: Length::Timed {
                warmup: Duration::from_secs(5),
                measure: Duration::from_secs(10),
            },
            mode: ConflictMode::Compatible,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    Config(String),
    #[error("alarm during benchmark: {0}")]
    Alarm(FaultAlarm),
    #[error(transparent)]
    Store(VicosError),
    #[error("simulated run returned {0} wrong responses")]
    Corrupted(usize),
}

impl From<ZipfError> for BenchError {
    fn from(e: ZipfError) -> Self {
        BenchError::Config(e.to_string())
    }
}

impl From<VicosError> for BenchError {
    fn from(e: VicosError) -> Self {
        match e {
            VicosError::Alarm(a) => BenchError::Alarm(a),
            e => BenchError::Store(e),
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<Zipf, BenchError> {
        if self.clients == 0 {
            return Err(BenchError::Config("need at least one client".into()));
        }
        if !(0.0..=1.0).contains(&self.read_ratio) {
            return Err(BenchError::Config(format!("read ratio {} not in [0, 1]", self.read_ratio)));
        }
        Ok(Zipf::new(self.objects, self.theta)?)
    }

    fn client_rng(&self, client: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ client)
    }
}

/// Name of the object of popularity `rank`, from 1.
pub fn object_key(rank: u64) -> Key {
    Key::from(format!("obj{rank:05}").into_bytes())
}

/// Object contents: random, with a per-write counter up front so that
/// successive writes differ.
struct Payload(Vec<u8>, u64);

impl Payload {
    fn new(rng: &mut impl RngCore, size: usize) -> Self {
        let mut v = vec![0; size];
        rng.fill_bytes(&mut v);
        Payload(v, 0)
    }

    fn next(&mut self) -> &[u8] {
        self.1 += 1;
        let n = self.0.len().min(8);
        self.0[..n].copy_from_slice(&self.1.to_le_bytes()[..n]);
        &self.0
    }
}

/// Writes every object once so reads find data.
pub fn preload<C: Cos>(spec: &WorkloadSpec, store: &Vicos<C>) -> Result<(), BenchError> {
    let mut payload = Payload::new(&mut spec.client_rng(u64::MAX), spec.object_size);
    for rank in 1..=spec.objects {
        let key = object_key(rank);
        loop {
            if let Outcome::Done(()) = store.put(key.as_bytes(), payload.next())? {
                break;
            }
        }
    }
    Ok(())
}

/// Drives one store handle per client from its own thread. Relation and
/// transport are fixed when the handles are built.
pub fn run_bench<C: Cos>(spec: &WorkloadSpec, stores: &[Vicos<C>]) -> Result<RunStats, BenchError> {
    let zipf = spec.validate()?;
    if stores.len() as u64 != spec.clients {
        return Err(BenchError::Config(format!(
            "{} clients specified but {} handles given",
            spec.clients,
            stores.len()
        )));
    }
    let start = Instant::now();
    let results: Vec<Result<RunStats, BenchError>> = thread::scope(|scope| {
        let handles: Vec<_> = stores
            .iter()
            .enumerate()
            .map(|(i, store)| {
                let zipf = &zipf;
                scope.spawn(move || drive(spec, zipf, i as u64, store, start))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench thread")).collect()
    });
    let mut stats = RunStats::new(spec.objects as usize);
    for r in results {
        stats.merge(r?);
    }
    Ok(stats)
}

fn drive<C: Cos>(
    spec: &WorkloadSpec,
    zipf: &Zipf,
    client: u64,
    store: &Vicos<C>,
    start: Instant,
) -> Result<RunStats, BenchError> {
    let mut rng = spec.client_rng(client);
    let mut payload = Payload::new(&mut rng, spec.object_size);
    let mut stats = RunStats::new(spec.objects as usize);
    let (warmup, end) = match spec.length {
        Length::Ops(_) => (Duration::ZERO, None),
        Length::Timed { warmup, measure } => (warmup, Some(warmup + measure)),
    };
    let mut measured_from = None;
    let mut n = 0;
    loop {
        let now = start.elapsed();
        match (spec.length, end) {
            (Length::Ops(ops), _) if n >= ops => break,
            (_, Some(end)) if now >= end => break,
            _ => {}
        }
        n += 1;
        let measuring = now >= warmup;
        if measuring && measured_from.is_none() {
            measured_from = Some(Instant::now());
        }
        let rank = zipf.sample(&mut rng);
        let key = object_key(rank);
        let t = Instant::now();
        let (kind, success, bytes) = if rng.gen::<f64>() < spec.read_ratio {
            match store.get(key.as_bytes())? {
                Outcome::Done(v) => (OpKind::Read, true, v.map_or(0, |v| v.len())),
                Outcome::Abort => (OpKind::Read, false, 0),
            }
        } else {
            let value = payload.next();
            let ok = store.put(key.as_bytes(), value)?.done().is_some();
            (OpKind::Write, ok, value.len())
        };
        if measuring {
            stats.record(kind, rank as usize - 1, success, bytes as u64, Some(t.elapsed()));
        }
    }
    stats.elapsed = measured_from.map_or(Duration::ZERO, |t| t.elapsed());
    Ok(stats)
}

/// Runs the workload on the deterministic simulator: same protocol and
/// relation, interleavings chosen by `seed`, no object store and no
/// latencies. Requires [`Length::Ops`].
pub fn simulate_conflicts(spec: &WorkloadSpec, sim: SimConfig) -> Result<RunStats, BenchError> {
    let zipf = spec.validate()?;
    let Length::Ops(ops) = spec.length else {
        return Err(BenchError::Config("simulated runs need an operation count".into()));
    };
    let scripts = (0..spec.clients)
        .map(|c| {
            let mut rng = spec.client_rng(c);
            let mut payload = Payload::new(&mut rng, spec.object_size);
            (0..ops)
                .map(|_| {
                    let key = object_key(zipf.sample(&mut rng));
                    if rng.gen::<f64>() < spec.read_ratio {
                        AdictOp::Get { key }
                    } else {
                        let mut nonce = [0; NONCE_LEN];
                        rng.fill_bytes(&mut nonce);
                        let record = ObjectRecord {
                            nonce,
                            hash: object_hash(payload.next()),
                        };
                        AdictOp::Put {
                            key,
                            value: record.to_bytes(),
                        }
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    let cfg = SimConfig {
        clients: spec.clients,
        relation: spec.mode.relation(),
        ..sim
    };
    let out = Sim::new(cfg, spec.seed, scripts).run(&mut Honest);
    if let Some(a) = out.alarms.values().next() {
        return Err(BenchError::Alarm(a.clone()));
    }
    if !out.corrupted.is_empty() {
        return Err(BenchError::Corrupted(out.corrupted.len()));
    }
    let mut stats = RunStats::new(spec.objects as usize);
    for ev in out.history.ops.iter().filter(|e| e.is_complete()) {
        let (kind, key) = match &ev.op {
            AdictOp::Get { key } => (OpKind::Read, key),
            AdictOp::Put { key, .. } => (OpKind::Write, key),
            _ => continue,
        };
        let rank: usize = std::str::from_utf8(&key.as_bytes()[3..]).unwrap().parse().unwrap();
        let success = !ev.is_aborted();
        let bytes = match (&ev.op, &ev.outcome) {
            (AdictOp::Put { .. }, Some(Outcome::Done(_)))
            | (_, Some(Outcome::Done(AdictResponse::Value(_)))) => spec.object_size as u64,
            _ => 0,
        };
        stats.record(kind, rank - 1, success, bytes, None);
    }
    Ok(stats)
}
