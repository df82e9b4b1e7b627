use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::time::Duration;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Read,
    Write,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Read => "read",
            OpKind::Write => "write",
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct KindStats {
    pub count: u64,
    pub success: u64,
    pub abort: u64,
    /// Payload bytes moved by successful operations.
    pub bytes: u64,
    /// Empty when latencies were not measured.
    pub latencies: Vec<Duration>,
}

impl KindStats {
    pub fn success_rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.success as f64 / self.count as f64)
    }

    /// Nearest-rank quantile, `q` in `[0, 1]`.
    pub fn quantile(&self, q: f64) -> Option<Duration> {
        if self.latencies.is_empty() {
            return None;
        }
        let mut v = self.latencies.clone();
        v.sort_unstable();
        let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Some(v[rank - 1])
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunStats {
    pub kinds: BTreeMap<OpKind, KindStats>,
    /// Accesses per object, indexed by rank minus one.
    pub histogram: Vec<u64>,
    /// Length of the measured interval; zero for simulated runs.
    pub elapsed: Duration,
}

impl RunStats {
    pub fn new(objects: usize) -> Self {
        RunStats {
            histogram: vec![0; objects],
            ..RunStats::default()
        }
    }

    pub fn record(&mut self, kind: OpKind, object: usize, success: bool, bytes: u64, latency: Option<Duration>) {
        let k = self.kinds.entry(kind).or_default();
        k.count += 1;
        if success {
            k.success += 1;
            k.bytes += bytes;
        } else {
            k.abort += 1;
        }
        k.latencies.extend(latency);
        self.histogram[object] += 1;
    }

    /// Adds the counts of `other`, which covers the same objects.
    pub fn merge(&mut self, other: RunStats) {
        for (kind, s) in other.kinds {
            let k = self.kinds.entry(kind).or_default();
            k.count += s.count;
            k.success += s.success;
            k.abort += s.abort;
            k.bytes += s.bytes;
            k.latencies.extend(s.latencies);
        }
        for (a, b) in self.histogram.iter_mut().zip(other.histogram) {
            *a += b;
        }
        self.elapsed = self.elapsed.max(other.elapsed);
    }

    pub fn kind(&self, kind: OpKind) -> KindStats {
        self.kinds.get(&kind).cloned().unwrap_or_default()
    }

    pub fn total(&self) -> u64 {
        self.kinds.values().map(|k| k.count).sum()
    }

    pub fn throughput(&self, kind: OpKind) -> Option<f64> {
        let secs = self.elapsed.as_secs_f64();
        (secs > 0.0).then(|| self.kind(kind).bytes as f64 / secs)
    }

    pub fn write_csv(&self, out: &mut impl io::Write) -> io::Result<()> {
        writeln!(out, "op-kind,count,success,abort,p50_us,p95_us,p99_us,throughput_bytes_per_s")?;
        let us = |d: Option<Duration>| d.map(|d| d.as_micros().to_string()).unwrap_or_default();
        for (kind, s) in &self.kinds {
            writeln!(
                out,
                "{kind},{},{},{},{},{},{},{}",
                s.count,
                s.success,
                s.abort,
                us(s.quantile(0.50)),
                us(s.quantile(0.95)),
                us(s.quantile(0.99)),
                self.throughput(*kind).map(|t| format!("{t:.0}")).unwrap_or_default(),
            )?;
        }
        Ok(())
    }
}
