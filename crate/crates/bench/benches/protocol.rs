use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vicos_bench::deploy;
use vicos_core::bench::Zipf;
use vicos_core::crypto::Domain;
use vicos_core::protocol::setup;
use vicos_core::{Adict, ClientId, Scheme};

fn signatures(c: &mut Criterion) {
    let mut g = c.benchmark_group("signature");
    let msg = [0x5a; 96];
    for scheme in [Scheme::Mac, Scheme::PublicKey] {
        let ring = setup::<Adict, _>(scheme, 1, &mut ChaCha8Rng::seed_from_u64(2)).for_client(ClientId(1)).ring().unwrap();
        let sig = ring.sign(ClientId(1), Domain::Commit, &msg).unwrap();
        g.bench_function(BenchmarkId::new("sign", format!("{scheme:?}")), |b| {
            b.iter(|| ring.sign(ClientId(1), Domain::Commit, black_box(&msg)))
        });
        g.bench_function(BenchmarkId::new("verify", format!("{scheme:?}")), |b| {
            b.iter(|| ring.verify(ClientId(1), Domain::Commit, black_box(&msg), &sig))
        });
    }
    g.finish();
}

fn store_ops(c: &mut Criterion) {
    let mut g = c.benchmark_group("store");
    let value = vec![0xab; 10 << 10];
    for scheme in [Scheme::Mac, Scheme::PublicKey] {
        for fast in [false, true] {
            let d = deploy(1, scheme, fast);
            let v = &d.stores[0];
            v.put(b"object", &value).unwrap();
            let label = format!("{scheme:?}{}", if fast { "-fast" } else { "" });
            g.bench_function(BenchmarkId::new("put-10k", &label), |b| b.iter(|| v.put(b"object", &value).unwrap()));
            g.bench_function(BenchmarkId::new("get-10k", &label), |b| b.iter(|| v.get(b"object").unwrap()));
        }
    }
    g.finish();
}

fn zipf(c: &mut Criterion) {
    let z = Zipf::new(64, 0.99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    c.bench_function("zipf-sample", |b| b.iter(|| z.sample(&mut rng)));
}

criterion_group!(benches, signatures, store_ops, zipf);
criterion_main!(benches);
