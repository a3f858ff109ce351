use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pirdsn::pir_multi::{corrupt, m_answer, m_query, m_reconstruct};
use pirdsn::pir_single::{hint, s_answer, s_decrypt, s_query};
use pirdsn::{Corruption, SpirParams};
use pirdsn_bench::{random_db, rng};

const RECORD_LEN: usize = 1024;
const SIZES: [u64; 4] = [64, 128, 256, 512];

fn spir_answer(c: &mut Criterion) {
    let params = SpirParams::default();
    let mut r = rng(1);
    let mut g = c.benchmark_group("spir_answer");
    for n in SIZES {
        let db = random_db(n, RECORD_LEN, &mut r);
        let (_, q) = s_query(n / 2, n, RECORD_LEN, 0, &params, &mut r).unwrap();
        g.throughput(Throughput::Elements(n));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| s_answer(black_box(&db), black_box(&q)).unwrap())
        });
    }
    g.finish();
}

fn spir_client(c: &mut Criterion) {
    let params = SpirParams::default();
    let mut r = rng(2);
    let n = 256;
    let db = random_db(n, RECORD_LEN, &mut r);
    let h = hint(&db, &params);
    c.bench_function("spir_query_256", |b| b.iter(|| s_query(7, n, RECORD_LEN, 0, &params, &mut r).unwrap()));
    let (st, q) = s_query(7, n, RECORD_LEN, 0, &params, &mut r).unwrap();
    let a = s_answer(&db, &q).unwrap();
    c.bench_function("spir_decrypt_256", |b| b.iter(|| s_decrypt(&st, black_box(&a), Some(&h)).unwrap()));
    c.bench_function("spir_hint_256", |b| b.iter(|| hint(black_box(&db), &params)));
}

fn mpir(c: &mut Criterion) {
    let mut r = rng(3);
    let mut g = c.benchmark_group("mpir_answer");
    for n in SIZES {
        let db = random_db(n, RECORD_LEN, &mut r);
        let (_, qs) = m_query(n / 2, n, RECORD_LEN, 0, 4, 1, &mut r).unwrap();
        g.throughput(Throughput::Elements(n));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| m_answer(black_box(&db), &qs[0]).unwrap())
        });
    }
    g.finish();

    let n = 256;
    let db = random_db(n, RECORD_LEN, &mut r);
    let (st, qs) = m_query(9, n, RECORD_LEN, 0, 4, 1, &mut r).unwrap();
    let honest: Vec<_> = qs.iter().map(|q| m_answer(&db, q).unwrap()).collect();
    let mut faulty = honest.clone();
    corrupt(&mut faulty[2], &qs[2], Corruption::RandomWords, &mut r);
    c.bench_function("mpir_reconstruct_honest", |b| b.iter(|| m_reconstruct(&st, black_box(&honest)).unwrap()));
    c.bench_function("mpir_reconstruct_one_faulty", |b| b.iter(|| m_reconstruct(&st, black_box(&faulty)).unwrap()));
}

criterion_group!(benches, spir_answer, spir_client, mpir);
criterion_main!(benches);
