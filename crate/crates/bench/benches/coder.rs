use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use nrfc::bitstream::{decode_symbols, encode_symbols};

fn coder(c: &mut Criterion) {
    let (tables, s) = nrfc_bench::symbol_stream(20_000);
    let bytes = encode_symbols(&s.symbols, &tables, &s.contexts).unwrap();
    let mut group = c.benchmark_group("range_coder");
    group.throughput(Throughput::Elements(s.symbols.len() as u64));
    group.bench_function("encode", |b| {
        b.iter(|| encode_symbols(&s.symbols, &tables, &s.contexts).unwrap())
    });
    group.bench_function("decode", |b| {
        b.iter(|| decode_symbols(&bytes, &tables, &s.contexts).unwrap())
    });
    group.finish();
}

criterion_group!(benches, coder);
criterion_main!(benches);
