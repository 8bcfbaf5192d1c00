use criterion::{criterion_group, criterion_main, Criterion};
use nrfc::autograd::Graph;
use nrfc::codec::{bind, bind_constants, code_plane, QuantMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn codec(c: &mut Criterion) {
    let channels = 8;
    let params = nrfc_bench::codec(channels);
    let plane = nrfc_bench::plane(channels, 96);
    let mut group = c.benchmark_group("plane_codec_96");
    group.sample_size(10);
    group.bench_function("forward", |b| {
        b.iter(|| {
            let mut g = Graph::no_grad();
            let p = bind_constants(&mut g, &params);
            let x = g.constant(plane.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let code = code_plane(&mut g, &p, x, QuantMode::MeanRound, &mut rng);
            g.value(code.bits_y).data()[0]
        })
    });
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = bind(&mut g, &params, |_| true);
            let x = g.constant(plane.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let code = code_plane(&mut g, &p, x, QuantMode::Noise, &mut rng);
            let d = g.sub(code.x_hat, x);
            let sq = g.square(d);
            let mse = g.mean_all(sq);
            let loss = g.add(mse, code.bits_y);
            g.backward(loss)
        })
    });
    group.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
