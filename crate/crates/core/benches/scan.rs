use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use osdmamba::convssm::{scan_parallel, scan_sequential, ConvSsmParameters, ConvState};
use osdmamba::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn convssm_scan(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (p, u, side) = (4, 4, 16);
    let params = ConvSsmParameters::init_hippo(p, u, u, 3, &mut rng);
    let x0 = ConvState::zeros(p, side, side);
    let mut group = c.benchmark_group("convssm_scan");
    group.sample_size(10);
    for l in [16, 64, 256] {
        let inputs = Tensor::from_fn(&[l, u, side, side], |_| rng.gen_range(-1.0..1.0));
        group.bench_with_input(BenchmarkId::new("sequential", l), &inputs, |b, x| {
            b.iter(|| scan_sequential(x, &x0, &params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parallel", l), &inputs, |b, x| {
            b.iter(|| scan_parallel(x, &x0, &params).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, convssm_scan);
criterion_main!(benches);
