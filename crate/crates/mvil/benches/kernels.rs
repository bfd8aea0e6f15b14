//! Kernel and layer benchmarks comparing the sequential implementations
//! against the rayon data-parallel ones (when the `parallel` feature is
//! enabled; with --no-default-features only the sequential groups run).

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use mvil::layers::{self, FusionLayerConfig, LayerKind};
use mvil::tensor::kernels;
use mvil::tensor::Tape;

fn fill(seed: u64, len: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..len)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &size in &[64usize, 128, 256] {
        let a = fill(1, size * size);
        let b = fill(2, size * size);
        let mut out = vec![0.0; size * size];
        group.bench_with_input(BenchmarkId::new("seq", size), &size, |bench, &s| {
            bench.iter(|| {
                kernels::matmul_seq(black_box(&a), black_box(&b), s, s, s, &mut out);
                black_box(out[0])
            })
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", size), &size, |bench, &s| {
            bench.iter(|| {
                kernels::matmul_par(black_box(&a), black_box(&b), s, s, s, &mut out);
                black_box(out[0])
            })
        });
    }
    group.finish();
}

fn bench_gelu(c: &mut Criterion) {
    let mut group = c.benchmark_group("gelu");
    let n = 1 << 17;
    let x = fill(3, n);
    let mut out = vec![0.0; n];
    group.bench_function("seq", |bench| {
        bench.iter(|| {
            kernels::gelu_seq(black_box(&x), &mut out);
            black_box(out[0])
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par", |bench| {
        bench.iter(|| {
            kernels::gelu_par(black_box(&x), &mut out);
            black_box(out[0])
        })
    });
    group.finish();
}

fn bench_layer_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("layer_forward");
    // dispatching path at desk-scale training dims
    for kind in [LayerKind::Transformer, LayerKind::Mlp, LayerKind::MlpTinyAtt] {
        let cfg = FusionLayerConfig {
            m: 4,
            k: 16,
            ..FusionLayerConfig::new(kind, 64, 32)
        };
        let store =
            layers::build_param_store(&layers::layer_param_specs(&cfg, "l"), 7).unwrap();
        let x = fill(4, cfg.n * cfg.d);
        group.bench_function(kind.as_str(), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let xin = tape.input(vec![cfg.n, cfg.d], x.clone()).unwrap();
                let y = layers::layer_forward(&mut tape, &store, "l", &cfg, xin).unwrap();
                black_box(tape.value(y)[0])
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_gelu, bench_layer_forward);
criterion_main!(benches);
