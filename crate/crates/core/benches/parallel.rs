use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use msgdn::exec::{with_mode, Mode};
use msgdn::model::{InitOptions, ModelConfig, Msgdn};
use msgdn::tensor::kernels::{conv2d, ConvGeom};
use msgdn::Tensor;

fn pseudo(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed;
    Tensor::from_fn(shape.to_vec(), |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    })
}

const MODES: [(&str, Mode); 2] = [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)];

fn bench_conv(c: &mut Criterion) {
    let x = pseudo(&[4, 32, 64, 64], 1);
    let w = pseudo(&[32, 32, 3, 3], 2);
    let mut group = c.benchmark_group("conv2d_3x3_32ch_4x64x64");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_mode(mode, || conv2d(&x, &w, None, ConvGeom::SAME3).unwrap()))
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let net = Msgdn::init(ModelConfig::tiny(), 0, InitOptions::dense()).unwrap();
    let x = pseudo(&[2, 3, 64, 64], 3);
    let mut group = c.benchmark_group("msgdn_tiny_forward_2x64x64");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_mode(mode, || net.forward(&x).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_forward);
criterion_main!(benches);
