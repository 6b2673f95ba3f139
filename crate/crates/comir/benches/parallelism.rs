//! Sequential vs data-parallel execution of the batch-level hot loops:
//! convolution forward/backward and scene rasterization.
//!
//! Run with `cargo bench --bench parallelism`; build with
//! `--no-default-features` to bench the sequential-only configuration.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use comir::kernels::{conv2d_backward, conv2d_forward, ConvSpec};
use comir::par::{map_indexed, Exec};
use comir::synth::{generate_scene, render, SceneSpec};

fn execs() -> Vec<(&'static str, Exec)> {
    let mut v = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Exec::Parallel));
    v
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ConvSpec { kernel: 3, stride: 2 };
    let input = Array4::from_shape_fn((16, 8, 32, 32), |_| rng.gen_range(-1.0..1.0));
    let weight = Array4::from_shape_fn((16, 8, 3, 3), |_| rng.gen_range(-0.3..0.3));
    let bias = Array1::from_shape_fn(16, |_| rng.gen_range(-0.1..0.1));
    let gout = conv2d_forward(&input.view(), &weight.view(), &bias, spec, Exec::Sequential);

    let mut group = c.benchmark_group("conv2d_forward");
    for (name, exec) in execs() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| conv2d_forward(&input.view(), &weight.view(), &bias, spec, exec))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("conv2d_backward");
    for (name, exec) in execs() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| conv2d_backward(&input.view(), &weight.view(), &gout.view(), spec, exec))
        });
    }
    group.finish();
}

fn bench_render(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scenes: Vec<SceneSpec> = (0..64).map(|_| generate_scene(&mut rng)).collect();

    let mut group = c.benchmark_group("scene_render_64px");
    for (name, exec) in execs() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| map_indexed(exec, scenes.len(), |i| render(&scenes[i], 64)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_render);
criterion_main!(benches);
