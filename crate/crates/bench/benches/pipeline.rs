use std::hint::black_box;

use asf_bench::{bench_scene, sphere_cloud};
use asf_core::net::{forward, loss_and_grad, prepare};
use asf_core::propagate::trace;
use asf_core::{Architecture, ModelParams};
use criterion::{criterion_group, criterion_main, Criterion};

fn inference(c: &mut Criterion) {
    let cloud = sphere_cloud(0.75, 1024, 2);
    let mut arch = Architecture::new(125).unwrap();
    arch.input_points = 0;
    let params = ModelParams::init(arch, 1).unwrap();
    c.bench_function("forward n=1024 k=5", |b| b.iter(|| forward(black_box(&params), black_box(&cloud)).unwrap()));

    let mut arch = Architecture::new(125).unwrap();
    arch.input_points = 256;
    let params = ModelParams::init(arch.clone(), 1).unwrap();
    let prep = prepare(&arch, &cloud).unwrap();
    let target = [0.1; 16];
    c.bench_function("loss and gradient n=256", |b| {
        b.iter(|| loss_and_grad(black_box(&params), black_box(&prep), &target))
    });
}

fn tracing(c: &mut Criterion) {
    let scene = bench_scene();
    let mut g = c.benchmark_group("trace");
    g.sample_size(10);
    g.bench_function("10k rays, 50 bounces", |b| b.iter(|| trace(black_box(&scene), 10_000, 7, 50).unwrap()));
    g.finish();
}

criterion_group!(benches, inference, tracing);
criterion_main!(benches);
