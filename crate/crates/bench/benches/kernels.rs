use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use bitforge_core::cost::estimate_kernel;
use bitforge_core::kernel::assemble_kernel;
use bitforge_core::model::generate_layer;
use bitforge_core::reference::conv_ref;
use bitforge_core::sim::simulate_layer;
use bitforge_core::tree::reduce12;
use bitforge_core::{plan_mcm, required_odds, ActivationMap, FoldConfig, InstanceConfig, LayerSpec, SimMode};

fn mcm(c: &mut Criterion) {
    let odds = required_odds((-64..=63).filter(|&w| w != 0)).unwrap();
    c.bench_function("plan_mcm int7", |b| b.iter(|| plan_mcm(black_box(&odds)).unwrap()));
}

fn compressor(c: &mut Criterion) {
    c.bench_function("reduce12 all inputs", |b| {
        b.iter(|| {
            let mut sum = 0u32;
            for m in 0u32..4096 {
                let bits: [bool; 12] = std::array::from_fn(|k| m >> k & 1 == 1);
                sum += reduce12(black_box(bits)) as u32;
            }
            sum
        })
    });
}

fn layer(c: &mut Criterion) {
    let spec = LayerSpec::new("bench.b", 32, 32, 3, 1, 7);
    let (w, _) = generate_layer(&spec, 0.8, 1).unwrap();
    let fold = FoldConfig::even(1, spec.in_channels).unwrap();
    let inst = InstanceConfig::single(&spec);
    let data: Vec<u8> = (0..32 * 49).map(|i| (i * 71 % 256) as u8).collect();
    let ifm = ActivationMap::from_bytes(32, 7, 7, data).unwrap();
    let graph = assemble_kernel(&spec, &w, &fold, &inst).unwrap();

    c.bench_function("assemble 32x32 3x3", |b| b.iter(|| assemble_kernel(&spec, &w, &fold, &inst).unwrap()));
    c.bench_function("estimate 32x32 3x3", |b| b.iter(|| estimate_kernel(black_box(&graph))));
    c.bench_function("conv_ref 32x32 3x3 7x7", |b| b.iter(|| conv_ref(&spec, &w, black_box(&ifm)).unwrap()));
    let mut group = c.benchmark_group("simulate 32x32 3x3 7x7");
    group.sample_size(10);
    group.bench_function("fast", |b| b.iter(|| simulate_layer(&graph, black_box(&ifm), SimMode::Fast).unwrap()));
    group.bench_function("bit-true", |b| b.iter(|| simulate_layer(&graph, black_box(&ifm), SimMode::BitTrue).unwrap()));
    group.finish();
}

criterion_group!(benches, mcm, compressor, layer);
criterion_main!(benches);
