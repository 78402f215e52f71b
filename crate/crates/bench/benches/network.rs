use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hamflow::gradients::bsm;
use hamflow::integrator::{flow, inject, restricted_flow};
use hamflow::numerics::random_vector;
use hamflow::training::{loss_and_grad, sample_dataset, BoxDomain, Network, TargetFunction, TargetKind};
use hamflow::{Activation, FixedPointConfig, HdnnModel, StructureTag};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TAGS: [StructureTag; 3] = [StructureTag::Theorem1, StructureTag::BlockExplicit, StructureTag::General];

fn model(tag: StructureTag, n: usize, depth: usize) -> HdnnModel {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    HdnnModel::random(tag, n, depth, 0.1, Activation::Tanh, 0.5, &mut rng).unwrap()
}

fn bench_flow(c: &mut Criterion) {
    let fp = FixedPointConfig::default();
    let mut group = c.benchmark_group("restricted_flow");
    for tag in TAGS {
        let m = model(tag, 4, 64);
        let xi = random_vector(&mut ChaCha8Rng::seed_from_u64(1), 4, 1.0);
        group.bench_with_input(BenchmarkId::new(tag.name(), "n4_N64"), &m, |b, m| {
            b.iter(|| restricted_flow(m, black_box(&xi), &fp).unwrap())
        });
    }
    group.finish();
}

fn bench_backprop(c: &mut Criterion) {
    let fp = FixedPointConfig::default();
    let dom = BoxDomain::cube(2, 1.0).unwrap();
    let target = TargetFunction::new(TargetKind::GaussianBump);
    let data = sample_dataset(&dom, &target, 64, 0).unwrap();
    let batch: Vec<usize> = (0..data.len()).collect();
    let mut group = c.benchmark_group("loss_and_grad");
    for depth in [8, 32] {
        let net = Network::new(model(StructureTag::Theorem1, 2, depth), None).unwrap();
        group.bench_with_input(BenchmarkId::new("theorem1_batch64", depth), &net, |b, net| {
            b.iter(|| loss_and_grad(net, &data, black_box(&batch), &fp).unwrap())
        });
    }
    group.finish();
}

fn bench_bsm(c: &mut Criterion) {
    let fp = FixedPointConfig::default();
    let mut group = c.benchmark_group("bsm");
    for tag in TAGS {
        let m = model(tag, 4, 64);
        let xi = random_vector(&mut ChaCha8Rng::seed_from_u64(2), 4, 1.0);
        let traj = flow(&m, &inject(&xi), &fp).unwrap();
        group.bench_with_input(BenchmarkId::new(tag.name(), "n4_N64"), &m, |b, m| {
            b.iter(|| bsm(m, black_box(&traj)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_flow, bench_backprop, bench_bsm);
criterion_main!(benches);
