use criterion::{criterion_group, criterion_main, Criterion};

use blurspace::imaging::Pair;
use blurspace::{ArchConfig, OptimizerConfig, PairedDataset, TrainState};
use blurspace_bench::blurred_pair;

fn training_step(c: &mut Criterion) {
    let (sharp, blurry) = blurred_pair(1, 32).expect("fixture");
    let data = PairedDataset::new(vec![Pair {
        id: "p0".into(),
        sharp,
        blurry,
    }])
    .expect("dataset");
    let mut state = TrainState::new(ArchConfig::default(), OptimizerConfig::default(), 0, 1e-3).expect("state");
    c.bench_function("train_step_32x32", |b| b.iter(|| state.step(&data).expect("step")));
}

fn operator_forward(c: &mut Criterion) {
    let (sharp, blurry) = blurred_pair(2, 32).expect("fixture");
    let state = TrainState::new(ArchConfig::default(), OptimizerConfig::default(), 0, 1e-3).expect("state");
    let k = state.model.extract_kernel(&sharp, &blurry).expect("kernel");
    c.bench_function("apply_blur_32x32", |b| {
        b.iter(|| state.model.apply_blur(&sharp, &k).expect("forward"))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = training_step, operator_forward
}
criterion_main!(benches);
