use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use logitreg_bench::{bench_threat, conv_fixture};
use logitreg_core::attacks::{fgsm_attack, pgd_attack};
use logitreg_core::graph::Tape;
use logitreg_core::tensor::Tensor;
use std::hint::black_box;

fn tape_matmul(c: &mut Criterion) {
    let a = Tensor::new(vec![64, 64], (0..64 * 64).map(|i| (i % 17) as f64 * 0.1).collect())
        .unwrap();
    let b = Tensor::new(vec![64, 64], (0..64 * 64).map(|i| (i % 13) as f64 * 0.1).collect())
        .unwrap();
    c.bench_function("tape_matmul_64", |bench| {
        bench.iter_batched(
            Tape::new,
            |mut tape| {
                let an = tape.leaf(a.clone());
                let bn = tape.leaf(b.clone());
                let mm = tape.matmul(an, bn).unwrap();
                let loss = tape.sum(mm).unwrap();
                black_box(tape.backward(loss).unwrap());
            },
            BatchSize::SmallInput,
        );
    });
}

fn conv_forward(c: &mut Criterion) {
    let (params, dataset) = conv_fixture(128);
    c.bench_function("conv_forward_128", |bench| {
        bench.iter(|| black_box(params.forward_logits(dataset.examples()).unwrap()));
    });
}

fn fgsm_batch(c: &mut Criterion) {
    let (params, dataset) = conv_fixture(32);
    let threat = bench_threat();
    c.bench_function("fgsm_32", |bench| {
        bench.iter(|| {
            black_box(
                fgsm_attack(&params, dataset.examples(), dataset.labels(), &threat).unwrap(),
            )
        });
    });
}

fn pgd_batch(c: &mut Criterion) {
    let (params, dataset) = conv_fixture(32);
    let threat = bench_threat();
    c.bench_function("pgd5_32", |bench| {
        bench.iter(|| {
            black_box(
                pgd_attack(&params, dataset.examples(), dataset.labels(), &threat, 11).unwrap(),
            )
        });
    });
}

criterion_group!(benches, tape_matmul, conv_forward, fgsm_batch, pgd_batch);
criterion_main!(benches);
