use std::hint::black_box;

use cacl_bench::{random_matrix, synthetic};
use cacl_core::clustering::{dbscan, pairwise_distance};
use cacl_core::loss::{total_loss, BatchOutputs, ClusterCenters, ClusterContext, LossConfig};
use cacl_core::trainer::{cluster_features, TrainConfig, TrainState};
use cacl_core::Tape;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn tape(c: &mut Criterion) {
    let x = random_matrix(16, 512, 0);
    let w = random_matrix(512, 64, 1);
    c.bench_function("tape/matmul_16x512x64_backward", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone(), false);
            let wv = t.leaf(w.clone(), true);
            let y = t.matmul(xv, wv).unwrap();
            let s = t.sum(y).unwrap();
            black_box(t.backward(s).unwrap().wrt(wv));
        })
    });

    let (p, z, x2) = (
        random_matrix(16, 64, 2),
        random_matrix(16, 64, 3),
        random_matrix(16, 64, 4),
    );
    let centers = ClusterCenters::new(random_matrix(10, 64, 5));
    let centers2 = ClusterCenters::new(random_matrix(10, 64, 6));
    let labels: Vec<Option<usize>> = (0..16).map(|i| (i % 4 != 3).then_some(i % 10)).collect();
    let cfg = LossConfig::cacl(0.1);
    c.bench_function("loss/total_batch16_backward", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let out = BatchOutputs {
                x: t.leaf(p.clone(), true),
                z: Some(t.leaf(z.clone(), true)),
                x2: Some(t.leaf(x2.clone(), true)),
                z2: None,
            };
            let ctx = ClusterContext {
                centers: &centers,
                centers2: &centers2,
                labels: &labels,
            };
            let br = total_loss(&mut t, &out, Some(ctx), &cfg).unwrap();
            black_box(t.backward(br.total_var.unwrap()).unwrap());
        })
    });
}

fn clustering(c: &mut Criterion) {
    let features = random_matrix(300, 64, 7);
    let dist = pairwise_distance(&features).unwrap();
    c.bench_function("clustering/dbscan_300", |b| b.iter(|| black_box(dbscan(&dist, 0.9, 4))));
    let cfg = TrainConfig {
        dbscan_d: 0.9,
        dbscan_d_fine: 0.85,
        ..TrainConfig::benchmark()
    };
    c.bench_function("clustering/distance_dbscan_refine_300", |b| {
        b.iter(|| black_box(cluster_features(&features, &cfg, 0).unwrap()))
    });
}

fn training(c: &mut Criterion) {
    let ds = synthetic();
    let cfg = TrainConfig::benchmark();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("epoch_benchmark_preset", |b| {
        b.iter_batched(
            || TrainState::new(&cfg, &ds).unwrap(),
            |mut st| black_box(st.epoch(&ds).unwrap().loss_total),
            BatchSize::LargeInput,
        )
    });
    let st = TrainState::new(&cfg, &ds).unwrap();
    group.bench_function("evaluate_query_gallery", |b| {
        b.iter(|| black_box(st.evaluate(&ds).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, tape, clustering, training);
criterion_main!(benches);
