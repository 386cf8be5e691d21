use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wheatvit::backbone::{Backbone, ModelConfig, Preset};
use wheatvit::datagen::{gen_blobworld, BlobWorldConfig};
use wheatvit::image::Image;
use wheatvit::ssl::{HeadConfig, Pretrainer, SslConfig};
use wheatvit::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn images(n: usize) -> Vec<Image> {
    gen_blobworld(&BlobWorldConfig::default(), 1, n, Exec::Sequential)
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect()
}

fn encode(c: &mut Criterion) {
    let mut bb = Backbone::new(ModelConfig::preset(Preset::Tiny), 0).unwrap();
    bb.freeze();
    let imgs = images(16);
    assert_eq!(
        bb.encode_batch(&imgs, Exec::Sequential).unwrap(),
        bb.encode_batch(&imgs, Exec::Parallel).unwrap()
    );
    let mut g = c.benchmark_group("encode_16x64px");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| black_box(bb.encode_batch(&imgs, e).unwrap()))
        });
    }
    g.finish();
}

fn pretrain_step(c: &mut Criterion) {
    let cfg = SslConfig {
        head: HeadConfig {
            hidden: 32,
            bottleneck: 16,
            prototypes: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let imgs = images(8);
    let mut g = c.benchmark_group("pretrain_step_8img");
    for (name, exec) in MODES {
        let mut t = Pretrainer::new(ModelConfig::preset(Preset::Tiny), cfg.clone(), 0, 1000).unwrap();
        t.exec = exec;
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(t.step_images(&imgs, 3).unwrap()))
        });
    }
    g.finish();
}

fn datagen(c: &mut Criterion) {
    let cfg = BlobWorldConfig::default();
    let mut g = c.benchmark_group("blobworld_64");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| black_box(gen_blobworld(&cfg, 9, 64, e).unwrap()))
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(3));
    targets = encode, pretrain_step, datagen
}
criterion_main!(benches);
