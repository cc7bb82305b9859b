//! Hot-path benchmarks: cost aggregation as the class count grows
//! (the memory/compute-linearity claim), the guided upsampler, one
//! optimizer step, and a sliding-window prediction.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ndarray::Array3;

use ovseg_core::agg::{Aggregator, AggregatorConfig};
use ovseg_core::cost::CostVolume;
use ovseg_core::infer::{predict_full, SlidingWindowConfig};
use ovseg_core::model::{Model, ModelConfig};
use ovseg_core::nn::component_rng;
use ovseg_core::train::{
    synthetic_class_names, synthetic_dataset, train_step, SyntheticConfig, TrainConfig, Trainer,
};
use ovseg_core::upsample::BilateralUpsampler;
use ovseg_core::vocab::{ClassVocabulary, PromptTemplateSet};
use rand::Rng;

fn desk_aggregator() -> Aggregator {
    let cfg = AggregatorConfig {
        d_agg: 16,
        num_blocks: 1,
        window_size: 4,
        num_heads: 2,
        ..AggregatorConfig::default()
    };
    Aggregator::new(0, cfg).unwrap()
}

fn random_volume(seed: u64, h: usize, w: usize, m: usize) -> CostVolume {
    let mut rng = component_rng(seed, "bench");
    CostVolume { values: Array3::from_shape_fn((h, w, m), |_| rng.random_range(-1.0..1.0)) }
}

/// Aggregation cost should scale linearly with the class count M.
fn bench_aggregate(c: &mut Criterion) {
    let agg = desk_aggregator();
    let mut group = c.benchmark_group("aggregate_16x16");
    for m in [1usize, 2, 4, 8] {
        let v = random_volume(1, 16, 16, m);
        group.throughput(Throughput::Elements(m as u64));
        group.bench_with_input(BenchmarkId::from_parameter(m), &v, |b, v| {
            b.iter(|| black_box(agg.aggregate(black_box(v))))
        });
    }
    group.finish();
}

fn bench_upsample(c: &mut Criterion) {
    let mut rng = component_rng(2, "guide");
    let image = Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(0.0..1.0));
    let feat = Array3::from_shape_fn((16, 16, 16), |_| rng.random_range(-1.0..1.0));
    let up = BilateralUpsampler::default();
    c.bench_function("bilateral_upsample_16_to_64", |b| {
        b.iter(|| {
            let plan = up.plan(black_box(&image), 16, 16).unwrap();
            black_box(plan.apply(black_box(&feat)))
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let model = Model::new(ModelConfig::desk()).unwrap();
    let cfg = TrainConfig { batch_size: 1, ..TrainConfig::default() };
    let vocab = ClassVocabulary::new(synthetic_class_names()).unwrap();
    let templates = PromptTemplateSet::default_set();
    let data = synthetic_dataset(3, &SyntheticConfig { num_images: 1, ..Default::default() });
    let mut trainer = Trainer::new(model, cfg, vocab, templates).unwrap();
    c.bench_function("train_step_desk_64", |b| {
        b.iter(|| {
            train_step(
                &mut trainer.model,
                &mut trainer.opt,
                black_box(&data),
                &trainer.cfg,
                &trainer.vocab,
                &trainer.templates,
            )
            .unwrap()
        })
    });
}

fn bench_predict(c: &mut Criterion) {
    let model = Model::new(ModelConfig::desk()).unwrap();
    let vocab = ClassVocabulary::new(synthetic_class_names()).unwrap();
    let emb = model.embed_classes(&vocab, &PromptTemplateSet::default_set()).unwrap();
    let mut rng = component_rng(4, "image");
    let image = Array3::from_shape_fn((96, 96, 3), |_| rng.random_range(0.0..1.0));
    let window = SlidingWindowConfig { eval_resolution: 64, window: 32, stride: 16 };
    c.bench_function("predict_sliding_64", |b| {
        b.iter(|| black_box(predict_full(&model, black_box(&image), &emb, &window).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_aggregate,
    bench_upsample,
    bench_train_step,
    bench_predict
);
criterion_main!(benches);
