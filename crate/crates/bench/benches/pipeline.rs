use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use snapkit_core::autoprompt::nms;
use snapkit_core::geometry::voxel_downsample;
use snapkit_core::metrics::{panoptic_quality, PanopticLabels};
use snapkit_core::model::{ModelConfig, SnapModel};
use snapkit_core::pcdata::{generate_corpus, CorpusConfig, DomainId, SceneSample};
use snapkit_core::promptenc::PromptSet;
use snapkit_core::train::{TrainConfig, Trainer};
use snapkit_service::Rle;

fn scene() -> SceneSample {
    generate_corpus(&CorpusConfig::new(DomainId::Indoor, 1, 11)).unwrap().remove(0)
}

fn model(c: &mut Criterion) {
    let s = scene();
    let m = SnapModel::new(ModelConfig::default()).unwrap();
    c.bench_function("encode_scene_2048", |b| b.iter(|| m.encode_scene(black_box(&s.positions), s.domain, &s.scene_id).unwrap()));
    let feats = m.encode_scene(&s.positions, s.domain, &s.scene_id).unwrap();
    let prompts = PromptSet::single_clicks(&s.positions[..8]);
    c.bench_function("decode_8_prompts", |b| b.iter(|| m.predict_with_features(&feats, black_box(&prompts)).unwrap()));

    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    let mut trainer = Trainer::new(TrainConfig { objects_per_scene: 8, ..Default::default() }).unwrap();
    let mut tm = SnapModel::new(ModelConfig::default()).unwrap();
    group.bench_function("train_step_2048", |b| b.iter(|| trainer.train_step(&mut tm, &s).unwrap()));
    group.finish();
}

fn utilities(c: &mut Criterion) {
    let s = scene();
    c.bench_function("voxel_downsample_2048", |b| b.iter(|| voxel_downsample(black_box(&s.positions), 0.2).unwrap()));

    let masks: Vec<Vec<bool>> = s.instances().keys().map(|id| s.instance_mask(*id)).cycle().take(64).collect();
    let scores: Vec<f32> = (0..masks.len()).map(|i| 1.0 - i as f32 / 100.0).collect();
    c.bench_function("nms_64_masks", |b| b.iter(|| nms(black_box(&masks), &scores, 0.6).unwrap()));

    let gt = PanopticLabels::new(s.instance_ids.clone(), s.class_ids.clone()).unwrap();
    let things = s.class_ids.iter().copied().filter(|c| *c >= 0).collect();
    c.bench_function("panoptic_quality_2048", |b| {
        b.iter(|| panoptic_quality(black_box(&gt), &gt, &things, &Default::default(), false).unwrap())
    });

    c.bench_function("rle_roundtrip_2048", |b| b.iter(|| Rle::encode(black_box(&masks[0])).decode().unwrap()));
}

criterion_group!(benches, model, utilities);
criterion_main!(benches);
