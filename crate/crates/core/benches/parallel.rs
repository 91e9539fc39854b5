//! Sequential against Rayon on the data-parallel kernels. Build without the
//! `parallel` feature and both rows measure the sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use storyboard_core::attention::{
    sub_batched_attention_with, AttentionMode, AttnFeatures, QueryRole, SdsaOptions,
};
use storyboard_core::metrics::{set_consistency, MaskedMeanPool};
use storyboard_core::pipeline::{
    sample, Mode, SampleRequest, StoryboardConfig, ToyModel, ToyModelSpec,
};
use storyboard_core::query_control::{q_flow_batch, BlendWeight, KeyframeIndex};
use storyboard_core::subject_mask::{SegmenterRegistry, SubjectMaskSet};
use storyboard_core::{Parallelism, Tensor};

const STRATEGIES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("rayon", Parallelism::Rayon),
];

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn masks(s: usize, f: usize, p: usize, rng: &mut ChaCha8Rng) -> SubjectMaskSet {
    SubjectMaskSet::from_masks(s, f, p, (0..s * f * p).map(|_| rng.gen_bool(0.4)).collect()).unwrap()
}

fn bench_sdsa(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (s, f, p, d) = (4, 8, 64, 16);
    let feats = AttnFeatures::new(
        random(&[s, f, p, d], &mut rng),
        random(&[s, f, p, d], &mut rng),
        random(&[s, f, p, d], &mut rng),
        0,
        QueryRole::Consistent,
    )
    .unwrap();
    let m = masks(s, f, p, &mut rng);
    let options = SdsaOptions::default();
    let mut g = c.benchmark_group("framewise_sdsa");
    for (name, par) in STRATEGIES {
        g.bench_function(BenchmarkId::new(name, s * f), |b| {
            b.iter(|| {
                let mode = AttentionMode::Framewise {
                    masks: &m,
                    options: &options,
                };
                black_box(sub_batched_attention_with(&feats, mode, s * f, par).unwrap())
            })
        });
    }
    g.finish();
}

fn bench_q_flow(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (s, f, p, d) = (4, 16, 64, 16);
    let q_c = random(&[s, f, p, d], &mut rng);
    let q_v = random(&[s, f, p, d], &mut rng);
    let kf = KeyframeIndex::new(f, 4).unwrap();
    let mut g = c.benchmark_group("q_flow_batch");
    for (name, par) in STRATEGIES {
        g.bench_function(name, |b| {
            b.iter(|| black_box(q_flow_batch(&q_c, &q_v, &kf, BlendWeight::Sigmoid, par).unwrap()))
        });
    }
    g.finish();
}

fn bench_set_consistency(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s, f, p, ch) = (8, 16, 64, 16);
    let frames = random(&[s, f, p, ch], &mut rng);
    let m = masks(s, f, p, &mut rng);
    let mut g = c.benchmark_group("set_consistency");
    for (name, par) in STRATEGIES {
        g.bench_function(name, |b| {
            b.iter(|| black_box(set_consistency(&frames, &m, &MaskedMeanPool, par).unwrap()))
        });
    }
    g.finish();
}

fn bench_sample(c: &mut Criterion) {
    let cfg = StoryboardConfig {
        sampler_steps: 10,
        model: ToyModelSpec {
            layers: 3,
            patches_per_side: 4,
            channels: 8,
            frames: 5,
            weight_seed: 0,
        },
        ..StoryboardConfig::default()
    };
    let model = ToyModel::new(&cfg.model).unwrap();
    let prompts: Vec<String> = (0..3).map(|i| format!("a red fox, scene {i}")).collect();
    let seg = SegmenterRegistry::default().get(&cfg.segmenter).unwrap();
    let mut g = c.benchmark_group("sample_vanilla");
    g.sample_size(10);
    for (name, par) in STRATEGIES {
        g.bench_function(name, |b| {
            b.iter(|| {
                black_box(
                    sample(&SampleRequest {
                        config: &cfg,
                        model: &model,
                        prompts: &prompts,
                        subject: "a red fox",
                        mode: Mode::Vanilla,
                        cache: None,
                        segmenter: seg.as_ref(),
                        par,
                    })
                    .unwrap(),
                )
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_sdsa, bench_q_flow, bench_set_consistency, bench_sample);
criterion_main!(benches);
