//! Microbenchmarks: dense matmul, the attention-variant forwards, one
//! incremental decode step, and the Monte-Carlo loss kernel.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skv1_core::attn::HeadInjection;
use skv1_core::cache::{decode_step, DecodeCache};
use skv1_core::config::{ModelConfig, Positional, VariantKind};
use skv1_core::mesa::{gen_batch, mc_loss, MesaParams, ModelKind, TaskSpec};
use skv1_core::model::init_weights;
use skv1_core::tensor::{matmul, Tensor};

fn bench_config(variant: VariantKind) -> ModelConfig {
    ModelConfig {
        layers: 4,
        dim: 128,
        heads: 4,
        ffn_dim: 512,
        vocab: 256,
        n_max: 128,
        variant,
        skip_ratio: 0.5,
        injection: HeadInjection::SecondHalf,
        positional: Positional::Learned,
        elem_bytes: 2,
    }
}

fn matmul_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul_f32");
    for size in [64usize, 128, 256] {
        let a = Tensor::<f32>::new(
            vec![size, size],
            (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = a.clone();
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |bench, _| {
            bench.iter(|| matmul(&a, &b).unwrap());
        });
    }
    group.finish();
}

fn forward_bench(c: &mut Criterion) {
    let tokens: Vec<usize> = (0..64).map(|i| (i * 31 + 7) % 256).collect();
    let mut group = c.benchmark_group("forward_64_tokens");
    for variant in [
        VariantKind::Mha,
        VariantKind::SkipV1,
        VariantKind::Gqa { groups: 2 },
        VariantKind::SkipV1Gqa { groups: 2 },
        VariantKind::Mla { d_c: 64, d_r: 16 },
        VariantKind::SkipV1Yoco,
    ] {
        let cfg = bench_config(variant);
        let ck = init_weights(&cfg, 1).unwrap();
        group.bench_with_input(
            BenchmarkId::from_parameter(variant.name()),
            &variant,
            |bench, _| {
                bench.iter(|| ck.forward(&tokens).unwrap());
            },
        );
    }
    group.finish();
}

fn decode_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode_64th_token");
    for variant in [VariantKind::Mha, VariantKind::SkipV1] {
        let cfg = bench_config(variant);
        let ck = init_weights(&cfg, 2).unwrap();
        let mut warm = DecodeCache::new(&cfg);
        for i in 0..63 {
            decode_step(&ck, &mut warm, (i * 13 + 1) % 256).unwrap();
        }
        group.bench_with_input(
            BenchmarkId::from_parameter(variant.name()),
            &variant,
            |bench, _| {
                bench.iter_batched(
                    || warm.clone(),
                    |mut cache| decode_step(&ck, &mut cache, 42).unwrap(),
                    criterion::BatchSize::SmallInput,
                );
            },
        );
    }
    group.finish();
}

fn mesa_loss_bench(c: &mut Criterion) {
    let spec = TaskSpec::with_identity_mean(4, 2, 16, 0.1, 3.0, 1, 3);
    let batch = gen_batch(&spec, 1024, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = MesaParams::random(4, 2, 0.05, &mut rng);
    c.bench_function("mesa_loss_1024", |bench| {
        bench.iter(|| mc_loss(ModelKind::Compressed, &params, &batch));
    });
}

criterion_group!(benches, matmul_bench, forward_bench, decode_bench, mesa_loss_bench);
criterion_main!(benches);
