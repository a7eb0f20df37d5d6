use bshare_core::calibration::{calibrate, CalibrationConfig};
use bshare_core::pipeline::{compress_model, GramSource};
use bshare_core::planner::{build_plan, default_policies, SequentialMode};
use bshare_core::runtime::{forward_logits, Gpt2Model};
use bshare_core::synthetic::{gen_synthetic, synthetic_tokens, SyntheticConfig};
use bshare_core::CompressionRatioSpec;
use criterion::{criterion_group, criterion_main, Criterion, Throughput};

fn bench_forward(c: &mut Criterion) {
    let cfg = SyntheticConfig {
        layers: 4,
        hidden: 128,
        heads: 4,
        vocab: 256,
        context: 64,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let dense_c = gen_synthetic(&cfg);
    let dense = Gpt2Model::from_container(&dense_c).unwrap();
    let calib = synthetic_tokens(cfg.vocab, 16 * 64, 3).tokens;
    let grams = calibrate(
        &dense,
        &calib,
        &CalibrationConfig {
            samples: 16,
            seq_len: 64,
        },
    )
    .unwrap();
    let m = &dense_c.manifest;
    let plan = build_plan(
        m,
        &default_policies(m),
        2,
        CompressionRatioSpec::new(0.5).unwrap(),
    )
    .unwrap()
    .with_sequential(SequentialMode::Off);
    let (compressed, _) = compress_model(&dense_c, GramSource::Precomputed(&grams), &plan).unwrap();
    let factorized = Gpt2Model::from_container(&compressed).unwrap();

    let batch: Vec<Vec<u32>> = (0..4)
        .map(|s| synthetic_tokens(cfg.vocab, 64, s).tokens)
        .collect();
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    g.throughput(Throughput::Elements((4 * 64) as u64));
    g.bench_function("dense", |b| {
        b.iter(|| forward_logits(&dense, &batch).unwrap())
    });
    g.bench_function("factorized_r0.5_g2", |b| {
        b.iter(|| forward_logits(&factorized, &batch).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_forward);
criterion_main!(benches);
