use bshare_core::calibration::{
    calibrate, calibrate_from_layer, whitening_factor, CalibrationConfig, GramSet, GramStats,
};
use bshare_core::container::{Container, MatrixType};
use bshare_core::runtime::{forward_sequence, ActivationSink, Gpt2Model};
use bshare_core::synthetic::{gen_synthetic, synthetic_tokens, SyntheticConfig};
use bshare_core::{ErrorClass, Matrix};

fn setup() -> (SyntheticConfig, Gpt2Model, Vec<u32>) {
    let cfg = SyntheticConfig {
        layers: 3,
        hidden: 16,
        heads: 2,
        vocab: 40,
        context: 16,
        seed: 8,
        ..SyntheticConfig::default()
    };
    let model = Gpt2Model::from_container(&gen_synthetic(&cfg)).unwrap();
    let tokens = synthetic_tokens(cfg.vocab, 16 * 10 + 5, 8).tokens;
    (cfg, model, tokens)
}

/// Plain `Σ XᵀX` per site, straight from the recorded activations.
#[derive(Default)]
struct Manual(GramSet);

impl ActivationSink for Manual {
    fn record(&mut self, layer: usize, types: &[MatrixType], x: &Matrix) {
        for &t in types {
            let entry = self
                .0
                .sites
                .entry((layer, t))
                .or_insert_with(|| GramStats::zeros("", x.cols()));
            for r in 0..x.rows() {
                let row = x.row(r);
                for i in 0..x.cols() {
                    for j in 0..x.cols() {
                        entry.gram[(i, j)] += row[i] * row[j];
                    }
                }
            }
            entry.token_count += x.rows() as u64;
        }
    }
}

const CFG: CalibrationConfig = CalibrationConfig {
    samples: 10,
    seq_len: 16,
};

#[test]
fn matches_manual_accumulation() {
    let (_, model, tokens) = setup();
    let grams = calibrate(&model, &tokens, &CFG).unwrap();
    let mut manual = Manual::default();
    for w in tokens.chunks_exact(16).take(10) {
        forward_sequence(&model, w, Some(&mut manual)).unwrap();
    }
    assert_eq!(grams.sites.len(), 3 * 6);
    for (&(layer, t), expected) in &manual.0.sites {
        let got = grams.require(layer, t).unwrap();
        assert_eq!(got.token_count, 160);
        assert_eq!(got.token_count, expected.token_count);
        let diff = got.gram.sub(&expected.gram).unwrap().max_abs();
        assert!(
            diff <= 1e-10 * expected.gram.max_abs(),
            "{t}@{layer}: {diff}"
        );
        assert_eq!(got.gram, got.gram.transpose());
    }
}

#[test]
fn thread_count_does_not_change_the_result() {
    let (_, model, tokens) = setup();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| calibrate(&model, &tokens, &CFG).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn later_layers_only() {
    let (_, model, tokens) = setup();
    let all = calibrate(&model, &tokens, &CFG).unwrap();
    let tail = calibrate_from_layer(&model, &tokens, &CFG, 2).unwrap();
    assert!(tail.sites.keys().all(|&(l, _)| l == 2));
    assert_eq!(tail.get(2, MatrixType::Up), all.get(2, MatrixType::Up));
}

#[test]
fn gram_container_roundtrip() {
    let (cfg, model, tokens) = setup();
    let grams = calibrate(&model, &tokens, &CFG).unwrap();
    let c = grams.to_container(&cfg.manifest());
    let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
    assert_eq!(GramSet::from_container(&back).unwrap(), grams);
}

#[test]
fn calibration_grams_are_positive_definite() {
    let (_, model, tokens) = setup();
    let grams = calibrate(&model, &tokens, &CFG).unwrap();
    for (&(layer, t), g) in &grams.sites {
        let s = whitening_factor(g).unwrap();
        assert_eq!(s.jitter_used, 0.0, "{t}@{layer}");
    }
}

#[test]
fn window_limits() {
    let (_, model, tokens) = setup();
    let short = calibrate(
        &model,
        &tokens,
        &CalibrationConfig {
            samples: 100,
            seq_len: 16,
        },
    )
    .unwrap();
    assert_eq!(short.get(0, MatrixType::K).unwrap().token_count, 160);
    for bad in [
        CalibrationConfig {
            samples: 0,
            seq_len: 16,
        },
        CalibrationConfig {
            samples: 1,
            seq_len: 17,
        },
    ] {
        assert_eq!(
            calibrate(&model, &tokens, &bad).unwrap_err().class(),
            ErrorClass::Usage
        );
    }
    assert!(calibrate(&model, &tokens[..10], &CFG).is_err());
}
