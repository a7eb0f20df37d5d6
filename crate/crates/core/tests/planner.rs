use std::collections::BTreeMap;

use bshare_core::calibration::{calibrate, whitening_factor, CalibrationConfig, GramSet};
use bshare_core::container::{site_name, Container, MatrixType};
use bshare_core::decomposition::{rank_for_budget, truncation_loss, CompressionRatioSpec};
use bshare_core::planner::{
    build_plan, default_policies, pairwise_loss_matrix, policies_sharing, type_shareability,
    PairwiseLossMatrix, SequentialMode, SharePolicy,
};
use bshare_core::runtime::Gpt2Model;
use bshare_core::synthetic::{gen_synthetic, synthetic_tokens, SyntheticConfig};
use bshare_core::Matrix;

fn small() -> (Container, GramSet) {
    let cfg = SyntheticConfig {
        layers: 4,
        hidden: 16,
        heads: 2,
        vocab: 40,
        context: 32,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let c = gen_synthetic(&cfg);
    let model = Gpt2Model::from_container(&c).unwrap();
    let tokens = synthetic_tokens(cfg.vocab, 6 * 32, 3);
    let grams = calibrate(
        &model,
        &tokens.tokens,
        &CalibrationConfig {
            samples: 6,
            seq_len: 32,
        },
    )
    .unwrap();
    (c, grams)
}

fn ratio(r: f64) -> CompressionRatioSpec {
    CompressionRatioSpec::new(r).unwrap()
}

#[test]
fn heatmap_is_symmetric_with_single_layer_diagonal() {
    let (c, grams) = small();
    for t in [MatrixType::K, MatrixType::Up, MatrixType::Down] {
        let h = pairwise_loss_matrix(&c, &grams, t, ratio(0.3)).unwrap();
        assert_eq!(h.layers(), 4);
        let (d1, d2) = c.manifest.matrix_shape(t);
        for i in 0..4 {
            let w = c.matrix(&site_name(i, t)).unwrap();
            let s = whitening_factor(grams.require(i, t).unwrap()).unwrap();
            let own = truncation_loss(&[&w], &s, rank_for_budget(d1, d2, 1, ratio(0.3))).unwrap();
            assert!(
                (h.get(i, i) - own).abs() <= 1e-12 * own.max(1.0),
                "{t} diag {i}"
            );
            for j in 0..4 {
                assert_eq!(h.get(i, j), h.get(j, i));
                assert!(h.get(i, j) >= 0.0);
            }
        }
        let sq = h.squared();
        assert_eq!(sq[(0, 1)], h.get(0, 1) * h.get(0, 1));
    }
}

#[test]
fn heatmap_is_deterministic() {
    let (c, grams) = small();
    let a = pairwise_loss_matrix(&c, &grams, MatrixType::Q, ratio(0.2)).unwrap();
    let b = pairwise_loss_matrix(&c, &grams, MatrixType::Q, ratio(0.2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_grams_are_reported() {
    let (c, mut grams) = small();
    grams.sites.remove(&(2, MatrixType::V));
    let err = pairwise_loss_matrix(&c, &grams, MatrixType::V, ratio(0.2)).unwrap_err();
    assert!(err.to_string().contains("site.2.V"), "{err}");
}

#[test]
fn majority_rule_over_adjacent_pairs() {
    // diag 1.0 each; off-diagonal below 2.0 means favoured
    let heat = |t, adjacent: [f64; 3]| {
        let mut m = Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 5.0 });
        for (i, v) in adjacent.iter().enumerate() {
            m.as_mut_slice()[i * 4 + i + 1] = *v;
            m.as_mut_slice()[(i + 1) * 4 + i] = *v;
        }
        PairwiseLossMatrix {
            matrix_type: t,
            loss: m,
        }
    };
    let verdicts = type_shareability(&[
        heat(MatrixType::K, [1.5, 1.9, 2.5]),
        heat(MatrixType::O, [1.5, 2.0, 2.5]),
        heat(MatrixType::Down, [0.1, 0.1, 0.1]),
    ]);
    assert_eq!(verdicts[&MatrixType::K].policy, SharePolicy::Share);
    assert_eq!(verdicts[&MatrixType::K].favored_pairs, 2);
    // equality is not favoured, so 1 of 3 fails the majority
    assert_eq!(verdicts[&MatrixType::O].policy, SharePolicy::PerLayer);
    assert_eq!(verdicts[&MatrixType::Down].policy, SharePolicy::PerLayer);
    assert_eq!(verdicts[&MatrixType::Down].fraction(), 1.0);
}

#[test]
fn thirty_two_layers_in_pairs() {
    let m = SyntheticConfig {
        layers: 32,
        hidden: 8,
        heads: 2,
        ..SyntheticConfig::default()
    }
    .manifest();
    let plan = build_plan(&m, &default_policies(&m), 2, ratio(0.2)).unwrap();
    let k = plan.type_plan(MatrixType::K).unwrap();
    assert_eq!(k.groups.len(), 16);
    for (i, g) in k.groups.iter().enumerate() {
        assert_eq!(g.layers, vec![2 * i, 2 * i + 1]);
    }
    assert_eq!(plan.type_plan(MatrixType::O).unwrap().groups.len(), 32);
    assert_eq!(plan.type_plan(MatrixType::Down).unwrap().groups.len(), 32);
    assert!(!plan.sequential_update);
    assert!(plan.warnings.is_empty());
}

#[test]
fn odd_layer_count_leaves_a_short_final_group() {
    let m = SyntheticConfig {
        layers: 5,
        hidden: 8,
        heads: 2,
        ..SyntheticConfig::default()
    }
    .manifest();
    let plan = build_plan(&m, &policies_sharing(&m, &[MatrixType::V]), 2, ratio(0.5)).unwrap();
    let v = plan.type_plan(MatrixType::V).unwrap();
    let sizes: Vec<usize> = v.groups.iter().map(|g| g.layers.len()).collect();
    assert_eq!(sizes, [2, 2, 1]);
    assert_eq!(v.groups[2].k, rank_for_budget(8, 8, 1, ratio(0.5)));
    assert_eq!(
        plan.type_plan(MatrixType::K).unwrap().policy,
        SharePolicy::PerLayer
    );
    assert!(plan.sequential_update);
    assert!(
        !plan
            .clone()
            .with_sequential(SequentialMode::Off)
            .sequential_update
    );
}

#[test]
fn oversized_and_zero_group_sizes() {
    let m = SyntheticConfig {
        layers: 3,
        hidden: 8,
        heads: 2,
        ..SyntheticConfig::default()
    }
    .manifest();
    let plan = build_plan(&m, &default_policies(&m), 7, ratio(0.2)).unwrap();
    assert_eq!(plan.type_plan(MatrixType::Q).unwrap().groups.len(), 1);
    assert!(plan.warnings.iter().any(|w| w.contains("exceeds 3 layers")));
    assert!(build_plan(&m, &default_policies(&m), 0, ratio(0.2)).is_err());
}

#[test]
fn unlisted_types_stay_dense() {
    let m = SyntheticConfig::default().manifest();
    let mut policies = BTreeMap::new();
    policies.insert(MatrixType::K, SharePolicy::Share);
    policies.insert(MatrixType::Down, SharePolicy::Share);
    let plan = build_plan(&m, &policies, 2, ratio(0.3)).unwrap();
    assert_eq!(
        plan.type_plan(MatrixType::Down).unwrap().policy,
        SharePolicy::PerLayer
    );
    assert_eq!(
        plan.type_plan(MatrixType::O).unwrap().policy,
        SharePolicy::Exclude
    );
    assert!(plan.type_plan(MatrixType::O).unwrap().groups.is_empty());
    assert!(plan.stored_params() <= plan.original_params());
}
