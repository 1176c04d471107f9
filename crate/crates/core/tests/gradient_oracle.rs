mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refine_core::trainer::Objective;
use refine_core::{triple_loss, FrozenFeaturizer, HeadKind};

fn check_instance(seed: u64, dim: usize, negatives: usize, lambda: f64, kind: HeadKind) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = [0.05, 0.1, 0.5][rng.random_range(0..3)];
    let featurizer = FrozenFeaturizer::new(dim, rng.random());
    let head = oracles::perturbed_head(dim, kind, 0.2, &mut rng);
    let query = oracles::random_text(&mut rng, 3);
    let positive = oracles::random_text(&mut rng, 6);
    let negs: Vec<String> = (0..negatives)
        .map(|_| oracles::random_text(&mut rng, 6))
        .collect();

    let got = triple_loss(
        &query,
        &positive,
        &negs,
        &head,
        &featurizer,
        Objective {
            lambda,
            temperature: tau,
        },
    )
    .unwrap();

    let mut feats = vec![
        featurizer.features(&query).unwrap(),
        featurizer.features(&positive).unwrap(),
    ];
    feats.extend(negs.iter().map(|n| featurizer.features(n).unwrap()));
    let expected = oracles::loss(&head, &feats, lambda, tau);
    assert!(
        (got.loss - expected).abs() <= 1e-10 * expected.abs().max(1.0),
        "{} vs {expected}",
        got.loss
    );

    let (gw, gb) = oracles::numeric_gradient(&head, &feats, lambda, tau, 1e-6);
    let worst = oracles::worst_violation(&got.grad.weight, &gw, 1e-4, 1e-7)
        .max(oracles::worst_violation(&got.grad.bias, &gb, 1e-4, 1e-7));
    assert!(
        worst <= 1.0,
        "seed {seed} dim {dim} m {negatives} lambda {lambda} tau {tau} {kind:?}: violation ratio {worst}"
    );
    if lambda == 0.0 {
        assert!(got
            .grad
            .weight
            .iter()
            .chain(&got.grad.bias)
            .all(|g| *g == 0.0));
    }
}

#[test]
fn linear_head_matches_finite_differences() {
    let mut seed = 0;
    for dim in [4, 8, 16] {
        for negatives in [0, 1, 5] {
            for lambda in [0.0, 0.35, 1.0] {
                check_instance(seed, dim, negatives, lambda, HeadKind::Linear);
                seed += 1;
            }
        }
    }
}

#[test]
fn residual_tanh_head_matches_finite_differences() {
    for (seed, dim) in [(100, 4), (101, 8), (102, 16)] {
        for lambda in [0.35, 1.0] {
            check_instance(seed, dim, 3, lambda, HeadKind::ResidualTanh);
        }
    }
}

#[test]
fn loss_respects_upper_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let dim = 8;
        let m = rng.random_range(0..6);
        let tau = rng.random_range(0.02..1.0);
        let f = FrozenFeaturizer::new(dim, 1);
        let head = oracles::perturbed_head(dim, HeadKind::Linear, 1.0, &mut rng);
        let negs: Vec<String> = (0..m).map(|_| oracles::random_text(&mut rng, 4)).collect();
        let q = oracles::random_text(&mut rng, 2);
        let p = oracles::random_text(&mut rng, 4);
        let l = triple_loss(
            &q,
            &p,
            &negs,
            &head,
            &f,
            Objective {
                lambda: 0.7,
                temperature: tau,
            },
        )
        .unwrap()
        .loss;
        let bound = (1.0 + m as f64 * (2.0 / tau).exp()).ln();
        assert!(l >= 0.0 && l <= bound + 1e-12, "{l} > {bound}");
    }
}
