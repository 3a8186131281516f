mod common;

use proptest::prelude::*;
use span::attention::{lsa_forward, lsa_forward_cached, AttentionParams, NeighborhoodSpec, PositionMode};
use span::numerics::Rng;
use span::pyramid::{self, FusionMode, PyramidConfig, PyramidParams};

fn mode_of(i: usize) -> PositionMode {
    [PositionMode::Projection, PositionMode::Embedding, PositionMode::None][i]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_form_a_distribution_over_in_bounds_neighbours(
        seed in any::<u64>(), h in 1usize..8, w in 1usize..8, d in 1usize..5,
        radius in 1usize..3, dilation in 1usize..4, mode in 0usize..3, scale in 0.1f64..20.0,
    ) {
        let mut rng = Rng::new(seed);
        let spec = NeighborhoodSpec::new(radius, dilation).unwrap();
        let params = AttentionParams::init(d, &spec, mode_of(mode), &mut rng);
        let x = common::random_map(&mut rng, h, w, d, scale);
        let (y, cache) = lsa_forward_cached(&x, &params, &spec).unwrap();
        prop_assert!(y.is_finite());
        for r in 0..h {
            for c in 0..w {
                let weights = cache.weights_at(r, c);
                prop_assert_eq!(weights.len(), spec.positions());
                let sum: f64 = weights.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                for (l, &v) in weights.iter().enumerate() {
                    prop_assert!(v >= 0.0);
                    if spec.neighbor(r, c, l, h, w).is_none() {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn matches_loop_oracle(
        seed in any::<u64>(), h in 1usize..7, w in 1usize..7, d in 1usize..4,
        radius in 1usize..3, dilation in 1usize..3, mode in 0usize..3,
    ) {
        let mut rng = Rng::new(seed);
        let spec = NeighborhoodSpec::new(radius, dilation).unwrap();
        let params = AttentionParams::init(d, &spec, mode_of(mode), &mut rng);
        let x = common::random_map(&mut rng, h, w, d, 2.0);
        let got = lsa_forward(&x, &params, &spec).unwrap();
        let want = common::naive_lsa(&x, &params, radius, dilation);
        prop_assert!(got.max_abs_diff(&want).unwrap() <= 1e-9);
    }

    #[test]
    fn fresh_positional_terms_reduce_to_plain_attention(seed in any::<u64>(), mode in 0usize..2) {
        // Initialization uses identity projections and zero embeddings.
        let mut rng = Rng::new(seed);
        let spec = NeighborhoodSpec::new(1, 2).unwrap();
        let params = AttentionParams::init(3, &spec, mode_of(mode), &mut rng);
        let mut plain = params.clone();
        plain.positional = span::attention::Positional::None;
        let x = common::random_map(&mut rng, 5, 5, 3, 1.0);
        let a = lsa_forward(&x, &params, &spec).unwrap();
        let b = lsa_forward(&x, &plain, &spec).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn pyramid_preserves_shape_and_is_pure(seed in any::<u64>(), layers in 1usize..4, residual in any::<bool>()) {
        let fusion = if residual { FusionMode::Residual } else { FusionMode::None };
        let cfg = PyramidConfig::new(layers, 1, fusion, PositionMode::Projection).unwrap();
        let mut rng = Rng::new(seed);
        let params = PyramidParams::init(4, &cfg, &mut rng);
        let x = common::random_map(&mut rng, 9, 6, 4, 1.0);
        let a = pyramid::pyramid_forward(&x, &params, &cfg).unwrap();
        let b = pyramid::pyramid_forward(&x, &params, &cfg).unwrap();
        prop_assert_eq!(a.dims(), x.dims());
        prop_assert!(a == b);
    }
}

#[test]
fn receptive_fields_grow_geometrically() {
    assert_eq!(pyramid::receptive_fields(5, 1), vec![3, 9, 27, 81, 243]);
    assert_eq!(pyramid::receptive_field(3, 2), 125);
    assert_eq!(pyramid::default_dilations(4, 1), vec![1, 3, 9, 27]);
}

#[test]
fn cost_is_minimized_by_the_smallest_block() {
    for s in [27usize, 81, 243, 729, 1000] {
        assert_eq!(pyramid::best_block_side(s, &[3, 5, 7, 9]).unwrap(), 3, "S={s}");
    }
    assert!(pyramid::best_block_side(81, &[]).is_err());
    assert!(pyramid::complexity_estimate(81, 1).is_err());
}

#[test]
fn invalid_neighbourhoods_are_rejected() {
    assert_eq!(NeighborhoodSpec::new(0, 1).unwrap().positions(), 1);
    assert!(NeighborhoodSpec::new(1, 0).is_err());
    let spec = NeighborhoodSpec::new(1, 1).unwrap();
    let mut rng = Rng::new(0);
    let params = AttentionParams::init(3, &spec, PositionMode::Projection, &mut rng);
    let wrong_depth = common::random_map(&mut rng, 4, 4, 2, 1.0);
    assert!(lsa_forward(&wrong_depth, &params, &spec).is_err());
}
