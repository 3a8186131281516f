use span::attention::lsa_forward;
use span::network::{ModelConfig, SpanModel, FRONT_CHANNELS, FRONT_KERNEL, RESIDUAL_GAIN};
use span::numerics::ops::{self, ConvShape};
use span::numerics::{FeatureMap, Rng};
use span::pyramid::FusionMode;

fn tiny(fusion: FusionMode) -> SpanModel {
    SpanModel::new(ModelConfig {
        feature_depth: 4,
        attention_depth: 4,
        layers: 2,
        fusion,
        seed: 21,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn random_image(seed: u64, h: usize, w: usize) -> FeatureMap {
    let mut rng = Rng::new(seed);
    FeatureMap::from_fn(h, w, 3, |_, _, _| rng.uniform())
}

fn conv(model: &SpanModel, name: &str, x: &FeatureMap, cin: usize, cout: usize, k: usize) -> FeatureMap {
    let s = model.store();
    let w = s.values(s.find(&format!("{name}.weight")).unwrap());
    let b = s.values(s.find(&format!("{name}.bias")).unwrap());
    ops::conv2d(x, w, Some(b), &ConvShape::same(cin, cout, k)).unwrap()
}

/// Forward pass rebuilt from the individual layer functions and named tensors.
fn composed_forward(model: &SpanModel, image: &FeatureMap) -> FeatureMap {
    let s = model.store();
    let mut parts = Vec::new();
    for name in ["srm.0", "srm.1", "srm.2", "constrained"] {
        let k = s.values(s.find(name).unwrap());
        parts.push(ops::depthwise_shared(image, k, FRONT_KERNEL).unwrap().map(|v| v * RESIDUAL_GAIN));
    }
    parts.push(image.clone());
    let refs: Vec<&FeatureMap> = parts.iter().collect();
    let front = FeatureMap::concat_channels(&refs).unwrap();
    assert_eq!(front.depth(), FRONT_CHANNELS);
    let f = conv(model, "extract.0", &front, FRONT_CHANNELS, 4, 3).map(f64::tanh);
    let f = conv(model, "extract.1", &f, 4, 4, 3).map(f64::tanh);
    let mut x = conv(model, "adapt", &f, 4, 4, 1);
    for (k, ids) in model.pyramid_ids().iter().enumerate() {
        let y = lsa_forward(&x, &ids.load(s), &model.pyramid_config().spec(k)).unwrap();
        x = match model.pyramid_config().fusion {
            FusionMode::Residual => {
                FeatureMap::from_fn(x.height(), x.width(), x.depth(), |r, c, ch| x.get(r, c, ch) + y.get(r, c, ch))
            }
            FusionMode::None => y,
        };
    }
    let h = conv(model, "head.0", &x, 4, 4, 3).map(f64::tanh);
    let h = conv(model, "head.1", &h, 4, 4, 3).map(f64::tanh);
    conv(model, "head.out", &h, 4, 1, 1).map(ops::sigmoid)
}

#[test]
fn prediction_matches_layer_by_layer_composition() {
    for fusion in [FusionMode::Residual, FusionMode::None] {
        let model = tiny(fusion);
        let image = random_image(4, 11, 13);
        let got = model.predict(&image).unwrap();
        let want = composed_forward(&model, &image);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{fusion}");
    }
}

#[test]
fn parameter_count_matches_shape_arithmetic() {
    let conv_params = |cin: usize, cout: usize, k: usize| cout * k * k * cin + cout;
    let d = 4;
    let attention_layer = 3 * d * d + 9 * d * d;
    let expected = FRONT_KERNEL * FRONT_KERNEL
        + conv_params(FRONT_CHANNELS, d, 3)
        + conv_params(d, d, 3)
        + conv_params(d, d, 1)
        + 2 * attention_layer
        + 2 * conv_params(d, d, 3)
        + conv_params(d, 1, 1);
    assert_eq!(tiny(FusionMode::Residual).parameter_count(), expected);
    assert_eq!(expected, 1422);
}

#[test]
fn saturated_head_bias_drives_outputs_to_one() {
    let mut model = tiny(FusionMode::Residual);
    let bias = model.head_output_bias();
    model.store_mut().get_mut(bias).values_mut()[0] = 20.0;
    let p = model.predict(&random_image(8, 10, 10)).unwrap();
    assert!(p.values().iter().all(|&v| v > 0.999 && v < 1.0));
}

#[test]
fn prediction_is_deterministic_and_strictly_inside_unit_interval() {
    let model = tiny(FusionMode::Residual);
    let image = random_image(9, 12, 12);
    let a = model.predict(&image).unwrap();
    let b = model.predict(&image).unwrap();
    assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.values().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!((a.height(), a.width(), a.depth()), (12, 12, 1));
}

#[test]
fn same_seed_builds_identical_models() {
    assert!(tiny(FusionMode::Residual) == tiny(FusionMode::Residual));
    let other = SpanModel::new(ModelConfig { seed: 22, ..tiny(FusionMode::Residual).config().clone() }).unwrap();
    assert!(other != tiny(FusionMode::Residual));
}
