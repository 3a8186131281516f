//! End-to-end localization model: noise-residual front end, channel adapter,
//! attention pyramid and a convolutional decision head ending in a sigmoid.
//!
//! ```text
//! image (H×W×3)
//!   ├─ 3 fixed SRM high-pass kernels, each per channel, ×32 ─┐
//!   ├─ constrained 5×5 kernel, per channel, ×32 ─────────────┼─ concat (15 ch)
//!   └─ raw channels ─────────────────────────────────────────┘
//!   → conv3×3 + tanh → conv3×3 + tanh           (D_feat)
//!   → [optional area resize]
//!   → conv1×1                                   (D)
//!   → attention pyramid
//!   → conv3×3 + tanh → conv3×3 + tanh → conv1×1 (1)
//!   → [resize back] → sigmoid
//! ```

use crate::attention::{AttentionParamIds, PositionMode};
use crate::error::{Error, Result};
use crate::numerics::ops::{ConvShape, ResizeKind};
use crate::numerics::{FeatureMap, GradBuffer, ParamId, ParamStore, ParamTensor, Rng, Tape, Var};
use crate::pyramid::{default_dilations, FusionMode, PyramidConfig, PyramidParams};

/// Side of the SRM and constrained kernels.
pub const FRONT_KERNEL: usize = 5;

/// Second-order "square 3×3" residual, embedded in 5×5, scaled by 1/4.
#[rustfmt::skip]
pub const SRM_SECOND_ORDER: [f64; 25] = [
    0.0, 0.0, 0.0, 0.0, 0.0,
    0.0, -0.25, 0.5, -0.25, 0.0,
    0.0, 0.5, -1.0, 0.5, 0.0,
    0.0, -0.25, 0.5, -0.25, 0.0,
    0.0, 0.0, 0.0, 0.0, 0.0,
];

/// Third-order horizontal residual `(1, −3, 3, −1)`, scaled by 1/3.
#[rustfmt::skip]
pub const SRM_THIRD_ORDER: [f64; 25] = [
    0.0, 0.0, 0.0, 0.0, 0.0,
    0.0, 0.0, 0.0, 0.0, 0.0,
    0.0, 1.0 / 3.0, -1.0, 1.0, -1.0 / 3.0,
    0.0, 0.0, 0.0, 0.0, 0.0,
    0.0, 0.0, 0.0, 0.0, 0.0,
];

/// "Square 5×5" edge residual, scaled by 1/12.
#[rustfmt::skip]
pub const SRM_SQUARE_5X5: [f64; 25] = [
    -1.0 / 12.0, 2.0 / 12.0, -2.0 / 12.0, 2.0 / 12.0, -1.0 / 12.0,
    2.0 / 12.0, -6.0 / 12.0, 8.0 / 12.0, -6.0 / 12.0, 2.0 / 12.0,
    -2.0 / 12.0, 8.0 / 12.0, -12.0 / 12.0, 8.0 / 12.0, -2.0 / 12.0,
    2.0 / 12.0, -6.0 / 12.0, 8.0 / 12.0, -6.0 / 12.0, 2.0 / 12.0,
    -1.0 / 12.0, 2.0 / 12.0, -2.0 / 12.0, 2.0 / 12.0, -1.0 / 12.0,
];

pub const SRM_KERNELS: [&[f64; 25]; 3] = [&SRM_SECOND_ORDER, &SRM_THIRD_ORDER, &SRM_SQUARE_5X5];

/// Gain on every high-pass residual channel. Sensor-level noise has a standard
/// deviation of a few grey levels, so unscaled residuals sit far inside the
/// linear range of the first nonlinearity.
pub const RESIDUAL_GAIN: f64 = 32.0;

/// Initial output probability. Starting the head bias at this logit skips the
/// early phase where training only learns the tampered-pixel base rate.
pub const HEAD_PRIOR: f64 = 0.15;

/// Channels entering the first extractor convolution.
pub const FRONT_CHANNELS: usize = 3 * SRM_KERNELS.len() + 3 + 3;

/// Architecture hyperparameters (the `model` config section).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub feature_depth: usize,
    pub attention_depth: usize,
    pub layers: usize,
    pub radius: usize,
    /// `None` selects the geometric default `1, 2N+1, (2N+1)², …`.
    pub dilations: Option<Vec<usize>>,
    pub fusion: FusionMode,
    pub position_mode: PositionMode,
    /// Area-resize extractor output to this square side before attention.
    pub feature_resize: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_depth: 8,
            attention_depth: 8,
            layers: 3,
            radius: 1,
            dilations: None,
            fusion: FusionMode::Residual,
            position_mode: PositionMode::Projection,
            feature_resize: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn pyramid(&self) -> Result<PyramidConfig> {
        let dilations = match &self.dilations {
            Some(d) => {
                if d.len() != self.layers {
                    return Err(Error::InvalidArgument(format!(
                        "{} dilations given for {} layers",
                        d.len(),
                        self.layers
                    )));
                }
                d.clone()
            }
            None => default_dilations(self.layers, self.radius),
        };
        PyramidConfig::with_dilations(self.radius, dilations, self.fusion, self.position_mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_depth == 0 || self.attention_depth == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument("feature_depth, attention_depth and layers must be positive".into()));
        }
        if let Some(side) = self.feature_resize {
            if side == 0 {
                return Err(Error::InvalidArgument("feature_resize must be positive".into()));
            }
        }
        self.pyramid().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
    shape: ConvShape,
}

#[derive(Clone, Debug, PartialEq)]
struct ModelIds {
    srm: Vec<ParamId>,
    constrained: ParamId,
    extract: [ConvIds; 2],
    adapt: ConvIds,
    pyramid: Vec<AttentionParamIds>,
    head: [ConvIds; 3],
}

/// Full trainable model with its parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanModel {
    config: ModelConfig,
    pyramid: PyramidConfig,
    store: ParamStore,
    ids: ModelIds,
}

fn conv_layer(store: &mut ParamStore, name: &str, shape: ConvShape, rng: &mut Rng) -> Result<ConvIds> {
    let fan_in = (shape.kernel * shape.kernel * shape.in_channels) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let weights = (0..shape.weight_len()).map(|_| rng.uniform_range(-bound, bound)).collect();
    let weight = store.add(ParamTensor::new(
        format!("{name}.weight"),
        vec![shape.out_channels, shape.kernel, shape.kernel, shape.in_channels],
        weights,
    )?);
    let bias =
        store.add(ParamTensor::new(format!("{name}.bias"), vec![shape.out_channels], vec![0.0; shape.out_channels])?);
    Ok(ConvIds { weight, bias, shape })
}

/// Sets the centre to −1 and shifts the off-centre weights equally so they sum to 1
/// (Euclidean projection onto the constraint set).
pub fn project_constrained_kernel(kernel: &mut [f64]) {
    let n = kernel.len();
    let center = n / 2;
    kernel[center] = 0.0;
    let off_sum: f64 = kernel.iter().sum();
    let shift = (1.0 - off_sum) / (n - 1) as f64;
    for (i, w) in kernel.iter_mut().enumerate() {
        if i != center {
            *w += shift;
        }
    }
    kernel[center] = -1.0;
}

impl SpanModel {
    /// Builds a freshly initialized model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let pyramid = config.pyramid()?;
        let mut rng = Rng::derive(config.seed, 0x5EED);
        let mut store = ParamStore::new();

        let srm = SRM_KERNELS
            .iter()
            .enumerate()
            .map(|(i, k)| {
                ParamTensor::new(format!("srm.{i}"), vec![FRONT_KERNEL, FRONT_KERNEL], k.to_vec())
                    .map(|p| store.add(p.frozen()))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut kernel: Vec<f64> = (0..FRONT_KERNEL * FRONT_KERNEL).map(|_| rng.uniform()).collect();
        project_constrained_kernel(&mut kernel);
        let constrained = store.add(ParamTensor::new("constrained", vec![FRONT_KERNEL, FRONT_KERNEL], kernel)?);

        let fd = config.feature_depth;
        let ad = config.attention_depth;
        let extract = [
            conv_layer(&mut store, "extract.0", ConvShape::same(FRONT_CHANNELS, fd, 3), &mut rng)?,
            conv_layer(&mut store, "extract.1", ConvShape::same(fd, fd, 3), &mut rng)?,
        ];
        let adapt = conv_layer(&mut store, "adapt", ConvShape::same(fd, ad, 1), &mut rng)?;

        let params = PyramidParams::init(ad, &pyramid, &mut rng);
        let pyramid_ids = params
            .per_layer
            .iter()
            .enumerate()
            .map(|(k, p)| AttentionParamIds::register(&mut store, &format!("pyramid.{k}"), p))
            .collect::<Result<Vec<_>>>()?;

        let head = [
            conv_layer(&mut store, "head.0", ConvShape::same(ad, ad, 3), &mut rng)?,
            conv_layer(&mut store, "head.1", ConvShape::same(ad, ad, 3), &mut rng)?,
            conv_layer(&mut store, "head.out", ConvShape::same(ad, 1, 1), &mut rng)?,
        ];
        let prior_logit = (HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln();
        store.get_mut(head[2].bias).values_mut()[0] = prior_logit;

        Ok(Self {
            config,
            pyramid,
            store,
            ids: ModelIds { srm, constrained, extract, adapt, pyramid: pyramid_ids, head },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn pyramid_config(&self) -> &PyramidConfig {
        &self.pyramid
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of scalars in trainable tensors (the fixed SRM kernels are excluded;
    /// the constrained kernel counts all 25 entries).
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn constrained_kernel(&self) -> &[f64] {
        self.store.values(self.ids.constrained)
    }

    pub fn constrained_kernel_id(&self) -> ParamId {
        self.ids.constrained
    }

    pub fn head_output_bias(&self) -> ParamId {
        self.ids.head[2].bias
    }

    pub fn pyramid_ids(&self) -> &[AttentionParamIds] {
        &self.ids.pyramid
    }

    /// Re-imposes the constrained-kernel invariant after a parameter update.
    pub fn project_constraints(&mut self) {
        project_constrained_kernel(self.store.get_mut(self.ids.constrained).values_mut());
    }

    fn conv(&self, tape: &mut Tape<'_>, x: Var, ids: &ConvIds) -> Result<Var> {
        tape.conv2d(x, ids.weight, Some(ids.bias), ids.shape)
    }

    fn check_image(image: &FeatureMap) -> Result<()> {
        if image.depth() != 3 {
            return Err(Error::shape("extract_features", image.dims(), "HxWx3 image"));
        }
        if !image.is_finite() {
            return Err(Error::NonFinite {
                what: "input image",
                detail: format!("{} contains NaN or infinity", image.dims()),
            });
        }
        Ok(())
    }

    /// Records the extractor on `tape`; returns the `H×W×D_feat` feature map.
    pub fn record_features(&self, tape: &mut Tape<'_>, image: Var) -> Result<Var> {
        Self::check_image(tape.value(image))?;
        let mut parts = Vec::with_capacity(5);
        for &k in self.ids.srm.iter().chain([&self.ids.constrained]) {
            let residual = tape.depthwise(image, k, FRONT_KERNEL)?;
            parts.push(tape.scale(residual, RESIDUAL_GAIN)?);
        }
        parts.push(image);
        let front = tape.concat(&parts)?;
        let c0 = self.conv(tape, front, &self.ids.extract[0])?;
        let c0 = tape.tanh(c0)?;
        let c1 = self.conv(tape, c0, &self.ids.extract[1])?;
        tape.tanh(c1)
    }

    /// Records the full forward pass; returns the `H×W×1` probability map.
    pub fn record_forward(&self, tape: &mut Tape<'_>, image: Var) -> Result<Var> {
        let (h, w) = (tape.value(image).height(), tape.value(image).width());
        let mut features = self.record_features(tape, image)?;
        if let Some(side) = self.config.feature_resize {
            features = tape.resize(features, side, side, ResizeKind::Area)?;
        }
        let mut x = self.conv(tape, features, &self.ids.adapt)?;
        for (k, ids) in self.ids.pyramid.iter().enumerate() {
            let y = tape.lsa(x, ids, &self.pyramid.spec(k))?;
            x = match self.pyramid.fusion {
                FusionMode::Residual => tape.add(x, y)?,
                FusionMode::None => y,
            };
        }
        let h0 = self.conv(tape, x, &self.ids.head[0])?;
        let h0 = tape.tanh(h0)?;
        let h1 = self.conv(tape, h0, &self.ids.head[1])?;
        let h1 = tape.tanh(h1)?;
        let mut logits = self.conv(tape, h1, &self.ids.head[2])?;
        if self.config.feature_resize.is_some() {
            logits = tape.resize(logits, h, w, ResizeKind::Bilinear)?;
        }
        tape.sigmoid(logits)
    }

    pub fn extract_features(&self, image: &FeatureMap) -> Result<FeatureMap> {
        let mut tape = Tape::new(&self.store);
        let x = tape.input(image.clone());
        let f = self.record_features(&mut tape, x)?;
        Ok(tape.value(f).clone())
    }

    /// Soft tampering mask with every value strictly inside `(0, 1)`.
    pub fn predict(&self, image: &FeatureMap) -> Result<FeatureMap> {
        let mut tape = Tape::new(&self.store);
        let x = tape.input(image.clone());
        let p = self.record_forward(&mut tape, x)?;
        Ok(tape.value(p).map(|v| v.clamp(f64::EPSILON, 1.0 - f64::EPSILON)))
    }

    /// Mean BCE of one sample and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, image: &FeatureMap, mask: &FeatureMap) -> Result<(f64, GradBuffer)> {
        let mut tape = Tape::new(&self.store);
        let x = tape.input(image.clone());
        let p = self.record_forward(&mut tape, x)?;
        let loss = tape.bce(p, mask)?;
        let value = tape.value(loss).values()[0];
        let grads = tape.backward(loss)?;
        Ok((value, grads.into_params()))
    }

    pub fn loss(&self, image: &FeatureMap, mask: &FeatureMap) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let x = tape.input(image.clone());
        let p = self.record_forward(&mut tape, x)?;
        let loss = tape.bce(p, mask)?;
        Ok(tape.value(loss).values()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;

    const CENTER: usize = FRONT_KERNEL * FRONT_KERNEL / 2;

    fn tiny() -> ModelConfig {
        ModelConfig { feature_depth: 4, attention_depth: 4, layers: 2, ..ModelConfig::default() }
    }

    #[test]
    fn srm_kernels_are_zero_sum() {
        for k in SRM_KERNELS {
            assert!(k.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn srm_response_of_constant_image_is_zero_in_interior() {
        let img = FeatureMap::filled(9, 9, 3, 0.4);
        for k in SRM_KERNELS {
            let y = ops::depthwise_shared(&img, k, 5).unwrap();
            for r in 2..7 {
                for c in 2..7 {
                    assert!(y.pixel(r, c).iter().all(|v| v.abs() < 1e-15));
                }
            }
        }
    }

    #[test]
    fn projection_restores_constraint() {
        let mut k: Vec<f64> = (0..25).map(|i| i as f64 * 0.3 - 2.0).collect();
        project_constrained_kernel(&mut k);
        assert_eq!(k[CENTER], -1.0);
        let off: f64 = k.iter().enumerate().filter(|(i, _)| *i != CENTER).map(|(_, v)| v).sum();
        assert!((off - 1.0).abs() < 1e-12);
        // Idempotent.
        let before = k.clone();
        project_constrained_kernel(&mut k);
        for (a, b) in k.iter().zip(&before) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constrained_response_of_constant_is_zero() {
        let model = SpanModel::new(tiny()).unwrap();
        let img = FeatureMap::filled(9, 9, 3, 0.7);
        let y = ops::depthwise_shared(&img, model.constrained_kernel(), 5).unwrap();
        for r in 2..7 {
            for c in 2..7 {
                assert!(y.pixel(r, c).iter().all(|v| v.abs() < 1e-14));
            }
        }
    }

    #[test]
    fn extractor_rejects_non_rgb() {
        let model = SpanModel::new(tiny()).unwrap();
        assert!(model.extract_features(&FeatureMap::zeros(8, 8, 1)).is_err());
        assert!(model.predict(&FeatureMap::zeros(8, 8, 4)).is_err());
    }

    #[test]
    fn predict_rejects_nan() {
        let model = SpanModel::new(tiny()).unwrap();
        let mut img = FeatureMap::zeros(8, 8, 3);
        img.set(1, 1, 1, f64::NAN);
        assert!(matches!(model.predict(&img), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn prediction_shape_and_range() {
        let model = SpanModel::new(tiny()).unwrap();
        let mut rng = Rng::new(3);
        let img = FeatureMap::from_fn(10, 7, 3, |_, _, _| rng.uniform());
        let p = model.predict(&img).unwrap();
        assert_eq!((p.height(), p.width(), p.depth()), (10, 7, 1));
        assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn feature_resize_returns_input_resolution() {
        let cfg = ModelConfig { feature_resize: Some(6), ..tiny() };
        let model = SpanModel::new(cfg).unwrap();
        let img = FeatureMap::filled(12, 10, 3, 0.5);
        let p = model.predict(&img).unwrap();
        assert_eq!((p.height(), p.width()), (12, 10));
    }

    #[test]
    fn dilation_count_must_match_layers() {
        let cfg = ModelConfig { dilations: Some(vec![1, 3, 9]), ..tiny() };
        assert!(SpanModel::new(cfg).is_err());
    }
}
