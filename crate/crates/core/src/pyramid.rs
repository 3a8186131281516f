//! Multi-scale stacking of attention blocks and its coverage/cost analysis.

use std::fmt;
use std::str::FromStr;

use crate::attention::{lsa_forward, AttentionParams, NeighborhoodSpec, PositionMode};
use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, Rng};

/// How consecutive pyramid levels are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// `x_k = LSA(x_{k−1}) + x_{k−1}`
    Residual,
    /// `x_k = LSA(x_{k−1})`
    None,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Residual => "residual",
            FusionMode::None => "none",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(FusionMode::Residual),
            "none" => Ok(FusionMode::None),
            other => Err(Error::InvalidArgument(format!("unknown fusion mode `{other}` (expected residual or none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidConfig {
    pub radius: usize,
    /// One dilation per layer; its length is the layer count.
    pub dilations: Vec<usize>,
    pub fusion: FusionMode,
    pub position_mode: PositionMode,
}

/// Dilations `1, M, M², …` for `layers` levels with `M = 2N+1`.
pub fn default_dilations(layers: usize, radius: usize) -> Vec<usize> {
    let side = 2 * radius + 1;
    (0..layers).map(|k| side.pow(k as u32)).collect()
}

impl PyramidConfig {
    /// Config with the geometric default dilation schedule.
    pub fn new(layers: usize, radius: usize, fusion: FusionMode, position_mode: PositionMode) -> Result<Self> {
        Self::with_dilations(radius, default_dilations(layers, radius), fusion, position_mode)
    }

    pub fn with_dilations(
        radius: usize,
        dilations: Vec<usize>,
        fusion: FusionMode,
        position_mode: PositionMode,
    ) -> Result<Self> {
        let cfg = Self { radius, dilations, fusion, position_mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(Error::InvalidArgument("pyramid needs at least one layer".into()));
        }
        if self.dilations.contains(&0) {
            return Err(Error::InvalidArgument(format!("dilations must be positive, got {:?}", self.dilations)));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.dilations.len()
    }

    pub fn spec(&self, layer: usize) -> NeighborhoodSpec {
        NeighborhoodSpec::new(self.radius, self.dilations[layer]).expect("validated dilation")
    }

    /// Chebyshev distance over which one input pixel can influence the output: `Σ N·t_k`.
    pub fn influence_radius(&self) -> usize {
        self.dilations.iter().map(|t| self.radius * t).sum()
    }
}

/// Independent attention weights for each level.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidParams {
    pub per_layer: Vec<AttentionParams>,
}

impl PyramidParams {
    pub fn init(depth: usize, cfg: &PyramidConfig, rng: &mut Rng) -> Self {
        let per_layer =
            (0..cfg.layers()).map(|k| AttentionParams::init(depth, &cfg.spec(k), cfg.position_mode, rng)).collect();
        Self { per_layer }
    }
}

pub fn pyramid_forward(x: &FeatureMap, params: &PyramidParams, cfg: &PyramidConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if params.per_layer.len() != cfg.layers() {
        return Err(Error::shape(
            "pyramid_forward",
            format!("{} parameter sets", params.per_layer.len()),
            format!("{} layers", cfg.layers()),
        ));
    }
    let mut current = x.clone();
    for (k, layer) in params.per_layer.iter().enumerate() {
        if layer.mode() != cfg.position_mode {
            return Err(Error::InvalidArgument(format!(
                "layer {k} uses position mode {} but the pyramid is configured for {}",
                layer.mode(),
                cfg.position_mode
            )));
        }
        let mut next = lsa_forward(&current, layer, &cfg.spec(k))?;
        if cfg.fusion == FusionMode::Residual {
            for (o, v) in next.values_mut().iter_mut().zip(current.values()) {
                *o += v;
            }
        }
        current = next;
    }
    Ok(current)
}

/// Side length `(2N+1)^h` of the input square that reaches one top-level pixel
/// under the default dilation schedule.
pub fn receptive_field(layers: usize, radius: usize) -> usize {
    (2 * radius + 1).pow(layers as u32)
}

/// Receptive field after each of the first `layers` levels.
pub fn receptive_fields(layers: usize, radius: usize) -> Vec<usize> {
    (1..=layers).map(|h| receptive_field(h, radius)).collect()
}

/// Relative cost `S² · M² · log_M S` of covering an `S × S` image with `M × M` blocks.
pub fn complexity_estimate(image_side: usize, block_side: usize) -> Result<f64> {
    if block_side < 3 || block_side.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("block side must be odd and at least 3, got {block_side}")));
    }
    if image_side < block_side {
        return Err(Error::InvalidArgument(format!("image side {image_side} is smaller than block side {block_side}")));
    }
    let s = image_side as f64;
    let m = block_side as f64;
    Ok(s * s * m * m * (s.ln() / m.ln()))
}

/// Block side in `candidates` with the lowest estimate; ties go to the smaller side.
pub fn best_block_side(image_side: usize, candidates: &[usize]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &m in candidates {
        let cost = complexity_estimate(image_side, m)?;
        if best.is_none_or(|(_, c)| cost < c) {
            best = Some((m, cost));
        }
    }
    best.map(|(m, _)| m).ok_or(Error::Empty("block side candidates"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_is_geometric() {
        assert_eq!(default_dilations(5, 1), vec![1, 3, 9, 27, 81]);
        assert_eq!(default_dilations(3, 0), vec![1, 1, 1]);
    }

    #[test]
    fn receptive_field_values() {
        assert_eq!(receptive_field(5, 1), 243);
        assert_eq!(receptive_field(1, 0), 1);
        assert_eq!(receptive_field(3, 1), 27);
        assert_eq!(receptive_fields(5, 1), vec![3, 9, 27, 81, 243]);
    }

    #[test]
    fn complexity_at_block_equal_image() {
        let c = complexity_estimate(5, 5).unwrap();
        assert!((c - 25.0 * 25.0).abs() < 1e-9);
    }

    #[test]
    fn complexity_rejects_even_or_small_blocks() {
        assert!(complexity_estimate(243, 4).is_err());
        assert!(complexity_estimate(243, 1).is_err());
        assert!(complexity_estimate(3, 5).is_err());
    }

    #[test]
    fn complexity_ratio_five_over_three() {
        let r = complexity_estimate(243, 5).unwrap() / complexity_estimate(243, 3).unwrap();
        // 25·ln3 / (9·ln5)
        let expect = 25.0 * 3f64.ln() / (9.0 * 5f64.ln());
        assert!((r - expect).abs() < 1e-12);
        assert!(r > 1.0);
    }

    #[test]
    fn length_mismatch_is_error() {
        let cfg = PyramidConfig::new(2, 1, FusionMode::Residual, PositionMode::None).unwrap();
        let mut rng = Rng::new(0);
        let mut params = PyramidParams::init(2, &cfg, &mut rng);
        params.per_layer.pop();
        let x = FeatureMap::zeros(3, 3, 2);
        assert!(pyramid_forward(&x, &params, &cfg).is_err());
    }

    #[test]
    fn influence_radius_sums_dilations() {
        let cfg = PyramidConfig::new(3, 1, FusionMode::Residual, PositionMode::Projection).unwrap();
        assert_eq!(cfg.influence_radius(), 13);
    }

    #[test]
    fn fusion_mode_parses() {
        assert_eq!("residual".parse::<FusionMode>().unwrap(), FusionMode::Residual);
        assert!("lstm".parse::<FusionMode>().is_err());
    }
}
