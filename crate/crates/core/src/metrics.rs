//! Pixel-level localization scores and robustness transforms.
//!
//! All scores pool pixels over the whole evaluation set.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::datagen::{Sample, TamperKind};
use crate::error::{Error, Result};
use crate::numerics::ops::{self, ResizeKind};
use crate::numerics::{FeatureMap, Rng};

fn check_pair(pred: &FeatureMap, mask: &FeatureMap, op: &'static str) -> Result<()> {
    if pred.depth() != 1 {
        return Err(Error::shape(op, pred.dims(), "HxWx1 prediction"));
    }
    pred.ensure_same_dims(mask, op)?;
    if let Some((index, &value)) = mask.values().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryMask { index, value });
    }
    if let Some(p) = pred.values().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "prediction", detail: p.to_string() });
    }
    Ok(())
}

fn check_sets(preds: &[&FeatureMap], masks: &[&FeatureMap], op: &'static str) -> Result<()> {
    if preds.len() != masks.len() {
        return Err(Error::shape(op, format!("{} predictions", preds.len()), format!("{} masks", masks.len())));
    }
    if preds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    for (p, m) in preds.iter().zip(masks) {
        check_pair(p, m, op)?;
    }
    Ok(())
}

/// Area under the ROC curve of the pooled pixel scores, computed from average
/// ranks (the Mann–Whitney statistic), so tied scores count one half.
pub fn pixel_auc(preds: &[&FeatureMap], masks: &[&FeatureMap]) -> Result<f64> {
    check_sets(preds, masks, "pixel_auc")?;
    let mut pairs: Vec<(f64, bool)> = preds
        .iter()
        .zip(masks)
        .flat_map(|(p, m)| p.values().iter().copied().zip(m.values().iter().map(|&v| v == 1.0)))
        .collect();
    let positives = pairs.iter().filter(|p| p.1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 {
        return Err(Error::DegenerateLabels { missing: "positive" });
    }
    if negatives == 0 {
        return Err(Error::DegenerateLabels { missing: "negative" });
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positives as f64, negatives as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Precision, recall and F1 of a binarized prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Scores from confusion counts; empty denominators give 0.
    pub fn from_counts(tp: usize, fp: usize, fneg: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }
}

/// Pooled scores with pixels at or above `threshold` predicted as manipulated.
pub fn prf1(preds: &[&FeatureMap], masks: &[&FeatureMap], threshold: f64) -> Result<Prf> {
    check_sets(preds, masks, "prf1")?;
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (p, m) in preds.iter().zip(masks) {
        for (&s, &t) in p.values().iter().zip(m.values()) {
            match (s >= threshold, t == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    Ok(Prf::from_counts(tp, fp, fneg))
}

/// Threshold from `grid` maximizing pooled F1, with ties going to the lowest
/// threshold. Returns `(threshold, f1)`.
pub fn threshold_sweep(preds: &[&FeatureMap], masks: &[&FeatureMap], grid: &[f64]) -> Result<(f64, f64)> {
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for t in sorted {
        let f1 = prf1(preds, masks, t)?.f1;
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((t, f1));
        }
    }
    best.ok_or(Error::Empty("threshold grid"))
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

/// Per-type entry of an [`EvalReport`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TypeScores {
    pub samples: usize,
    pub auc: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub auc: f64,
    pub threshold: f64,
    pub scores: Prf,
    pub per_type: BTreeMap<TamperKind, TypeScores>,
}

impl EvalReport {
    /// Scores `preds` against the samples' masks at `threshold`.
    pub fn compute(preds: &[FeatureMap], samples: &[Sample], threshold: f64) -> Result<Self> {
        let p: Vec<&FeatureMap> = preds.iter().collect();
        let m: Vec<&FeatureMap> = samples.iter().map(|s| &s.mask).collect();
        let auc = pixel_auc(&p, &m)?;
        let scores = prf1(&p, &m, threshold)?;
        let mut per_type = BTreeMap::new();
        for kind in TamperKind::ALL {
            let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].kind == kind).collect();
            if idx.is_empty() {
                continue;
            }
            let tp: Vec<&FeatureMap> = idx.iter().map(|&i| p[i]).collect();
            let tm: Vec<&FeatureMap> = idx.iter().map(|&i| m[i]).collect();
            let auc = match pixel_auc(&tp, &tm) {
                Ok(a) => a,
                Err(Error::DegenerateLabels { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            per_type.insert(kind, TypeScores { samples: idx.len(), auc, f1: prf1(&tp, &tm, threshold)?.f1 });
        }
        Ok(Self { samples: samples.len(), auc, threshold, scores, per_type })
    }

    /// `key value` lines for scripts.
    pub fn to_lines(&self) -> String {
        let mut s = format!(
            "samples {}\nauc {}\nthreshold {}\nprecision {}\nrecall {}\nf1 {}\n",
            self.samples, self.auc, self.threshold, self.scores.precision, self.scores.recall, self.scores.f1
        );
        for (kind, t) in &self.per_type {
            s.push_str(&format!("{kind}.samples {}\n{kind}.auc {}\n{kind}.f1 {}\n", t.samples, t.auc, t.f1));
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8} {:>8} {:>8}", "subset", "samples", "AUC", "F1")?;
        writeln!(f, "{:<12} {:>8} {:>8.4} {:>8.4}", "all", self.samples, self.auc, self.scores.f1)?;
        for (kind, t) in &self.per_type {
            writeln!(f, "{:<12} {:>8} {:>8.4} {:>8.4}", kind.to_string(), t.samples, t.auc, t.f1)?;
        }
        write!(
            f,
            "precision {:.4}  recall {:.4}  at threshold {}",
            self.scores.precision, self.scores.recall, self.threshold
        )
    }
}

/// Post-processing applied to a test image before prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    /// Area resize by this factor; the mask is resized the same way and re-binarized.
    Resize(f64),
    /// Gaussian blur with this odd kernel size.
    Blur(usize),
    /// Additive Gaussian noise with this sigma on the 0–255 scale.
    Noise(f64),
}

/// Smallest side a transformed image may have.
pub const MIN_TRANSFORM_SIDE: usize = 8;

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => f.write_str("identity"),
            Transform::Resize(s) => write!(f, "resize:{s}"),
            Transform::Blur(k) => write!(f, "blur:{k}"),
            Transform::Noise(s) => write!(f, "noise:{s}"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad =
            || Error::InvalidArgument(format!("bad transform `{s}` (expected identity, resize:F, blur:K or noise:S)"));
        if s == "identity" {
            return Ok(Transform::Identity);
        }
        let (name, arg) = s.split_once(':').ok_or_else(bad)?;
        let t = match name {
            "resize" => Transform::Resize(arg.parse().map_err(|_| bad())?),
            "blur" => Transform::Blur(arg.parse().map_err(|_| bad())?),
            "noise" => Transform::Noise(arg.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        t.validate()?;
        Ok(t)
    }
}

/// Comma-separated list of transforms.
pub fn parse_transforms(list: &str) -> Result<Vec<Transform>> {
    list.split(',').map(|t| t.trim().parse()).collect()
}

/// Gaussian sigma used for a blur kernel of side `k`.
pub fn blur_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn gaussian_kernel(k: usize) -> Vec<f64> {
    let sigma = blur_sigma(k);
    let half = (k / 2) as f64;
    let raw: Vec<f64> = (0..k).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(x: &FeatureMap, k: usize) -> Result<FeatureMap> {
    Transform::Blur(k).validate()?;
    let kernel = gaussian_kernel(k);
    let half = (k / 2) as isize;
    let (h, w, d) = (x.height(), x.width(), x.depth());
    let mut tmp = FeatureMap::zeros(h, w, d);
    for r in 0..h {
        for c in 0..w {
            for (t, &kv) in kernel.iter().enumerate() {
                let cc = reflect101(c as isize + t as isize - half, w);
                ops::axpy(kv, x.pixel(r, cc), tmp.pixel_mut(r, c));
            }
        }
    }
    let mut out = FeatureMap::zeros(h, w, d);
    for r in 0..h {
        for c in 0..w {
            for (t, &kv) in kernel.iter().enumerate() {
                let rr = reflect101(r as isize + t as isize - half, h);
                ops::axpy(kv, tmp.pixel(rr, c), out.pixel_mut(r, c));
            }
        }
    }
    Ok(out)
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::Resize(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::InvalidArgument(format!("resize factor must be positive, got {s}")))
            }
            Transform::Blur(k) if k < 3 || k % 2 == 0 => {
                Err(Error::InvalidArgument(format!("blur kernel must be odd and at least 3, got {k}")))
            }
            Transform::Noise(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::InvalidArgument(format!("noise sigma must be non-negative, got {s}")))
            }
            _ => Ok(()),
        }
    }

    /// Applies the transform to an image and its mask; `rng` feeds the noise.
    pub fn apply(&self, image: &FeatureMap, mask: &FeatureMap, rng: &mut Rng) -> Result<(FeatureMap, FeatureMap)> {
        self.validate()?;
        match *self {
            Transform::Identity => Ok((image.clone(), mask.clone())),
            Transform::Resize(s) => {
                let out_h = (image.height() as f64 * s).round() as usize;
                let out_w = (image.width() as f64 * s).round() as usize;
                if out_h < MIN_TRANSFORM_SIDE || out_w < MIN_TRANSFORM_SIDE {
                    return Err(Error::TooSmall { height: out_h, width: out_w, min: MIN_TRANSFORM_SIDE });
                }
                let img = ops::resize(image, out_h, out_w, ResizeKind::Area)?;
                let m = ops::resize(mask, out_h, out_w, ResizeKind::Area)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
                Ok((img, m))
            }
            Transform::Blur(k) => Ok((gaussian_blur(image, k)?, mask.clone())),
            Transform::Noise(s) => {
                let sigma = s / 255.0;
                let mut img = image.clone();
                for v in img.values_mut() {
                    *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
                }
                Ok((img, mask.clone()))
            }
        }
    }
}

/// Anything that maps an RGB image to a per-pixel manipulation probability.
pub trait Predictor: Sync {
    fn predict(&self, image: &FeatureMap) -> Result<FeatureMap>;
}

impl Predictor for crate::network::SpanModel {
    fn predict(&self, image: &FeatureMap) -> Result<FeatureMap> {
        crate::network::SpanModel::predict(self, image)
    }
}

/// Applies `transform` to every sample; noise for sample `i` comes from stream `i` of `seed`.
pub fn transform_samples(samples: &[Sample], transform: Transform, seed: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = Rng::derive(seed, i as u64);
            let (image, mask) = transform.apply(&s.image, &s.mask, &mut rng)?;
            Ok(Sample { image, mask, kind: s.kind, seed: s.seed })
        })
        .collect()
}

pub fn predict_all<P: Predictor + ?Sized>(predictor: &P, samples: &[Sample]) -> Result<Vec<FeatureMap>> {
    use rayon::prelude::*;
    samples.par_iter().map(|s| predictor.predict(&s.image)).collect()
}

/// Full report for `predictor` on `samples` after `transform`.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[Sample],
    transform: Transform,
    threshold: f64,
    seed: u64,
) -> Result<EvalReport> {
    let transformed = transform_samples(samples, transform, seed)?;
    let preds = predict_all(predictor, &transformed)?;
    EvalReport::compute(&preds, &transformed, threshold)
}

/// Pixel AUC under each transform.
pub fn robustness_suite<P: Predictor + ?Sized>(
    predictor: &P,
    samples: &[Sample],
    transforms: &[Transform],
    seed: u64,
) -> Result<Vec<(Transform, f64)>> {
    transforms
        .iter()
        .map(|&t| {
            let transformed = transform_samples(samples, t, seed)?;
            let preds = predict_all(predictor, &transformed)?;
            let p: Vec<&FeatureMap> = preds.iter().collect();
            let m: Vec<&FeatureMap> = transformed.iter().map(|s| &s.mask).collect();
            Ok((t, pixel_auc(&p, &m)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> FeatureMap {
        FeatureMap::from_vec(1, v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn auc_perfect_and_inverted() {
        let m = map(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(pixel_auc(&[&map(&[0.1, 0.2, 0.8, 0.9])], &[&m]).unwrap(), 1.0);
        assert_eq!(pixel_auc(&[&map(&[0.9, 0.8, 0.2, 0.1])], &[&m]).unwrap(), 0.0);
        assert_eq!(pixel_auc(&[&map(&[0.5; 4])], &[&m]).unwrap(), 0.5);
    }

    #[test]
    fn auc_degenerate() {
        let m = map(&[1.0, 1.0]);
        assert!(matches!(pixel_auc(&[&map(&[0.1, 0.2])], &[&m]), Err(Error::DegenerateLabels { missing: "negative" })));
    }

    #[test]
    fn non_binary_mask_rejected() {
        let m = map(&[0.0, 0.5]);
        assert!(matches!(prf1(&[&map(&[0.1, 0.2])], &[&m], 0.5), Err(Error::NonBinaryMask { index: 1, .. })));
    }

    #[test]
    fn prf_counts() {
        let m = map(&[1.0, 1.0, 0.0, 0.0]);
        let p = prf1(&[&map(&[0.9, 0.1, 0.6, 0.2])], &[&m], 0.5).unwrap();
        assert_eq!(p.precision, 0.5);
        assert_eq!(p.recall, 0.5);
        assert_eq!(p.f1, 0.5);
        let none = prf1(&[&map(&[0.0; 4])], &[&m], 0.5).unwrap();
        assert_eq!(none, Prf::default());
    }

    #[test]
    fn sweep_prefers_lowest_tied_threshold() {
        let m = map(&[1.0, 0.0]);
        let (t, f1) = threshold_sweep(&[&map(&[0.9, 0.1])], &[&m], &[0.8, 0.3, 0.5]).unwrap();
        assert_eq!(t, 0.3);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn blur_sigma_formula() {
        assert!((blur_sigma(3) - 0.8).abs() < 1e-15);
        assert!((blur_sigma(15) - 2.6).abs() < 1e-12);
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect101(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn transform_parsing() {
        assert_eq!("resize:0.5".parse::<Transform>().unwrap(), Transform::Resize(0.5));
        assert_eq!("blur:3".parse::<Transform>().unwrap(), Transform::Blur(3));
        assert!("blur:4".parse::<Transform>().is_err());
        assert!("sharpen:1".parse::<Transform>().is_err());
        assert_eq!(parse_transforms("identity, noise:3").unwrap().len(), 2);
    }

    #[test]
    fn resize_below_minimum_rejected() {
        let img = FeatureMap::zeros(16, 16, 3);
        let m = FeatureMap::zeros(16, 16, 1);
        let mut rng = Rng::new(0);
        assert!(matches!(Transform::Resize(0.25).apply(&img, &m, &mut rng), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = FeatureMap::filled(8, 8, 3, 0.3);
        let m = FeatureMap::zeros(8, 8, 1);
        let (out, _) = Transform::Noise(0.0).apply(&img, &m, &mut Rng::new(1)).unwrap();
        assert_eq!(out, img);
    }
}
