//! Procedural manipulated images with exact ground-truth masks.
//!
//! Backgrounds are sums of a few low-frequency sinusoids plus faint sensor-like
//! noise. Each manipulation edits only the pixels of one region and returns the
//! mask of exactly those pixels.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imageio;
use crate::numerics::{FeatureMap, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TamperKind {
    CopyMove,
    Splice,
    Removal,
}

impl TamperKind {
    pub const ALL: [TamperKind; 3] = [TamperKind::CopyMove, TamperKind::Splice, TamperKind::Removal];
}

impl fmt::Display for TamperKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TamperKind::CopyMove => "copy_move",
            TamperKind::Splice => "splice",
            TamperKind::Removal => "removal",
        })
    }
}

impl FromStr for TamperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy_move" => Ok(TamperKind::CopyMove),
            "splice" => Ok(TamperKind::Splice),
            "removal" => Ok(TamperKind::Removal),
            other => Err(Error::InvalidArgument(format!("unknown manipulation type `{other}`"))),
        }
    }
}

/// One manipulated RGB image in `[0, 1]` and its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: FeatureMap,
    pub mask: FeatureMap,
    pub kind: TamperKind,
    /// Seed that regenerates this sample through [`generate_sample`].
    pub seed: u64,
}

/// Smallest image side the generator accepts.
pub const MIN_SIDE: usize = 8;
/// Region placement attempts before giving up.
pub const MAX_PLACEMENT_TRIES: usize = 100;
/// Bounds on the tampered fraction of the image.
pub const MIN_FRACTION: f64 = 0.02;
pub const MAX_FRACTION: f64 = 0.5;

fn check_side(height: usize, width: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::TooSmall { height, width, min: MIN_SIDE });
    }
    Ok(())
}

/// Per-pixel noise sigma range of host backgrounds.
pub const HOST_NOISE: (f64, f64) = (0.008, 0.02);
/// Noise sigma range of splice donors, standing in for a different camera.
pub const DONOR_NOISE: (f64, f64) = (0.03, 0.05);
/// Noise sigma range of removal fills.
pub const FILL_NOISE: (f64, f64) = (0.0, 0.002);

/// Smooth RGB background: per-channel base level, three oriented sinusoids of at
/// most 0.1 cycles per pixel, and white noise with a per-image sigma.
pub fn generate_background(rng: &mut Rng, height: usize, width: usize) -> Result<FeatureMap> {
    render_background(rng, height, width, HOST_NOISE)
}

/// Background rendered like [`generate_background`] but with the stronger donor noise.
pub fn generate_donor(rng: &mut Rng, height: usize, width: usize) -> Result<FeatureMap> {
    render_background(rng, height, width, DONOR_NOISE)
}

fn render_background(rng: &mut Rng, height: usize, width: usize, noise: (f64, f64)) -> Result<FeatureMap> {
    check_side(height, width)?;
    let noise_sigma = rng.uniform_range(noise.0, noise.1);
    let mut img = FeatureMap::zeros(height, width, 3);
    for ch in 0..3 {
        let base = rng.uniform_range(0.3, 0.7);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let freq = rng.uniform_range(0.01, 0.1);
                let angle = rng.uniform_range(0.0, std::f64::consts::PI);
                let amp = rng.uniform_range(0.05, 0.1);
                let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                (
                    2.0 * std::f64::consts::PI * freq * angle.cos(),
                    2.0 * std::f64::consts::PI * freq * angle.sin(),
                    amp,
                    phase,
                )
            })
            .collect();
        for r in 0..height {
            for c in 0..width {
                let mut v = base;
                for &(kr, kc, amp, phase) in &waves {
                    v += amp * (kr * r as f64 + kc * c as f64 + phase).sin();
                }
                v += noise_sigma * rng.normal();
                img.set(r, c, ch, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// Binary region shape anchored at `(top, left)` inside its bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` membership.
    pub cells: Vec<bool>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn contains_local(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.width + c]
    }

    /// Absolute pixel coordinates covered by the region.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |r| {
            (0..self.width).filter_map(move |c| self.contains_local(r, c).then_some((self.top + r, self.left + c)))
        })
    }

    pub fn moved_to(&self, top: usize, left: usize) -> Region {
        Region { top, left, ..self.clone() }
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }

    pub fn to_mask(&self, height: usize, width: usize) -> FeatureMap {
        let mut m = FeatureMap::zeros(height, width, 1);
        for (r, c) in self.pixels() {
            m.set(r, c, 0, 1.0);
        }
        m
    }
}

/// Draws a rectangle or ellipse whose area lies in the allowed fraction range,
/// placed with at least one pixel of margin to every border.
fn random_shape(rng: &mut Rng, height: usize, width: usize, max_fraction: f64) -> Result<Region> {
    let total = (height * width) as f64;
    let max_h = height - 2;
    let max_w = width - 2;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let h = rng.int_range(2, max_h);
        let w = rng.int_range(2, max_w);
        let ellipse = rng.bernoulli(0.5);
        let cells: Vec<bool> = (0..h * w)
            .map(|i| {
                if !ellipse {
                    return true;
                }
                let (r, c) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                let (a, b) = (h as f64 / 2.0, w as f64 / 2.0);
                ((r - a) / a).powi(2) + ((c - b) / b).powi(2) <= 1.0
            })
            .collect();
        let region = Region { top: 0, left: 0, height: h, width: w, cells };
        let fraction = region.area() as f64 / total;
        if fraction < MIN_FRACTION || fraction > max_fraction {
            continue;
        }
        return Ok(place(&region, rng, height, width));
    }
    Err(Error::PlacementFailed { tries: MAX_PLACEMENT_TRIES })
}

fn place(region: &Region, rng: &mut Rng, height: usize, width: usize) -> Region {
    let top = rng.int_range(1, height - 1 - region.height);
    let left = rng.int_range(1, width - 1 - region.width);
    region.moved_to(top, left)
}

/// Copies one region of the image onto a non-overlapping location of the same image.
pub fn apply_copy_move(image: &FeatureMap, rng: &mut Rng) -> Result<(FeatureMap, FeatureMap)> {
    check_side(image.height(), image.width())?;
    let (h, w) = (image.height(), image.width());
    for _ in 0..MAX_PLACEMENT_TRIES {
        // Two disjoint copies must fit, so each gets at most half of the budget.
        let source = random_shape(rng, h, w, MAX_FRACTION / 2.0)?;
        let target = place(&source, rng, h, w);
        if source.overlaps(&target) {
            continue;
        }
        let mut out = image.clone();
        for (r, c) in source.pixels() {
            let (tr, tc) = (r - source.top + target.top, c - source.left + target.left);
            out.pixel_mut(tr, tc).copy_from_slice(image.pixel(r, c));
        }
        return Ok((out, target.to_mask(h, w)));
    }
    Err(Error::PlacementFailed { tries: MAX_PLACEMENT_TRIES })
}

/// Pastes a region of `donor` into `image`.
pub fn apply_splice(image: &FeatureMap, donor: &FeatureMap, rng: &mut Rng) -> Result<(FeatureMap, FeatureMap)> {
    check_side(image.height(), image.width())?;
    image.ensure_same_dims(donor, "apply_splice")?;
    let (h, w) = (image.height(), image.width());
    let source = random_shape(rng, h, w, MAX_FRACTION)?;
    let target = place(&source, rng, h, w);
    let mut out = image.clone();
    for (r, c) in source.pixels() {
        let (tr, tc) = (r - source.top + target.top, c - source.left + target.left);
        out.pixel_mut(tr, tc).copy_from_slice(donor.pixel(r, c));
    }
    Ok((out, target.to_mask(h, w)))
}

/// Erases a region by filling it with the mean colour of the surrounding ring
/// plus noise fainter than any host background carries.
pub fn apply_removal(image: &FeatureMap, rng: &mut Rng) -> Result<(FeatureMap, FeatureMap)> {
    check_side(image.height(), image.width())?;
    let (h, w) = (image.height(), image.width());
    let region = random_shape(rng, h, w, MAX_FRACTION)?;
    let mask = region.to_mask(h, w);
    let ring = 2usize;
    let (r0, r1) = (region.top.saturating_sub(ring), (region.top + region.height + ring).min(h));
    let (c0, c1) = (region.left.saturating_sub(ring), (region.left + region.width + ring).min(w));
    let mut mean = [0.0; 3];
    let mut count = 0usize;
    for r in r0..r1 {
        for c in c0..c1 {
            if mask.get(r, c, 0) == 0.0 {
                for (m, v) in mean.iter_mut().zip(image.pixel(r, c)) {
                    *m += v;
                }
                count += 1;
            }
        }
    }
    // The one-pixel border margin guarantees a non-empty ring.
    for m in &mut mean {
        *m /= count as f64;
    }
    let sigma = rng.uniform_range(FILL_NOISE.0, FILL_NOISE.1);
    let mut out = image.clone();
    for (r, c) in region.pixels() {
        for (ch, m) in mean.iter().enumerate() {
            out.set(r, c, ch, (m + sigma * rng.normal()).clamp(0.0, 1.0));
        }
    }
    Ok((out, mask))
}

/// Regenerates the sample identified by `seed` at the given size.
pub fn generate_sample(seed: u64, size: usize) -> Result<Sample> {
    let mut rng = Rng::new(seed);
    let kind = TamperKind::ALL[rng.below(3)];
    let background = generate_background(&mut rng, size, size)?;
    let (image, mask) = match kind {
        TamperKind::CopyMove => apply_copy_move(&background, &mut rng)?,
        TamperKind::Splice => {
            let donor = generate_donor(&mut rng, size, size)?;
            apply_splice(&background, &donor, &mut rng)?
        }
        TamperKind::Removal => apply_removal(&background, &mut rng)?,
    };
    Ok(Sample { image, mask, kind, seed })
}

/// Seed of the `index`-th sample of the stream started from `stream_seed`.
pub fn sample_seed(stream_seed: u64, index: u64) -> u64 {
    Rng::derive(stream_seed, index).next_u64()
}

/// Endless reproducible sample source; a sample depends only on the stream
/// seed and its position.
#[derive(Clone, Debug)]
pub struct SampleStream {
    seed: u64,
    size: usize,
    next: u64,
}

impl SampleStream {
    pub fn new(seed: u64, size: usize) -> Result<Self> {
        check_side(size, size)?;
        Ok(Self { seed, size, next: 0 })
    }

    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn next_sample(&mut self) -> Sample {
        let seed = sample_seed(self.seed, self.next);
        self.next += 1;
        // Size was checked at construction and placement always succeeds for
        // sides of at least 8 with overwhelming probability; a failure moves on.
        match generate_sample(seed, self.size) {
            Ok(s) => s,
            Err(_) => self.next_sample(),
        }
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<Sample> {
        (0..n).map(|_| self.next_sample()).collect()
    }
}

impl Iterator for SampleStream {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        Some(self.next_sample())
    }
}

/// First `count` samples of the stream seeded with `seed`.
pub fn fixed_set(seed: u64, size: usize, count: usize) -> Result<Vec<Sample>> {
    Ok(SampleStream::new(seed, size)?.take(count).collect())
}

pub const INDEX_FILE: &str = "index.txt";

/// Writes `count` samples as 8-bit PNGs plus an index with one
/// `image mask type seed` line per sample.
pub fn dump_dataset(dir: &Path, seed: u64, size: usize, count: usize) -> Result<Vec<Sample>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = fixed_set(seed, size, count)?;
    let mut index = String::new();
    for (i, s) in samples.iter().enumerate() {
        let image_name = format!("image_{i:05}.png");
        let mask_name = format!("mask_{i:05}.png");
        imageio::write_rgb(&dir.join(&image_name), &s.image)?;
        imageio::write_mask(&dir.join(&mask_name), &s.mask)?;
        index.push_str(&format!("{image_name} {mask_name} {} {}\n", s.kind, s.seed));
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    Ok(samples)
}

/// Reads a directory written by [`dump_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(INDEX_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| Error::Config { line: n + 1, reason };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields in {}, found {}", path.display(), fields.len())));
        }
        let kind = fields[2].parse::<TamperKind>()?;
        let seed = fields[3].parse::<u64>().map_err(|e| bad(format!("bad seed `{}`: {e}", fields[3])))?;
        let image = imageio::read_rgb(&dir.join(fields[0]))?;
        let mask = imageio::read_mask(&dir.join(fields[1]))?;
        image.ensure_same_dims(&FeatureMap::zeros(mask.height(), mask.width(), 3), "load_dataset")?;
        samples.push(Sample { image, mask, kind, seed });
    }
    if samples.is_empty() {
        return Err(Error::Empty("dataset index"));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_in_unit_range() {
        let mut rng = Rng::new(3);
        let bg = generate_background(&mut rng, 32, 32).unwrap();
        assert!(bg.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn too_small_rejected() {
        let mut rng = Rng::new(0);
        assert!(matches!(generate_background(&mut rng, 7, 32), Err(Error::TooSmall { .. })));
        assert!(SampleStream::new(0, 4).is_err());
    }

    #[test]
    fn copy_move_pixels_come_from_image() {
        let mut rng = Rng::new(11);
        let bg = generate_background(&mut rng, 32, 32).unwrap();
        let (out, mask) = apply_copy_move(&bg, &mut rng).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                if mask.get(r, c, 0) == 0.0 {
                    assert_eq!(out.pixel(r, c), bg.pixel(r, c));
                }
            }
        }
    }

    #[test]
    fn removal_fills_with_ring_mean() {
        let bg = FeatureMap::filled(16, 16, 3, 0.4);
        let mut rng = Rng::new(5);
        let (out, mask) = apply_removal(&bg, &mut rng).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                if mask.get(r, c, 0) == 1.0 {
                    assert!((out.get(r, c, 0) - 0.4).abs() < 0.06);
                }
            }
        }
    }

    #[test]
    fn stream_is_reproducible() {
        let a: Vec<Sample> = SampleStream::new(9, 16).unwrap().take(4).collect();
        let b: Vec<Sample> = SampleStream::new(9, 16).unwrap().take(4).collect();
        assert_eq!(a, b);
        assert_eq!(generate_sample(a[2].seed, 16).unwrap(), a[2]);
    }

    #[test]
    fn kind_round_trips() {
        for k in TamperKind::ALL {
            assert_eq!(k.to_string().parse::<TamperKind>().unwrap(), k);
        }
    }
}
