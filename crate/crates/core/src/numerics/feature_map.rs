use std::fmt;

use crate::error::{Error, Result};

/// Dense `height × width × depth` tensor stored row-major as (row, column, channel).
#[derive(Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<f64>,
}

/// Spatial and channel extent of a [`FeatureMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.depth)
    }
}

impl Dims {
    pub fn new(height: usize, width: usize, depth: usize) -> Self {
        Self { height, width, depth }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureMap").field("dims", &self.dims()).finish_non_exhaustive()
    }
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self::filled(height, width, depth, 0.0)
    }

    pub fn filled(height: usize, width: usize, depth: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && depth > 0, "feature map dimensions must be positive");
        Self { height, width, depth, values: vec![value; height * width * depth] }
    }

    pub fn from_vec(height: usize, width: usize, depth: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map dimensions must be positive, got {height}x{width}x{depth}"
            )));
        }
        if values.len() != height * width * depth {
            return Err(Error::shape(
                "FeatureMap::from_vec",
                Dims::new(height, width, depth),
                format!("{} values", values.len()),
            ));
        }
        Ok(Self { height, width, depth, values })
    }

    pub fn from_fn(height: usize, width: usize, depth: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(height, width, depth);
        for r in 0..height {
            for c in 0..width {
                for k in 0..depth {
                    out.values[(r * width + c) * depth + k] = f(r, c, k);
                }
            }
        }
        out
    }

    pub fn zeros_like(other: &FeatureMap) -> Self {
        Self::zeros(other.height, other.width, other.depth)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width, self.depth)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.depth + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.values[i] = value;
    }

    /// Channel vector of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.depth;
        &self.values[start..start + self.depth]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.depth;
        &mut self.values[start..start + self.depth]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            depth: self.depth,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute elementwise difference; errors when dims differ.
    pub fn max_abs_diff(&self, other: &FeatureMap) -> Result<f64> {
        self.ensure_same_dims(other, "max_abs_diff")?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Single channel as an `height × width × 1` map.
    pub fn channel(&self, channel: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.height, self.width, 1);
        for (o, px) in out.values.iter_mut().zip(self.values.chunks(self.depth)) {
            *o = px[channel];
        }
        out
    }

    /// Concatenates maps along the channel axis.
    pub fn concat_channels(parts: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = parts.first().ok_or(Error::Empty("channel concat list"))?;
        let (h, w) = (first.height, first.width);
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::shape("concat_channels", first.dims(), p.dims()));
            }
        }
        let depth: usize = parts.iter().map(|p| p.depth).sum();
        let mut values = Vec::with_capacity(h * w * depth);
        for px in 0..h * w {
            for p in parts {
                values.extend_from_slice(&p.values[px * p.depth..(px + 1) * p.depth]);
            }
        }
        FeatureMap::from_vec(h, w, depth, values)
    }

    /// Copy with every pixel moved by `(dr, dc)`; vacated pixels take `fill`.
    pub fn shifted(&self, dr: isize, dc: isize, fill: f64) -> FeatureMap {
        let mut out = FeatureMap::filled(self.height, self.width, self.depth, fill);
        for r in 0..self.height {
            for c in 0..self.width {
                let (sr, sc) = (r as isize - dr, c as isize - dc);
                if sr >= 0 && sc >= 0 && (sr as usize) < self.height && (sc as usize) < self.width {
                    out.pixel_mut(r, c).copy_from_slice(self.pixel(sr as usize, sc as usize));
                }
            }
        }
        out
    }

    pub(crate) fn ensure_same_dims(&self, other: &FeatureMap, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(op, self.dims(), other.dims()));
        }
        Ok(())
    }
}
