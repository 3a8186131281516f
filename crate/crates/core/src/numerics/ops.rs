//! Forward kernels and their vector-Jacobian products.
//!
//! Every function here is pure. The tape in [`super::tape`] records which
//! kernel produced a value and calls the matching `*_backward` in reverse.
//!
//! Convolution weights are laid out `[out_channels][kernel_h][kernel_w][in_channels]`.

use super::feature_map::FeatureMap;
use crate::error::{Error, Result};

/// Geometry of a stride-1 2D convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvShape {
    /// Kernel of odd side `kernel` with "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { out_channels, in_channels, kernel, padding: kernel / 2 }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.kernel * self.kernel * self.in_channels
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let h = (height + 2 * self.padding).checked_sub(self.kernel - 1);
        let w = (width + 2 * self.padding).checked_sub(self.kernel - 1);
        match (h, w) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(Error::shape(
                "conv2d",
                format!("{height}x{width} input"),
                format!("{}x{} kernel, padding {}", self.kernel, self.kernel, self.padding),
            )),
        }
    }
}

fn check_conv(x: &FeatureMap, weight: &[f64], bias: Option<&[f64]>, shape: &ConvShape) -> Result<(usize, usize)> {
    if x.depth() != shape.in_channels {
        return Err(Error::shape("conv2d", x.dims(), format!("{} input channels", shape.in_channels)));
    }
    if weight.len() != shape.weight_len() {
        return Err(Error::shape("conv2d", format!("{} weights", weight.len()), format!("{shape:?}")));
    }
    if let Some(b) = bias {
        if b.len() != shape.out_channels {
            return Err(Error::shape(
                "conv2d",
                format!("{} biases", b.len()),
                format!("{} output channels", shape.out_channels),
            ));
        }
    }
    shape.output_size(x.height(), x.width())
}

pub fn conv2d(x: &FeatureMap, weight: &[f64], bias: Option<&[f64]>, shape: &ConvShape) -> Result<FeatureMap> {
    let (oh, ow) = check_conv(x, weight, bias, shape)?;
    let (k, cin, cout, pad) = (shape.kernel, shape.in_channels, shape.out_channels, shape.padding as isize);
    let mut out = FeatureMap::zeros(oh, ow, cout);
    for r in 0..oh {
        for c in 0..ow {
            let acc = out.pixel_mut(r, c);
            if let Some(b) = bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..k {
                let ir = r as isize + ky as isize - pad;
                if ir < 0 || ir >= x.height() as isize {
                    continue;
                }
                for kx in 0..k {
                    let ic = c as isize + kx as isize - pad;
                    if ic < 0 || ic >= x.width() as isize {
                        continue;
                    }
                    let px = x.pixel(ir as usize, ic as usize);
                    for (co, a) in acc.iter_mut().enumerate() {
                        let w0 = ((co * k + ky) * k + kx) * cin;
                        *a += dot(&weight[w0..w0 + cin], px);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    x: &FeatureMap,
    weight: &[f64],
    shape: &ConvShape,
    upstream: &FeatureMap,
) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let (k, cin, pad) = (shape.kernel, shape.in_channels, shape.padding as isize);
    let mut dx = FeatureMap::zeros_like(x);
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; shape.out_channels];
    for r in 0..upstream.height() {
        for c in 0..upstream.width() {
            let g = upstream.pixel(r, c);
            for (d, gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
            for ky in 0..k {
                let ir = r as isize + ky as isize - pad;
                if ir < 0 || ir >= x.height() as isize {
                    continue;
                }
                for kx in 0..k {
                    let ic = c as isize + kx as isize - pad;
                    if ic < 0 || ic >= x.width() as isize {
                        continue;
                    }
                    let (ir, ic) = (ir as usize, ic as usize);
                    let px = x.pixel(ir, ic);
                    let dpx = dx.pixel_mut(ir, ic);
                    for (co, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let w0 = ((co * k + ky) * k + kx) * cin;
                        axpy(gv, &weight[w0..w0 + cin], dpx);
                        axpy(gv, px, &mut dw[w0..w0 + cin]);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Applies one `k × k` kernel independently to every channel ("same" zero padding).
pub fn depthwise_shared(x: &FeatureMap, kernel: &[f64], k: usize) -> Result<FeatureMap> {
    if k.is_multiple_of(2) || kernel.len() != k * k {
        return Err(Error::shape(
            "depthwise_shared",
            format!("{} kernel weights", kernel.len()),
            format!("odd {k}x{k} kernel"),
        ));
    }
    let pad = (k / 2) as isize;
    let mut out = FeatureMap::zeros_like(x);
    for r in 0..x.height() {
        for c in 0..x.width() {
            let acc = out.pixel_mut(r, c);
            for ky in 0..k {
                let ir = r as isize + ky as isize - pad;
                if ir < 0 || ir >= x.height() as isize {
                    continue;
                }
                for kx in 0..k {
                    let ic = c as isize + kx as isize - pad;
                    if ic < 0 || ic >= x.width() as isize {
                        continue;
                    }
                    axpy(kernel[ky * k + kx], x.pixel(ir as usize, ic as usize), acc);
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_kernel)`.
pub fn depthwise_shared_backward(
    x: &FeatureMap,
    kernel: &[f64],
    k: usize,
    upstream: &FeatureMap,
) -> (FeatureMap, Vec<f64>) {
    let pad = (k / 2) as isize;
    let mut dx = FeatureMap::zeros_like(x);
    let mut dk = vec![0.0; kernel.len()];
    for r in 0..x.height() {
        for c in 0..x.width() {
            let g = upstream.pixel(r, c);
            for ky in 0..k {
                let ir = r as isize + ky as isize - pad;
                if ir < 0 || ir >= x.height() as isize {
                    continue;
                }
                for kx in 0..k {
                    let ic = c as isize + kx as isize - pad;
                    if ic < 0 || ic >= x.width() as isize {
                        continue;
                    }
                    let (ir, ic) = (ir as usize, ic as usize);
                    dk[ky * k + kx] += dot(g, x.pixel(ir, ic));
                    axpy(kernel[ky * k + kx], g, dx.pixel_mut(ir, ic));
                }
            }
        }
    }
    (dx, dk)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a slice, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels(x: &FeatureMap) -> FeatureMap {
    let mut out = FeatureMap::zeros_like(x);
    let d = x.depth();
    for (o, i) in out.values_mut().chunks_mut(d).zip(x.values().chunks(d)) {
        softmax_into(i, o);
    }
    out
}

/// Given softmax output `y` and upstream `g`, returns `y ⊙ (g − ⟨g, y⟩)` per pixel.
pub fn softmax_channels_backward(y: &FeatureMap, upstream: &FeatureMap) -> FeatureMap {
    let mut dx = FeatureMap::zeros_like(y);
    let d = y.depth();
    for ((o, yy), g) in dx.values_mut().chunks_mut(d).zip(y.values().chunks(d)).zip(upstream.values().chunks(d)) {
        let inner = dot(g, yy);
        for ((o, &yv), &gv) in o.iter_mut().zip(yy).zip(g) {
            *o = yv * (gv - inner);
        }
    }
    dx
}

/// Separable linear resampling weights along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisWeights {
    pub input_len: usize,
    /// For each output index, `(input index, weight)` taps.
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    /// Box-filter ("area") weights: each output cell averages the input span it covers.
    pub fn area(input_len: usize, output_len: usize) -> Self {
        let scale = input_len as f64 / output_len as f64;
        let taps = (0..output_len)
            .map(|o| {
                let start = o as f64 * scale;
                let end = start + scale;
                let mut taps = Vec::new();
                let mut i = start.floor() as usize;
                while (i as f64) < end && i < input_len {
                    let lo = start.max(i as f64);
                    let hi = end.min(i as f64 + 1.0);
                    if hi > lo {
                        taps.push((i, (hi - lo) / scale));
                    }
                    i += 1;
                }
                taps
            })
            .collect();
        Self { input_len, taps }
    }

    /// Half-pixel-centred linear interpolation weights.
    pub fn bilinear(input_len: usize, output_len: usize) -> Self {
        let scale = input_len as f64 / output_len as f64;
        let taps = (0..output_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input_len - 1) as f64);
                let i0 = src.floor() as usize;
                let frac = src - i0 as f64;
                if i0 + 1 < input_len && frac > 0.0 {
                    vec![(i0, 1.0 - frac), (i0 + 1, frac)]
                } else {
                    vec![(i0, 1.0)]
                }
            })
            .collect();
        Self { input_len, taps }
    }

    pub fn output_len(&self) -> usize {
        self.taps.len()
    }
}

/// Resampling method for [`resize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeKind {
    Area,
    Bilinear,
}

pub fn resize_weights(
    kind: ResizeKind,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> (AxisWeights, AxisWeights) {
    match kind {
        ResizeKind::Area => (AxisWeights::area(in_h, out_h), AxisWeights::area(in_w, out_w)),
        ResizeKind::Bilinear => (AxisWeights::bilinear(in_h, out_h), AxisWeights::bilinear(in_w, out_w)),
    }
}

pub fn resample(x: &FeatureMap, rows: &AxisWeights, cols: &AxisWeights) -> Result<FeatureMap> {
    if rows.input_len != x.height() || cols.input_len != x.width() {
        return Err(Error::shape("resize", x.dims(), format!("weights for {}x{}", rows.input_len, cols.input_len)));
    }
    let mut out = FeatureMap::zeros(rows.output_len(), cols.output_len(), x.depth());
    for (r, rt) in rows.taps.iter().enumerate() {
        for (c, ct) in cols.taps.iter().enumerate() {
            let acc = out.pixel_mut(r, c);
            for &(ir, wr) in rt {
                for &(ic, wc) in ct {
                    axpy(wr * wc, x.pixel(ir, ic), acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn resample_backward(
    input_dims: (usize, usize, usize),
    rows: &AxisWeights,
    cols: &AxisWeights,
    upstream: &FeatureMap,
) -> FeatureMap {
    let mut dx = FeatureMap::zeros(input_dims.0, input_dims.1, input_dims.2);
    for (r, rt) in rows.taps.iter().enumerate() {
        for (c, ct) in cols.taps.iter().enumerate() {
            let g = upstream.pixel(r, c);
            for &(ir, wr) in rt {
                for &(ic, wc) in ct {
                    axpy(wr * wc, g, dx.pixel_mut(ir, ic));
                }
            }
        }
    }
    dx
}

pub fn resize(x: &FeatureMap, out_h: usize, out_w: usize, kind: ResizeKind) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}x{out_w} must be positive")));
    }
    let (rows, cols) = resize_weights(kind, x.height(), x.width(), out_h, out_w);
    resample(x, &rows, &cols)
}

pub const BCE_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy over all pixels, predictions clamped to
/// `[BCE_CLAMP, 1 − BCE_CLAMP]`.
pub fn bce(pred: &FeatureMap, mask: &FeatureMap) -> Result<f64> {
    check_bce(pred, mask)?;
    let n = pred.len() as f64;
    let total: f64 = pred
        .values()
        .iter()
        .zip(mask.values())
        .map(|(&p, &b)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -b * p.ln() - (1.0 - b) * (1.0 - p).ln()
        })
        .sum();
    Ok(total / n)
}

pub(crate) fn check_bce(pred: &FeatureMap, mask: &FeatureMap) -> Result<()> {
    pred.ensure_same_dims(mask, "bce_loss")?;
    if pred.depth() != 1 {
        return Err(Error::shape("bce_loss", pred.dims(), "HxWx1"));
    }
    if let Some((index, &value)) = mask.values().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryMask { index, value });
    }
    Ok(())
}

/// Derivative of [`bce`] with respect to each prediction; zero where the clamp is active.
pub fn bce_backward(pred: &FeatureMap, mask: &FeatureMap, upstream: f64) -> FeatureMap {
    let n = pred.len() as f64;
    let mut d = FeatureMap::zeros_like(pred);
    for ((o, &p), &b) in d.values_mut().iter_mut().zip(pred.values()).zip(mask.values()) {
        *o = if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
            0.0
        } else {
            upstream * (-b / p + (1.0 - b) / (1.0 - p)) / n
        };
    }
    d
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `out = M · v` for a row-major square `d × d` matrix.
#[inline]
pub(crate) fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&m[i * d..(i + 1) * d], v);
    }
}

/// `out = Mᵀ · v` for a row-major square `d × d` matrix.
#[inline]
pub(crate) fn matvec_t(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &vi) in v.iter().enumerate() {
        axpy(vi, &m[i * d..(i + 1) * d], out);
    }
}

/// `M += alpha · a bᵀ`
#[inline]
pub(crate) fn rank1(alpha: f64, a: &[f64], b: &[f64], m: &mut [f64]) {
    let d = b.len();
    for (i, &ai) in a.iter().enumerate() {
        axpy(alpha * ai, b, &mut m[i * d..(i + 1) * d]);
    }
}

/// Row-major square product `A · B`.
pub(crate) fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            axpy(aik, &b[k * d..(k + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
    }
    out
}

/// Row-major square product `Aᵀ · B`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        for i in 0..d {
            let aki = a[k * d + i];
            axpy(aki, &b[k * d..(k + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
    }
    out
}

/// Row-major square product `A · Bᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = dot(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax(&[0.0, 0.0, 0.0]);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let s = softmax(&[1000.0, 1000.0]);
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn zero_sum_kernel_kills_constants() {
        let x = FeatureMap::filled(6, 6, 1, 0.37);
        let w = [-1.0, -1.0, -1.0, -1.0, 8.0, -1.0, -1.0, -1.0, -1.0];
        let shape = ConvShape { out_channels: 1, in_channels: 1, kernel: 3, padding: 0 };
        let y = conv2d(&x, &w, None, &shape).unwrap();
        assert_eq!((y.height(), y.width()), (4, 4));
        assert!(y.values().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let x = FeatureMap::zeros(4, 4, 2);
        let shape = ConvShape::same(3, 1, 3);
        let err = conv2d(&x, &vec![0.0; shape.weight_len()], None, &shape).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d") && msg.contains("4x4x2") && msg.contains("3 input"));
    }

    #[test]
    fn area_weights_average_blocks() {
        let w = AxisWeights::area(4, 2);
        assert_eq!(w.taps[0], vec![(0, 0.5), (1, 0.5)]);
        assert_eq!(w.taps[1], vec![(2, 0.5), (3, 0.5)]);
        // Fractional spans still sum to one.
        let w = AxisWeights::area(32, 25);
        for t in &w.taps {
            let s: f64 = t.iter().map(|x| x.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let w = AxisWeights::bilinear(5, 5);
        for (i, t) in w.taps.iter().enumerate() {
            assert_eq!(t, &vec![(i, 1.0)]);
        }
    }

    #[test]
    fn bce_half_is_ln2() {
        let p = FeatureMap::filled(3, 3, 1, 0.5);
        let m = FeatureMap::from_fn(3, 3, 1, |r, c, _| ((r + c) % 2) as f64);
        assert!((bce(&p, &m).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_soft_mask() {
        let p = FeatureMap::filled(2, 2, 1, 0.5);
        let m = FeatureMap::filled(2, 2, 1, 0.3);
        assert!(matches!(bce(&p, &m), Err(Error::NonBinaryMask { .. })));
    }

    #[test]
    fn matrix_helpers_agree() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul_tn(&a, &b, 2), vec![26.0, 30.0, 38.0, 44.0]);
        assert_eq!(matmul_nt(&a, &b, 2), vec![17.0, 23.0, 39.0, 53.0]);
        let mut out = [0.0; 2];
        matvec_t(&a, &[1.0, 1.0], &mut out);
        assert_eq!(out, [4.0, 6.0]);
    }
}
