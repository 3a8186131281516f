//! Local self-attention over dilated pixel neighbourhoods.
//!
//! Each pixel `x` attends to the `(2N+1)²` pixels at offsets `(a·t, b·t)`,
//! `a, b ∈ −N..=N`, that fall inside the image. Neighbours are numbered
//! `l = 0..(2N+1)²` in row-major order from the top-left offset. With query
//! `q = M^q x` the weight of neighbour `Y_l` is
//!
//! ```text
//! w_l = softmax_l( ⟨key_l, q⟩ / √D )
//! key_l = M^k M_l Y_l      (positional projection)
//!       = M^k (Y_l + e_l)  (positional embedding)
//!       = M^k Y_l          (no position)
//! ```
//!
//! and the output is `Σ_l w_l M^v Y_l`. Out-of-bounds neighbours are dropped
//! and the softmax is taken over the survivors only; no padding is involved.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::ops::{axpy, dot, matmul, matmul_nt, matmul_tn, matvec, matvec_t, rank1};
use crate::numerics::{FeatureMap, ParamId, ParamStore, ParamTensor, Rng};

/// Neighbourhood radius `N` and dilation `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NeighborhoodSpec {
    radius: usize,
    dilation: usize,
}

impl NeighborhoodSpec {
    pub fn new(radius: usize, dilation: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        Ok(Self { radius, dilation })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Side `M = 2N+1` of the square neighbourhood.
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Number of relative positions `(2N+1)²`.
    pub fn positions(&self) -> usize {
        self.side() * self.side()
    }

    /// Spatial offset `(drow, dcol)` of relative position `l`.
    pub fn offset(&self, l: usize) -> (isize, isize) {
        let side = self.side();
        let n = self.radius as isize;
        let t = self.dilation as isize;
        (((l / side) as isize - n) * t, ((l % side) as isize - n) * t)
    }

    pub fn center(&self) -> usize {
        self.positions() / 2
    }

    /// Pixel reached from `(row, col)` through relative position `l`, if in bounds.
    #[inline]
    pub fn neighbor(&self, row: usize, col: usize, l: usize, height: usize, width: usize) -> Option<(usize, usize)> {
        let (dr, dc) = self.offset(l);
        let r = row as isize + dr;
        let c = col as isize + dc;
        (r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width).then_some((r as usize, c as usize))
    }
}

/// How relative position enters the key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PositionMode {
    /// Per-position matrix `M_l` applied to the neighbour before `M^k`.
    Projection,
    /// Per-position vector `e_l` added to the neighbour before `M^k`.
    Embedding,
    None,
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionMode::Projection => "pp",
            PositionMode::Embedding => "pe",
            PositionMode::None => "none",
        })
    }
}

impl FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pp" => Ok(PositionMode::Projection),
            "pe" => Ok(PositionMode::Embedding),
            "none" => Ok(PositionMode::None),
            other => Err(Error::InvalidArgument(format!("unknown position mode `{other}` (expected pp, pe or none)"))),
        }
    }
}

/// Positional parameters; the variant fixes the [`PositionMode`].
#[derive(Clone, Debug, PartialEq)]
pub enum Positional {
    /// One `D × D` matrix per relative position.
    Projection(Vec<Vec<f64>>),
    /// One `D`-vector per relative position.
    Embedding(Vec<Vec<f64>>),
    None,
}

/// Learnable weights of one attention block. Matrices are row-major `D × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub depth: usize,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub positional: Positional,
}

impl AttentionParams {
    /// `M^q, M^k, M^v` uniform on `±1/√D`; `M_l = I`, `e_l = 0`.
    pub fn init(depth: usize, spec: &NeighborhoodSpec, mode: PositionMode, rng: &mut Rng) -> Self {
        let bound = 1.0 / (depth as f64).sqrt();
        let mut mat = || (0..depth * depth).map(|_| rng.uniform_range(-bound, bound)).collect::<Vec<_>>();
        let (query, key, value) = (mat(), mat(), mat());
        let positional = match mode {
            PositionMode::Projection => Positional::Projection(vec![identity(depth); spec.positions()]),
            PositionMode::Embedding => Positional::Embedding(vec![vec![0.0; depth]; spec.positions()]),
            PositionMode::None => Positional::None,
        };
        Self { depth, query, key, value, positional }
    }

    pub fn mode(&self) -> PositionMode {
        match self.positional {
            Positional::Projection(_) => PositionMode::Projection,
            Positional::Embedding(_) => PositionMode::Embedding,
            Positional::None => PositionMode::None,
        }
    }

    pub fn validate(&self, spec: &NeighborhoodSpec) -> Result<()> {
        let d2 = self.depth * self.depth;
        for (name, m) in [("query", &self.query), ("key", &self.key), ("value", &self.value)] {
            if m.len() != d2 {
                return Err(Error::shape(
                    "AttentionParams",
                    format!("{name} with {} entries", m.len()),
                    format!("{0}x{0} matrix", self.depth),
                ));
            }
        }
        let (list, each) = match &self.positional {
            Positional::Projection(list) => (list, d2),
            Positional::Embedding(list) => (list, self.depth),
            Positional::None => return Ok(()),
        };
        if list.len() != spec.positions() {
            return Err(Error::shape(
                "AttentionParams",
                format!("{} positional tensors", list.len()),
                format!("(2N+1)^2 = {} positions", spec.positions()),
            ));
        }
        if let Some(bad) = list.iter().find(|p| p.len() != each) {
            return Err(Error::shape(
                "AttentionParams",
                format!("positional tensor with {} entries", bad.len()),
                format!("{each} entries"),
            ));
        }
        Ok(())
    }

    /// Effective key matrices `A_l` and key offsets `c_l` so that `key_l = A_l Y_l + c_l`.
    fn key_terms(&self, positions: usize) -> (Vec<Vec<f64>>, Option<Vec<Vec<f64>>>) {
        let d = self.depth;
        match &self.positional {
            Positional::Projection(m) => (m.iter().map(|ml| matmul(&self.key, ml, d)).collect(), None),
            Positional::Embedding(e) => {
                let offsets = e
                    .iter()
                    .map(|el| {
                        let mut c = vec![0.0; d];
                        matvec(&self.key, el, &mut c);
                        c
                    })
                    .collect();
                (vec![self.key.clone(); positions], Some(offsets))
            }
            Positional::None => (vec![self.key.clone(); positions], None),
        }
    }
}

/// Locations of one block's weights inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParamIds {
    pub depth: usize,
    pub mode: PositionMode,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub positional: Vec<ParamId>,
}

impl AttentionParamIds {
    /// Adds `params` to `store` under names prefixed by `prefix`.
    pub fn register(store: &mut ParamStore, prefix: &str, params: &AttentionParams) -> Result<Self> {
        let d = params.depth;
        let mut matrix = |name: &str, v: &[f64]| {
            ParamTensor::new(format!("{prefix}.{name}"), vec![d, d], v.to_vec()).map(|p| store.add(p))
        };
        let query = matrix("query", &params.query)?;
        let key = matrix("key", &params.key)?;
        let value = matrix("value", &params.value)?;
        let positional = match &params.positional {
            Positional::Projection(mats) => {
                mats.iter().enumerate().map(|(l, m)| matrix(&format!("pos_proj.{l}"), m)).collect::<Result<Vec<_>>>()?
            }
            Positional::Embedding(vecs) => vecs
                .iter()
                .enumerate()
                .map(|(l, e)| {
                    ParamTensor::new(format!("{prefix}.pos_embed.{l}"), vec![d], e.clone()).map(|p| store.add(p))
                })
                .collect::<Result<Vec<_>>>()?,
            Positional::None => Vec::new(),
        };
        Ok(Self { depth: d, mode: params.mode(), query, key, value, positional })
    }

    pub fn load(&self, store: &ParamStore) -> AttentionParams {
        let list = || self.positional.iter().map(|&id| store.values(id).to_vec()).collect();
        let positional = match self.mode {
            PositionMode::Projection => Positional::Projection(list()),
            PositionMode::Embedding => Positional::Embedding(list()),
            PositionMode::None => Positional::None,
        };
        AttentionParams {
            depth: self.depth,
            query: store.values(self.query).to_vec(),
            key: store.values(self.key).to_vec(),
            value: store.values(self.value).to_vec(),
            positional,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = ParamId> + '_ {
        [self.query, self.key, self.value].into_iter().chain(self.positional.iter().copied())
    }
}

pub(crate) fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// In-bounds neighbours of one pixel with their relative indices.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborPatch {
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl NeighborPatch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Collects the in-bounds dilated neighbours of `(row, col)`.
pub fn gather_neighborhood(x: &FeatureMap, row: usize, col: usize, spec: &NeighborhoodSpec) -> Result<NeighborPatch> {
    if row >= x.height() || col >= x.width() {
        return Err(Error::InvalidArgument(format!("pixel ({row}, {col}) outside {}x{} image", x.height(), x.width())));
    }
    let entries = (0..spec.positions())
        .filter_map(|l| spec.neighbor(row, col, l, x.height(), x.width()).map(|(r, c)| (l, x.pixel(r, c).to_vec())))
        .collect();
    Ok(NeighborPatch { entries })
}

/// Saved state of a forward pass, sufficient for [`lsa_backward`].
#[derive(Clone, Debug)]
pub struct LsaCache {
    input: FeatureMap,
    params: AttentionParams,
    spec: NeighborhoodSpec,
    key_mats: Vec<Vec<f64>>,
    key_offsets: Option<Vec<Vec<f64>>>,
    queries: Vec<f64>,
    /// `positions` slots per pixel; out-of-bounds slots hold 0.
    weights: Vec<f64>,
    /// `Σ_l w_l Y_l` per pixel.
    mixed: Vec<f64>,
}

impl LsaCache {
    pub fn spec(&self) -> &NeighborhoodSpec {
        &self.spec
    }

    /// Attention weight per relative position at `(row, col)`; out-of-bounds positions are 0.
    pub fn weights_at(&self, row: usize, col: usize) -> &[f64] {
        let p = self.spec.positions();
        let i = row * self.input.width() + col;
        &self.weights[i * p..(i + 1) * p]
    }
}

/// Gradients of a scalar objective with respect to the block input and every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct LsaGrads {
    pub input: FeatureMap,
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    /// Matches the layout of [`Positional`]; empty for [`PositionMode::None`].
    pub positional: Vec<Vec<f64>>,
}

pub fn lsa_forward(x: &FeatureMap, params: &AttentionParams, spec: &NeighborhoodSpec) -> Result<FeatureMap> {
    lsa_forward_cached(x, params, spec).map(|(out, _)| out)
}

pub fn lsa_forward_cached(
    x: &FeatureMap,
    params: &AttentionParams,
    spec: &NeighborhoodSpec,
) -> Result<(FeatureMap, LsaCache)> {
    let d = params.depth;
    if x.depth() != d {
        return Err(Error::shape("lsa_forward", x.dims(), format!("attention depth {d}")));
    }
    params.validate(spec)?;
    let (h, w) = (x.height(), x.width());
    let positions = spec.positions();
    let scale = 1.0 / (d as f64).sqrt();
    let (key_mats, key_offsets) = params.key_terms(positions);
    let shared_key = params.mode() != PositionMode::Projection;

    let mut out = FeatureMap::zeros(h, w, d);
    let mut queries = vec![0.0; h * w * d];
    let mut weights = vec![0.0; h * w * positions];
    let mut mixed = vec![0.0; h * w * d];
    let mut r_buf = vec![0.0; d];
    let mut logits = vec![0.0; positions];
    let mut valid = vec![false; positions];

    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let q = &mut queries[i * d..(i + 1) * d];
            matvec(&params.query, x.pixel(row, col), q);
            let q = &queries[i * d..(i + 1) * d];
            if shared_key {
                matvec_t(&key_mats[0], q, &mut r_buf);
            }
            let mut max = f64::NEG_INFINITY;
            for l in 0..positions {
                valid[l] = false;
                let Some((nr, nc)) = spec.neighbor(row, col, l, h, w) else {
                    continue;
                };
                valid[l] = true;
                if !shared_key {
                    matvec_t(&key_mats[l], q, &mut r_buf);
                }
                let mut s = dot(x.pixel(nr, nc), &r_buf);
                if let Some(offs) = &key_offsets {
                    s += dot(&offs[l], q);
                }
                logits[l] = s * scale;
                max = max.max(logits[l]);
            }
            let wts = &mut weights[i * positions..(i + 1) * positions];
            let mut total = 0.0;
            for l in 0..positions {
                if valid[l] {
                    wts[l] = (logits[l] - max).exp();
                    total += wts[l];
                }
            }
            let z = &mut mixed[i * d..(i + 1) * d];
            for l in 0..positions {
                if valid[l] {
                    wts[l] /= total;
                    let (nr, nc) = spec.neighbor(row, col, l, h, w).expect("valid neighbour");
                    axpy(wts[l], x.pixel(nr, nc), z);
                }
            }
            matvec(&params.value, z, out.pixel_mut(row, col));
        }
    }
    let cache = LsaCache {
        input: x.clone(),
        params: params.clone(),
        spec: *spec,
        key_mats,
        key_offsets,
        queries,
        weights,
        mixed,
    };
    Ok((out, cache))
}

/// Reverse-mode pass through one attention block.
pub fn lsa_backward(cache: &LsaCache, upstream: &FeatureMap) -> Result<LsaGrads> {
    let x = &cache.input;
    cache.input.ensure_same_dims(upstream, "lsa_backward")?;
    let params = &cache.params;
    let spec = &cache.spec;
    let d = params.depth;
    let (h, w) = (x.height(), x.width());
    let positions = spec.positions();
    let scale = 1.0 / (d as f64).sqrt();

    let mut dx = FeatureMap::zeros_like(x);
    let mut d_query = vec![0.0; d * d];
    let mut d_value = vec![0.0; d * d];
    let mut d_keymats = vec![vec![0.0; d * d]; positions];
    let mut d_keyoffs = vec![vec![0.0; d]; positions];

    let mut dz = vec![0.0; d];
    let mut dq = vec![0.0; d];
    let mut dqx = vec![0.0; d];
    let mut key = vec![0.0; d];
    let mut r_buf = vec![0.0; d];
    let mut dw = vec![0.0; positions];

    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let g = upstream.pixel(row, col);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let z = &cache.mixed[i * d..(i + 1) * d];
            let q = &cache.queries[i * d..(i + 1) * d];
            let wts = &cache.weights[i * positions..(i + 1) * positions];
            rank1(1.0, g, z, &mut d_value);
            matvec_t(&params.value, g, &mut dz);

            let mut expected = 0.0;
            for l in 0..positions {
                dw[l] = 0.0;
                if let Some((nr, nc)) = spec.neighbor(row, col, l, h, w) {
                    dw[l] = dot(&dz, x.pixel(nr, nc));
                    expected += wts[l] * dw[l];
                }
            }
            dq.iter_mut().for_each(|v| *v = 0.0);
            for l in 0..positions {
                let Some((nr, nc)) = spec.neighbor(row, col, l, h, w) else {
                    continue;
                };
                let y = x.pixel(nr, nc);
                let ds = wts[l] * (dw[l] - expected) * scale;
                // value path
                axpy(wts[l], &dz, dx.pixel_mut(nr, nc));
                if ds == 0.0 {
                    continue;
                }
                // key path
                matvec_t(&cache.key_mats[l], q, &mut r_buf);
                axpy(ds, &r_buf, dx.pixel_mut(nr, nc));
                matvec(&cache.key_mats[l], y, &mut key);
                if let Some(offs) = &cache.key_offsets {
                    axpy(1.0, &offs[l], &mut key);
                    axpy(ds, q, &mut d_keyoffs[l]);
                }
                axpy(ds, &key, &mut dq);
                rank1(ds, q, y, &mut d_keymats[l]);
            }
            rank1(1.0, &dq, x.pixel(row, col), &mut d_query);
            matvec_t(&params.query, &dq, &mut dqx);
            axpy(1.0, &dqx, dx.pixel_mut(row, col));
        }
    }

    let mut d_key = vec![0.0; d * d];
    let positional = match &params.positional {
        Positional::Projection(mats) => mats
            .iter()
            .zip(&d_keymats)
            .map(|(ml, da)| {
                // A_l = M^k M_l
                axpy(1.0, &matmul_nt(da, ml, d), &mut d_key);
                matmul_tn(&params.key, da, d)
            })
            .collect(),
        Positional::Embedding(embeds) => {
            d_keymats.iter().for_each(|da| axpy(1.0, da, &mut d_key));
            embeds
                .iter()
                .zip(&d_keyoffs)
                .map(|(el, dc)| {
                    // c_l = M^k e_l
                    rank1(1.0, dc, el, &mut d_key);
                    let mut de = vec![0.0; d];
                    matvec_t(&params.key, dc, &mut de);
                    de
                })
                .collect()
        }
        Positional::None => {
            d_keymats.iter().for_each(|da| axpy(1.0, da, &mut d_key));
            Vec::new()
        }
    };

    Ok(LsaGrads { input: dx, query: d_query, key: d_key, value: d_value, positional })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(h: usize, w: usize, d: usize, rng: &mut Rng) -> FeatureMap {
        FeatureMap::from_fn(h, w, d, |_, _, _| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn neighborhood_counts_at_interior_edge_corner() {
        let x = FeatureMap::zeros(4, 4, 1);
        let spec = NeighborhoodSpec::new(1, 1).unwrap();
        assert_eq!(gather_neighborhood(&x, 1, 1, &spec).unwrap().len(), 9);
        assert_eq!(gather_neighborhood(&x, 0, 1, &spec).unwrap().len(), 6);
        assert_eq!(gather_neighborhood(&x, 0, 0, &spec).unwrap().len(), 4);
    }

    #[test]
    fn dilated_corner_keeps_positive_offsets() {
        let x = FeatureMap::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64);
        let spec = NeighborhoodSpec::new(1, 3).unwrap();
        let patch = gather_neighborhood(&x, 0, 0, &spec).unwrap();
        let ls: Vec<usize> = patch.entries.iter().map(|e| e.0).collect();
        assert_eq!(ls, vec![4, 5, 7, 8]);
        let vals: Vec<f64> = patch.entries.iter().map(|e| e.1[0]).collect();
        assert_eq!(vals, vec![0.0, 3.0, 12.0, 15.0]);
    }

    #[test]
    fn out_of_range_pixel_rejected() {
        let x = FeatureMap::zeros(2, 2, 1);
        let spec = NeighborhoodSpec::new(1, 1).unwrap();
        assert!(gather_neighborhood(&x, 2, 0, &spec).is_err());
    }

    #[test]
    fn single_pixel_is_value_projection() {
        let mut rng = Rng::new(5);
        let spec = NeighborhoodSpec::new(1, 1).unwrap();
        let params = AttentionParams::init(3, &spec, PositionMode::Projection, &mut rng);
        let x = random_map(1, 1, 3, &mut rng);
        let y = lsa_forward(&x, &params, &spec).unwrap();
        let mut expect = vec![0.0; 3];
        matvec(&params.value, x.pixel(0, 0), &mut expect);
        for (a, b) in y.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_image_gives_value_projection_everywhere() {
        let mut rng = Rng::new(9);
        let spec = NeighborhoodSpec::new(1, 1).unwrap();
        let params = AttentionParams::init(2, &spec, PositionMode::None, &mut rng);
        let x = FeatureMap::from_fn(5, 5, 2, |_, _, k| [0.3, -0.7][k]);
        let y = lsa_forward(&x, &params, &spec).unwrap();
        let mut expect = vec![0.0; 2];
        matvec(&params.value, &[0.3, -0.7], &mut expect);
        for r in 0..5 {
            for c in 0..5 {
                for (k, e) in expect.iter().enumerate() {
                    assert!((y.get(r, c, k) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depth_mismatch_is_structured() {
        let mut rng = Rng::new(1);
        let spec = NeighborhoodSpec::new(1, 1).unwrap();
        let params = AttentionParams::init(3, &spec, PositionMode::None, &mut rng);
        let x = FeatureMap::zeros(2, 2, 2);
        assert!(matches!(lsa_forward(&x, &params, &spec), Err(Error::ShapeMismatch { op: "lsa_forward", .. })));
    }

    #[test]
    fn positional_length_checked() {
        let mut rng = Rng::new(1);
        let spec = NeighborhoodSpec::new(1, 1).unwrap();
        let mut params = AttentionParams::init(2, &spec, PositionMode::Embedding, &mut rng);
        params.positional = Positional::Embedding(vec![vec![0.0; 2]; 4]);
        let x = FeatureMap::zeros(2, 2, 2);
        assert!(lsa_forward(&x, &params, &spec).is_err());
    }

    #[test]
    fn weights_form_distribution() {
        let mut rng = Rng::new(11);
        let spec = NeighborhoodSpec::new(1, 2).unwrap();
        let params = AttentionParams::init(3, &spec, PositionMode::Projection, &mut rng);
        let x = random_map(5, 6, 3, &mut rng);
        let (_, cache) = lsa_forward_cached(&x, &params, &spec).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                let w = cache.weights_at(r, c);
                assert!(w.iter().all(|&v| v >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(2);
        let spec = NeighborhoodSpec::new(1, 1).unwrap();
        let params = AttentionParams::init(2, &spec, PositionMode::Projection, &mut rng);
        let x = random_map(3, 3, 2, &mut rng);
        let (y, cache) = lsa_forward_cached(&x, &params, &spec).unwrap();
        let g = lsa_backward(&cache, &FeatureMap::zeros_like(&y)).unwrap();
        assert!(g.query.iter().chain(&g.key).chain(&g.value).all(|&v| v == 0.0));
        assert!(g.positional.iter().flatten().all(|&v| v == 0.0));
        assert!(g.input.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_positions_get_no_gradient_on_single_pixel() {
        let mut rng = Rng::new(4);
        let spec = NeighborhoodSpec::new(1, 1).unwrap();
        let params = AttentionParams::init(2, &spec, PositionMode::Projection, &mut rng);
        let x = random_map(1, 1, 2, &mut rng);
        let (y, cache) = lsa_forward_cached(&x, &params, &spec).unwrap();
        let g = lsa_backward(&cache, &FeatureMap::filled(1, 1, 2, 1.0)).unwrap();
        assert_eq!(y.dims(), x.dims());
        for (l, gl) in g.positional.iter().enumerate() {
            if l != spec.center() {
                assert!(gl.iter().all(|&v| v == 0.0), "position {l}");
            }
        }
    }

    #[test]
    fn upstream_shape_checked() {
        let mut rng = Rng::new(4);
        let spec = NeighborhoodSpec::new(1, 1).unwrap();
        let params = AttentionParams::init(2, &spec, PositionMode::None, &mut rng);
        let x = random_map(3, 3, 2, &mut rng);
        let (_, cache) = lsa_forward_cached(&x, &params, &spec).unwrap();
        assert!(lsa_backward(&cache, &FeatureMap::zeros(2, 3, 2)).is_err());
    }

    #[test]
    fn position_mode_round_trips_through_text() {
        for m in [PositionMode::Projection, PositionMode::Embedding, PositionMode::None] {
            assert_eq!(m.to_string().parse::<PositionMode>().unwrap(), m);
        }
        assert!("xyz".parse::<PositionMode>().is_err());
    }
}
