//! Reference implementations shared by the integration tests. They are written
//! independently of the library code paths they check.

#![allow(dead_code)]

use span::attention::{AttentionParams, Positional};
use span::numerics::{FeatureMap, ParamId, ParamStore, Rng};

/// Per-pixel attention by direct loops over the dilated window.
pub fn naive_lsa(x: &FeatureMap, p: &AttentionParams, radius: usize, dilation: usize) -> FeatureMap {
    let d = p.depth;
    let (h, w) = (x.height(), x.width());
    let mv = |m: &[f64], v: &[f64]| -> Vec<f64> { (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect() };
    let n = radius as isize;
    let t = dilation as isize;
    let mut out = FeatureMap::zeros(h, w, d);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let q = mv(&p.query, x.pixel(r as usize, c as usize));
            let mut scores = Vec::new();
            let mut neighbours = Vec::new();
            let mut l = 0usize;
            for dy in -n..=n {
                for dx in -n..=n {
                    let (rr, cc) = (r + dy * t, c + dx * t);
                    if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                        let y = x.pixel(rr as usize, cc as usize).to_vec();
                        let pos = match &p.positional {
                            Positional::Projection(m) => mv(&m[l], &y),
                            Positional::Embedding(e) => y.iter().zip(&e[l]).map(|(a, b)| a + b).collect(),
                            Positional::None => y.clone(),
                        };
                        let k = mv(&p.key, &pos);
                        let s: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                        scores.push(s);
                        neighbours.push(y);
                    }
                    l += 1;
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut mixed = vec![0.0; d];
            for (e, y) in exps.iter().zip(&neighbours) {
                for k in 0..d {
                    mixed[k] += e / z * y[k];
                }
            }
            out.pixel_mut(r as usize, c as usize).copy_from_slice(&mv(&p.value, &mixed));
        }
    }
    out
}

/// AUC by counting every (positive, negative) pair; ties count one half.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

pub fn random_map(rng: &mut Rng, h: usize, w: usize, d: usize, scale: f64) -> FeatureMap {
    FeatureMap::from_fn(h, w, d, |_, _, _| rng.uniform_range(-scale, scale))
}

/// Central differences of `f` with respect to every entry of parameter `id`.
pub fn fd_param(store: &ParamStore, id: ParamId, step: f64, f: impl Fn(&ParamStore) -> f64) -> Vec<f64> {
    let mut probe = store.clone();
    let n = store.get(id).len();
    (0..n)
        .map(|i| {
            let v = store.values(id)[i];
            probe.get_mut(id).values_mut()[i] = v + step;
            let plus = f(&probe);
            probe.get_mut(id).values_mut()[i] = v - step;
            let minus = f(&probe);
            probe.get_mut(id).values_mut()[i] = v;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_map(x: &FeatureMap, step: f64, f: impl Fn(&FeatureMap) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let v = x.values()[i];
            probe.values_mut()[i] = v + step;
            let plus = f(&probe);
            probe.values_mut()[i] = v - step;
            let minus = f(&probe);
            probe.values_mut()[i] = v;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, or the plain difference when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

pub fn dot(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}
