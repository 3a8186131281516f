//! Recorded computation graph for reverse-mode differentiation.
//!
//! A [`Tape`] borrows the [`ParamStore`] for the duration of one forward pass
//! and appends a node per operation. [`Tape::backward`] walks the nodes in
//! reverse, accumulating input gradients per node and parameter gradients into
//! a fresh [`GradBuffer`]. The store itself is never mutated, so several tapes
//! may run against the same parameters at once.

use std::sync::atomic::{AtomicU64, Ordering};

use super::feature_map::FeatureMap;
use super::ops::{self, AxisWeights, ConvShape, ResizeKind};
use super::param::{GradBuffer, ParamId, ParamStore};
use crate::attention::{self, AttentionParamIds, LsaCache, NeighborhoodSpec};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Input,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    Concat(Vec<Var>),
    Conv2d { input: Var, weight: ParamId, bias: Option<ParamId>, shape: ConvShape },
    Depthwise { input: Var, kernel: ParamId, side: usize },
    Resize { input: Var, rows: AxisWeights, cols: AxisWeights },
    Sum(Var),
    Bce { pred: Var, mask: FeatureMap },
    Lsa { input: Var, ids: AttentionParamIds, cache: Box<LsaCache> },
}

struct Node {
    value: FeatureMap,
    op: Op,
}

pub struct Tape<'a> {
    id: u64,
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<FeatureMap>>,
    params: GradBuffer,
}

impl Gradients {
    /// Gradient with respect to a recorded value; `None` if it did not influence the output.
    pub fn wrt(&self, var: Var) -> Option<&FeatureMap> {
        if var.tape != self.tape {
            return None;
        }
        self.nodes.get(var.index).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        self.params.get(id)
    }

    pub fn params(&self) -> &GradBuffer {
        &self.params
    }

    pub fn into_params(self) -> GradBuffer {
        self.params
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FeatureMap, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::NoForward {
                node: var.index,
                recorded: if var.tape == self.id { self.nodes.len() } else { 0 },
            });
        }
        Ok(())
    }

    pub fn value(&self, var: Var) -> &FeatureMap {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.index].value
    }

    pub fn input(&mut self, value: FeatureMap) -> Var {
        self.push(value, Op::Input)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        va.ensure_same_dims(vb, "add")?;
        let mut out = va.clone();
        for (o, v) in out.values_mut().iter_mut().zip(vb.values()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        va.ensure_same_dims(vb, "mul")?;
        let mut out = va.clone();
        for (o, v) in out.values_mut().iter_mut().zip(vb.values()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| v * factor);
        Ok(self.push(out, Op::Scale(a, factor)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f64::tanh);
        Ok(self.push(out, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(ops::sigmoid);
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = ops::softmax_channels(self.value(a));
        Ok(self.push(out, Op::SoftmaxChannels(a)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let maps: Vec<&FeatureMap> = parts.iter().map(|&p| self.value(p)).collect();
        let out = FeatureMap::concat_channels(&maps)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn conv2d(&mut self, input: Var, weight: ParamId, bias: Option<ParamId>, shape: ConvShape) -> Result<Var> {
        self.check(input)?;
        let out =
            ops::conv2d(self.value(input), self.store.values(weight), bias.map(|b| self.store.values(b)), &shape)?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, shape }))
    }

    /// One `side × side` kernel applied to every channel with "same" padding.
    pub fn depthwise(&mut self, input: Var, kernel: ParamId, side: usize) -> Result<Var> {
        self.check(input)?;
        let out = ops::depthwise_shared(self.value(input), self.store.values(kernel), side)?;
        Ok(self.push(out, Op::Depthwise { input, kernel, side }))
    }

    pub fn resize(&mut self, input: Var, height: usize, width: usize, kind: ResizeKind) -> Result<Var> {
        self.check(input)?;
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("resize target {height}x{width} must be positive")));
        }
        let x = self.value(input);
        let (rows, cols) = ops::resize_weights(kind, x.height(), x.width(), height, width);
        let out = ops::resample(x, &rows, &cols)?;
        Ok(self.push(out, Op::Resize { input, rows, cols }))
    }

    /// Sum of every element, as a `1×1×1` map.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        Ok(self.push(FeatureMap::filled(1, 1, 1, s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean binary cross-entropy against a binary mask, as a `1×1×1` map.
    pub fn bce(&mut self, pred: Var, mask: &FeatureMap) -> Result<Var> {
        self.check(pred)?;
        let loss = ops::bce(self.value(pred), mask)?;
        Ok(self.push(FeatureMap::filled(1, 1, 1, loss), Op::Bce { pred, mask: mask.clone() }))
    }

    pub fn lsa(&mut self, input: Var, ids: &AttentionParamIds, spec: &NeighborhoodSpec) -> Result<Var> {
        self.check(input)?;
        let params = ids.load(self.store);
        let (out, cache) = attention::lsa_forward_cached(self.value(input), &params, spec)?;
        Ok(self.push(out, Op::Lsa { input, ids: ids.clone(), cache: Box::new(cache) }))
    }

    /// Backward pass from a scalar (`1×1×1`) output seeded with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        let dims = self.value(output).dims();
        if dims.len() != 1 {
            return Err(Error::shape("backward", dims, "scalar 1x1x1 output"));
        }
        self.backward_with(output, FeatureMap::filled(1, 1, 1, 1.0))
    }

    /// Backward pass from any output with an explicit upstream gradient.
    pub fn backward_with(&self, output: Var, upstream: FeatureMap) -> Result<Gradients> {
        self.check(output)?;
        self.value(output).ensure_same_dims(&upstream, "backward_with")?;
        let mut grads: Vec<Option<FeatureMap>> = vec![None; self.nodes.len()];
        let mut params = self.store.grad_buffer();
        grads[output.index] = Some(upstream);

        for index in (0..=output.index).rev() {
            let Some(g) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            match &node.op {
                Op::Input => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    for (o, v) in ga.values_mut().iter_mut().zip(vb.values()) {
                        *o *= v;
                    }
                    let mut gb = g.clone();
                    for (o, v) in gb.values_mut().iter_mut().zip(va.values()) {
                        *o *= v;
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g.map(|v| v * f)),
                Op::Tanh(a) => {
                    let mut d = g.clone();
                    for (o, y) in d.values_mut().iter_mut().zip(node.value.values()) {
                        *o *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, &d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g.clone();
                    for (o, y) in d.values_mut().iter_mut().zip(node.value.values()) {
                        *o *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, &d);
                }
                Op::SoftmaxChannels(a) => {
                    let d = ops::softmax_channels_backward(&node.value, &g);
                    accumulate(&mut grads, *a, &d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let depth = self.value(p).depth();
                        let part = FeatureMap::from_fn(g.height(), g.width(), depth, |r, c, k| g.get(r, c, offset + k));
                        accumulate(&mut grads, p, &part);
                        offset += depth;
                    }
                }
                Op::Conv2d { input, weight, bias, shape } => {
                    let (dx, dw, db) = ops::conv2d_backward(self.value(*input), self.store.values(*weight), shape, &g);
                    accumulate(&mut grads, *input, &dx);
                    params.add(*weight, &dw);
                    if let Some(b) = bias {
                        params.add(*b, &db);
                    }
                }
                Op::Depthwise { input, kernel, side } => {
                    let (dx, dk) =
                        ops::depthwise_shared_backward(self.value(*input), self.store.values(*kernel), *side, &g);
                    accumulate(&mut grads, *input, &dx);
                    params.add(*kernel, &dk);
                }
                Op::Resize { input, rows, cols } => {
                    let x = self.value(*input);
                    let dx = ops::resample_backward((x.height(), x.width(), x.depth()), rows, cols, &g);
                    accumulate(&mut grads, *input, &dx);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    let seed = g.values()[0];
                    accumulate(&mut grads, *a, &FeatureMap::filled(x.height(), x.width(), x.depth(), seed));
                }
                Op::Bce { pred, mask } => {
                    let d = ops::bce_backward(self.value(*pred), mask, g.values()[0]);
                    accumulate(&mut grads, *pred, &d);
                }
                Op::Lsa { input, ids, cache } => {
                    let lg = attention::lsa_backward(cache, &g)?;
                    accumulate(&mut grads, *input, &lg.input);
                    params.add(ids.query, &lg.query);
                    params.add(ids.key, &lg.key);
                    params.add(ids.value, &lg.value);
                    for (id, d) in ids.positional.iter().zip(&lg.positional) {
                        params.add(*id, d);
                    }
                }
            }
            grads[index] = Some(g);
        }
        Ok(Gradients { tape: self.id, nodes: grads, params })
    }
}

fn accumulate(grads: &mut [Option<FeatureMap>], var: Var, delta: &FeatureMap) {
    match &mut grads[var.index] {
        Some(existing) => {
            for (a, b) in existing.values_mut().iter_mut().zip(delta.values()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta.clone()),
    }
}
