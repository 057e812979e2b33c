//! Desk-scale client model.
//!
//! Architecture: input `x` passes through a frozen random-feature layer
//! `W0` (d -> h) and tanh, then a frozen square layer `Wv` (h -> h) carrying
//! a trainable low-rank adapter `B A`, tanh again, and a trainable linear
//! head (h -> L) with softmax cross-entropy loss.
//!
//! Trainable parameters live in one flat [`ParamVector`]. `B` is stored
//! column-major and `A` row-major so the rank-1 adapter slice used during
//! initialization (`B` column 0, `A` row 0) is a pair of contiguous
//! segments, `lora_b0` / `lora_a0`. With rank `r > 1` the remaining columns
//! and rows sit in `lora_b_hi` / `lora_a_hi`. `B` starts at zero and `A`
//! Gaussian, so the fresh adapter leaves the forward pass untouched.

use crate::error::{Error, Result};
use crate::numeric::{Layout, ParamVector, RngStream, StreamId, StreamKind};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input feature dimension `d`.
    pub feature_dim: usize,
    /// Hidden width `h`.
    pub hidden_dim: usize,
    /// Adapter rank `r`.
    pub adapter_rank: usize,
    /// Number of classes `L`.
    pub num_classes: usize,
}

pub const SEG_LORA_B0: &str = "lora_b0";
pub const SEG_LORA_B_HI: &str = "lora_b_hi";
pub const SEG_LORA_A0: &str = "lora_a0";
pub const SEG_LORA_A_HI: &str = "lora_a_hi";
pub const SEG_HEAD_W: &str = "head_w";
pub const SEG_HEAD_B: &str = "head_b";

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.hidden_dim == 0
            || self.adapter_rank == 0
            || self.num_classes < 2
        {
            return Err(Error::InvalidParameter(
                "model dimensions must be positive (and at least two classes)".into(),
            ));
        }
        Ok(())
    }

    /// Layout of the trainable parameter vector.
    pub fn layout(&self) -> Arc<Layout> {
        let (h, r, l) = (self.hidden_dim, self.adapter_rank, self.num_classes);
        let mut parts = vec![(SEG_LORA_B0, h)];
        if r > 1 {
            parts.push((SEG_LORA_B_HI, h * (r - 1)));
        }
        parts.push((SEG_LORA_A0, h));
        if r > 1 {
            parts.push((SEG_LORA_A_HI, (r - 1) * h));
        }
        parts.push((SEG_HEAD_W, l * h));
        parts.push((SEG_HEAD_B, l));
        Layout::new(parts)
    }

    /// Segments trained during the initialization stage: the rank-1 adapter
    /// slice on the frozen square layer.
    pub fn stage1_mask(&self) -> Vec<&'static str> {
        vec![SEG_LORA_B0, SEG_LORA_A0]
    }

    /// Segments trained during the main stage: full adapter plus head.
    pub fn stage2_mask(&self) -> Vec<&'static str> {
        if self.adapter_rank > 1 {
            vec![
                SEG_LORA_B0,
                SEG_LORA_B_HI,
                SEG_LORA_A0,
                SEG_LORA_A_HI,
                SEG_HEAD_W,
                SEG_HEAD_B,
            ]
        } else {
            vec![SEG_LORA_B0, SEG_LORA_A0, SEG_HEAD_W, SEG_HEAD_B]
        }
    }

    /// Dimension of the initialization-stage trainable subvector (2h).
    pub fn stage1_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    fn adapter_len(&self) -> usize {
        self.hidden_dim * self.adapter_rank
    }
}

/// Frozen layers, bit-identical across all clients and the server for a
/// given seed.
#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    pub spec: ModelSpec,
    /// d -> h random features, row-major.
    w0: Vec<f64>,
    /// h -> h frozen square layer carrying the adapter, row-major.
    wv: Vec<f64>,
    layout: Arc<Layout>,
}

impl FrozenBackbone {
    pub fn generate(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut stream = RngStream::derive(seed, StreamId::new(StreamKind::Backbone, 0, 0));
        let (d, h) = (spec.feature_dim, spec.hidden_dim);
        let w0 = stream.gaussian_vec(h * d, 1.0 / (d as f64).sqrt());
        let wv = stream.gaussian_vec(h * h, 1.0 / (h as f64).sqrt());
        let layout = spec.layout();
        Ok(Self {
            spec,
            w0,
            wv,
            layout,
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Fresh trainable parameters: zero `B`, Gaussian `A` and head weights,
    /// zero head bias.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut stream = RngStream::derive(seed, StreamId::new(StreamKind::BaseModel, 0, 0));
        let spec = &self.spec;
        let (h, r, l) = (spec.hidden_dim, spec.adapter_rank, spec.num_classes);
        let scale = 1.0 / (h as f64).sqrt();
        let mut values = vec![0.0; self.layout.len()];
        let a_off = spec.adapter_len();
        for v in values[a_off..a_off + r * h].iter_mut() {
            *v = scale * stream.next_gaussian();
        }
        let head_off = 2 * spec.adapter_len();
        for v in values[head_off..head_off + l * h].iter_mut() {
            *v = scale * stream.next_gaussian();
        }
        ParamVector::new(self.layout.clone(), values).expect("layout length matches")
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.len(),
                got: params.len(),
            });
        }
        Ok(())
    }

    /// `Wv + B A`, row-major.
    fn effective_square(&self, params: &ParamVector) -> Vec<f64> {
        let spec = &self.spec;
        let (h, r) = (spec.hidden_dim, spec.adapter_rank);
        let vals = params.values();
        let b = &vals[0..h * r]; // column-major: b[j*h + i]
        let a = &vals[h * r..2 * h * r]; // row-major: a[j*h + i]
        let mut m = self.wv.clone();
        for j in 0..r {
            let bj = &b[j * h..(j + 1) * h];
            let aj = &a[j * h..(j + 1) * h];
            for i in 0..h {
                if bj[i] == 0.0 {
                    continue;
                }
                let row = &mut m[i * h..(i + 1) * h];
                for (mv, av) in row.iter_mut().zip(aj) {
                    *mv += bj[i] * av;
                }
            }
        }
        m
    }
}

/// Samples held by one client plus simulation metadata.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    /// `(features, label)` pairs.
    pub samples: Vec<(Vec<f64>, usize)>,
    /// Ground-truth cluster id; never visible to the protocol.
    pub truth_cluster: usize,
}

impl ClientDataset {
    pub fn new(samples: Vec<(Vec<f64>, usize)>, truth_cluster: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            samples,
            truth_cluster,
        })
    }
}

/// Local SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrainConfig {
    // learning_rate = 0 is accepted as a degenerate no-op step.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter(
                "epochs and batch size must be >= 1 and learning rate non-negative".into(),
            ));
        }
        Ok(())
    }
}

struct Forward {
    u: Vec<f64>,
    v: Vec<f64>,
    logits: Vec<f64>,
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &m[i * cols..(i + 1) * cols];
        out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn forward_pass(backbone: &FrozenBackbone, m_eff: &[f64], params: &ParamVector, x: &[f64]) -> Forward {
    let spec = &backbone.spec;
    let (d, h, l) = (spec.feature_dim, spec.hidden_dim, spec.num_classes);
    let vals = params.values();
    let head_off = 2 * spec.adapter_len();
    let head_w = &vals[head_off..head_off + l * h];
    let head_b = &vals[head_off + l * h..];

    let mut u = vec![0.0; h];
    matvec(&backbone.w0, h, d, x, &mut u);
    for v in u.iter_mut() {
        *v = v.tanh();
    }
    let mut v = vec![0.0; h];
    matvec(m_eff, h, h, &u, &mut v);
    for w in v.iter_mut() {
        *w = w.tanh();
    }
    let mut logits = vec![0.0; l];
    matvec(head_w, l, h, &v, &mut logits);
    for (s, b) in logits.iter_mut().zip(head_b) {
        *s += b;
    }
    Forward { u, v, logits }
}

/// Numerically stable softmax cross-entropy.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Cross-entropy loss of the softmax classifier on one sample.
pub fn forward_loss(
    backbone: &FrozenBackbone,
    params: &ParamVector,
    x: &[f64],
    label: usize,
) -> Result<f64> {
    backbone.check_params(params)?;
    if x.len() != backbone.spec.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: backbone.spec.feature_dim,
            got: x.len(),
        });
    }
    if label >= backbone.spec.num_classes {
        return Err(Error::InvalidParameter(format!("label {label} out of range")));
    }
    let m_eff = backbone.effective_square(params);
    let fwd = forward_pass(backbone, &m_eff, params, x);
    Ok(cross_entropy(&fwd.logits, label))
}

/// Mean loss over a client's samples.
pub fn empirical_loss(
    backbone: &FrozenBackbone,
    params: &ParamVector,
    data: &ClientDataset,
) -> Result<f64> {
    backbone.check_params(params)?;
    if data.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m_eff = backbone.effective_square(params);
    let mut total = 0.0;
    for (x, y) in &data.samples {
        let fwd = forward_pass(backbone, &m_eff, params, x);
        total += cross_entropy(&fwd.logits, *y);
    }
    Ok(total / data.samples.len() as f64)
}

/// Predicted class (argmax logit, lowest index on ties).
pub fn predict(backbone: &FrozenBackbone, params: &ParamVector, x: &[f64]) -> usize {
    let m_eff = backbone.effective_square(params);
    let fwd = forward_pass(backbone, &m_eff, params, x);
    let mut best = 0;
    for (i, s) in fwd.logits.iter().enumerate() {
        if *s > fwd.logits[best] {
            best = i;
        }
    }
    best
}

/// Classification accuracy over a list of samples.
pub fn accuracy(backbone: &FrozenBackbone, params: &ParamVector, samples: &[(Vec<f64>, usize)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let m_eff = backbone.effective_square(params);
    let hits = samples
        .iter()
        .filter(|(x, y)| {
            let fwd = forward_pass(backbone, &m_eff, params, x);
            let mut best = 0;
            for (i, s) in fwd.logits.iter().enumerate() {
                if *s > fwd.logits[best] {
                    best = i;
                }
            }
            best == *y
        })
        .count();
    hits as f64 / samples.len() as f64
}

/// Average gradient of the cross-entropy loss over the given sample indices,
/// for the full trainable vector.
fn batch_gradient(
    backbone: &FrozenBackbone,
    params: &ParamVector,
    data: &ClientDataset,
    batch: &[usize],
) -> Vec<f64> {
    let spec = &backbone.spec;
    let (h, r, l) = (spec.hidden_dim, spec.adapter_rank, spec.num_classes);
    let vals = params.values();
    let b = &vals[0..h * r];
    let a = &vals[h * r..2 * h * r];
    let head_off = 2 * spec.adapter_len();
    let head_w = &vals[head_off..head_off + l * h];
    let m_eff = backbone.effective_square(params);

    let mut grad = vec![0.0; params.len()];
    let scale = 1.0 / batch.len() as f64;
    for &idx in batch {
        let (x, y) = &data.samples[idx];
        let fwd = forward_pass(backbone, &m_eff, params, x);
        // softmax - one_hot
        let max = fwd.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut ds: Vec<f64> = fwd.logits.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = ds.iter().sum();
        for d in ds.iter_mut() {
            *d /= denom;
        }
        ds[*y] -= 1.0;

        // head gradients
        for li in 0..l {
            let g = ds[li] * scale;
            let row = &mut grad[head_off + li * h..head_off + (li + 1) * h];
            for (gv, vv) in row.iter_mut().zip(&fwd.v) {
                *gv += g * vv;
            }
            grad[head_off + l * h + li] += g;
        }
        // backprop into the square layer: dv0 = (Hᵀ ds) ⊙ (1 - v²)
        let mut dv0 = vec![0.0; h];
        for (li, dsl) in ds.iter().enumerate() {
            let row = &head_w[li * h..(li + 1) * h];
            for (j, hw) in row.iter().enumerate() {
                dv0[j] += hw * dsl;
            }
        }
        for (j, g) in dv0.iter_mut().enumerate() {
            *g *= 1.0 - fwd.v[j] * fwd.v[j];
        }
        // adapter: dB = dv0 (A u)ᵀ, dA = (Bᵀ dv0) uᵀ
        for j in 0..r {
            let aj = &a[j * h..(j + 1) * h];
            let au: f64 = aj.iter().zip(&fwd.u).map(|(av, uv)| av * uv).sum();
            let bj = &b[j * h..(j + 1) * h];
            let btdv0: f64 = bj.iter().zip(&dv0).map(|(bv, gv)| bv * gv).sum();
            let gb = &mut grad[j * h..(j + 1) * h];
            for (g, d0) in gb.iter_mut().zip(&dv0) {
                *g += scale * au * d0;
            }
            let ga = &mut grad[h * r + j * h..h * r + (j + 1) * h];
            for (g, uv) in ga.iter_mut().zip(&fwd.u) {
                *g += scale * btdv0 * uv;
            }
        }
    }
    grad
}

/// Local mini-batch SGD on the masked segments; coordinates outside the
/// mask are returned bit-identical. Batch order is drawn from `stream`.
pub fn local_train(
    backbone: &FrozenBackbone,
    params: &ParamVector,
    mask: &[&str],
    data: &ClientDataset,
    cfg: &TrainConfig,
    stream: &mut RngStream,
) -> Result<ParamVector> {
    backbone.check_params(params)?;
    cfg.validate()?;
    if mask.is_empty() {
        return Err(Error::InvalidParameter("empty trainable mask".into()));
    }
    let segments: Vec<_> = backbone
        .layout
        .segments()
        .iter()
        .filter(|s| mask.contains(&s.name.as_str()))
        .cloned()
        .collect();
    if segments.is_empty() {
        return Err(Error::InvalidParameter("mask selects no segments".into()));
    }
    let mut current = params.clone();
    let n = data.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        stream.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let grad = batch_gradient(backbone, &current, data, batch);
            let values = current.values_mut();
            for seg in &segments {
                for i in seg.offset..seg.offset + seg.len {
                    values[i] -= cfg.learning_rate * grad[i];
                }
            }
        }
    }
    Ok(current)
}

/// `after - before`, the model difference shared with the server.
pub fn model_delta(before: &ParamVector, after: &ParamVector) -> Result<ParamVector> {
    after.sub(before)
}
