//! Minimal neural-net substrate: named parameter sets, HWC feature maps,
//! 2-D convolution with hand-derived backward passes, and momentum SGD.
//!
//! Everything is plain `f32` on the CPU. Layers do not own weights; they
//! reference tensors in a [`ParamSet`] by id, so weight maps can be EMA-fused,
//! hashed, serialized, and optimized uniformly.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shaped `f32` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameter tensors. Insertion order is the
/// canonical order for serialization and elementwise weight-map operations.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same-shape zeroed copy, used for gradient and momentum buffers.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape.clone()))
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn zero_fill(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Verify the two sets describe the same weight map (keys and shapes).
    pub fn same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ShapeMismatch(
                "weight maps have different keys".into(),
            ));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch(format!(
                    "shape {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over names, shapes, and raw bytes.
    /// Bit-exact weight equality comparator for tests and invariants.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in &t.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Single-image feature map, height x width x channels, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl FeatMap {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatMap {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = (y * self.w + x) * self.c;
        &mut self.data[i..i + self.c]
    }
}

/// Convolution descriptor. Weight layout is `[out_c, k, k, in_c]` so the
/// innermost accumulation runs over contiguous memory on both operands.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn register(
        params: &mut ParamSet,
        rng: &mut Rng,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (k * k * in_c) as f64;
        // He init with leaky-relu gain (slope 0.1).
        let std = (2.0 / (fan_in * 1.01)).sqrt();
        let mut w = Tensor::zeros(vec![out_c, k, k, in_c]);
        for v in &mut w.data {
            *v = (rng.normal() * std) as f32;
        }
        let b = Tensor::zeros(vec![out_c]);
        ConvSpec {
            w: params.register(&format!("{prefix}.w"), w),
            b: params.register(&format!("{prefix}.b"), b),
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

pub fn conv_forward(spec: &ConvSpec, params: &ParamSet, input: &FeatMap) -> FeatMap {
    debug_assert_eq!(input.c, spec.in_c);
    let (oh, ow) = spec.out_hw(input.h, input.w);
    let weight = &params.get(spec.w).data;
    let bias = &params.get(spec.b).data;
    let mut out = FeatMap::zeros(oh, ow, spec.out_c);
    let k = spec.k;
    let ksize = k * k * spec.in_c;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = out.at_mut(oy, ox);
            dst.copy_from_slice(&bias[..spec.out_c]);
            for ky in 0..k {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                if iy < 0 || iy >= input.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if ix < 0 || ix >= input.w as isize {
                        continue;
                    }
                    let src = input.at(iy as usize, ix as usize);
                    let wbase = (ky * k + kx) * spec.in_c;
                    for (o, d) in dst.iter_mut().enumerate() {
                        let wrow = &weight[o * ksize + wbase..o * ksize + wbase + spec.in_c];
                        let mut acc = 0.0f32;
                        for (ws, xs) in wrow.iter().zip(src) {
                            acc += ws * xs;
                        }
                        *d += acc;
                    }
                }
            }
        }
    }
    out
}

/// Backward pass. Accumulates weight/bias gradients into `grads` and, when
/// `want_dinput`, returns the gradient w.r.t. the layer input.
pub fn conv_backward(
    spec: &ConvSpec,
    params: &ParamSet,
    input: &FeatMap,
    gout: &FeatMap,
    grads: &mut ParamSet,
    want_dinput: bool,
) -> Option<FeatMap> {
    let k = spec.k;
    let ksize = k * k * spec.in_c;
    let weight = &params.get(spec.w).data;
    let (oh, ow) = (gout.h, gout.w);
    let mut dinput = if want_dinput {
        Some(FeatMap::zeros(input.h, input.w, input.c))
    } else {
        None
    };
    {
        let gb = &mut grads.get_mut(spec.b).data;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout.at(oy, ox);
                for (o, gb_o) in gb.iter_mut().enumerate() {
                    *gb_o += g[o];
                }
            }
        }
    }
    // d weights
    {
        let gw = &mut grads.get_mut(spec.w).data;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout.at(oy, ox);
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        let src = input.at(iy as usize, ix as usize);
                        let wbase = (ky * k + kx) * spec.in_c;
                        for (o, &go) in g.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let grow =
                                &mut gw[o * ksize + wbase..o * ksize + wbase + spec.in_c];
                            for (gv, xv) in grow.iter_mut().zip(src) {
                                *gv += go * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    // d input
    if let Some(di) = dinput.as_mut() {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout.at(oy, ox);
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        let dst = di.at_mut(iy as usize, ix as usize);
                        let wbase = (ky * k + kx) * spec.in_c;
                        for (o, &go) in g.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let wrow = &weight[o * ksize + wbase..o * ksize + wbase + spec.in_c];
                            for (dv, wv) in dst.iter_mut().zip(wrow) {
                                *dv += go * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    dinput
}

pub const LEAKY_SLOPE: f32 = 0.1;

pub fn leaky_relu_inplace(x: &mut FeatMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// LeakyReLU gradient from the activated output; slope 0.1 preserves sign,
/// so the output alone determines which branch each element took.
pub fn leaky_relu_backward(activated: &FeatMap, gout: &mut FeatMap) {
    for (g, &y) in gout.data.iter_mut().zip(&activated.data) {
        if y < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

#[inline]
pub fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax of a small row.
pub fn softmax64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Momentum SGD with cosine learning-rate decay, linear warmup, and global
/// gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub min_lr_frac: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            min_lr_frac: 0.05,
            momentum: 0.9,
            clip_norm: 10.0,
            warmup_steps: 20,
            total_steps: 1000,
        }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let t = (step - self.warmup_steps) as f64
            / (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
        let t = t.clamp(0.0, 1.0);
        let min_lr = self.lr * self.min_lr_frac;
        min_lr + 0.5 * (self.lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One optimizer step over `params` given `grads`; momentum buffers live in
/// `velocity` (same layout). Returns the pre-clip global gradient norm.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    velocity: &mut ParamSet,
    cfg: &SgdConfig,
    lr: f64,
) -> f64 {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &v in &g.data {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        (cfg.clip_norm / norm) as f32
    } else {
        1.0
    };
    for i in 0..params.len() {
        let id = ParamId(i);
        let g = &grads.get(id).data;
        let v = &mut velocity.get_mut(id).data;
        let p = &mut params.get_mut(id).data;
        let mu = cfg.momentum as f32;
        let lr = lr as f32;
        for j in 0..p.len() {
            v[j] = mu * v[j] + g[j] * scale;
            p[j] -= lr * v[j];
        }
    }
    norm
}
