//! Multi-stage instance alignment: ROI feature pooling from backbone and
//! head maps, per-(domain, stage, level) circular queues, a sigmoid pairwise
//! contrastive loss with learnable log-temperature, and gradient-reversed
//! domain-adversarial alignment.

use std::collections::VecDeque;

use crate::core::{Detection, DomainTag};
use crate::detector::{DetectorConfig, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::nn::{
    conv_backward, conv_forward, leaky_relu_backward, leaky_relu_inplace, sigmoid64, ConvSpec,
    FeatMap, ParamId, ParamSet, Tensor,
};
use crate::rng::Rng;

/// Which feature map family an instance was pooled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Backbone,
    Head,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Head => "head",
        }
    }
}

/// Unit-norm pooled feature plus the tuple describing its detection box.
#[derive(Debug, Clone)]
pub struct InstanceFeature {
    pub feature: Vec<f64>,
    pub confidence: f64,
    pub category: usize,
    pub domain: DomainTag,
    pub stage: Stage,
    pub level: usize,
}

impl InstanceFeature {
    pub fn validate(&self) -> Result<()> {
        let n: f64 = self.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!(
                "instance feature norm {n}, expected 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidDistribution(format!(
                "instance confidence {} outside [0,1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Identifies one queue: (domain, stage, level) never mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QueueKey {
    pub domain: DomainTag,
    pub stage: Stage,
    pub level: usize,
}

/// Fixed-capacity FIFO of detached instance features.
#[derive(Debug, Clone)]
pub struct DomainQueue {
    pub key: QueueKey,
    capacity: usize,
    buf: VecDeque<InstanceFeature>,
}

impl DomainQueue {
    pub fn new(key: QueueKey, capacity: usize) -> Self {
        DomainQueue {
            key,
            capacity,
            buf: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest-to-newest iteration order.
    pub fn entries(&self) -> impl Iterator<Item = &InstanceFeature> {
        self.buf.iter()
    }

    /// Append one instance, evicting the oldest entry at capacity. Rejects
    /// instances whose (domain, stage, level) do not match this queue.
    pub fn push(&mut self, inst: InstanceFeature) -> Result<()> {
        if inst.domain != self.key.domain
            || inst.stage != self.key.stage
            || inst.level != self.key.level
        {
            return Err(Error::DomainContract(format!(
                "instance ({:?},{:?},{}) pushed into queue ({:?},{:?},{})",
                inst.domain, inst.stage, inst.level, self.key.domain, self.key.stage, self.key.level
            )));
        }
        inst.validate()?;
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(inst);
        Ok(())
    }
}

/// The full bank of queues: {backbone, head} x {source, target} x levels.
#[derive(Debug, Clone)]
pub struct QueueSet {
    queues: Vec<DomainQueue>,
}

impl QueueSet {
    pub fn new(capacity: usize) -> Self {
        let mut queues = Vec::new();
        for stage in [Stage::Backbone, Stage::Head] {
            for domain in [DomainTag::Source, DomainTag::Target] {
                for level in 0..NUM_LEVELS {
                    queues.push(DomainQueue::new(
                        QueueKey {
                            domain,
                            stage,
                            level,
                        },
                        capacity,
                    ));
                }
            }
        }
        QueueSet { queues }
    }

    fn index(key: QueueKey) -> usize {
        let s = match key.stage {
            Stage::Backbone => 0,
            Stage::Head => 1,
        };
        let d = match key.domain {
            DomainTag::Source => 0,
            DomainTag::Target => 1,
        };
        (s * 2 + d) * NUM_LEVELS + key.level
    }

    pub fn get(&self, key: QueueKey) -> &DomainQueue {
        &self.queues[Self::index(key)]
    }

    pub fn get_mut(&mut self, key: QueueKey) -> &mut DomainQueue {
        &mut self.queues[Self::index(key)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DomainQueue> {
        self.queues.iter()
    }

    /// Route instances into their home queues. Runs after the step's loss has
    /// been computed; stored features are plain values with no gradient path.
    pub fn update(&mut self, instances: Vec<InstanceFeature>) -> Result<()> {
        for inst in instances {
            let key = QueueKey {
                domain: inst.domain,
                stage: inst.stage,
                level: inst.level,
            };
            self.get_mut(key).push(inst)?;
        }
        Ok(())
    }
}

/// Contrastive-alignment configuration.
#[derive(Debug, Clone, Copy)]
pub struct CAConfig {
    /// Queue-side confidence-weight exponent.
    pub alpha: f64,
    /// Batch-side confidence-weight exponent.
    pub beta: f64,
    /// Initial temperature base T; tau = ln T.
    pub temp_init: f64,
    /// Lower bound for T, keeping tau strictly positive.
    pub temp_min: f64,
    pub queue_capacity: usize,
    /// Confidence floor for harvesting instances from predictions.
    pub harvest_floor: f64,
}

impl Default for CAConfig {
    fn default() -> Self {
        CAConfig {
            alpha: 1.0,
            beta: 1.0,
            temp_init: std::f64::consts::E,
            temp_min: 1.0 + 1e-3,
            queue_capacity: 1024,
            harvest_floor: 0.1,
        }
    }
}

impl CAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temp_init <= 1.0 || self.temp_min <= 1.0 {
            return Err(Error::Config(
                "temperature base must stay above 1 so tau = ln T > 0".into(),
            ));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Records where pooled values came from so gradients can be pushed back
/// into the feature map.
#[derive(Debug, Clone)]
pub struct PoolTrace {
    /// (flat cell index, weight) taps; weights sum to 1.
    pub taps: Vec<(usize, f64)>,
    /// Pooled vector before L2 normalization.
    pub prenorm: Vec<f64>,
    pub norm: f64,
}

fn bilinear_taps(u: f64, v: f64, w: usize, h: usize, weight: f64, taps: &mut Vec<(usize, f64)>) {
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    let u1 = (u0 + 1).min(w - 1);
    let v1 = (v0 + 1).min(h - 1);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    taps.push((v0 * w + u0, weight * (1.0 - fu) * (1.0 - fv)));
    taps.push((v0 * w + u1, weight * fu * (1.0 - fv)));
    taps.push((v1 * w + u0, weight * (1.0 - fu) * fv));
    taps.push((v1 * w + u1, weight * fu * fv));
}

/// Pool one box from a feature map: scale to map coordinates, sample a 3x3
/// grid bilinearly, average, L2-normalize. Boxes thinner than one cell take
/// the single nearest cell. Returns `None` when the pooled vector cannot be
/// normalized (all-zero region).
pub fn pool_box(map: &FeatMap, bbox: &crate::core::BBox, stride: f64) -> Option<(Vec<f64>, PoolTrace)> {
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(36);
    if bbox.width() < stride || bbox.height() < stride {
        let (cx, cy) = bbox.center();
        let u = (cx / stride - 0.5).round().clamp(0.0, (map.w - 1) as f64) as usize;
        let v = (cy / stride - 0.5).round().clamp(0.0, (map.h - 1) as f64) as usize;
        taps.push((v * map.w + u, 1.0));
    } else {
        let bw = bbox.width() / 3.0;
        let bh = bbox.height() / 3.0;
        for i in 0..3 {
            for j in 0..3 {
                let sx = bbox.x1 + (j as f64 + 0.5) * bw;
                let sy = bbox.y1 + (i as f64 + 0.5) * bh;
                bilinear_taps(
                    sx / stride - 0.5,
                    sy / stride - 0.5,
                    map.w,
                    map.h,
                    1.0 / 9.0,
                    &mut taps,
                );
            }
        }
    }
    let c = map.c;
    let mut prenorm = vec![0.0f64; c];
    for &(cell, w) in &taps {
        let base = cell * c;
        for (k, p) in prenorm.iter_mut().enumerate() {
            *p += w * map.data[base + k] as f64;
        }
    }
    let norm: f64 = prenorm.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return None;
    }
    let feature: Vec<f64> = prenorm.iter().map(|v| v / norm).collect();
    Some((
        feature,
        PoolTrace {
            taps,
            prenorm,
            norm,
        },
    ))
}

/// Push a gradient on the normalized feature back through the L2 norm and
/// the pooling taps into the feature-map gradient buffer.
pub fn pool_backward(trace: &PoolTrace, d_feature: &[f64], d_map: &mut FeatMap) {
    let c = d_map.c;
    let norm = trace.norm;
    // d prenorm = (I - f f^T) / norm * d_feature, with f = prenorm / norm.
    let f: Vec<f64> = trace.prenorm.iter().map(|v| v / norm).collect();
    let fdot: f64 = f.iter().zip(d_feature).map(|(a, b)| a * b).sum();
    let d_pre: Vec<f64> = d_feature
        .iter()
        .zip(&f)
        .map(|(g, fi)| (g - fi * fdot) / norm)
        .collect();
    for &(cell, w) in &trace.taps {
        let base = cell * c;
        for k in 0..c {
            d_map.data[base + k] += (w * d_pre[k]) as f32;
        }
    }
}

/// Harvest instance features for a list of detections from one feature map.
pub fn extract_instances(
    map: &FeatMap,
    boxes: &[Detection],
    stride: f64,
    stage: Stage,
    domain: DomainTag,
    level: usize,
    harvest_floor: f64,
) -> Vec<InstanceFeature> {
    extract_instances_traced(map, boxes, stride, stage, domain, level, harvest_floor)
        .into_iter()
        .map(|(inst, _)| inst)
        .collect()
}

/// Like [`extract_instances`] but keeps the pooling trace for backprop.
pub fn extract_instances_traced(
    map: &FeatMap,
    boxes: &[Detection],
    stride: f64,
    stage: Stage,
    domain: DomainTag,
    level: usize,
    harvest_floor: f64,
) -> Vec<(InstanceFeature, PoolTrace)> {
    let mut out = Vec::new();
    for det in boxes {
        if det.confidence < harvest_floor {
            continue;
        }
        if let Some((feature, trace)) = pool_box(map, &det.bbox, stride) {
            out.push((
                InstanceFeature {
                    feature,
                    confidence: det.confidence,
                    category: det.category,
                    domain,
                    stage,
                    level,
                },
                trace,
            ));
        }
    }
    out
}

/// Sigmoid pairwise contrastive loss of a batch of instances against one
/// queue. Each (queue, batch) pair contributes
/// `-(1/K') * w_ij * log sigmoid(<x_i, y_j> * mask_ij * tau)` with
/// `w_ij = 1 - p_i^(alpha/2) * q_j^(beta/2)` and mask +1 for equal
/// categories, -1 otherwise. Returns the loss, per-batch-feature gradients,
/// and the gradient w.r.t. tau. Queue features receive no gradient.
pub fn ca_loss(
    batch: &[InstanceFeature],
    queue: &DomainQueue,
    cfg: &CAConfig,
    tau: f64,
) -> (f64, Vec<Vec<f64>>, f64) {
    let mut d_batch: Vec<Vec<f64>> = batch
        .iter()
        .map(|b| vec![0.0; b.feature.len()])
        .collect();
    if queue.is_empty() || batch.is_empty() {
        return (0.0, d_batch, 0.0);
    }
    let inv_k = 1.0 / queue.len() as f64;
    let mut loss = 0.0;
    let mut d_tau = 0.0;
    for qi in queue.entries() {
        let p_w = qi.confidence.powf(cfg.alpha / 2.0);
        for (j, bj) in batch.iter().enumerate() {
            let q_w = bj.confidence.powf(cfg.beta / 2.0);
            let w = 1.0 - p_w * q_w;
            if w == 0.0 {
                continue;
            }
            let dot: f64 = qi
                .feature
                .iter()
                .zip(&bj.feature)
                .map(|(a, b)| a * b)
                .sum();
            let mask = if qi.category == bj.category { 1.0 } else { -1.0 };
            let z = dot * mask * tau;
            // -ln sigmoid(z) = softplus(-z), computed stably.
            loss += inv_k * w * softplus(-z);
            let dz = -inv_k * w * (1.0 - sigmoid64(z));
            for (g, xi) in d_batch[j].iter_mut().zip(&qi.feature) {
                *g += dz * mask * tau * xi;
            }
            d_tau += dz * mask * dot;
        }
    }
    (loss, d_batch, d_tau)
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (1.0 + (-x).exp()).ln()
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Gradient reversal: identity forward.
pub fn grl_forward(x: &[f64]) -> Vec<f64> {
    x.to_vec()
}

/// Gradient reversal: backward negates and scales the upstream gradient.
pub fn grl_backward(upstream: &[f64], lambda: f64) -> Vec<f64> {
    upstream.iter().map(|g| -lambda * g).collect()
}

/// Per-level domain discriminators plus the learnable contrastive
/// temperature; both live in the auxiliary weight map, optimized together
/// with the student but excluded from EMA.
#[derive(Debug, Clone)]
pub struct AlignModel {
    disc1: Vec<ConvSpec>,
    disc2: Vec<ConvSpec>,
    pub temperature: ParamId,
    hidden: usize,
}

/// Intermediate activations of one discriminator forward.
#[derive(Debug, Clone)]
pub struct DiscTrace {
    h1: FeatMap,
    pub logit: f64,
}

impl AlignModel {
    pub fn build(cfg: &DetectorConfig, ca: &CAConfig, seed: u64) -> (AlignModel, ParamSet) {
        let hidden = 32;
        let mut rng = Rng::seed_from(seed).fork(0x616c_6967_6e);
        let mut aux = ParamSet::new();
        let mut disc1 = Vec::new();
        let mut disc2 = Vec::new();
        for level in 0..NUM_LEVELS {
            let in_c = cfg.stage_widths[level + 1];
            disc1.push(ConvSpec::register(
                &mut aux,
                &mut rng,
                &format!("disc.l{level}.conv1"),
                in_c,
                hidden,
                1,
                1,
                0,
            ));
            disc2.push(ConvSpec::register(
                &mut aux,
                &mut rng,
                &format!("disc.l{level}.conv2"),
                hidden,
                1,
                1,
                1,
                0,
            ));
        }
        let temperature = aux.register(
            "ca.temperature",
            Tensor {
                shape: vec![1],
                data: vec![ca.temp_init as f32],
            },
        );
        (
            AlignModel {
                disc1,
                disc2,
                temperature,
                hidden,
            },
            aux,
        )
    }

    pub fn tau(&self, aux: &ParamSet) -> f64 {
        (aux.get(self.temperature).data[0] as f64).ln()
    }

    /// Project the temperature back above its floor after an optimizer step.
    pub fn clamp_temperature(&self, aux: &mut ParamSet, ca: &CAConfig) {
        let t = &mut aux.get_mut(self.temperature).data[0];
        if (*t as f64) < ca.temp_min {
            *t = ca.temp_min as f32;
        }
    }

    /// Accumulate the tau gradient into the temperature parameter's slot:
    /// d loss / d T = d loss / d tau * 1 / T.
    pub fn add_tau_grad(&self, aux: &ParamSet, grads: &mut ParamSet, d_tau: f64) {
        let t = aux.get(self.temperature).data[0] as f64;
        grads.get_mut(self.temperature).data[0] += (d_tau / t) as f32;
    }

    /// Discriminator forward on one level's backbone features. Returns the
    /// domain BCE (labels: source = 1, target = 0) and the trace.
    pub fn disc_forward(
        &self,
        aux: &ParamSet,
        level: usize,
        feat: &FeatMap,
        domain: DomainTag,
    ) -> (f64, DiscTrace) {
        let mut h1 = conv_forward(&self.disc1[level], aux, feat);
        leaky_relu_inplace(&mut h1);
        let out = conv_forward(&self.disc2[level], aux, &h1);
        let logit =
            out.data.iter().map(|&v| v as f64).sum::<f64>() / out.data.len() as f64;
        let label = match domain {
            DomainTag::Source => 1.0,
            DomainTag::Target => 0.0,
        };
        let bce = crate::sup_losses::bce_with_logit(logit, label);
        (
            bce,
            DiscTrace {
                h1,
                logit,
            },
        )
    }

    /// Backward of the domain BCE. Discriminator parameters receive the true
    /// gradient scaled by `scale`; the returned map is the feature gradient
    /// already passed through the reversal layer (times `-lambda_grl`).
    pub fn disc_backward(
        &self,
        aux: &ParamSet,
        level: usize,
        feat: &FeatMap,
        trace: &DiscTrace,
        domain: DomainTag,
        lambda_grl: f64,
        scale: f64,
        grads: &mut ParamSet,
    ) -> FeatMap {
        let label = match domain {
            DomainTag::Source => 1.0,
            DomainTag::Target => 0.0,
        };
        let (oh, ow) = (trace.h1.h, trace.h1.w);
        let d_logit = (sigmoid64(trace.logit) - label) * scale;
        let per_cell = (d_logit / (oh * ow) as f64) as f32;
        let mut d_out = FeatMap::zeros(oh, ow, 1);
        d_out.data.iter_mut().for_each(|v| *v = per_cell);
        let mut d_h1 = conv_backward(&self.disc2[level], aux, &trace.h1, &d_out, grads, true)
            .expect("dinput requested");
        leaky_relu_backward(&trace.h1, &mut d_h1);
        let d_feat = conv_backward(&self.disc1[level], aux, feat, &d_h1, grads, true)
            .expect("dinput requested");
        // Gradient reversal toward the encoder.
        let mut reversed = d_feat;
        for v in &mut reversed.data {
            *v = -(lambda_grl as f32) * *v;
        }
        reversed
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }
}
