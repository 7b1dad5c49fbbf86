//! Small anchor-free single-stage detector: a 4-stage strided backbone whose
//! last three stages feed per-level heads emitting class logits and discrete
//! box-offset distributions (one distribution per box side).
//!
//! The forward pass exposes both backbone and head feature maps so the
//! alignment stage can pool instance features from either. Backward is
//! hand-derived and accepts gradient injections at four tap points per level:
//! class logits, regression logits, head features, and backbone features.

use rayon::prelude::*;

use crate::core::{BBox, Detection, LabeledBox};
use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::nn::{
    conv_backward, conv_forward, leaky_relu_backward, leaky_relu_inplace, sigmoid64, softmax64,
    ConvSpec, FeatMap, ParamSet, Tensor,
};
use crate::rng::Rng;

pub const NUM_LEVELS: usize = 3;

/// Decoded boxes are clamped to this minimum per-side offset so untrained
/// models cannot emit zero-area candidates.
pub const MIN_SIDE_OFFSET: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Offset bins per side minus one; bins = reg_max + 1.
    pub reg_max: usize,
    pub strides: [usize; NUM_LEVELS],
    pub stem_width: usize,
    pub stage_widths: [usize; 4],
    pub head_width: usize,
    /// (height, width) of model input.
    pub resolution: (usize, usize),
    /// Classification prior probability used to initialize the cls bias;
    /// keeps early background BCE from swamping training.
    pub cls_prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 3,
            reg_max: 8,
            strides: [8, 16, 32],
            stem_width: 16,
            stage_widths: [32, 64, 128, 256],
            head_width: 48,
            resolution: (256, 256),
            cls_prior: 0.05,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let max_stride = *self.strides.iter().max().unwrap();
        if self.resolution.0 % max_stride != 0 || self.resolution.1 % max_stride != 0 {
            return Err(Error::Config(format!(
                "resolution {:?} not divisible by max stride {max_stride}",
                self.resolution
            )));
        }
        if self.reg_max < 1 {
            return Err(Error::Config("reg_max must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.reg_max + 1
    }

    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        (
            self.resolution.0 / self.strides[level],
            self.resolution.1 / self.strides[level],
        )
    }

    pub fn anchors_per_level(&self, level: usize) -> usize {
        let (h, w) = self.level_hw(level);
        h * w
    }

    pub fn total_anchors(&self) -> usize {
        (0..NUM_LEVELS).map(|l| self.anchors_per_level(l)).sum()
    }

    /// Stable hash of everything that determines weight-map layout; stored in
    /// checkpoints so incompatible weights are rejected at load.
    pub fn config_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for &b in &v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        eat(self.num_classes as u64);
        eat(self.reg_max as u64);
        for s in self.strides {
            eat(s as u64);
        }
        eat(self.stem_width as u64);
        for w in self.stage_widths {
            eat(w as u64);
        }
        eat(self.head_width as u64);
        eat(self.resolution.0 as u64);
        eat(self.resolution.1 as u64);
        h
    }
}

/// Fixed geometry of one prediction cell.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    pub level: usize,
    pub iy: usize,
    pub ix: usize,
    pub stride: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Flat anchor table in level-major order; the flat index is the canonical
/// anchor identity used by assignment tie-breaking.
pub fn build_anchors(cfg: &DetectorConfig) -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(cfg.total_anchors());
    for level in 0..NUM_LEVELS {
        let (h, w) = cfg.level_hw(level);
        let stride = cfg.strides[level] as f64;
        for iy in 0..h {
            for ix in 0..w {
                anchors.push(Anchor {
                    level,
                    iy,
                    ix,
                    stride,
                    cx: (ix as f64 + 0.5) * stride,
                    cy: (iy as f64 + 0.5) * stride,
                });
            }
        }
    }
    anchors
}

/// Dense per-level outputs: class logits `[h, w, C]` and per-side bin logits
/// `[h, w, 4*bins]`.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    pub level: usize,
    pub stride: usize,
    pub cls: FeatMap,
    pub reg: FeatMap,
}

/// Backbone and head feature maps exposed for the alignment stage.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// Post-activation backbone stage outputs at strides 8/16/32.
    pub backbone: Vec<FeatMap>,
    /// Post-activation second head block per level.
    pub head: Vec<FeatMap>,
}

/// Every intermediate activation needed to run backward for one image.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: FeatMap,
    stem: FeatMap,
    stages: Vec<FeatMap>,
    head1: Vec<FeatMap>,
    head2: Vec<FeatMap>,
}

/// Full single-image forward result.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub levels: Vec<LevelPrediction>,
    pub features: FeatureBundle,
    pub trace: ForwardTrace,
}

/// Per-level gradient injections for the backward pass. Any entry may be
/// `None` when that tap receives no gradient this step.
#[derive(Debug, Default)]
pub struct GradTaps {
    pub d_cls: Vec<Option<FeatMap>>,
    pub d_reg: Vec<Option<FeatMap>>,
    pub d_head: Vec<Option<FeatMap>>,
    pub d_backbone: Vec<Option<FeatMap>>,
}

impl GradTaps {
    pub fn empty() -> Self {
        GradTaps {
            d_cls: (0..NUM_LEVELS).map(|_| None).collect(),
            d_reg: (0..NUM_LEVELS).map(|_| None).collect(),
            d_head: (0..NUM_LEVELS).map(|_| None).collect(),
            d_backbone: (0..NUM_LEVELS).map(|_| None).collect(),
        }
    }

    fn add(slot: &mut Option<FeatMap>, m: FeatMap) {
        match slot {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&m.data) {
                    *a += b;
                }
            }
            None => *slot = Some(m),
        }
    }

    pub fn add_cls(&mut self, level: usize, m: FeatMap) {
        Self::add(&mut self.d_cls[level], m);
    }
    pub fn add_reg(&mut self, level: usize, m: FeatMap) {
        Self::add(&mut self.d_reg[level], m);
    }
    pub fn add_head(&mut self, level: usize, m: FeatMap) {
        Self::add(&mut self.d_head[level], m);
    }
    pub fn add_backbone(&mut self, level: usize, m: FeatMap) {
        Self::add(&mut self.d_backbone[level], m);
    }

    pub fn is_empty(&self) -> bool {
        self.d_cls.iter().all(Option::is_none)
            && self.d_reg.iter().all(Option::is_none)
            && self.d_head.iter().all(Option::is_none)
            && self.d_backbone.iter().all(Option::is_none)
    }
}

/// Layer descriptors; weights live in a [`ParamSet`] built alongside.
#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    stem: ConvSpec,
    stages: Vec<ConvSpec>,
    head1: Vec<ConvSpec>,
    head2: Vec<ConvSpec>,
    cls_proj: Vec<ConvSpec>,
    reg_proj: Vec<ConvSpec>,
}

impl Detector {
    /// Build layer descriptors and a freshly initialized weight map.
    pub fn build(cfg: &DetectorConfig, seed: u64) -> Result<(Detector, ParamSet)> {
        cfg.validate()?;
        let mut rng = Rng::seed_from(seed).fork(0x6465_7465_6374);
        let mut params = ParamSet::new();
        let stem = ConvSpec::register(
            &mut params,
            &mut rng,
            "backbone.stem",
            3,
            cfg.stem_width,
            3,
            2,
            1,
        );
        let mut stages = Vec::new();
        let mut in_c = cfg.stem_width;
        for (i, &out_c) in cfg.stage_widths.iter().enumerate() {
            stages.push(ConvSpec::register(
                &mut params,
                &mut rng,
                &format!("backbone.stage{}", i + 1),
                in_c,
                out_c,
                3,
                2,
                1,
            ));
            in_c = out_c;
        }
        let mut head1 = Vec::new();
        let mut head2 = Vec::new();
        let mut cls_proj = Vec::new();
        let mut reg_proj = Vec::new();
        for level in 0..NUM_LEVELS {
            let feat_c = cfg.stage_widths[level + 1];
            head1.push(ConvSpec::register(
                &mut params,
                &mut rng,
                &format!("head.l{level}.conv1"),
                feat_c,
                cfg.head_width,
                3,
                1,
                1,
            ));
            head2.push(ConvSpec::register(
                &mut params,
                &mut rng,
                &format!("head.l{level}.conv2"),
                cfg.head_width,
                cfg.head_width,
                3,
                1,
                1,
            ));
            cls_proj.push(ConvSpec::register(
                &mut params,
                &mut rng,
                &format!("head.l{level}.cls"),
                cfg.head_width,
                cfg.num_classes,
                1,
                1,
                0,
            ));
            reg_proj.push(ConvSpec::register(
                &mut params,
                &mut rng,
                &format!("head.l{level}.reg"),
                cfg.head_width,
                4 * cfg.bins(),
                1,
                1,
                0,
            ));
        }
        // Start classification near a low-confidence prior so early training
        // is not swamped by background BCE.
        let p = cfg.cls_prior.clamp(1e-4, 0.5) as f32;
        let prior = -((1.0 - p) / p).ln();
        for level in 0..NUM_LEVELS {
            for v in &mut params.get_mut(cls_proj[level].b).data {
                *v = prior;
            }
        }
        Ok((
            Detector {
                cfg: cfg.clone(),
                stem,
                stages,
                head1,
                head2,
                cls_proj,
                reg_proj,
            },
            params,
        ))
    }

    fn image_to_map(&self, image: &ImageBuf) -> Result<FeatMap> {
        let (h, w) = self.cfg.resolution;
        if image.height != h || image.width != w {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} does not match configured resolution {h}x{w}",
                image.height, image.width
            )));
        }
        Ok(FeatMap {
            h,
            w,
            c: 3,
            data: image.data.clone(),
        })
    }

    /// Deterministic single-image forward pass.
    pub fn forward_single(&self, params: &ParamSet, image: &ImageBuf) -> Result<ImageForward> {
        let input = self.image_to_map(image)?;
        let mut stem = conv_forward(&self.stem, params, &input);
        leaky_relu_inplace(&mut stem);
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut cur = &stem;
        for spec in &self.stages {
            let mut s = conv_forward(spec, params, cur);
            leaky_relu_inplace(&mut s);
            stages.push(s);
            cur = stages.last().unwrap();
        }
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        let mut head1_acts = Vec::with_capacity(NUM_LEVELS);
        let mut head2_acts = Vec::with_capacity(NUM_LEVELS);
        for level in 0..NUM_LEVELS {
            let feat = &stages[level + 1];
            let mut h1 = conv_forward(&self.head1[level], params, feat);
            leaky_relu_inplace(&mut h1);
            let mut h2 = conv_forward(&self.head2[level], params, &h1);
            leaky_relu_inplace(&mut h2);
            let cls = conv_forward(&self.cls_proj[level], params, &h2);
            let reg = conv_forward(&self.reg_proj[level], params, &h2);
            levels.push(LevelPrediction {
                level,
                stride: self.cfg.strides[level],
                cls,
                reg,
            });
            head1_acts.push(h1);
            head2_acts.push(h2);
        }
        let features = FeatureBundle {
            backbone: vec![stages[1].clone(), stages[2].clone(), stages[3].clone()],
            head: head2_acts.clone(),
        };
        Ok(ImageForward {
            levels,
            features,
            trace: ForwardTrace {
                input,
                stem,
                stages,
                head1: head1_acts,
                head2: head2_acts,
            },
        })
    }

    /// Forward a batch in parallel. Output order matches input order.
    pub fn forward_batch(&self, params: &ParamSet, images: &[ImageBuf]) -> Result<Vec<ImageForward>> {
        images
            .par_iter()
            .map(|img| self.forward_single(params, img))
            .collect()
    }

    /// Backward for one image, accumulating parameter gradients into `grads`.
    pub fn backward_single(
        &self,
        params: &ParamSet,
        trace: &ForwardTrace,
        taps: &GradTaps,
        grads: &mut ParamSet,
    ) {
        // Gradients flowing into each backbone stage output (post-activation).
        let mut d_stage: Vec<Option<FeatMap>> = vec![None; self.stages.len()];
        for level in (0..NUM_LEVELS).rev() {
            let h2 = &trace.head2[level];
            let mut d_h2: Option<FeatMap> = taps.d_head[level].clone();
            if let Some(d_cls) = &taps.d_cls[level] {
                let di = conv_backward(&self.cls_proj[level], params, h2, d_cls, grads, true)
                    .expect("dinput requested");
                merge(&mut d_h2, di);
            }
            if let Some(d_reg) = &taps.d_reg[level] {
                let di = conv_backward(&self.reg_proj[level], params, h2, d_reg, grads, true)
                    .expect("dinput requested");
                merge(&mut d_h2, di);
            }
            if let Some(mut d_h2) = d_h2 {
                leaky_relu_backward(h2, &mut d_h2);
                let mut d_h1 = conv_backward(
                    &self.head2[level],
                    params,
                    &trace.head1[level],
                    &d_h2,
                    grads,
                    true,
                )
                .expect("dinput requested");
                leaky_relu_backward(&trace.head1[level], &mut d_h1);
                let d_feat = conv_backward(
                    &self.head1[level],
                    params,
                    &trace.stages[level + 1],
                    &d_h1,
                    grads,
                    true,
                )
                .expect("dinput requested");
                merge(&mut d_stage[level + 1], d_feat);
            }
            if let Some(d_bb) = &taps.d_backbone[level] {
                merge(&mut d_stage[level + 1], d_bb.clone());
            }
        }
        // Walk the backbone chain from the deepest stage to the stem.
        let mut carried: Option<FeatMap> = None;
        for si in (0..self.stages.len()).rev() {
            if let Some(c) = carried.take() {
                merge(&mut d_stage[si], c);
            }
            if let Some(mut d) = d_stage[si].take() {
                leaky_relu_backward(&trace.stages[si], &mut d);
                let below: &FeatMap = if si == 0 {
                    &trace.stem
                } else {
                    &trace.stages[si - 1]
                };
                let di = conv_backward(&self.stages[si], params, below, &d, grads, true)
                    .expect("dinput requested");
                carried = Some(di);
            }
        }
        if let Some(mut d_stem) = carried {
            leaky_relu_backward(&trace.stem, &mut d_stem);
            conv_backward(&self.stem, params, &trace.input, &d_stem, grads, false);
        }
    }
}

fn merge(slot: &mut Option<FeatMap>, m: FeatMap) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&m.data) {
                *a += b;
            }
        }
        None => *slot = Some(m),
    }
}

/// Expected offset of one side distribution, in pixels.
///
/// `side_distribution` must sum to 1 within 1e-6; the result is
/// `stride * sum_k k * p_k`.
pub fn decode_dfl(side_distribution: &[f64], stride: f64) -> Result<f64> {
    let s: f64 = side_distribution.iter().sum();
    if (s - 1.0).abs() > 1e-6 || side_distribution.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::InvalidDistribution(format!(
            "side distribution not normalized (sum {s})"
        )));
    }
    Ok(stride
        * side_distribution
            .iter()
            .enumerate()
            .map(|(k, &p)| k as f64 * p)
            .sum::<f64>())
}

/// All per-anchor quantities the training losses and the assigner need,
/// decoded once from a forward pass at f64 precision.
#[derive(Debug, Clone)]
pub struct DecodedGrid {
    pub num_classes: usize,
    pub bins: usize,
    /// `[anchor * C]` raw class logits.
    pub cls_logits: Vec<f64>,
    /// `[anchor * C]` sigmoid class probabilities.
    pub probs: Vec<f64>,
    /// `[anchor * 4 * bins]` raw regression logits.
    pub reg_logits: Vec<f64>,
    /// `[anchor * 4 * bins]` per-side softmax distributions.
    pub side_dists: Vec<f64>,
    /// `[anchor * 4]` decoded side offsets in pixels (l, t, r, b).
    pub offsets: Vec<f64>,
    /// Decoded candidate boxes (min-extent clamped, not image-clipped).
    pub boxes: Vec<BBox>,
}

impl DecodedGrid {
    pub fn from_forward(cfg: &DetectorConfig, anchors: &[Anchor], fwd: &ImageForward) -> Self {
        let bins = cfg.bins();
        let c = cfg.num_classes;
        let n = anchors.len();
        let mut cls_logits = Vec::with_capacity(n * c);
        let mut reg_logits = Vec::with_capacity(n * 4 * bins);
        for a in anchors {
            let lvl = &fwd.levels[a.level];
            cls_logits.extend(lvl.cls.at(a.iy, a.ix).iter().map(|&v| v as f64));
            reg_logits.extend(lvl.reg.at(a.iy, a.ix).iter().map(|&v| v as f64));
        }
        Self::from_logits(cfg, anchors, cls_logits, reg_logits)
    }

    /// Build from raw f64 logit rows; the differentiable path used by losses.
    pub fn from_logits(
        cfg: &DetectorConfig,
        anchors: &[Anchor],
        cls_logits: Vec<f64>,
        reg_logits: Vec<f64>,
    ) -> Self {
        let bins = cfg.bins();
        let c = cfg.num_classes;
        let n = anchors.len();
        let probs: Vec<f64> = cls_logits.iter().map(|&z| sigmoid64(z)).collect();
        let mut side_dists = vec![0.0; n * 4 * bins];
        let mut offsets = vec![0.0; n * 4];
        let mut boxes = Vec::with_capacity(n);
        for (ai, a) in anchors.iter().enumerate() {
            for side in 0..4 {
                let base = (ai * 4 + side) * bins;
                let sm = softmax64(&reg_logits[base..base + bins]);
                let mut exp = 0.0;
                for (k, &p) in sm.iter().enumerate() {
                    exp += k as f64 * p;
                }
                offsets[ai * 4 + side] = (exp * a.stride).max(MIN_SIDE_OFFSET);
                side_dists[base..base + bins].copy_from_slice(&sm);
            }
            let o = &offsets[ai * 4..ai * 4 + 4];
            boxes.push(
                BBox::new(a.cx - o[0], a.cy - o[1], a.cx + o[2], a.cy + o[3])
                    .expect("min-extent clamp keeps candidates valid"),
            );
        }
        DecodedGrid {
            num_classes: c,
            bins,
            cls_logits,
            probs,
            reg_logits,
            side_dists,
            offsets,
            boxes,
        }
    }

    pub fn prob(&self, anchor: usize, class: usize) -> f64 {
        self.probs[anchor * self.num_classes + class]
    }

    pub fn side_dist(&self, anchor: usize, side: usize) -> &[f64] {
        let base = (anchor * 4 + side) * self.bins;
        &self.side_dists[base..base + self.bins]
    }
}

/// Result of matching ground-truth boxes onto anchors.
///
/// The IoU of each winning pair is recorded at assignment time; losses that
/// use it as a soft classification target treat it as a constant, so the
/// assignment fully determines the loss surface for a fixed prediction.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Matched GT index per anchor, `None` for negatives.
    pub matched_gt: Vec<Option<usize>>,
    /// Alignment score of the winning (anchor, GT) pair.
    pub score: Vec<f64>,
    /// IoU between the candidate box and its matched GT, frozen at
    /// assignment time.
    pub target_iou: Vec<f64>,
    pub num_gts: usize,
}

impl Assignment {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matched_gt
            .iter()
            .enumerate()
            .filter_map(|(a, g)| g.map(|g| (a, g)))
    }

    pub fn num_positives(&self) -> usize {
        self.matched_gt.iter().filter(|g| g.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AssignConfig {
    /// Classification-score exponent of the alignment metric.
    pub kappa1: f64,
    /// IoU exponent of the alignment metric.
    pub kappa2: f64,
    /// Positive anchors kept per ground-truth box.
    pub topk: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            kappa1: 1.0,
            kappa2: 6.0,
            topk: 10,
        }
    }
}

/// Task-aligned assignment: per GT, rank anchors whose centers fall inside
/// the box by `t = prob^kappa1 * iou^kappa2` and keep the top-k. An anchor
/// claimed by several GTs goes to the pair with the higher metric; all ties
/// break toward the lower flat anchor index (and lower GT index).
pub fn assign(
    anchors: &[Anchor],
    grid: &DecodedGrid,
    gts: &[LabeledBox],
    cfg: &AssignConfig,
) -> Assignment {
    let n = anchors.len();
    let mut matched: Vec<Option<usize>> = vec![None; n];
    let mut best_t: Vec<f64> = vec![0.0; n];
    let mut score = vec![0.0; n];
    let mut target_iou = vec![0.0; n];
    for (gi, gt) in gts.iter().enumerate() {
        let mut cands: Vec<(f64, f64, usize)> = Vec::new();
        for (ai, a) in anchors.iter().enumerate() {
            if !gt.bbox.contains_point(a.cx, a.cy) {
                continue;
            }
            let s = grid.prob(ai, gt.category);
            let i = crate::core::iou(&grid.boxes[ai], &gt.bbox);
            let t = s.powf(cfg.kappa1) * i.powf(cfg.kappa2);
            cands.push((t, i, ai));
        }
        // Descending by metric, ascending anchor index on ties.
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)));
        for &(t, i, ai) in cands.iter().take(cfg.topk) {
            // Conflict resolution: strictly higher metric wins; an equal
            // metric keeps the earlier GT.
            if matched[ai].is_none() || t > best_t[ai] {
                matched[ai] = Some(gi);
                best_t[ai] = t;
                score[ai] = t;
                target_iou[ai] = i;
            }
        }
    }
    Assignment {
        matched_gt: matched,
        score,
        target_iou,
        num_gts: gts.len(),
    }
}

/// Greedy per-class non-maximum suppression. The result is independent of
/// input order: candidates are ranked by confidence with full lexicographic
/// tie-breaking on (category, coordinates).
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &detections[i];
        let b = &detections[j];
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.category.cmp(&b.category))
            .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap())
            .then(a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap())
            .then(a.bbox.x2.partial_cmp(&b.bbox.x2).unwrap())
            .then(a.bbox.y2.partial_cmp(&b.bbox.y2).unwrap())
    });
    let mut kept: Vec<usize> = Vec::new();
    'outer: for &i in &order {
        for &k in &kept {
            if detections[k].category == detections[i].category
                && crate::core::iou(&detections[k].bbox, &detections[i].bbox) > iou_threshold
            {
                continue 'outer;
            }
        }
        kept.push(i);
    }
    kept.into_iter().map(|i| detections[i].clone()).collect()
}

/// Harvest dense detections above `conf_floor` from a decoded grid, clipping
/// boxes to the image and attaching the source-anchor side distributions.
pub fn harvest_detections(
    cfg: &DetectorConfig,
    anchors: &[Anchor],
    grid: &DecodedGrid,
    conf_floor: f64,
    with_distributions: bool,
) -> Vec<Detection> {
    let (h, w) = (cfg.resolution.0 as f64, cfg.resolution.1 as f64);
    let mut out = Vec::new();
    for (ai, a) in anchors.iter().enumerate() {
        let mut best_c = 0usize;
        let mut best_p = f64::MIN;
        for c in 0..cfg.num_classes {
            let p = grid.prob(ai, c);
            if p > best_p {
                best_p = p;
                best_c = c;
            }
        }
        if best_p < conf_floor {
            continue;
        }
        let Some(bbox) = grid.boxes[ai].clip(w, h) else {
            continue;
        };
        let mut det = Detection::new(bbox, best_c, best_p).expect("probability in range");
        if with_distributions {
            let base = ai * 4 * grid.bins;
            det.box_distribution = Some(
                crate::core::BoxDistribution::new(
                    a.level,
                    grid.bins,
                    grid.side_dists[base..base + 4 * grid.bins].to_vec(),
                )
                .expect("softmax rows are stochastic"),
            );
        }
        out.push(det);
    }
    out
}

impl Detector {
    /// Inference path: forward, decode, confidence floor, per-class NMS.
    /// Runs images in parallel; output order matches input order.
    pub fn infer(
        &self,
        params: &ParamSet,
        anchors: &[Anchor],
        images: &[ImageBuf],
        conf_floor: f64,
        nms_iou: f64,
        with_distributions: bool,
    ) -> Result<Vec<Vec<Detection>>> {
        images
            .par_iter()
            .map(|img| {
                let fwd = self.forward_single(params, img)?;
                let grid = DecodedGrid::from_forward(&self.cfg, anchors, &fwd);
                let dets =
                    harvest_detections(&self.cfg, anchors, &grid, conf_floor, with_distributions);
                Ok(nms(&dets, nms_iou))
            })
            .collect()
    }
}

/// Zero-filled gradient tap maps sized for this config, one per level.
pub fn zero_tap(cfg: &DetectorConfig, level: usize, channels: usize) -> FeatMap {
    let (h, w) = cfg.level_hw(level);
    FeatMap::zeros(h, w, channels)
}

/// Count parameters with at least one nonzero gradient entry.
pub fn nonzero_grad_tensors(grads: &ParamSet) -> usize {
    grads
        .iter()
        .filter(|(_, t)| t.data.iter().any(|&v| v != 0.0))
        .count()
}

/// Convenience: random logit-tap gradients for gradient-flow tests.
pub fn random_taps(cfg: &DetectorConfig, rng: &mut Rng) -> GradTaps {
    let mut taps = GradTaps::empty();
    for level in 0..NUM_LEVELS {
        let mut c = zero_tap(cfg, level, cfg.num_classes);
        for v in &mut c.data {
            *v = rng.range(-1.0, 1.0) as f32;
        }
        let mut r = zero_tap(cfg, level, 4 * cfg.bins());
        for v in &mut r.data {
            *v = rng.range(-1.0, 1.0) as f32;
        }
        taps.add_cls(level, c);
        taps.add_reg(level, r);
    }
    taps
}

#[allow(dead_code)]
fn unused_tensor_guard(_t: &Tensor) {}
