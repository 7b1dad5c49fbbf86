//! Confidence-tiered pseudo-label handling: grading teacher detections into
//! positive / uncertain / negative tiers and the tier-specific distillation
//! loss. Positives train with hard targets, uncertains inherit the teacher's
//! confidence as a soft classification target, and negatives supervise only
//! the box-offset distributions through a JS-divergence term.

use crate::core::{js_divergence, Detection, LabeledBox};
use crate::detector::{assign, Anchor, AssignConfig, Assignment, DecodedGrid, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::sigmoid64;
use crate::sup_losses::{bce_with_logit, dfl_loss, iou_loss, LogitGrads};

/// Confidence cut points for pseudo-label grading.
#[derive(Debug, Clone, Copy)]
pub struct Thresholds {
    pub p_l: f64,
    pub p_h: f64,
}

impl Thresholds {
    pub fn new(p_l: f64, p_h: f64) -> Result<Self> {
        if !(0.0 < p_l && p_l < p_h && p_h < 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < p_l < p_h < 1, got ({p_l}, {p_h})"
            )));
        }
        Ok(Thresholds { p_l, p_h })
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { p_l: 0.3, p_h: 0.8 }
    }
}

/// Teacher detections partitioned by confidence tier. The three lists always
/// partition the graded input.
#[derive(Debug, Clone, Default)]
pub struct GradedPseudoLabels {
    pub positives: Vec<Detection>,
    pub uncertains: Vec<Detection>,
    pub negatives: Vec<Detection>,
}

impl GradedPseudoLabels {
    pub fn total(&self) -> usize {
        self.positives.len() + self.uncertains.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// Partition detections by confidence. Boundaries assign outward: confidence
/// exactly `p_h` is positive, exactly `p_l` is negative.
pub fn grade(detections: Vec<Detection>, t: &Thresholds) -> GradedPseudoLabels {
    let mut out = GradedPseudoLabels::default();
    for d in detections {
        if d.confidence >= t.p_h {
            out.positives.push(d);
        } else if d.confidence <= t.p_l {
            out.negatives.push(d);
        } else {
            out.uncertains.push(d);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Positive,
    Uncertain,
}

/// A pseudo-GT box carrying its tier and the teacher confidence used as the
/// uncertain-tier soft target.
#[derive(Debug, Clone, Copy)]
pub struct TieredBox {
    pub lbox: LabeledBox,
    pub tier: Tier,
    pub teacher_conf: f64,
}

/// Classification part of the distillation loss: over anchors matched to a
/// tiered pseudo-box, sum BCE of the student logit at the pseudo-label class
/// against 1.0 (positive tier) or the teacher confidence (uncertain tier).
/// Negative tiers contribute nothing here.
pub fn uncertain_cls_loss(
    grid: &DecodedGrid,
    assignment: &Assignment,
    tiered: &[TieredBox],
) -> (f64, Vec<f64>) {
    let c = grid.num_classes;
    let mut loss = 0.0;
    let mut d_cls = vec![0.0; grid.cls_logits.len()];
    for (ai, gi) in assignment.positives() {
        let tb = &tiered[gi];
        let target = match tb.tier {
            Tier::Positive => 1.0,
            Tier::Uncertain => tb.teacher_conf,
        };
        let cell = ai * c + tb.lbox.category;
        let z = grid.cls_logits[cell];
        loss += bce_with_logit(z, target);
        d_cls[cell] += sigmoid64(z) - target;
    }
    (loss, d_cls)
}

/// Gradient of the smoothed JS divergence w.r.t. its first argument.
fn js_grad_p(p: &[f64], q: &[f64]) -> Vec<f64> {
    const EPS: f64 = 1e-12;
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let mi = 0.5 * (pi + qi);
            0.5 * ((pi + EPS) / (mi + EPS)).ln()
        })
        .collect()
}

/// Negative-tier box loss: for each negative pseudo-label carrying side
/// distributions, match the nearest student anchor at the label's source
/// level and sum the mean-over-sides JS divergence between the student and
/// teacher distributions. Negatives without distributions are skipped and
/// counted.
pub fn negative_box_loss(
    cfg: &DetectorConfig,
    grid: &DecodedGrid,
    negatives: &[Detection],
) -> Result<(f64, Vec<f64>, u64)> {
    let bins = cfg.bins();
    let mut loss = 0.0;
    let mut d_reg = vec![0.0; grid.reg_logits.len()];
    let mut skipped = 0u64;
    // Flat offset of each level's first anchor.
    let mut level_base = [0usize; crate::detector::NUM_LEVELS];
    for l in 1..crate::detector::NUM_LEVELS {
        level_base[l] = level_base[l - 1] + cfg.anchors_per_level(l - 1);
    }
    for det in negatives {
        let Some(dist) = &det.box_distribution else {
            skipped += 1;
            continue;
        };
        if dist.bins != bins {
            return Err(Error::ShapeMismatch(format!(
                "negative distribution has {} bins, model uses {bins}",
                dist.bins
            )));
        }
        let level = dist.level;
        let (lh, lw) = cfg.level_hw(level);
        let stride = cfg.strides[level] as f64;
        let (cx, cy) = det.bbox.center();
        let ix = ((cx / stride - 0.5).round().max(0.0) as usize).min(lw - 1);
        let iy = ((cy / stride - 0.5).round().max(0.0) as usize).min(lh - 1);
        let ai = level_base[level] + iy * lw + ix;
        let mut per_anchor = 0.0;
        for side in 0..4 {
            let p = grid.side_dist(ai, side);
            let q = dist.row(side);
            per_anchor += js_divergence(p, q)?;
            let g = js_grad_p(p, q);
            let gdotp: f64 = g.iter().zip(p).map(|(gi, pi)| gi * pi).sum();
            let base = (ai * 4 + side) * bins;
            for k in 0..bins {
                // chain through softmax: dL/dz_k = p_k (g_k - <g, p>)
                d_reg[base + k] += 0.25 * p[k] * (g[k] - gdotp);
            }
        }
        loss += per_anchor / 4.0;
    }
    Ok((loss, d_reg, skipped))
}

/// Which tiers participate in distillation. `PositivesOnly` is the plain
/// self-training ablation; `Tiered` is the full uncertainty treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    PositivesOnly,
    Tiered,
}

/// Term weights for the distillation loss.
#[derive(Debug, Clone, Copy)]
pub struct DistillWeights {
    pub w_cls: f64,
    pub w_dfl: f64,
    pub w_iou: f64,
    pub w_ng: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights {
            w_cls: 0.5,
            w_dfl: 1.5,
            w_iou: 7.5,
            w_ng: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DistillBreakdown {
    pub cls: f64,
    pub dfl: f64,
    pub iou: f64,
    pub ng: f64,
    pub dropped_boxes: u64,
    pub skipped_negatives: u64,
    pub dfl_clamped: u64,
}

fn clip_tier(
    dets: &[Detection],
    w: f64,
    h: f64,
    dropped: &mut u64,
) -> Vec<Detection> {
    dets.iter()
        .filter_map(|d| match d.bbox.clip(w, h) {
            Some(bbox) => {
                let mut c = d.clone();
                c.bbox = bbox;
                Some(c)
            }
            None => {
                *dropped += 1;
                None
            }
        })
        .collect()
}

/// Full pseudo-label distillation loss for one target-domain image. The
/// graded labels must already live in the student's augmented coordinate
/// frame; boxes straddling the border are clipped, fully-clipped boxes are
/// dropped and counted. With no surviving pseudo-labels the loss is exactly
/// zero and carries no gradient.
pub fn distill_loss(
    cfg: &DetectorConfig,
    anchors: &[Anchor],
    grid: &DecodedGrid,
    graded: &GradedPseudoLabels,
    weights: &DistillWeights,
    acfg: &AssignConfig,
    mode: DistillMode,
) -> Result<(f64, LogitGrads, DistillBreakdown)> {
    let (h, w) = (cfg.resolution.0 as f64, cfg.resolution.1 as f64);
    let mut bd = DistillBreakdown::default();
    let positives = clip_tier(&graded.positives, w, h, &mut bd.dropped_boxes);
    let uncertains = if mode == DistillMode::Tiered {
        clip_tier(&graded.uncertains, w, h, &mut bd.dropped_boxes)
    } else {
        Vec::new()
    };
    let negatives = if mode == DistillMode::Tiered {
        clip_tier(&graded.negatives, w, h, &mut bd.dropped_boxes)
    } else {
        Vec::new()
    };

    let mut tiered: Vec<TieredBox> = Vec::with_capacity(positives.len() + uncertains.len());
    for d in &positives {
        tiered.push(TieredBox {
            lbox: LabeledBox {
                bbox: d.bbox,
                category: d.category,
            },
            tier: Tier::Positive,
            teacher_conf: d.confidence,
        });
    }
    for d in &uncertains {
        tiered.push(TieredBox {
            lbox: LabeledBox {
                bbox: d.bbox,
                category: d.category,
            },
            tier: Tier::Uncertain,
            teacher_conf: d.confidence,
        });
    }

    let mut grads = LogitGrads::zeros(anchors.len(), cfg.num_classes, cfg.bins());
    let mut total = 0.0;

    if !tiered.is_empty() {
        let pseudo_gts: Vec<LabeledBox> = tiered.iter().map(|t| t.lbox).collect();
        let asn = assign(anchors, grid, &pseudo_gts, acfg);
        let (lc, d_cls) = uncertain_cls_loss(grid, &asn, &tiered);
        let (ld, d_reg_dfl, clamped) = dfl_loss(cfg, anchors, grid, &asn, &pseudo_gts);
        let (li, d_reg_iou) = iou_loss(anchors, grid, &asn, &pseudo_gts);
        bd.cls = lc;
        bd.dfl = ld;
        bd.iou = li;
        bd.dfl_clamped = clamped;
        total += weights.w_cls * lc + weights.w_dfl * ld + weights.w_iou * li;
        for (dst, src) in grads.d_cls.iter_mut().zip(&d_cls) {
            *dst += weights.w_cls * src;
        }
        for i in 0..grads.d_reg.len() {
            grads.d_reg[i] += weights.w_dfl * d_reg_dfl[i] + weights.w_iou * d_reg_iou[i];
        }
    }

    if !negatives.is_empty() {
        let (lng, d_reg_ng, skipped) = negative_box_loss(cfg, grid, &negatives)?;
        bd.ng = lng;
        bd.skipped_negatives = skipped;
        total += weights.w_ng * lng;
        for (dst, src) in grads.d_reg.iter_mut().zip(&d_reg_ng) {
            *dst += weights.w_ng * src;
        }
    }

    Ok((total, grads, bd))
}
