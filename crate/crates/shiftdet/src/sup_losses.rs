//! Source-domain supervised detection loss: classification BCE against
//! IoU-aligned soft targets, distribution-focal regression over offset bins,
//! and an IoU term on decoded boxes.
//!
//! Every term returns its analytic gradient with respect to the raw logits;
//! losses run at f64 so the finite-difference suite can verify them tightly.
//! Assignments (and the soft targets frozen inside them) are treated as
//! constants of the loss surface.

use crate::core::{DomainTag, LabeledBox};
use crate::detector::{Anchor, Assignment, DecodedGrid, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::sigmoid64;

/// Term weights for the supervised loss. The three terms sum unweighted in
/// principle; these defaults follow the common anchor-free recipe.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_dfl: f64,
    pub w_iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cls: 0.5,
            w_dfl: 1.5,
            w_iou: 7.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("w_cls", self.w_cls),
            ("w_dfl", self.w_dfl),
            ("w_iou", self.w_iou),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{n} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How positive anchors are targeted by the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTargetMode {
    /// Target the IoU recorded in the assignment (soft, default).
    IouSoft,
    /// Target 1.0.
    Hard,
}

/// Gradients with respect to the raw logits of one image.
#[derive(Debug, Clone)]
pub struct LogitGrads {
    /// `[anchor * C]`
    pub d_cls: Vec<f64>,
    /// `[anchor * 4 * bins]`
    pub d_reg: Vec<f64>,
}

impl LogitGrads {
    pub fn zeros(num_anchors: usize, num_classes: usize, bins: usize) -> Self {
        LogitGrads {
            d_cls: vec![0.0; num_anchors * num_classes],
            d_reg: vec![0.0; num_anchors * 4 * bins],
        }
    }

    pub fn axpy(&mut self, w: f64, other: &LogitGrads) {
        for (a, b) in self.d_cls.iter_mut().zip(&other.d_cls) {
            *a += w * b;
        }
        for (a, b) in self.d_reg.iter_mut().zip(&other.d_reg) {
            *a += w * b;
        }
    }
}

/// Numerically stable binary cross-entropy with logits.
#[inline]
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (1.0 + (-z.abs()).exp()).ln()
}

/// Classification loss: per-anchor per-class BCE summed within an anchor and
/// averaged over anchors. Positives target the assignment's frozen IoU (or
/// 1.0 in hard mode) at their matched class; everything else targets 0.
pub fn cls_loss(
    grid: &DecodedGrid,
    assignment: &Assignment,
    gts: &[LabeledBox],
    mode: ClsTargetMode,
) -> Result<(f64, Vec<f64>)> {
    if grid.cls_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training("non-finite classification logit".into()));
    }
    let c = grid.num_classes;
    let num_anchors = grid.cls_logits.len() / c;
    let inv_a = 1.0 / num_anchors as f64;
    let mut loss = 0.0;
    let mut d_cls = vec![0.0; grid.cls_logits.len()];
    for ai in 0..num_anchors {
        let (tgt_class, tgt_val) = match assignment.matched_gt[ai] {
            Some(gi) => {
                let t = match mode {
                    ClsTargetMode::IouSoft => assignment.target_iou[ai],
                    ClsTargetMode::Hard => 1.0,
                };
                (Some(gts[gi].category), t)
            }
            None => (None, 0.0),
        };
        for cc in 0..c {
            let z = grid.cls_logits[ai * c + cc];
            let t = if Some(cc) == tgt_class { tgt_val } else { 0.0 };
            loss += bce_with_logit(z, t);
            d_cls[ai * c + cc] = (sigmoid64(z) - t) * inv_a;
        }
    }
    Ok((loss * inv_a, d_cls))
}

/// Distribution-focal loss: per positive side, cross-entropy against the two
/// integer bins bracketing the continuous target offset, weighted by linear
/// proximity; mean over positive sides. Out-of-range targets clamp to
/// `[0, reg_max]` and bump the returned counter.
pub fn dfl_loss(
    cfg: &DetectorConfig,
    anchors: &[Anchor],
    grid: &DecodedGrid,
    assignment: &Assignment,
    gts: &[LabeledBox],
) -> (f64, Vec<f64>, u64) {
    let bins = cfg.bins();
    let reg_max = cfg.reg_max as f64;
    let mut d_reg = vec![0.0; grid.reg_logits.len()];
    let positives: Vec<(usize, usize)> = assignment.positives().collect();
    if positives.is_empty() {
        return (0.0, d_reg, 0);
    }
    let n_sides = (positives.len() * 4) as f64;
    let mut loss = 0.0;
    let mut clamped = 0u64;
    for &(ai, gi) in &positives {
        let a = &anchors[ai];
        let g = &gts[gi].bbox;
        let raw = [
            (a.cx - g.x1) / a.stride,
            (a.cy - g.y1) / a.stride,
            (g.x2 - a.cx) / a.stride,
            (g.y2 - a.cy) / a.stride,
        ];
        for (side, &t_raw) in raw.iter().enumerate() {
            let t = if (0.0..=reg_max).contains(&t_raw) {
                t_raw
            } else {
                clamped += 1;
                t_raw.clamp(0.0, reg_max)
            };
            let lo = (t.floor() as usize).min(cfg.reg_max);
            let hi = lo + 1;
            let w_hi = t - lo as f64;
            let w_lo = 1.0 - w_hi;
            let dist = grid.side_dist(ai, side);
            let base = (ai * 4 + side) * bins;
            if w_lo > 0.0 {
                loss -= w_lo * (dist[lo] + 1e-300).ln();
            }
            if w_hi > 0.0 && hi < bins {
                loss -= w_hi * (dist[hi] + 1e-300).ln();
            }
            // d CE / d z_k = p_k - y_k for the two-hot target y.
            for k in 0..bins {
                let mut y = 0.0;
                if k == lo {
                    y += w_lo;
                }
                if k == hi && hi < bins {
                    y += w_hi;
                }
                d_reg[base + k] += (dist[k] - y) / n_sides;
            }
        }
    }
    (loss / n_sides, d_reg, clamped)
}

/// Partial derivatives of IoU(pred, gt) with respect to the four pred edges.
fn iou_edge_grads(p: &crate::core::BBox, g: &crate::core::BBox) -> (f64, [f64; 4]) {
    let ix = (p.x2.min(g.x2) - p.x1.max(g.x1)).max(0.0);
    let iy = (p.y2.min(g.y2) - p.y1.max(g.y1)).max(0.0);
    let inter = ix * iy;
    let ap = p.area();
    let union = ap + g.area() - inter;
    let iou = inter / union;
    if ix <= 0.0 || iy <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    // dI/d(edge)
    let di = [
        if p.x1 > g.x1 { -iy } else { 0.0 },
        if p.y1 > g.y1 { -ix } else { 0.0 },
        if p.x2 < g.x2 { iy } else { 0.0 },
        if p.y2 < g.y2 { ix } else { 0.0 },
    ];
    // dAp/d(edge)
    let h = p.y2 - p.y1;
    let w = p.x2 - p.x1;
    let dap = [-h, -w, h, w];
    let mut diou = [0.0; 4];
    for e in 0..4 {
        let du = dap[e] - di[e];
        diou[e] = (di[e] * union - inter * du) / (union * union);
    }
    (iou, diou)
}

/// IoU loss: mean over positive anchors of `1 - IoU(decoded box, gt box)`,
/// with the chain through the DFL expectation and softmax.
pub fn iou_loss(
    anchors: &[Anchor],
    grid: &DecodedGrid,
    assignment: &Assignment,
    gts: &[LabeledBox],
) -> (f64, Vec<f64>) {
    let bins = grid.bins;
    let mut d_reg = vec![0.0; grid.reg_logits.len()];
    let positives: Vec<(usize, usize)> = assignment.positives().collect();
    if positives.is_empty() {
        return (0.0, d_reg);
    }
    let inv_n = 1.0 / positives.len() as f64;
    let mut loss = 0.0;
    for &(ai, gi) in &positives {
        let a = &anchors[ai];
        let (iou, d_edges) = iou_edge_grads(&grid.boxes[ai], &gts[gi].bbox);
        loss += 1.0 - iou;
        // edges (x1,y1,x2,y2) vs offsets (l,t,r,b): x1 = cx-l, y1 = cy-t,
        // x2 = cx+r, y2 = cy+b.
        let d_off = [-d_edges[0], -d_edges[1], d_edges[2], d_edges[3]];
        for side in 0..4 {
            // loss term is (1 - iou): d loss / d offset = -d iou / d offset
            let dl_doff = -d_off[side] * inv_n;
            if dl_doff == 0.0 {
                continue;
            }
            // Clamped offsets sit on a flat region of the decode.
            if grid.offsets[ai * 4 + side] <= crate::detector::MIN_SIDE_OFFSET {
                continue;
            }
            let dist = grid.side_dist(ai, side);
            let expect: f64 = dist.iter().enumerate().map(|(k, &p)| k as f64 * p).sum();
            let base = (ai * 4 + side) * bins;
            for k in 0..bins {
                // d offset / d z_k = stride * p_k * (k - expectation)
                d_reg[base + k] += dl_doff * a.stride * dist[k] * (k as f64 - expect);
            }
        }
    }
    (loss * inv_n, d_reg)
}

/// Per-image context the supervised loss consumes.
pub struct ImageLossCtx<'a> {
    pub grid: &'a DecodedGrid,
    pub assignment: &'a Assignment,
    pub gts: &'a [LabeledBox],
    pub domain: DomainTag,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SupBreakdown {
    pub cls: f64,
    pub dfl: f64,
    pub iou: f64,
    pub dfl_clamped: u64,
}

/// Weighted supervised loss over a source-domain batch; the mean of the
/// per-image weighted sums. Rejects any target-domain sample.
pub fn supervised_loss(
    cfg: &DetectorConfig,
    anchors: &[Anchor],
    batch: &[ImageLossCtx<'_>],
    weights: &LossWeights,
    mode: ClsTargetMode,
) -> Result<(f64, Vec<LogitGrads>, SupBreakdown)> {
    weights.validate()?;
    if batch.iter().any(|c| c.domain != DomainTag::Source) {
        return Err(Error::DomainContract(
            "supervised loss fed a target-domain sample".into(),
        ));
    }
    let inv_b = 1.0 / batch.len().max(1) as f64;
    let mut total = 0.0;
    let mut breakdown = SupBreakdown::default();
    let mut grads = Vec::with_capacity(batch.len());
    for ctx in batch {
        let (lc, d_cls) = cls_loss(ctx.grid, ctx.assignment, ctx.gts, mode)?;
        let (ld, d_reg_dfl, clamped) = dfl_loss(cfg, anchors, ctx.grid, ctx.assignment, ctx.gts);
        let (li, d_reg_iou) = iou_loss(anchors, ctx.grid, ctx.assignment, ctx.gts);
        total += (weights.w_cls * lc + weights.w_dfl * ld + weights.w_iou * li) * inv_b;
        breakdown.cls += lc * inv_b;
        breakdown.dfl += ld * inv_b;
        breakdown.iou += li * inv_b;
        breakdown.dfl_clamped += clamped;
        let n_anchors = anchors.len();
        let mut g = LogitGrads::zeros(n_anchors, cfg.num_classes, cfg.bins());
        for (dst, src) in g.d_cls.iter_mut().zip(&d_cls) {
            *dst = weights.w_cls * src * inv_b;
        }
        for i in 0..g.d_reg.len() {
            g.d_reg[i] = (weights.w_dfl * d_reg_dfl[i] + weights.w_iou * d_reg_iou[i]) * inv_b;
        }
        grads.push(g);
    }
    Ok((total, grads, breakdown))
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::core::BBox;
    use crate::detector::{assign, AssignConfig};

    fn toy_gt() -> Vec<LabeledBox> {
        vec![LabeledBox {
            bbox: BBox::new(1.0, 1.0, 9.0, 7.0).unwrap(),
            category: 1,
        }]
    }

    fn toy_assignment(
        _cfg: &DetectorConfig,
        anchors: &[crate::detector::Anchor],
        grid: &DecodedGrid,
        gts: &[LabeledBox],
    ) -> Assignment {
        assign(anchors, grid, gts, &AssignConfig::default())
    }

    #[test]
    fn cls_loss_zero_for_perfect_negatives() {
        let (cfg, anchors) = two_anchor_setup();
        let n = anchors.len();
        let cls = vec![-40.0; n * cfg.num_classes];
        let reg = vec![0.0; n * 4 * cfg.bins()];
        let grid = DecodedGrid::from_logits(&cfg, &anchors, cls, reg);
        let asn = toy_assignment(&cfg, &anchors, &grid, &[]);
        let (l, _) = cls_loss(&grid, &asn, &[], ClsTargetMode::IouSoft).unwrap();
        assert!(l < 1e-12, "{l}");
    }

    #[test]
    fn cls_loss_half_prob_positive_is_ln2_cell() {
        // One positive anchor targeting 1.0 with predicted prob 0.5; every
        // other cell driven to ~0 so the mean isolates the ln 2 cell.
        let (cfg, anchors) = two_anchor_setup();
        let n = anchors.len();
        let mut cls = vec![-40.0; n * cfg.num_classes];
        cls[cfg.num_classes] = 0.0; // anchor 1, class 0 -> prob 0.5
        let reg = vec![0.0; n * 4 * cfg.bins()];
        let grid = DecodedGrid::from_logits(&cfg, &anchors, cls, reg);
        let asn = Assignment {
            matched_gt: vec![None, Some(0)],
            score: vec![0.0, 1.0],
            target_iou: vec![0.0, 1.0],
            num_gts: 1,
        };
        let gts = vec![LabeledBox {
            bbox: BBox::new(8.0, 0.0, 16.0, 8.0).unwrap(),
            category: 0,
        }];
        let (l, _) = cls_loss(&grid, &asn, &gts, ClsTargetMode::Hard).unwrap();
        let want = std::f64::consts::LN_2 / n as f64;
        assert!((l - want).abs() < 1e-9, "{l} vs {want}");
    }

    #[test]
    fn cls_loss_rejects_nan() {
        let (cfg, anchors) = two_anchor_setup();
        let mut cls = vec![0.0; anchors.len() * cfg.num_classes];
        cls[0] = f64::NAN;
        let reg = vec![0.0; anchors.len() * 4 * cfg.bins()];
        let grid = DecodedGrid::from_logits(&cfg, &anchors, cls, reg);
        let asn = toy_assignment(&cfg, &anchors, &grid, &[]);
        assert!(cls_loss(&grid, &asn, &[], ClsTargetMode::IouSoft).is_err());
    }

    #[test]
    fn cls_loss_nonnegative_on_random_inputs() {
        let (cfg, anchors) = two_anchor_setup();
        for seed in 0..10 {
            let grid = grid_from(&cfg, &anchors, seed);
            let gts = toy_gt();
            let asn = toy_assignment(&cfg, &anchors, &grid, &gts);
            let (l, _) = cls_loss(&grid, &asn, &gts, ClsTargetMode::IouSoft).unwrap();
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn dfl_exact_integer_target_with_onehot_prediction_is_zero() {
        let (cfg, anchors) = two_anchor_setup();
        let n = anchors.len();
        let cls = vec![0.0; n * cfg.num_classes];
        // Anchor 0 at (4,4), stride 8. GT chosen so every side offset is
        // exactly 2 bins: box = (cx-16, cy-16, cx+16, cy+16) -> offsets 2.0.
        let mut reg = vec![0.0; n * 4 * cfg.bins()];
        for side in 0..4 {
            reg[side * cfg.bins() + 2] = 600.0; // softmax ~ one-hot at bin 2
        }
        let grid = DecodedGrid::from_logits(&cfg, &anchors, cls, reg);
        let gts = vec![LabeledBox {
            bbox: BBox::new(4.0 - 16.0, 4.0 - 16.0, 4.0 + 16.0, 4.0 + 16.0).unwrap(),
            category: 0,
        }];
        let asn = Assignment {
            matched_gt: vec![Some(0), None],
            score: vec![1.0, 0.0],
            target_iou: vec![1.0, 0.0],
            num_gts: 1,
        };
        let (l, _, clamped) = dfl_loss(&cfg, &anchors, &grid, &asn, &gts);
        assert!(l.abs() < 1e-9, "{l}");
        assert_eq!(clamped, 0);
    }

    #[test]
    fn dfl_half_bin_target_against_uniform_is_ln_bins() {
        let cfg = DetectorConfig {
            num_classes: 2,
            reg_max: 8,
            ..Default::default()
        };
        let anchors = vec![crate::detector::Anchor {
            level: 0,
            iy: 0,
            ix: 0,
            stride: 8.0,
            cx: 4.0,
            cy: 4.0,
        }];
        let cls = vec![0.0; cfg.num_classes];
        let reg = vec![0.0; 4 * cfg.bins()]; // uniform softmax
        let grid = DecodedGrid::from_logits(&cfg, &anchors, cls, reg);
        // offsets of exactly 3.5 bins on every side
        let d = 3.5 * 8.0;
        let gts = vec![LabeledBox {
            bbox: BBox::new(4.0 - d, 4.0 - d, 4.0 + d, 4.0 + d).unwrap(),
            category: 0,
        }];
        let asn = Assignment {
            matched_gt: vec![Some(0)],
            score: vec![1.0],
            target_iou: vec![1.0],
            num_gts: 1,
        };
        let (l, _, _) = dfl_loss(&cfg, &anchors, &grid, &asn, &gts);
        assert!((l - (9.0f64).ln()).abs() < 1e-9, "{l}");
    }

    #[test]
    fn dfl_no_positives_is_zero() {
        let (cfg, anchors) = two_anchor_setup();
        let grid = grid_from(&cfg, &anchors, 3);
        let asn = toy_assignment(&cfg, &anchors, &grid, &[]);
        let (l, _, _) = dfl_loss(&cfg, &anchors, &grid, &asn, &[]);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn dfl_out_of_range_target_clamps_and_counts() {
        let (cfg, anchors) = two_anchor_setup();
        let grid = grid_from(&cfg, &anchors, 4);
        // reg_max 3 at stride 8 -> max representable offset 24; make GT wider.
        let gts = vec![LabeledBox {
            bbox: BBox::new(4.0 - 30.0, 4.0 - 30.0, 4.0 + 30.0, 4.0 + 30.0).unwrap(),
            category: 0,
        }];
        let asn = Assignment {
            matched_gt: vec![Some(0), None],
            score: vec![1.0, 0.0],
            target_iou: vec![0.5, 0.0],
            num_gts: 1,
        };
        let (_, _, clamped) = dfl_loss(&cfg, &anchors, &grid, &asn, &gts);
        assert_eq!(clamped, 4);
    }

    #[test]
    fn iou_loss_identity_and_disjoint() {
        let (cfg, anchors) = two_anchor_setup();
        let grid = grid_from(&cfg, &anchors, 5);
        // Identity: use the decoded box itself as GT.
        let gts = vec![LabeledBox {
            bbox: grid.boxes[0],
            category: 0,
        }];
        let asn = Assignment {
            matched_gt: vec![Some(0), None],
            score: vec![1.0, 0.0],
            target_iou: vec![1.0, 0.0],
            num_gts: 1,
        };
        let (l, _) = iou_loss(&anchors, &grid, &asn, &gts);
        assert!(l.abs() < 1e-12);
        // Disjoint GT.
        let gts = vec![LabeledBox {
            bbox: BBox::new(500.0, 500.0, 600.0, 600.0).unwrap(),
            category: 0,
        }];
        let (l, _) = iou_loss(&anchors, &grid, &asn, &gts);
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_loss_matches_core_iou_example() {
        // pred (0,0,2,2) vs target (1,1,3,3) -> 1 - 1/7
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        let (i, _) = iou_edge_grads(&a, &b);
        assert!((1.0 - i - (1.0 - 1.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_rejects_target_domain() {
        let (cfg, anchors) = two_anchor_setup();
        let grid = grid_from(&cfg, &anchors, 6);
        let gts = toy_gt();
        let asn = toy_assignment(&cfg, &anchors, &grid, &gts);
        let ctx = ImageLossCtx {
            grid: &grid,
            assignment: &asn,
            gts: &gts,
            domain: DomainTag::Target,
        };
        assert!(supervised_loss(
            &cfg,
            &anchors,
            &[ctx],
            &LossWeights::default(),
            ClsTargetMode::IouSoft
        )
        .is_err());
    }

    #[test]
    fn supervised_loss_projects_to_cls_alone() {
        let (cfg, anchors) = two_anchor_setup();
        let grid = grid_from(&cfg, &anchors, 7);
        let gts = toy_gt();
        let asn = toy_assignment(&cfg, &anchors, &grid, &gts);
        let w = LossWeights {
            w_cls: 1.0,
            w_dfl: 0.0,
            w_iou: 0.0,
        };
        let ctx = ImageLossCtx {
            grid: &grid,
            assignment: &asn,
            gts: &gts,
            domain: DomainTag::Source,
        };
        let (total, _, _) =
            supervised_loss(&cfg, &anchors, &[ctx], &w, ClsTargetMode::IouSoft).unwrap();
        let (lc, _) = cls_loss(&grid, &asn, &gts, ClsTargetMode::IouSoft).unwrap();
        assert!((total - lc).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_is_sum_of_independent_terms() {
        let (cfg, anchors) = two_anchor_setup();
        let grid = grid_from(&cfg, &anchors, 8);
        let gts = toy_gt();
        let asn = toy_assignment(&cfg, &anchors, &grid, &gts);
        let w = LossWeights {
            w_cls: 1.0,
            w_dfl: 1.0,
            w_iou: 1.0,
        };
        let ctx = ImageLossCtx {
            grid: &grid,
            assignment: &asn,
            gts: &gts,
            domain: DomainTag::Source,
        };
        let (total, _, _) =
            supervised_loss(&cfg, &anchors, &[ctx], &w, ClsTargetMode::IouSoft).unwrap();
        let (lc, _) = cls_loss(&grid, &asn, &gts, ClsTargetMode::IouSoft).unwrap();
        let (ld, _, _) = dfl_loss(&cfg, &anchors, &grid, &asn, &gts);
        let (li, _) = iou_loss(&anchors, &grid, &asn, &gts);
        assert!((total - (lc + ld + li)).abs() < 1e-9);
    }

    #[test]
    fn supervised_loss_linear_in_weights() {
        let (cfg, anchors) = two_anchor_setup();
        let grid = grid_from(&cfg, &anchors, 9);
        let gts = toy_gt();
        let asn = toy_assignment(&cfg, &anchors, &grid, &gts);
        let eval = |w: LossWeights| {
            let ctx = ImageLossCtx {
                grid: &grid,
                assignment: &asn,
                gts: &gts,
                domain: DomainTag::Source,
            };
            supervised_loss(&cfg, &anchors, &[ctx], &w, ClsTargetMode::IouSoft)
                .unwrap()
                .0
        };
        let a = eval(LossWeights {
            w_cls: 1.0,
            w_dfl: 0.0,
            w_iou: 0.0,
        });
        let b = eval(LossWeights {
            w_cls: 0.0,
            w_dfl: 1.0,
            w_iou: 0.0,
        });
        let c = eval(LossWeights {
            w_cls: 0.0,
            w_dfl: 0.0,
            w_iou: 1.0,
        });
        let combo = eval(LossWeights {
            w_cls: 2.0,
            w_dfl: 3.0,
            w_iou: 0.5,
        });
        assert!((combo - (2.0 * a + 3.0 * b + 0.5 * c)).abs() < 1e-9);
    }

    /// Finite-difference check of the full weighted loss on a 2-anchor toy
    /// instance, relative tolerance 1e-4 at f64.
    #[test]
    fn supervised_loss_gradient_matches_central_differences() {
        let (cfg, anchors) = two_anchor_setup();
        let grid0 = grid_from(&cfg, &anchors, 10);
        let gts = toy_gt();
        let asn = toy_assignment(&cfg, &anchors, &grid0, &gts);
        let w = LossWeights::default();
        let f = |g: &DecodedGrid| {
            let ctx = ImageLossCtx {
                grid: g,
                assignment: &asn,
                gts: &gts,
                domain: DomainTag::Source,
            };
            supervised_loss(&cfg, &anchors, &[ctx], &w, ClsTargetMode::IouSoft)
                .unwrap()
                .0
        };
        let ctx = ImageLossCtx {
            grid: &grid0,
            assignment: &asn,
            gts: &gts,
            domain: DomainTag::Source,
        };
        let (_, grads, _) =
            supervised_loss(&cfg, &anchors, &[ctx], &w, ClsTargetMode::IouSoft).unwrap();
        let (fd_cls, fd_reg) = fd_logit_grads(
            &cfg,
            &anchors,
            &grid0.cls_logits,
            &grid0.reg_logits,
            &f,
        );
        assert_close_rel(&grads[0].d_cls, &fd_cls, 1e-4, "d_cls");
        assert_close_rel(&grads[0].d_reg, &fd_reg, 1e-4, "d_reg");
    }
}
