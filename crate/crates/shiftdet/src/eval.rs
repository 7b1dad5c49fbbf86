//! Detection quality measurement: greedy per-class matching at a fixed IoU
//! threshold, all-point interpolated average precision, and mAP@.5.

use crate::core::{iou, Detection, LabeledBox};
use crate::error::{Error, Result};

/// Per-prediction TP flags for one image, aligned with the input order.
/// Within each class, predictions are ranked by descending confidence
/// (deterministic tie-breaks) and each greedily claims the highest-IoU
/// still-unmatched ground truth of its class, provided IoU >= `iou_thr`.
pub fn match_predictions(
    predictions: &[Detection],
    gts: &[LabeledBox],
    iou_thr: f64,
) -> Vec<bool> {
    let mut flags = vec![false; predictions.len()];
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &predictions[i];
        let b = &predictions[j];
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.category.cmp(&b.category))
            .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap())
            .then(a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap())
    });
    let mut claimed = vec![false; gts.len()];
    for &pi in &order {
        let p = &predictions[pi];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi] || g.category != p.category {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_thr && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, gi));
            }
        }
        if let Some((_, gi)) = best {
            claimed[gi] = true;
            flags[pi] = true;
        }
    }
    flags
}

/// Area under the interpolated precision envelope over recall. `records`
/// are (confidence, is_tp) pairs pooled across images for one class.
pub fn average_precision(records: &[(f64, bool)], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::Dataset(
            "average_precision needs at least one ground truth".into(),
        ));
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut sorted: Vec<(f64, bool)> = records.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let n = sorted.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp_cum = 0usize;
    for (i, &(_, tp)) in sorted.iter().enumerate() {
        if tp {
            tp_cum += 1;
        }
        precisions.push(tp_cum as f64 / (i + 1) as f64);
        recalls.push(tp_cum as f64 / num_gt as f64);
    }
    // Precision envelope from the right.
    for i in (0..n.saturating_sub(1)).rev() {
        if precisions[i + 1] > precisions[i] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..n {
        ap += (recalls[i] - prev_r) * precisions[i];
        prev_r = recalls[i];
    }
    Ok(ap)
}

#[derive(Debug, Clone)]
pub struct ClassEval {
    pub class: usize,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub num_gt: usize,
    /// (recall, precision) samples along the ranked list.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub per_class: Vec<ClassEval>,
    pub map50: f64,
    pub iou_thr: f64,
}

/// Aggregate matching over a whole split. `per_image` pairs the detections
/// (already NMS-filtered) with the image's ground truth.
pub fn evaluate_detections(
    per_image: &[(Vec<Detection>, Vec<LabeledBox>)],
    num_classes: usize,
    iou_thr: f64,
) -> EvalResult {
    let mut records: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    let mut num_gt = vec![0usize; num_classes];
    for (preds, gts) in per_image {
        for g in gts {
            num_gt[g.category] += 1;
        }
        let flags = match_predictions(preds, gts, iou_thr);
        for (p, &tp) in preds.iter().zip(&flags) {
            records[p.category].push((p.confidence, tp));
        }
    }
    let mut per_class = Vec::new();
    let mut ap_sum = 0.0;
    let mut ap_classes = 0usize;
    for c in 0..num_classes {
        let tp = records[c].iter().filter(|r| r.1).count();
        let fp = records[c].len() - tp;
        let fn_ = num_gt[c].saturating_sub(tp);
        let (ap, pr_curve) = if num_gt[c] > 0 {
            let ap = average_precision(&records[c], num_gt[c]).expect("num_gt checked");
            let mut sorted = records[c].clone();
            sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut curve = Vec::with_capacity(sorted.len());
            let mut tp_cum = 0usize;
            for (i, &(_, is_tp)) in sorted.iter().enumerate() {
                if is_tp {
                    tp_cum += 1;
                }
                curve.push((
                    tp_cum as f64 / num_gt[c] as f64,
                    tp_cum as f64 / (i + 1) as f64,
                ));
            }
            ap_sum += ap;
            ap_classes += 1;
            (ap, curve)
        } else {
            (0.0, Vec::new())
        };
        per_class.push(ClassEval {
            class: c,
            ap,
            tp,
            fp,
            fn_,
            num_gt: num_gt[c],
            pr_curve,
        });
    }
    EvalResult {
        per_class,
        map50: if ap_classes > 0 {
            ap_sum / ap_classes as f64
        } else {
            0.0
        },
        iou_thr,
    }
}

/// Human-readable table plus a machine-readable key-value block.
pub fn format_report(result: &EvalResult, class_names: &[&str]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "detection quality @ IoU {:.2}\n{:<10} {:>8} {:>6} {:>6} {:>6} {:>8}\n",
        result.iou_thr, "class", "AP", "tp", "fp", "fn", "gt"
    ));
    for c in &result.per_class {
        let name = class_names
            .get(c.class)
            .copied()
            .unwrap_or("unknown");
        out.push_str(&format!(
            "{:<10} {:>8.4} {:>6} {:>6} {:>6} {:>8}\n",
            name, c.ap, c.tp, c.fp, c.fn_, c.num_gt
        ));
    }
    out.push_str(&format!("mAP@.5 = {:.4}\n", result.map50));
    out.push_str("---\n");
    out.push_str(&format!("kv map50 {:.6}\n", result.map50));
    for c in &result.per_class {
        let name = class_names.get(c.class).copied().unwrap_or("unknown");
        out.push_str(&format!("kv ap.{name} {:.6}\n", c.ap));
    }
    out
}
