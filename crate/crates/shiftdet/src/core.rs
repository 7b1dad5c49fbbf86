//! Shared geometric and information-theoretic primitives plus the domain
//! types every other module consumes.

use crate::error::{Error, Result};
use crate::img::ImageBuf;

/// Axis-aligned box in image pixel coordinates, corner form.
///
/// Invariants: `x2 > x1`, `y2 > y1`, all coordinates finite. Enforced at
/// construction so downstream geometry never sees a degenerate box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite corner ({x1},{y1},{x2},{y2})"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!(
                "degenerate extent ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    /// Clip to `[0,w] x [0,h]`; `None` when nothing of the box survives.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(w);
        let y2 = self.y2.min(h);
        BBox::new(x1, y1, x2, y2).ok()
    }
}

/// Intersection-over-union of two valid boxes. Symmetric, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Jensen-Shannon divergence with natural logarithms, in [0, ln 2].
///
/// Entries are smoothed by `eps = 1e-12` inside the logs so one-hot inputs
/// are legal. Inputs must be equal-length, nonnegative, and sum to 1 within
/// 1e-6.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    const EPS: f64 = 1e-12;
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "js_divergence lengths {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "{name} has a negative or non-finite entry"
            )));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!(
                "{name} sums to {s}, expected 1"
            )));
        }
    }
    let mut d = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        d += 0.5 * pi * ((pi + EPS) / (mi + EPS)).ln();
        d += 0.5 * qi * ((qi + EPS) / (mi + EPS)).ln();
    }
    Ok(d.max(0.0))
}

/// Class-labeled ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub category: usize,
}

/// Which side of the shift a sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            other => Err(Error::Dataset(format!("unknown domain tag {other:?}"))),
        }
    }
}

/// Per-side discrete offset distributions captured at the anchor that
/// produced a detection. `rows` is 4 x `bins` (left, top, right, bottom),
/// each row stochastic within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDistribution {
    pub level: usize,
    pub bins: usize,
    rows: Vec<f64>,
}

impl BoxDistribution {
    pub fn new(level: usize, bins: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != 4 * bins {
            return Err(Error::InvalidDistribution(format!(
                "box distribution wants 4x{bins} values, got {}",
                rows.len()
            )));
        }
        let d = BoxDistribution { level, bins, rows };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for side in 0..4 {
            let row = self.row(side);
            if row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::InvalidDistribution(format!(
                    "side {side} has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidDistribution(format!(
                    "side {side} sums to {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn row(&self, side: usize) -> &[f64] {
        &self.rows[side * self.bins..(side + 1) * self.bins]
    }

    /// Swap the left and right side rows; used when undoing a horizontal flip.
    pub fn swap_horizontal(&mut self) {
        for k in 0..self.bins {
            self.rows.swap(k, 2 * self.bins + k);
        }
    }

    /// Rescale every row to sum exactly to 1, absorbing quantization drift
    /// from serialization.
    pub fn renormalize(&mut self) {
        for side in 0..4 {
            let s: f64 = self.row(side).iter().sum();
            if s > 0.0 {
                for v in &mut self.rows[side * self.bins..(side + 1) * self.bins] {
                    *v /= s;
                }
            }
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.rows
    }
}

/// A scored model output box. `box_distribution` is present when the
/// detection was harvested densely from a prediction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub confidence: f64,
    pub box_distribution: Option<BoxDistribution>,
}

impl Detection {
    pub fn new(bbox: BBox, category: usize, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidDistribution(format!(
                "confidence {confidence} outside [0,1]"
            )));
        }
        Ok(Detection {
            bbox,
            category,
            confidence,
            box_distribution: None,
        })
    }
}

/// One image plus its (optional) labels and domain tag.
///
/// Labels travel with source samples; target samples carry them only in
/// evaluation splits, never in training.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageBuf,
    pub labels: Option<Vec<LabeledBox>>,
    pub domain: DomainTag,
}
