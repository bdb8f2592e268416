//! Axis-aligned box algebra: IoU, the two-stage delta codec, greedy NMS and
//! proposal-to-ground-truth matching.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` with continuous areas,
//! so a box `(0, 0, 10, 10)` covers exactly 100 square pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2})")]
    Degenerate { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("non-finite box coordinate")]
    NonFinite,
    #[error("delta decode overflowed: exp({0}) is not finite")]
    Overflow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or empty extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite())
        {
            return Err(GeometryError::NonFinite);
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(GeometryError::Degenerate {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok(())
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

    /// Clamps the box to `[0, width] x [0, height]`. The result may be
    /// degenerate when the box lies entirely outside the bounds.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// Mirrors the box about the vertical center line of an image of the given width.
    pub fn flip_horizontal(&self, image_width: f64) -> BBox {
        BBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaVec {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl DeltaVec {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        DeltaVec { tx, ty, tw, th }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        DeltaVec::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub proposal_index: usize,
    pub max_iou: f64,
    pub gt_index: Option<usize>,
    pub is_foreground: bool,
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU without validation; callers guarantee both boxes are non-degenerate.
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn encode_deltas(proposal: &BBox, target: &BBox) -> Result<DeltaVec, GeometryError> {
    proposal.validate()?;
    target.validate()?;
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    Ok(DeltaVec {
        tx: (tcx - pcx) / pw,
        ty: (tcy - pcy) / ph,
        tw: (target.width() / pw).ln(),
        th: (target.height() / ph).ln(),
    })
}

/// Inverse of [`encode_deltas`]. When `bounds = Some((width, height))` the
/// decoded box is clamped to the image.
pub fn decode_deltas(
    proposal: &BBox,
    deltas: &DeltaVec,
    bounds: Option<(f64, f64)>,
) -> Result<BBox, GeometryError> {
    proposal.validate()?;
    let d = deltas.as_array();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let sw = deltas.tw.exp();
    if !sw.is_finite() {
        return Err(GeometryError::Overflow(deltas.tw));
    }
    let sh = deltas.th.exp();
    if !sh.is_finite() {
        return Err(GeometryError::Overflow(deltas.th));
    }
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + deltas.tx * pw;
    let cy = pcy + deltas.ty * ph;
    let w = pw * sw;
    let h = ph * sh;
    let out = BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    };
    if ![out.x1, out.y1, out.x2, out.y2].iter().all(|v| v.is_finite()) {
        return Err(GeometryError::Overflow(deltas.tw.max(deltas.th)));
    }
    Ok(match bounds {
        Some((bw, bh)) => out.clamp_to(bw, bh),
        None => out,
    })
}

/// Greedy class-wise non-maximum suppression.
///
/// Detections are visited in descending score order, ties broken by the
/// lower input index. A detection is dropped when its IoU with an already
/// kept detection of the same class exceeds `iou_threshold`.
pub fn nms(dets: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Like [`nms`] but returns the surviving input indices, in output order.
pub fn nms_indices(dets: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then_with(|| a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = keep.iter().any(|&k| {
            dets[k].class_id == d.class_id && iou_unchecked(&dets[k].bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

/// Matches each proposal to the ground-truth box of highest IoU. Ties go to
/// the lower ground-truth index.
pub fn match_to_gt(proposals: &[BBox], gts: &[(BBox, usize)], u: f64) -> Vec<MatchResult> {
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, _)) in gts.iter().enumerate() {
                let v = iou_unchecked(p, g);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let max_iou = best.map_or(0.0, |(_, v)| v);
            MatchResult {
                proposal_index: i,
                max_iou,
                gt_index: best.map(|(j, _)| j),
                is_foreground: best.is_some() && max_iou >= u,
            }
        })
        .collect()
}
