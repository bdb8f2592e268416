//! Detector losses: the binary focal loss used by the IoU branch, branch
//! target assignment, and the weighted supervised / unsupervised assembly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{ClassItem, LossItem, Tape, Var};
use crate::geometry::MatchResult;
use crate::model::HeadOutputs;
use crate::sampling::ImageTargets;

/// Probabilities are clamped to this distance from 0 and 1 before `ln`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Transition point of the smooth-L1 regression loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("non-finite loss in term `{term}` ({value})")]
    NonFinite { term: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Unsupervised classification weight.
    pub alpha: f64,
    /// Unsupervised regression weight; 0 disables pseudo-box regression.
    pub beta: f64,
    /// Unsupervised IoU-branch weight.
    pub gamma_iou: f64,
    /// Focal-loss focusing exponent.
    pub gamma_focal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 4.0, beta: 1.0, gamma_iou: 1.0, gamma_focal: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub iou_branch: f64,
    pub stream: Stream,
}

impl LossBreakdown {
    pub fn zero(stream: Stream) -> Self {
        LossBreakdown { rpn_cls: 0.0, rpn_reg: 0.0, roi_cls: 0.0, roi_reg: 0.0, iou_branch: 0.0, stream }
    }

    pub fn cls(&self) -> f64 {
        self.rpn_cls + self.roi_cls
    }

    pub fn reg(&self) -> f64 {
        self.rpn_reg + self.roi_reg
    }

    pub fn unit_total(&self) -> f64 {
        self.cls() + self.reg() + self.iou_branch
    }

    /// `(cls, reg, iou)` multipliers this stream applies.
    pub fn coefficients(&self, w: &LossWeights) -> (f64, f64, f64) {
        match self.stream {
            Stream::Supervised => (1.0, 1.0, 1.0),
            Stream::Unsupervised => (w.alpha, w.beta, w.gamma_iou),
        }
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let (a, b, g) = self.coefficients(w);
        a * self.cls() + b * self.reg() + g * self.iou_branch
    }

    pub fn check_finite(&self) -> Result<(), LossError> {
        for (term, value) in [
            ("rpn_cls", self.rpn_cls),
            ("rpn_reg", self.rpn_reg),
            ("roi_cls", self.roi_cls),
            ("roi_reg", self.roi_reg),
            ("iou_branch", self.iou_branch),
        ] {
            if !value.is_finite() {
                return Err(LossError::NonFinite { term, value });
            }
        }
        Ok(())
    }

    /// Element-wise sum; used to average breakdowns over a logging window.
    pub fn add(&mut self, other: &LossBreakdown) {
        self.rpn_cls += other.rpn_cls;
        self.rpn_reg += other.rpn_reg;
        self.roi_cls += other.roi_cls;
        self.roi_reg += other.roi_reg;
        self.iou_branch += other.iou_branch;
    }

    pub fn scale(&mut self, s: f64) {
        self.rpn_cls *= s;
        self.rpn_reg *= s;
        self.roi_cls *= s;
        self.roi_reg *= s;
        self.iou_branch *= s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchTarget {
    pub proposal_index: usize,
    pub t: u8,
    pub class_id: usize,
    pub included: bool,
}

/// Binary focal loss `-(1 - p_t)^gamma * ln(p_t)` with `p_t = q` for a
/// positive target and `1 - q` otherwise.
pub fn focal_loss(q: f64, positive: bool, gamma: f64) -> f64 {
    let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let p = if positive { q } else { 1.0 - q };
    -(1.0 - p).powf(gamma) * p.ln()
}

/// d/dq of [`focal_loss`]; zero inside the clamped region.
pub fn focal_loss_grad(q: f64, positive: bool, gamma: f64) -> f64 {
    if q <= PROB_CLAMP || q >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    let p = if positive { q } else { 1.0 - q };
    let one_m = 1.0 - p;
    let dp = if gamma == 0.0 {
        -1.0 / p
    } else {
        gamma * one_m.powf(gamma - 1.0) * p.ln() - one_m.powf(gamma) / p
    };
    if positive {
        dp
    } else {
        -dp
    }
}

pub fn binary_cross_entropy(q: f64, positive: bool) -> f64 {
    let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if positive {
        -q.ln()
    } else {
        -(1.0 - q).ln()
    }
}

/// Branch targets from proposal matches: foreground proposals are included,
/// and the target is positive iff the match IoU strictly exceeds `mu`.
///
/// `class_of` maps a ground-truth index to its class.
pub fn assign_branch_targets(
    matches: &[MatchResult],
    u: f64,
    mu: f64,
    class_of: impl Fn(usize) -> usize,
) -> Vec<BranchTarget> {
    let quality: Vec<f64> = matches.iter().map(|m| m.max_iou).collect();
    assign_branch_targets_with_quality(matches, &quality, u, mu, class_of)
}

/// Like [`assign_branch_targets`], but the quality IoU compared against `mu`
/// is supplied separately (the refined box's IoU with its matched object)
/// while inclusion still follows the proposal match.
pub fn assign_branch_targets_with_quality(
    matches: &[MatchResult],
    quality: &[f64],
    u: f64,
    mu: f64,
    class_of: impl Fn(usize) -> usize,
) -> Vec<BranchTarget> {
    assert_eq!(matches.len(), quality.len());
    matches
        .iter()
        .zip(quality)
        .map(|(m, &q)| {
            let included = m.gt_index.is_some() && m.max_iou >= u;
            BranchTarget {
                proposal_index: m.proposal_index,
                t: u8::from(included && q > mu),
                class_id: m.gt_index.map_or(0, &class_of),
                included,
            }
        })
        .collect()
}

/// Differentiable per-term nodes of one stream.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub roi_cls: Var,
    pub roi_reg: Var,
    pub iou_branch: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StreamLoss {
    pub breakdown: LossBreakdown,
    pub terms: TermVars,
}

impl StreamLoss {
    /// The stream's weighted total as a tape node.
    pub fn weighted(&self, tape: &mut Tape, w: &LossWeights) -> Var {
        let (a, b, g) = self.breakdown.coefficients(w);
        let t = &self.terms;
        tape.weighted_sum(&[
            (t.rpn_cls, a),
            (t.roi_cls, a),
            (t.rpn_reg, b),
            (t.roi_reg, b),
            (t.iou_branch, g),
        ])
    }
}

/// One image's head outputs together with its sampled targets.
pub struct ImageLossInput<'a> {
    pub outputs: &'a HeadOutputs,
    pub targets: &'a ImageTargets,
}

/// Supervised stream: every term unit-weighted.
pub fn supervised_loss(tape: &mut Tape, batch: &[ImageLossInput<'_>], weights: &LossWeights) -> StreamLoss {
    stream_loss(tape, batch, weights, Stream::Supervised)
}

/// Unsupervised stream against pseudo-label targets; the weighted total uses
/// `alpha`, `beta` and `gamma_iou`.
pub fn unsupervised_loss(tape: &mut Tape, batch: &[ImageLossInput<'_>], weights: &LossWeights) -> StreamLoss {
    stream_loss(tape, batch, weights, Stream::Unsupervised)
}

fn stream_loss(
    tape: &mut Tape,
    batch: &[ImageLossInput<'_>],
    weights: &LossWeights,
    stream: Stream,
) -> StreamLoss {
    let mut rpn_cls = Vec::new();
    let mut rpn_reg = Vec::new();
    let mut roi_cls = Vec::new();
    let mut roi_reg = Vec::new();
    let mut iou = Vec::new();
    let per_image = if batch.is_empty() { 0.0 } else { 1.0 / batch.len() as f64 };

    for item in batch {
        let out = item.outputs;
        let tg = item.targets;
        let hw = out.rpn_plane;

        let n_anchor = tg.anchors.len().max(1) as f64;
        let mut cls_items = Vec::with_capacity(tg.anchors.len());
        let mut reg_items = Vec::new();
        for a in &tg.anchors {
            let (plane_off, anchor) = (a.anchor_index % hw, a.anchor_index / hw);
            cls_items.push(LossItem {
                index: anchor * hw + plane_off,
                target: if a.foreground { 1.0 } else { 0.0 },
                weight: 1.0 / n_anchor,
            });
            if let Some(d) = a.deltas {
                for (k, t) in d.iter().enumerate() {
                    reg_items.push(LossItem {
                        index: (anchor * 4 + k) * hw + plane_off,
                        target: *t,
                        weight: 1.0 / n_anchor,
                    });
                }
            }
        }
        rpn_cls.push(tape.bce_logits(out.rpn_cls, cls_items));
        rpn_reg.push(tape.smooth_l1(out.rpn_reg, reg_items, SMOOTH_L1_BETA));

        let n_roi = tg.rois.len().max(1) as f64;
        let cls_items = tg
            .rois
            .iter()
            .enumerate()
            .map(|(i, r)| ClassItem { row: i, class: r.label, weight: 1.0 / n_roi })
            .collect();
        roi_cls.push(tape.softmax_ce(out.roi_logits, cls_items));
        let mut reg_items = Vec::new();
        for (i, r) in tg.rois.iter().enumerate() {
            if let Some(d) = r.deltas {
                for (k, t) in d.iter().enumerate() {
                    reg_items.push(LossItem { index: i * 4 + k, target: *t, weight: 1.0 / n_roi });
                }
            }
        }
        roi_reg.push(tape.smooth_l1(out.roi_deltas, reg_items, SMOOTH_L1_BETA));

        if let Some(q) = out.roi_q {
            let included: Vec<&BranchTarget> = tg.branch.iter().filter(|b| b.included).collect();
            let n_inc = included.len().max(1) as f64;
            let width = out.num_classes + 1;
            let items = included
                .iter()
                .map(|b| LossItem {
                    index: b.proposal_index * width + b.class_id,
                    target: f64::from(b.t),
                    weight: 1.0 / n_inc,
                })
                .collect();
            iou.push(tape.focal(q, items, weights.gamma_focal));
        }
    }

    let mut mean = |vars: &[Var]| -> Var {
        if vars.is_empty() {
            tape.constant(0.0)
        } else {
            let terms: Vec<(Var, f64)> = vars.iter().map(|&v| (v, per_image)).collect();
            tape.weighted_sum(&terms)
        }
    };
    let terms = TermVars {
        rpn_cls: mean(&rpn_cls),
        rpn_reg: mean(&rpn_reg),
        roi_cls: mean(&roi_cls),
        roi_reg: mean(&roi_reg),
        iou_branch: mean(&iou),
    };
    let breakdown = LossBreakdown {
        rpn_cls: tape.scalar(terms.rpn_cls),
        rpn_reg: tape.scalar(terms.rpn_reg),
        roi_cls: tape.scalar(terms.roi_cls),
        roi_reg: tape.scalar(terms.roi_reg),
        iou_branch: tape.scalar(terms.iou_branch),
        stream,
    };
    StreamLoss { breakdown, terms }
}

/// Share of each weighted term in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermShares {
    pub sup_cls: f64,
    pub sup_reg: f64,
    pub sup_iou: f64,
    pub unsup_cls: f64,
    pub unsup_reg: f64,
    pub unsup_iou: f64,
}

impl TermShares {
    pub fn sum(&self) -> f64 {
        self.sup_cls + self.sup_reg + self.sup_iou + self.unsup_cls + self.unsup_reg + self.unsup_iou
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    /// `None` when the total is zero.
    pub shares: Option<TermShares>,
}

/// Weighted terms `(sup_cls, sup_reg, sup_iou, unsup_cls, unsup_reg, unsup_iou)`.
pub fn weighted_terms(
    sup: &LossBreakdown,
    unsup: Option<&LossBreakdown>,
    w: &LossWeights,
) -> [f64; 6] {
    let (ua, ub, ug) = unsup.map_or((0.0, 0.0, 0.0), |u| {
        let (a, b, g) = u.coefficients(w);
        (a * u.cls(), b * u.reg(), g * u.iou_branch)
    });
    [sup.cls(), sup.reg(), sup.iou_branch, ua, ub, ug]
}

/// Supervised unit-weighted total plus the weighted unsupervised total.
/// During burn-up there is no unsupervised stream.
pub fn total_loss(
    sup: &LossBreakdown,
    unsup: Option<&LossBreakdown>,
    weights: &LossWeights,
) -> Result<TotalLoss, LossError> {
    sup.check_finite()?;
    if let Some(u) = unsup {
        u.check_finite()?;
    }
    let t = weighted_terms(sup, unsup, weights);
    let total: f64 = t.iter().sum();
    if !total.is_finite() {
        return Err(LossError::NonFinite { term: "total", value: total });
    }
    let shares = (total > 0.0).then(|| TermShares {
        sup_cls: t[0] / total,
        sup_reg: t[1] / total,
        sup_iou: t[2] / total,
        unsup_cls: t[3] / total,
        unsup_reg: t[4] / total,
        unsup_iou: t[5] / total,
    });
    Ok(TotalLoss { total, shares })
}
