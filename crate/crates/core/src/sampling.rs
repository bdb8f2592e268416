//! Training-target construction for both detector stages: anchor labeling
//! for the proposal stage and RoI sampling for the box head.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{encode_deltas, iou_unchecked, match_to_gt, BBox, MatchResult};
use crate::losses::BranchTarget;
use crate::model::BOX_DELTA_SCALE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            roi_batch: 32,
            roi_positive_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub anchor_index: usize,
    pub foreground: bool,
    /// Scaled regression target, foreground only.
    pub deltas: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub bbox: BBox,
    /// Class id, or `num_classes` for background.
    pub label: usize,
    pub gt_index: Option<usize>,
    /// Scaled regression target, foreground only.
    pub deltas: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Default)]
pub struct ImageTargets {
    pub anchors: Vec<AnchorTarget>,
    pub rois: Vec<RoiTarget>,
    /// One entry per sampled RoI, in RoI order.
    pub branch: Vec<BranchTarget>,
    /// Proposal matches behind `rois`, in RoI order.
    pub matches: Vec<MatchResult>,
}

pub fn scaled_deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    let d = encode_deltas(from, to).expect("valid boxes").as_array();
    std::array::from_fn(|k| d[k] * BOX_DELTA_SCALE[k])
}

/// Labels anchors against ground truth and samples a fixed-size minibatch.
///
/// An anchor is foreground when its best IoU reaches `rpn_fg_iou` or when it
/// is (one of) the best anchors for some object; background below
/// `rpn_bg_iou`; ignored otherwise.
pub fn label_anchors<R: Rng>(
    anchors: &[BBox],
    gts: &[(BBox, usize)],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Vec<AnchorTarget> {
    let mut best_gt: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
    let mut best_for_gt = vec![0.0f64; gts.len()];
    let mut ious = vec![0.0; anchors.len() * gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, (g, _)) in gts.iter().enumerate() {
            let v = iou_unchecked(a, g);
            ious[i * gts.len() + j] = v;
            if best_gt[i].is_none_or(|(_, b)| v > b) {
                best_gt[i] = Some((j, v));
            }
            best_for_gt[j] = best_for_gt[j].max(v);
        }
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, best) in best_gt.iter().enumerate() {
        let (j, v) = best.unwrap_or((0, 0.0));
        let low_quality_best = (0..gts.len())
            .any(|k| best_for_gt[k] > 0.0 && ious[i * gts.len() + k] == best_for_gt[k]);
        if !gts.is_empty() && (v >= cfg.rpn_fg_iou || low_quality_best) {
            let k = if v >= cfg.rpn_fg_iou {
                j
            } else {
                (0..gts.len()).find(|&k| ious[i * gts.len() + k] == best_for_gt[k]).unwrap_or(j)
            };
            fg.push((i, k));
        } else if v < cfg.rpn_bg_iou {
            bg.push(i);
        }
    }
    let max_fg = (cfg.rpn_batch as f64 * cfg.rpn_positive_fraction) as usize;
    fg.shuffle(rng);
    fg.truncate(max_fg);
    bg.shuffle(rng);
    bg.truncate(cfg.rpn_batch - fg.len());

    let mut out: Vec<AnchorTarget> = fg
        .into_iter()
        .map(|(i, k)| AnchorTarget {
            anchor_index: i,
            foreground: true,
            deltas: Some(scaled_deltas(&anchors[i], &gts[k].0)),
        })
        .chain(bg.into_iter().map(|i| AnchorTarget { anchor_index: i, foreground: false, deltas: None }))
        .collect();
    out.sort_by_key(|a| a.anchor_index);
    out
}

/// Samples RoIs from `proposals` plus the ground-truth boxes themselves.
/// Foreground means a best IoU of at least `u`.
pub fn sample_rois<R: Rng>(
    proposals: &[BBox],
    gts: &[(BBox, usize)],
    num_classes: usize,
    u: f64,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> (Vec<RoiTarget>, Vec<MatchResult>) {
    let candidates: Vec<BBox> = proposals.iter().copied().chain(gts.iter().map(|g| g.0)).collect();
    let matches = match_to_gt(&candidates, gts, u);
    let mut fg: Vec<usize> = matches.iter().filter(|m| m.is_foreground).map(|m| m.proposal_index).collect();
    let mut bg: Vec<usize> = matches.iter().filter(|m| !m.is_foreground).map(|m| m.proposal_index).collect();
    let max_fg = (cfg.roi_batch as f64 * cfg.roi_positive_fraction) as usize;
    fg.shuffle(rng);
    fg.truncate(max_fg);
    bg.shuffle(rng);
    bg.truncate(cfg.roi_batch - fg.len());
    fg.sort_unstable();
    bg.sort_unstable();

    let mut rois = Vec::with_capacity(fg.len() + bg.len());
    let mut picked = Vec::with_capacity(fg.len() + bg.len());
    for (k, &i) in fg.iter().chain(bg.iter()).enumerate() {
        let m = matches[i];
        let bbox = candidates[i];
        let target = if m.is_foreground {
            let g = m.gt_index.expect("foreground has a match");
            RoiTarget {
                bbox,
                label: gts[g].1,
                gt_index: Some(g),
                deltas: Some(scaled_deltas(&bbox, &gts[g].0)),
            }
        } else {
            RoiTarget { bbox, label: num_classes, gt_index: m.gt_index, deltas: None }
        };
        rois.push(target);
        picked.push(MatchResult { proposal_index: k, ..m });
    }
    (rois, picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn every_object_gets_an_anchor() {
        let anchors = vec![b(0.0, 0.0, 8.0, 8.0), b(30.0, 30.0, 40.0, 40.0), b(0.0, 40.0, 10.0, 50.0)];
        let gts = vec![(b(31.0, 31.0, 45.0, 45.0), 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = label_anchors(&anchors, &gts, &SamplerConfig::default(), &mut rng);
        let fg: Vec<_> = t.iter().filter(|a| a.foreground).collect();
        assert_eq!(fg.len(), 1);
        assert_eq!(fg[0].anchor_index, 1);
        assert_eq!(t.iter().filter(|a| !a.foreground).count(), 2);
    }

    #[test]
    fn no_objects_means_all_background() {
        let anchors = vec![b(0.0, 0.0, 8.0, 8.0), b(30.0, 30.0, 40.0, 40.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = label_anchors(&anchors, &[], &SamplerConfig::default(), &mut rng);
        assert!(t.iter().all(|a| !a.foreground));
        let (rois, m) = sample_rois(&anchors, &[], 3, 0.5, &SamplerConfig::default(), &mut rng);
        assert!(rois.iter().all(|r| r.label == 3 && r.deltas.is_none()));
        assert_eq!(m.len(), rois.len());
    }

    #[test]
    fn rois_include_ground_truth_and_respect_budget() {
        let props: Vec<BBox> = (0..60).map(|i| b(i as f64 * 0.5, 0.0, i as f64 * 0.5 + 12.0, 12.0)).collect();
        let gts = vec![(b(4.0, 0.0, 16.0, 12.0), 2)];
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (rois, matches) = sample_rois(&props, &gts, 3, 0.5, &cfg, &mut rng);
        assert!(rois.len() <= cfg.roi_batch);
        let n_fg = rois.iter().filter(|r| r.label == 2).count();
        assert!(n_fg >= 1 && n_fg <= 8);
        for (r, m) in rois.iter().zip(&matches) {
            assert_eq!(m.is_foreground, r.label == 2);
        }
    }
}
