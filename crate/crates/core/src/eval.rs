//! COCO-style average precision and the pseudo-label diagnostics: IoU
//! quality histograms, class-error concentration and loss-term shares.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_unchecked, BBox, ScoredBox};
use crate::trainer::{MetricsRecord, PseudoLabel};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Detections kept per image, highest score first.
pub const MAX_DETS: usize = 100;

const RECALL_POINTS: usize = 101;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{dets} detection lists for {gts} ground-truth lists")]
    LengthMismatch { dets: usize, gts: usize },
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("histogram holds no wrong-class pseudo-labels")]
    NoClassErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Per-class AP averaged over the thresholds; `None` for classes without
    /// ground truth.
    pub per_class: Vec<Option<f64>>,
}

impl APReport {
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>8}", "metric", "value");
        let _ = writeln!(s, "{:<10}{:>8.4}", "mAP", self.map);
        let _ = writeln!(s, "{:<10}{:>8.4}", "AP50", self.ap50);
        let _ = writeln!(s, "{:<10}{:>8.4}", "AP75", self.ap75);
        for (c, ap) in self.per_class.iter().enumerate() {
            match ap {
                Some(v) => {
                    let _ = writeln!(s, "{:<10}{:>8.4}", format!("class{c}"), v);
                }
                None => {
                    let _ = writeln!(s, "{:<10}{:>8}", format!("class{c}"), "n/a");
                }
            }
        }
        s
    }
}

/// Interpolated AP of one class at one IoU threshold, or `None` without
/// ground truth.
fn class_ap(dets: &[Vec<&ScoredBox>], gts: &[Vec<BBox>], thr: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    // (score, image, rank within image) so ties resolve deterministically.
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    let mut tp_by_image: Vec<Vec<bool>> = Vec::with_capacity(dets.len());
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        let mut taken = vec![false; g.len()];
        let mut tp = Vec::with_capacity(d.len());
        for (rank, det) in d.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, gb) in g.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou_unchecked(&det.bbox, gb);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            tp.push(best.is_some());
            all.push((det.score, img, rank));
        }
        tp_by_image.push(tp);
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut precision = Vec::with_capacity(all.len());
    let mut recall = Vec::with_capacity(all.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, img, rank) in &all {
        if tp_by_image[img][rank] {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Mean AP over classes (classes without ground truth excluded) at each
/// threshold, per class, and overall.
fn ap_at(
    dets: &[Vec<ScoredBox>],
    gts: &[Vec<(BBox, usize)>],
    num_classes: usize,
    thr: f64,
) -> (f64, Vec<Option<f64>>) {
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let d: Vec<Vec<&ScoredBox>> = dets
            .iter()
            .map(|img| {
                let mut v: Vec<&ScoredBox> = img.iter().collect();
                v.sort_by(|a, b| b.score.total_cmp(&a.score));
                v.truncate(MAX_DETS);
                v.retain(|s| s.class_id == c);
                v
            })
            .collect();
        let g: Vec<Vec<BBox>> =
            gts.iter().map(|img| img.iter().filter(|(_, k)| *k == c).map(|(b, _)| *b).collect()).collect();
        per_class.push(class_ap(&d, &g, thr));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (mean, per_class)
}

/// COCO-style evaluation: 101-point interpolated precision, greedy
/// score-ordered matching with each object matched at most once, per class
/// and then averaged. `mAP` averages over `iou_thresholds`; AP50 and AP75 are
/// always reported.
pub fn evaluate_ap(
    dets: &[Vec<ScoredBox>],
    gts: &[Vec<(BBox, usize)>],
    iou_thresholds: &[f64],
    num_classes: usize,
) -> Result<APReport, EvalError> {
    if dets.len() != gts.len() {
        return Err(EvalError::LengthMismatch { dets: dets.len(), gts: gts.len() });
    }
    let mut per_thr = Vec::with_capacity(iou_thresholds.len());
    let mut class_sum = vec![0.0; num_classes];
    let mut class_present = vec![false; num_classes];
    for &t in iou_thresholds {
        let (m, pc) = ap_at(dets, gts, num_classes, t);
        per_thr.push(m);
        for (c, v) in pc.iter().enumerate() {
            if let Some(v) = v {
                class_sum[c] += v;
                class_present[c] = true;
            }
        }
    }
    let lookup = |target: f64| {
        iou_thresholds
            .iter()
            .position(|&t| (t - target).abs() < 1e-9)
            .map_or_else(|| ap_at(dets, gts, num_classes, target).0, |i| per_thr[i])
    };
    let n_thr = iou_thresholds.len().max(1) as f64;
    Ok(APReport {
        map: if per_thr.is_empty() { 0.0 } else { per_thr.iter().sum::<f64>() / n_thr },
        ap50: lookup(0.5),
        ap75: lookup(0.75),
        per_class: class_sum.iter().zip(&class_present).map(|(s, &p)| p.then(|| s / n_thr)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub wrong_class: Vec<u64>,
    pub iteration: u64,
}

impl QualityHistogram {
    pub fn empty(bins: usize, iteration: u64) -> Self {
        let bins = bins.max(1);
        QualityHistogram {
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
            wrong_class: vec![0; bins],
            iteration,
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn total_wrong(&self) -> u64 {
        self.wrong_class.iter().sum()
    }

    /// Bin of an IoU value; 1.0 lands in the top bin.
    pub fn bin_of(&self, iou: f64) -> usize {
        ((iou * self.bins() as f64).floor() as usize).min(self.bins() - 1)
    }

    pub fn add(&mut self, iou: f64, wrong: bool) {
        let b = self.bin_of(iou);
        self.counts[b] += 1;
        if wrong {
            self.wrong_class[b] += 1;
        }
    }

    /// CSV with header `bin_low,bin_high,count,wrong_class_count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count,wrong_class_count\n");
        for i in 0..self.bins() {
            let _ = writeln!(s, "{:.2},{:.2},{},{}", self.edges[i], self.edges[i + 1], self.counts[i], self.wrong_class[i]);
        }
        s
    }
}

/// True IoU of a pseudo-box and whether its class disagrees with the object
/// it overlaps most. A box touching no object counts as a class error.
pub fn pseudo_quality(bbox: &BBox, class_id: usize, gts: &[(BBox, usize)]) -> (f64, bool) {
    let mut best: Option<(f64, usize)> = None;
    for (g, c) in gts {
        let v = iou_unchecked(bbox, g);
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, *c));
        }
    }
    match best {
        Some((v, c)) if v > 0.0 => (v, c != class_id),
        _ => (0.0, true),
    }
}

/// Bins every pseudo-label by its true IoU. `items` pairs each image's
/// pseudo-labels with that image's objects.
pub fn pseudo_quality_histogram(
    items: &[(&[PseudoLabel], &[(BBox, usize)])],
    bins: usize,
    iteration: u64,
) -> QualityHistogram {
    let mut h = QualityHistogram::empty(bins, iteration);
    for (pseudo, gts) in items {
        for p in pseudo.iter() {
            let (v, wrong) = pseudo_quality(&p.bbox, p.class_id, gts);
            h.add(v, wrong);
        }
    }
    h
}

/// `(fraction of pseudo-labels below split, fraction of class errors below
/// split)`. Bins count as below when their upper edge is at most `split`.
pub fn error_concentration(hist: &QualityHistogram, split_iou: f64) -> Result<(f64, f64), EvalError> {
    let total = hist.total();
    if total == 0 {
        return Err(EvalError::EmptyHistogram);
    }
    let wrong = hist.total_wrong();
    if wrong == 0 {
        return Err(EvalError::NoClassErrors);
    }
    let (mut below, mut below_wrong) = (0u64, 0u64);
    for i in 0..hist.bins() {
        if hist.edges[i + 1] <= split_iou + 1e-12 {
            below += hist.counts[i];
            below_wrong += hist.wrong_class[i];
        }
    }
    Ok((below as f64 / total as f64, below_wrong as f64 / wrong as f64))
}

pub const SHARE_NAMES: [&str; 6] = ["sup_cls", "sup_reg", "sup_iou", "unsup_cls", "unsup_reg", "unsup_iou"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShareRow {
    pub iteration: u64,
    /// In [`SHARE_NAMES`] order.
    pub shares: [f64; 6],
}

/// Share of each weighted term in the total, per record. Records with a zero
/// total have no defined shares and are skipped; their iterations are
/// returned separately.
pub fn loss_share_series(records: &[MetricsRecord]) -> (Vec<ShareRow>, Vec<u64>) {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in records {
        let total: f64 = r.weighted.iter().sum();
        if total > 0.0 && total.is_finite() {
            rows.push(ShareRow { iteration: r.iteration, shares: r.weighted.map(|v| v / total) });
        } else {
            skipped.push(r.iteration);
        }
    }
    (rows, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: usize) -> ScoredBox {
        ScoredBox { bbox: b(x1, y1, x2, y2), score, class_id }
    }

    /// Independent AP: enumerate every score cut-off, count matches from
    /// scratch at each cut-off, then take the best precision at or beyond
    /// each recall point.
    fn brute_force_ap(dets: &[Vec<ScoredBox>], gts: &[Vec<(BBox, usize)>], k: usize, thr: f64) -> f64 {
        let mut per_class = Vec::new();
        for c in 0..k {
            let n_gt = gts.iter().flatten().filter(|g| g.1 == c).count();
            if n_gt == 0 {
                continue;
            }
            let mut scores: Vec<f64> = dets.iter().flatten().filter(|d| d.class_id == c).map(|d| d.score).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            let mut curve = Vec::new();
            for &cut in &scores {
                let (mut tp, mut n) = (0, 0);
                for (d, g) in dets.iter().zip(gts) {
                    let mut mine: Vec<&ScoredBox> = d.iter().filter(|x| x.class_id == c).collect();
                    mine.sort_by(|a, b| b.score.total_cmp(&a.score));
                    let objs: Vec<BBox> = g.iter().filter(|x| x.1 == c).map(|x| x.0).collect();
                    let mut used = vec![false; objs.len()];
                    for x in mine.iter().filter(|x| x.score >= cut) {
                        n += 1;
                        let cand = (0..objs.len())
                            .filter(|&j| !used[j] && iou_unchecked(&x.bbox, &objs[j]) >= thr)
                            .max_by(|&a, &b| iou_unchecked(&x.bbox, &objs[a]).total_cmp(&iou_unchecked(&x.bbox, &objs[b])).then(b.cmp(&a)));
                        if let Some(j) = cand {
                            used[j] = true;
                            tp += 1;
                        }
                    }
                }
                curve.push((tp as f64 / n_gt as f64, tp as f64 / n as f64));
            }
            let mut s = 0.0;
            for i in 0..101 {
                let r = i as f64 / 100.0;
                s += curve.iter().filter(|(rc, _)| *rc >= r).map(|(_, p)| *p).fold(0.0, f64::max);
            }
            per_class.push(s / 101.0);
        }
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().sum::<f64>() / per_class.len() as f64
        }
    }

    #[test]
    fn single_match() {
        let gts = vec![vec![(b(0.0, 0.0, 10.0, 10.0), 0)]];
        let dets = vec![vec![det(0.0, 0.0, 10.0, 8.0, 0.9, 0)]];
        let r = evaluate_ap(&dets, &gts, &coco_thresholds(), 1).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 1.0);
        // IoU 0.8 passes thresholds 0.50..0.80 only.
        assert!((r.map - 0.7).abs() < 1e-12);
    }

    #[test]
    fn no_detections() {
        let gts = vec![vec![(b(0.0, 0.0, 10.0, 10.0), 0)], vec![(b(5.0, 5.0, 9.0, 9.0), 1)]];
        let r = evaluate_ap(&[vec![], vec![]], &gts, &coco_thresholds(), 2).unwrap();
        assert_eq!((r.map, r.ap50, r.ap75), (0.0, 0.0, 0.0));
    }

    #[test]
    fn tp_above_fp() {
        let gts = vec![vec![(b(0.0, 0.0, 10.0, 10.0), 0)]];
        let dets = vec![vec![det(0.0, 0.0, 10.0, 10.0, 0.9, 0), det(20.0, 20.0, 30.0, 30.0, 0.5, 0)]];
        let r = evaluate_ap(&dets, &gts, &[0.5], 1).unwrap();
        assert_eq!(r.ap50, 1.0);
        // FP ranked first: precision 1/2 at full recall.
        let dets = vec![vec![det(0.0, 0.0, 10.0, 10.0, 0.4, 0), det(20.0, 20.0, 30.0, 30.0, 0.5, 0)]];
        let r = evaluate_ap(&dets, &gts, &[0.5], 1).unwrap();
        assert!((r.ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_gt_classes_excluded() {
        let gts = vec![vec![(b(0.0, 0.0, 10.0, 10.0), 0)]];
        let dets = vec![vec![det(0.0, 0.0, 10.0, 10.0, 0.9, 0), det(20.0, 20.0, 30.0, 30.0, 0.9, 2)]];
        let r = evaluate_ap(&dets, &gts, &[0.5], 3).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0), None, None]);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = vec![vec![(b(0.0, 0.0, 10.0, 10.0), 0)]];
        let dets = vec![vec![det(0.0, 0.0, 10.0, 10.0, 0.9, 0), det(0.0, 0.0, 10.0, 9.0, 0.8, 0)]];
        let r = evaluate_ap(&dets, &gts, &[0.5], 1).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(brute_force_ap(&dets, &gts, 1, 0.5), 1.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0..20u32, 0..20u32, 1..12u32, 1..12u32)
            .prop_map(|(x, y, w, h)| b(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Vec<ScoredBox>>, Vec<Vec<(BBox, usize)>>)> {
        let img = (
            prop::collection::vec((arb_box(), 0..2usize), 0..=5),
            prop::collection::vec((arb_box(), 0..2usize), 0..=3),
        );
        prop::collection::vec(img, 1..=3).prop_map(|imgs| {
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            let mut k = 0;
            for (d, g) in imgs {
                dets.push(
                    d.into_iter()
                        .map(|(bbox, class_id)| {
                            k += 1;
                            // Distinct scores keep the ranking unambiguous.
                            ScoredBox { bbox, score: 1.0 - k as f64 * 0.031, class_id }
                        })
                        .collect(),
                );
                gts.push(g);
            }
            (dets, gts)
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((dets, gts) in arb_instance(), thr in prop::sample::select(vec![0.3, 0.5, 0.75])) {
            let r = evaluate_ap(&dets, &gts, &[thr], 2).unwrap();
            let oracle = brute_force_ap(&dets, &gts, 2, thr);
            prop_assert!((r.map - oracle).abs() < 1e-12, "{} vs {}", r.map, oracle);
        }

        #[test]
        fn invariant_under_monotone_score_transform((dets, gts) in arb_instance()) {
            let a = evaluate_ap(&dets, &gts, &coco_thresholds(), 2).unwrap();
            let warped: Vec<Vec<ScoredBox>> = dets
                .iter()
                .map(|d| d.iter().map(|s| ScoredBox { score: (3.0 * s.score).exp() / 40.0, ..*s }).collect())
                .collect();
            let b = evaluate_ap(&warped, &gts, &coco_thresholds(), 2).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ap_bounds((dets, gts) in arb_instance()) {
            let r = evaluate_ap(&dets, &gts, &coco_thresholds(), 2).unwrap();
            prop_assert!(r.map >= 0.0 && r.ap50 >= r.map - 1e-12 && r.ap50 <= 1.0);
        }
    }

    fn pl(bbox: BBox, class_id: usize) -> PseudoLabel {
        PseudoLabel { bbox, class_id, confidence: 0.9, q_iou: Some(0.9), source_iteration: 0 }
    }

    #[test]
    fn histogram_examples() {
        let gts = vec![(b(0.0, 0.0, 10.0, 10.0), 1)];
        let same = [pl(b(0.0, 0.0, 10.0, 10.0), 1)];
        let h = pseudo_quality_histogram(&[(&same, &gts)], 10, 0);
        assert_eq!(h.counts[9], 1);
        assert_eq!(h.total_wrong(), 0);

        let h = pseudo_quality_histogram(&[(&[], &gts)], 10, 0);
        assert_eq!(h.total(), 0);
    }

    #[test]
    fn histogram_hand_placed_fixture() {
        let gts = vec![(b(0.0, 0.0, 10.0, 10.0), 0), (b(20.0, 20.0, 30.0, 30.0), 1)];
        let pseudo = [
            pl(b(0.0, 0.0, 10.0, 10.0), 0),  // 1.0, right
            pl(b(0.0, 0.0, 10.0, 5.0), 0),   // 0.5, right
            pl(b(0.0, 0.0, 10.0, 2.0), 1),   // 0.2, wrong
            pl(b(20.0, 20.0, 30.0, 27.0), 1), // 0.7, right
            pl(b(20.0, 20.0, 30.0, 29.0), 2), // 0.9, wrong
            pl(b(40.0, 40.0, 50.0, 50.0), 0), // 0.0, no object
        ];
        let h = pseudo_quality_histogram(&[(&pseudo, &gts)], 10, 7);
        assert_eq!(h.counts, vec![1, 0, 1, 0, 0, 1, 0, 1, 0, 2]);
        assert_eq!(h.wrong_class, vec![1, 0, 1, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(h.total(), 6);
        assert_eq!(h.iteration, 7);
        let (boxes, errors) = error_concentration(&h, 0.6).unwrap();
        assert!((boxes - 3.0 / 6.0).abs() < 1e-12);
        assert!((errors - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn concentration_edge_cases() {
        let mut h = QualityHistogram::empty(10, 0);
        assert_eq!(error_concentration(&h, 0.6), Err(EvalError::EmptyHistogram));
        h.add(0.1, true);
        h.add(0.3, false);
        assert_eq!(error_concentration(&h, 0.6).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn histogram_csv_layout() {
        let mut h = QualityHistogram::empty(2, 0);
        h.add(0.7, true);
        assert_eq!(h.to_csv(), "bin_low,bin_high,count,wrong_class_count\n0.00,0.50,0,0\n0.50,1.00,1,1\n");
    }

    fn record(weighted: [f64; 6]) -> MetricsRecord {
        MetricsRecord { iteration: 1, weighted, ..MetricsRecord::default() }
    }

    #[test]
    fn share_examples() {
        let (rows, skipped) = loss_share_series(&[record([0.0, 0.0, 0.0, 2.0, 0.0, 0.0])]);
        assert_eq!(rows[0].shares[3], 1.0);
        assert!(skipped.is_empty());

        // equal raw terms under (4, 1, 1)
        let (rows, _) = loss_share_series(&[record([0.0, 0.0, 0.0, 4.0 * 0.3, 0.3, 0.3])]);
        let s = rows[0].shares;
        assert!((s[3] - 2.0 / 3.0).abs() < 1e-12 && (s[4] - 1.0 / 6.0).abs() < 1e-12 && (s[5] - 1.0 / 6.0).abs() < 1e-12);

        let (rows, skipped) = loss_share_series(&[record([0.0; 6])]);
        assert!(rows.is_empty());
        assert_eq!(skipped, vec![1]);
    }

    proptest! {
        #[test]
        fn shares_sum_to_one(terms in prop::collection::vec(prop::array::uniform6(0.0..5.0f64), 1..20)) {
            let recs: Vec<MetricsRecord> = terms.into_iter().map(record).collect();
            let (rows, _) = loss_share_series(&recs);
            for r in rows {
                prop_assert!((r.shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
