//! Detection scoring (interpolated AP over IoU thresholds) and frame-level
//! error rates.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, GroundTruth};
use crate::error::{invalid, Result};

/// Temporal IoU of two `[start, end]` intervals; 0 when disjoint or degenerate.
pub fn iou_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One scored detection of a class.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDetection {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// A ground-truth interval of a class.
#[derive(Clone, Debug, PartialEq)]
pub struct GtInterval {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
}

/// Descending score, then earlier start, then video id.
pub fn rank_order(a: &ScoredDetection, b: &ScoredDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then_with(|| a.video_id.cmp(&b.video_id))
}

/// Marks each ranked detection as a true positive or not. A detection takes
/// the unmatched ground truth of its video with the highest IoU at or above
/// `iou_thr`.
pub fn match_detections(ranked: &[ScoredDetection], gts: &[GtInterval], iou_thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if taken[j] || gt.video_id != d.video_id {
                    continue;
                }
                let iou = iou_1d((d.start, d.end), (gt.start, gt.end));
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            best.is_some()
        })
        .collect()
}

/// Area under the precision-recall curve with the monotone precision
/// envelope, as in the ActivityNet detection toolkit.
pub fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut p: Vec<f64> = std::iter::once(0.0)
        .chain(precision.iter().copied())
        .chain([0.0])
        .collect();
    let r: Vec<f64> = std::iter::once(0.0)
        .chain(recall.iter().copied())
        .chain([1.0])
        .collect();
    for i in (0..p.len() - 1).rev() {
        p[i] = p[i].max(p[i + 1]);
    }
    (1..r.len())
        .filter(|&i| r[i] != r[i - 1])
        .map(|i| (r[i] - r[i - 1]) * p[i])
        .sum()
}

/// AP of one class. `None` when the class has no ground truth.
pub fn average_precision(
    detections: &[ScoredDetection],
    gts: &[GtInterval],
    iou_thr: f64,
) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    if detections.is_empty() {
        return Some(0.0);
    }
    let mut ranked = detections.to_vec();
    ranked.sort_by(rank_order);
    let hits = match_detections(&ranked, gts, iou_thr);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for hit in hits {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        precision.push(tp / (tp + fp));
        recall.push(tp / gts.len() as f64);
    }
    Some(interpolated_ap(&precision, &recall))
}

/// Detection as stored in the interchange JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub score: f64,
    pub segment: [f64; 2],
}

/// `{"results": {video_id: [detection, …]}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub results: BTreeMap<String, Vec<Detection>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_name: String,
    /// AP per IoU threshold, `None` when the class has no ground truth.
    pub ap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ious: Vec<f64>,
    pub map: Vec<f64>,
    pub average: f64,
    pub per_class: Vec<ClassAp>,
    pub frame_fpr: Option<f64>,
    pub frame_fnr: Option<f64>,
}

pub const THUMOS_IOUS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const ANET_IOUS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Groups ground truth per class.
pub fn class_ground_truth(manifest: &DatasetManifest) -> Vec<Vec<GtInterval>> {
    let mut out = vec![Vec::new(); manifest.num_classes()];
    for e in &manifest.entries {
        for gt in &e.ground_truth {
            out[gt.class_id].push(GtInterval {
                video_id: e.id.clone(),
                start: gt.start,
                end: gt.end,
            });
        }
    }
    out
}

/// Groups detections per class. Unknown labels and videos outside the manifest are errors.
pub fn class_detections(
    file: &DetectionFile,
    manifest: &DatasetManifest,
) -> Result<Vec<Vec<ScoredDetection>>> {
    let mut out = vec![Vec::new(); manifest.num_classes()];
    for (video, dets) in &file.results {
        if !manifest.entries.iter().any(|e| &e.id == video) {
            return Err(invalid!("detections for unknown video {video}"));
        }
        for d in dets {
            let c = manifest.class_id(&d.label).ok_or_else(|| {
                invalid!(
                    "unknown class label {:?} in detections for {video}",
                    d.label
                )
            })?;
            if !(d.segment[0] <= d.segment[1]) || !d.score.is_finite() {
                return Err(invalid!("malformed detection in {video}: {d:?}"));
            }
            out[c].push(ScoredDetection {
                video_id: video.clone(),
                start: d.segment[0],
                end: d.segment[1],
                score: d.score,
            });
        }
    }
    Ok(out)
}

/// mAP at each IoU threshold, averaged over classes that have ground truth.
pub fn map_at_ious(
    file: &DetectionFile,
    manifest: &DatasetManifest,
    ious: &[f64],
) -> Result<EvalReport> {
    if ious.is_empty() {
        return Err(invalid!("empty IoU threshold list"));
    }
    let gts = class_ground_truth(manifest);
    if gts.iter().all(Vec::is_empty) {
        return Err(invalid!("the manifest has no ground-truth intervals"));
    }
    let dets = class_detections(file, manifest)?;
    let per_class: Vec<ClassAp> = manifest
        .class_names
        .iter()
        .enumerate()
        .map(|(c, name)| ClassAp {
            class_name: name.clone(),
            ap: ious
                .iter()
                .map(|&t| average_precision(&dets[c], &gts[c], t))
                .collect(),
        })
        .collect();
    let map: Vec<f64> = (0..ious.len())
        .map(|i| {
            let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap[i]).collect();
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect();
    let average = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        ious: ious.to_vec(),
        map,
        average,
        per_class,
        frame_fpr: None,
        frame_fnr: None,
    })
}

/// Per-segment action occupancy: segment `t` covers `[tΔ, (t+1)Δ)` and is
/// occupied when its midpoint lies inside any ground-truth interval.
pub fn occupancy(gts: &[GroundTruth], len: usize, seconds_per_segment: f64) -> Vec<bool> {
    (0..len)
        .map(|t| {
            let mid = (t as f64 + 0.5) * seconds_per_segment;
            gts.iter().any(|g| g.start <= mid && mid < g.end)
        })
        .collect()
}

/// Pooled confusion counts of thresholded attention against occupancy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, att: &[f64], gt: &[bool], threshold: f64) {
        for (&a, &g) in att.iter().zip(gt) {
            match (a >= threshold, g) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, false) => self.tn += 1,
                (false, true) => self.fn_ += 1,
            }
        }
    }

    /// `FP / (FP + TN)`, 0 without negatives.
    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    /// `FN / (FN + TP)`, 0 without positives.
    pub fn fnr(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Pooled `(FPR, FNR)` over videos given as `(attention, occupancy)` pairs.
pub fn frame_metrics<'a>(
    videos: impl IntoIterator<Item = (&'a [f64], &'a [bool])>,
    threshold: f64,
) -> (f64, f64) {
    let mut c = Confusion::default();
    for (att, gt) in videos {
        c.add(att, gt, threshold);
    }
    (c.fpr(), c.fnr())
}

impl EvalReport {
    /// Fixed-width table: one column per IoU plus the average, then per-class AP rows.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16}", "mAP@IoU");
        for t in &self.ious {
            s += &format!("{:>8.2}", t);
        }
        s += &format!("{:>8}\n{:<16}", "Avg", "all");
        for m in &self.map {
            s += &format!("{:>8.2}", 100.0 * m);
        }
        s += &format!("{:>8.2}\n", 100.0 * self.average);
        for c in &self.per_class {
            s += &format!("{:<16}", truncate(&c.class_name, 15));
            for ap in &c.ap {
                match ap {
                    Some(v) => s += &format!("{:>8.2}", 100.0 * v),
                    None => s += &format!("{:>8}", "-"),
                }
            }
            s.push('\n');
        }
        if let (Some(fpr), Some(fnr)) = (self.frame_fpr, self.frame_fnr) {
            s += &format!("frame FPR {:.2}%  FNR {:.2}%\n", 100.0 * fpr, 100.0 * fnr);
        }
        s
    }

    /// `iou,map` rows followed by an `avg` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iou,map\n");
        for (t, m) in self.ious.iter().zip(&self.map) {
            s += &format!("{t},{m}\n");
        }
        s += &format!("avg,{}\n", self.average);
        s
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(v: &str, s: f64, e: f64, score: f64) -> ScoredDetection {
        ScoredDetection {
            video_id: v.into(),
            start: s,
            end: e,
            score,
        }
    }

    fn gt(v: &str, s: f64, e: f64) -> GtInterval {
        GtInterval {
            video_id: v.into(),
            start: s,
            end: e,
        }
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou_1d((1.0, 4.0), (1.0, 4.0)), 1.0);
        assert_eq!(iou_1d((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert_eq!(iou_1d((0.0, 1.0), (1.0, 3.0)), 0.0);
        assert!((iou_1d((0.0, 2.0), (1.0, 3.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ap_cases() {
        let g = [gt("a", 0.0, 2.0)];
        assert_eq!(
            average_precision(&[det("a", 0.0, 2.0, 0.9)], &g, 0.5),
            Some(1.0)
        );
        assert_eq!(average_precision(&[], &g, 0.5), Some(0.0));
        assert_eq!(
            average_precision(&[det("a", 0.0, 2.0, 0.9)], &[], 0.5),
            None
        );
        // Wrong video never matches.
        assert_eq!(
            average_precision(&[det("b", 0.0, 2.0, 0.9)], &g, 0.5),
            Some(0.0)
        );
    }

    #[test]
    fn three_detections_two_ground_truths() {
        // Ranked: hit, miss, hit → precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
        // Envelope: 1 on (0, 1/2], 2/3 on (1/2, 1] → AP = 1/2 + 1/3.
        let g = [gt("a", 0.0, 2.0), gt("a", 5.0, 7.0)];
        let d = [
            det("a", 0.0, 2.0, 0.9),
            det("a", 10.0, 12.0, 0.8),
            det("a", 5.0, 7.2, 0.7),
        ];
        let ap = average_precision(&d, &g, 0.5).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = [gt("a", 0.0, 2.0)];
        let d = [det("a", 0.0, 2.0, 0.9), det("a", 0.0, 2.0, 0.8)];
        let mut ranked = d.to_vec();
        ranked.sort_by(rank_order);
        assert_eq!(match_detections(&ranked, &g, 0.5), vec![true, false]);
        assert_eq!(average_precision(&d, &g, 0.5), Some(1.0));
    }

    #[test]
    fn greedy_takes_highest_iou_ground_truth() {
        let g = [gt("a", 0.0, 4.0), gt("a", 1.0, 3.0)];
        let ranked = [det("a", 1.0, 3.0, 0.9), det("a", 0.0, 4.0, 0.5)];
        assert_eq!(match_detections(&ranked, &g, 0.4), vec![true, true]);
    }

    #[test]
    fn ties_rank_by_start_then_video() {
        let mut d = [
            det("b", 1.0, 2.0, 0.5),
            det("a", 1.0, 2.0, 0.5),
            det("a", 0.0, 2.0, 0.5),
        ];
        d.sort_by(rank_order);
        assert_eq!(d[0].start, 0.0);
        assert_eq!(d[1].video_id, "a");
        assert_eq!(d[2].video_id, "b");
    }

    #[test]
    fn frame_metric_cases() {
        let gt = [
            true, true, true, true, false, false, false, false, false, false,
        ];
        let pred = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let (fpr, fnr) = frame_metrics([(&pred[..], &gt[..])], 0.5);
        assert!((fpr - 2.0 / 6.0).abs() < 1e-15);
        assert!((fnr - 2.0 / 4.0).abs() < 1e-15);
        let exact: Vec<f64> = gt.iter().map(|&g| if g { 0.9 } else { 0.1 }).collect();
        assert_eq!(frame_metrics([(&exact[..], &gt[..])], 0.5), (0.0, 0.0));
        let inverted: Vec<f64> = exact.iter().map(|a| 1.0 - a).collect();
        assert_eq!(frame_metrics([(&inverted[..], &gt[..])], 0.5), (1.0, 1.0));
        // Threshold is inclusive.
        assert_eq!(frame_metrics([(&[0.5][..], &[true][..])], 0.5), (0.0, 0.0));
    }

    #[test]
    fn occupancy_uses_segment_midpoints() {
        let gts = [GroundTruth {
            class_id: 0,
            start: 0.64,
            end: 1.92,
        }];
        assert_eq!(occupancy(&gts, 4, 0.64), vec![false, true, true, false]);
    }

    #[test]
    fn envelope_area() {
        assert_eq!(interpolated_ap(&[1.0], &[1.0]), 1.0);
        assert!((interpolated_ap(&[0.0, 0.5], &[0.0, 1.0]) - 0.5).abs() < 1e-15);
    }
}
