//! Attention thresholding, outer-inner scoring and soft-NMS.

use std::collections::BTreeSet;

use crate::error::{invalid, Result};
use crate::evaluation::{iou_1d, Detection};
use crate::framework::VideoInference;
use crate::training::TrainConfig;

/// Confidences below this are dropped after soft-NMS.
pub const MIN_CONFIDENCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub class_threshold: f64,
    pub thresholds: Vec<f64>,
    pub inflation: f64,
    pub nms_sigma: f64,
    pub min_len: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            class_threshold: 0.2,
            thresholds: (0..=16).map(|i| (10.0 + 5.0 * i as f64) / 100.0).collect(),
            inflation: 0.25,
            nms_sigma: 0.3,
            min_len: 2,
        }
    }
}

impl InferenceConfig {
    pub fn from_train(c: &TrainConfig) -> Self {
        Self {
            class_threshold: c.class_threshold,
            thresholds: c.attention_thresholds(),
            inflation: c.inflation,
            nms_sigma: c.nms_sigma,
            min_len: c.min_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(invalid!("attention threshold set is empty"));
        }
        for &t in self.thresholds.iter().chain([&self.class_threshold]) {
            if !(t > 0.0 && t <= 1.0) {
                return Err(invalid!("threshold {t} outside (0, 1]"));
            }
        }
        if !(self.inflation >= 0.0) {
            return Err(invalid!("inflation must be non-negative"));
        }
        if !(self.nms_sigma > 0.0) {
            return Err(invalid!("soft-NMS sigma must be positive"));
        }
        Ok(())
    }
}

/// A scored action interval in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub class_id: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub confidence: f64,
}

/// Classes whose score (background excluded, last entry) exceeds `threshold`,
/// or the best non-background class when none does.
pub fn select_classes(p_bar: &[f64], threshold: f64) -> Vec<usize> {
    let scores = &p_bar[..p_bar.len().saturating_sub(1)];
    let picked: Vec<usize> = (0..scores.len())
        .filter(|&c| scores[c] > threshold)
        .collect();
    if !picked.is_empty() || scores.is_empty() {
        return picked;
    }
    let best = (1..scores.len()).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
    vec![best]
}

/// Maximal runs `[s, e]` (inclusive) with `att[t] ≥ threshold`, at least `min_len` long.
pub fn threshold_runs(att: &[f64], threshold: f64, min_len: usize) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (t, &a) in att.iter().chain([&f64::NEG_INFINITY]).enumerate() {
        match (a >= threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if t - s >= min_len.max(1) {
                    runs.push((s, t - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    runs
}

/// Union of the runs over every threshold, sorted and without duplicates.
pub fn generate_proposals(att: &[f64], thresholds: &[f64], min_len: usize) -> Vec<(usize, usize)> {
    let set: BTreeSet<(usize, usize)> = thresholds
        .iter()
        .flat_map(|&th| threshold_runs(att, th, min_len))
        .collect();
    set.into_iter().collect()
}

/// Mean of `column` inside `[s, e]` minus the mean over the flanks of length
/// `max(1, round(inflation·len))` on both sides, clipped to the video.
pub fn outer_inner_score(column: &[f64], s: usize, e: usize, inflation: f64) -> f64 {
    let inner = column[s..=e].iter().sum::<f64>() / (e - s + 1) as f64;
    let l = ((inflation * (e - s + 1) as f64).round() as usize).max(1);
    let left = &column[s.saturating_sub(l)..s];
    let right = &column[(e + 1).min(column.len())..(e + 1 + l).min(column.len())];
    let n = left.len() + right.len();
    let outer = if n == 0 {
        0.0
    } else {
        left.iter().chain(right).sum::<f64>() / n as f64
    };
    inner - outer
}

/// Greedy soft-NMS over one class: repeatedly emit the most confident
/// remaining proposal and decay the rest by `exp(−IoU²/sigma)`. Output is in
/// emission order, without entries below [`MIN_CONFIDENCE`].
pub fn soft_nms(proposals: Vec<Proposal>, sigma: f64) -> Vec<Proposal> {
    let mut pool = proposals;
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = (1..pool.len()).fold(0, |b, i| {
            if pool[i].confidence > pool[b].confidence {
                i
            } else {
                b
            }
        });
        let top = pool.remove(best);
        for p in &mut pool {
            let iou = iou_1d((top.start_s, top.end_s), (p.start_s, p.end_s));
            p.confidence *= (-iou * iou / sigma).exp();
        }
        out.push(top);
    }
    out.retain(|p| p.confidence >= MIN_CONFIDENCE);
    out
}

/// Segment index range `[s, e]` to seconds `[sΔ, (e+1)Δ]`.
pub fn to_seconds(s: usize, e: usize, seconds_per_segment: f64) -> (f64, f64) {
    (
        s as f64 * seconds_per_segment,
        (e + 1) as f64 * seconds_per_segment,
    )
}

/// Proposals of one video: extents from the attention, confidence from the
/// suppressed class column of `S̄`.
pub fn localize(
    inf: &VideoInference,
    config: &InferenceConfig,
    seconds_per_segment: f64,
) -> Vec<Proposal> {
    let segments = generate_proposals(&inf.att, &config.thresholds, config.min_len);
    let mut out = Vec::new();
    for c in select_classes(&inf.p_bar, config.class_threshold) {
        let column: Vec<f64> = inf.s_bar.column(c).to_vec();
        let scored = segments
            .iter()
            .map(|&(s, e)| {
                let (start_s, end_s) = to_seconds(s, e, seconds_per_segment);
                Proposal {
                    class_id: c,
                    start_s,
                    end_s,
                    confidence: outer_inner_score(&column, s, e, config.inflation),
                }
            })
            .collect();
        out.extend(soft_nms(scored, config.nms_sigma));
    }
    out
}

pub fn to_detections(proposals: &[Proposal], class_names: &[String]) -> Vec<Detection> {
    proposals
        .iter()
        .map(|p| Detection {
            label: class_names[p.class_id].clone(),
            score: p.confidence,
            segment: [p.start_s, p.end_s],
        })
        .collect()
}
