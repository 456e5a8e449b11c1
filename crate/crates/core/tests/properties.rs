use proptest::prelude::*;

use wtal::evaluation::{average_precision, iou_1d, GtInterval, ScoredDetection};
use wtal::localization::{generate_proposals, soft_nms, threshold_runs, Proposal};
use wtal::tsm::{topk_count, topk_pool};

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (0u32..40, 1u32..12).prop_map(|(s, l)| (s as f64 * 0.5, (s + l) as f64 * 0.5))
}

fn detections() -> impl Strategy<Value = Vec<ScoredDetection>> {
    prop::collection::vec((0usize..2, interval(), 1u32..20), 0..12).prop_map(|v| {
        v.into_iter()
            .map(|(vid, (start, end), s)| ScoredDetection {
                video_id: format!("v{vid}"),
                start,
                end,
                score: s as f64 / 20.0,
            })
            .collect()
    })
}

fn ground_truth() -> impl Strategy<Value = Vec<GtInterval>> {
    prop::collection::vec((0usize..2, interval()), 1..6).prop_map(|v| {
        v.into_iter()
            .map(|(vid, (start, end))| GtInterval {
                video_id: format!("v{vid}"),
                start,
                end,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn ap_is_bounded(dets in detections(), gts in ground_truth(), thr in 0.1f64..0.95) {
        let ap = average_precision(&dets, &gts, thr).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn ap_ignores_monotone_score_rescaling(dets in detections(), gts in ground_truth(), a in 0.1f64..10.0, b in -1.0f64..1.0) {
        let scaled: Vec<ScoredDetection> = dets
            .iter()
            .map(|d| ScoredDetection { score: a * d.score + b, ..d.clone() })
            .collect();
        prop_assert_eq!(average_precision(&dets, &gts, 0.5), average_precision(&scaled, &gts, 0.5));
    }

    #[test]
    fn dropping_unmatchable_detections_never_lowers_ap(dets in detections(), gts in ground_truth(), thr in 0.1f64..0.95) {
        let kept: Vec<ScoredDetection> = dets
            .iter()
            .filter(|d| gts.iter().any(|g| g.video_id == d.video_id && iou_1d((d.start, d.end), (g.start, g.end)) >= thr))
            .cloned()
            .collect();
        let full = average_precision(&dets, &gts, thr).unwrap();
        let pruned = average_precision(&kept, &gts, thr).unwrap();
        prop_assert!(pruned >= full - 1e-12, "{pruned} < {full}");
    }

    #[test]
    fn soft_nms_never_raises_confidence(items in prop::collection::vec((interval(), 0.0f64..1.0), 0..10), sigma in 0.05f64..2.0) {
        let proposals: Vec<Proposal> = items
            .iter()
            .map(|&((s, e), c)| Proposal { class_id: 0, start_s: s, end_s: e, confidence: c })
            .collect();
        let kept = soft_nms(proposals.clone(), sigma);
        prop_assert!(kept.len() <= proposals.len());
        for k in &kept {
            let original = proposals
                .iter()
                .filter(|p| p.start_s == k.start_s && p.end_s == k.end_s)
                .map(|p| p.confidence)
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(k.confidence <= original);
            prop_assert!(k.confidence >= 1e-4);
        }
    }

    #[test]
    fn proposals_ignore_threshold_order(att in prop::collection::vec(0.0f64..1.0, 1..40), mut thresholds in prop::collection::vec(0.05f64..0.95, 1..8)) {
        let a = generate_proposals(&att, &thresholds, 2);
        thresholds.reverse();
        prop_assert_eq!(&a, &generate_proposals(&att, &thresholds, 2));
        thresholds.sort_by(f64::total_cmp);
        prop_assert_eq!(&a, &generate_proposals(&att, &thresholds, 2));
    }

    #[test]
    fn runs_match_a_scan(att in prop::collection::vec(0.0f64..1.0, 0..40), thr in 0.05f64..0.95, min_len in 1usize..4) {
        let above: Vec<bool> = att.iter().map(|&a| a >= thr).collect();
        let mut expected = Vec::new();
        let mut t = 0;
        while t < above.len() {
            if above[t] {
                let s = t;
                while t < above.len() && above[t] {
                    t += 1;
                }
                if t - s >= min_len {
                    expected.push((s, t - 1));
                }
            } else {
                t += 1;
            }
        }
        prop_assert_eq!(threshold_runs(&att, thr, min_len), expected);
    }

    #[test]
    fn topk_pool_between_mean_and_max(values in prop::collection::vec(-5.0f64..5.0, 1..64), divisor in 1usize..16) {
        let k = topk_count(values.len(), divisor);
        prop_assert!(k >= 1 && k <= values.len());
        let pooled = topk_pool(&values, k).unwrap();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(pooled <= max + 1e-12 && pooled >= mean - 1e-12);
    }
}
