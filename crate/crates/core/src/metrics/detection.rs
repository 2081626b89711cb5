//! Detection accuracy: all-point-interpolated AP over an IoU sweep, and mean
//! IoU under greedy one-to-one matching.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{iou, ObjectAnnotation};

/// 0.35, 0.40, ..., 0.75, built from integers so every value is the exact decimal.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..9).map(|k| (35 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    /// Class-averaged AP at each threshold.
    pub per_threshold: Vec<f64>,
    pub map: f64,
}

/// Area under the all-point interpolated precision-recall curve.
fn average_precision(matches: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || matches.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(matches.len());
    let mut precision = Vec::with_capacity(matches.len());
    for (k, &m) in matches.iter().enumerate() {
        tp += m as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Score-ranked greedy matching of class `class` at one threshold: each
/// detection takes the unmatched ground truth of highest IoU, if that IoU
/// reaches the threshold.
fn class_ap(detections: &[DetectionSet], annotations: &[Vec<ObjectAnnotation>], class: u32, threshold: f64) -> f64 {
    let mut ranked = Vec::new();
    for (f, set) in detections.iter().enumerate() {
        for d in set.detections.iter().filter(|d| d.class_id == class) {
            ranked.push((d.score, f, d.bbox));
        }
    }
    // stable sort keeps frame order among equal scores
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut taken: Vec<Vec<bool>> = annotations.iter().map(|a| vec![false; a.len()]).collect();
    let num_gt = annotations.iter().flatten().filter(|a| a.class_id == class).count();
    let matches: Vec<bool> = ranked
        .iter()
        .map(|&(_, f, bbox)| {
            let best = annotations[f]
                .iter()
                .enumerate()
                .filter(|(g, a)| a.class_id == class && !taken[f][*g])
                .map(|(g, a)| (g, iou(&bbox, &a.bbox)))
                .filter(|&(_, v)| v >= threshold)
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)));
            match best {
                Some((g, _)) => {
                    taken[f][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    average_precision(&matches, num_gt)
}

fn check_lengths(detections: &[DetectionSet], annotations: &[Vec<ObjectAnnotation>]) -> Result<()> {
    if detections.len() != annotations.len() {
        return Err(Error::Contract(format!(
            "{} detection frames against {} annotation frames",
            detections.len(),
            annotations.len()
        )));
    }
    Ok(())
}

/// Mean over classes present in the ground truth, then over thresholds.
pub fn mean_average_precision(
    detections: &[DetectionSet],
    annotations: &[Vec<ObjectAnnotation>],
    thresholds: &[f64],
) -> Result<ApReport> {
    check_lengths(detections, annotations)?;
    let classes: BTreeSet<u32> = annotations.iter().flatten().map(|a| a.class_id).collect();
    if classes.is_empty() {
        return Err(Error::UndefinedMetric("mAP needs at least one ground-truth object".into()));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Domain("IoU thresholds must be a non-empty list in [0, 1]".into()));
    }
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| classes.iter().map(|&c| class_ap(detections, annotations, c, t)).sum::<f64>() / classes.len() as f64)
        .collect();
    let map = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(ApReport {
        thresholds: thresholds.to_vec(),
        per_threshold,
        map,
    })
}

/// Per frame, repeatedly pair the ground truth and same-class detection of
/// highest remaining IoU; unmatched ground truth scores 0. Frames without
/// ground truth are skipped.
pub fn mean_iou(detections: &[DetectionSet], annotations: &[Vec<ObjectAnnotation>]) -> Result<f64> {
    check_lengths(detections, annotations)?;
    let mut frame_means = Vec::new();
    for (set, gts) in detections.iter().zip(annotations) {
        if gts.is_empty() {
            continue;
        }
        let mut pairs = Vec::new();
        for (g, a) in gts.iter().enumerate() {
            for (d, det) in set.detections.iter().enumerate() {
                if det.class_id == a.class_id {
                    pairs.push((iou(&a.bbox, &det.bbox), g, d));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut gt_used = vec![false; gts.len()];
        let mut det_used = vec![false; set.detections.len()];
        let mut total = 0.0;
        for (v, g, d) in pairs {
            if !gt_used[g] && !det_used[d] && v > 0.0 {
                gt_used[g] = true;
                det_used[d] = true;
                total += v;
            }
        }
        frame_means.push(total / gts.len() as f64);
    }
    if frame_means.is_empty() {
        return Err(Error::UndefinedMetric("mIoU needs at least one frame with ground truth".into()));
    }
    Ok(frame_means.iter().sum::<f64>() / frame_means.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;
    use crate::geometry::BoundingBox;
    use proptest::prelude::*;

    fn gt(x0: f64, y0: f64, x1: f64, y1: f64) -> ObjectAnnotation {
        ObjectAnnotation::new("a", 0, BoundingBox::new(x0, y0, x1, y1).unwrap())
    }

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection::new(BoundingBox::new(x0, y0, x1, y1).unwrap(), 0, score).unwrap()
    }

    fn set(frame: usize, d: Vec<Detection>) -> DetectionSet {
        DetectionSet {
            frame_index: frame,
            detections: d,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let anns = vec![vec![gt(0., 0., 10., 10.)], vec![gt(5., 5., 20., 30.)]];
        let perfect: Vec<DetectionSet> = anns
            .iter()
            .enumerate()
            .map(|(f, a)| set(f, a.iter().map(|g| Detection::new(g.bbox, 0, 1.0).unwrap()).collect()))
            .collect();
        let r = mean_average_precision(&perfect, &anns, &default_iou_thresholds()).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(mean_iou(&perfect, &anns).unwrap(), 1.0);

        let none = vec![set(0, vec![]), set(1, vec![])];
        assert_eq!(mean_average_precision(&none, &anns, &default_iou_thresholds()).unwrap().map, 0.0);
        assert_eq!(mean_iou(&none, &anns).unwrap(), 0.0);
    }

    #[test]
    fn true_positive_outranks_false_positive() {
        // IoU of the first detection with the GT: 80 / 100 = 0.8
        let anns = vec![vec![gt(0., 0., 10., 10.)]];
        let dets = vec![set(0, vec![det(0., 0., 10., 8., 0.9), det(50., 50., 60., 60., 0.8)])];
        let r = mean_average_precision(&dets, &anns, &[0.5]).unwrap();
        assert_eq!(r.map, 1.0);
        // reversed ranking: precision at full recall is 1/2
        let dets = vec![set(0, vec![det(0., 0., 10., 8., 0.7), det(50., 50., 60., 60., 0.8)])];
        assert_eq!(mean_average_precision(&dets, &anns, &[0.5]).unwrap().map, 0.5);
    }

    #[test]
    fn hand_built_pr_curve() {
        // 2 GT; ranked: TP, FP, TP -> points (0.5, 1), (0.5, 0.5), (1, 2/3)
        // envelope gives 0.5 * 1 + 0.5 * 2/3
        let anns = vec![vec![gt(0., 0., 10., 10.)], vec![gt(0., 0., 10., 10.)]];
        let dets = vec![
            set(0, vec![det(0., 0., 10., 10., 0.9), det(40., 40., 50., 50., 0.8)]),
            set(1, vec![det(0., 0., 10., 10., 0.7)]),
        ];
        let ap = mean_average_precision(&dets, &anns, &[0.5]).unwrap().map;
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let anns = vec![vec![gt(0., 0., 10., 10.)]];
        let dets = vec![set(0, vec![det(0., 0., 10., 10., 0.9), det(0., 0., 10., 10., 0.8)])];
        assert_eq!(mean_average_precision(&dets, &anns, &[0.5]).unwrap().map, 1.0);
        let dets = vec![set(0, vec![det(0., 0., 10., 10., 0.9), det(0., 0., 10., 10., 0.8)])];
        let anns2 = vec![vec![gt(0., 0., 10., 10.), gt(100., 100., 110., 110.)]];
        // second detection cannot claim the already matched box
        assert_eq!(mean_average_precision(&dets, &anns2, &[0.5]).unwrap().map, 0.5);
    }

    #[test]
    fn miou_one_third() {
        // two unit-height boxes shifted by half their width: IoU = 1/3
        let anns = vec![vec![gt(0., 0., 2., 1.)], vec![]];
        let dets = vec![set(0, vec![det(1., 0., 3., 1., 0.9)]), set(1, vec![det(0., 0., 1., 1., 0.5)])];
        assert!((mean_iou(&dets, &anns).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_without_ground_truth() {
        let anns = vec![vec![], vec![]];
        let dets = vec![set(0, vec![]), set(1, vec![])];
        assert!(matches!(
            mean_average_precision(&dets, &anns, &default_iou_thresholds()),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(mean_iou(&dets, &anns), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = default_iou_thresholds();
        assert_eq!(t.len(), 9);
        assert_eq!(t[0], 0.35);
        assert_eq!(t[8], 0.75);
        assert_eq!(t[3], 0.5);
    }

    prop_compose! {
        fn arb_box()(x in 0.0f64..180.0, y in 0.0f64..180.0, w in 4.0f64..40.0, h in 4.0f64..40.0) -> BoundingBox {
            BoundingBox::new(x, y, x + w, y + h).unwrap()
        }
    }

    proptest! {
        #[test]
        fn ap_bounded_and_monotone(
            gts in proptest::collection::vec(arb_box(), 1..5),
            dets in proptest::collection::vec((arb_box(), 0.0f64..=1.0), 0..8),
        ) {
            let anns = vec![gts.iter().map(|b| ObjectAnnotation::new("a", 0, *b)).collect::<Vec<_>>()];
            let ds = vec![set(0, dets.iter().map(|(b, s)| Detection::new(*b, 0, *s).unwrap()).collect())];
            let r = mean_average_precision(&ds, &anns, &default_iou_thresholds()).unwrap();
            for w in r.per_threshold.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            for &ap in &r.per_threshold {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
            let mean = r.per_threshold.iter().sum::<f64>() / r.per_threshold.len() as f64;
            prop_assert!((r.map - mean).abs() < 1e-15);
            let m = mean_iou(&ds, &anns).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
