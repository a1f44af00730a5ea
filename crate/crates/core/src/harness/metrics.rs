//! Toy detection metrics: greedy center matching within one cell, average
//! precision over the confidence sweep, and per-class / per-range splits.

use serde::{Deserialize, Serialize};

use crate::pipeline::{Detection, GtObject};

use super::scene::NUM_CLASSES;

/// Range split boundary in meters (near: [0, 15), far: 15+).
pub const RANGE_SPLIT_M: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMetrics {
    /// Mean center distance over matched pairs, meters.
    pub center_mae: f64,
    /// Fraction of ground-truth objects matched within the radius.
    pub hit_rate: f64,
    /// Mean per-class average precision.
    pub toy_ap: f64,
    /// AP per class id (NaN-free: classes without ground truth score 0).
    pub class_ap: Vec<f64>,
    /// AP for near ([0, 15) m) and far (15+ m) ground truth.
    pub range_ap: [f64; 2],
    pub matched: usize,
    pub total_gt: usize,
    pub total_dets: usize,
}

struct Flagged {
    confidence: f64,
    true_positive: bool,
    distance: f64,
    range_near: bool,
}

fn greedy_match(
    dets_by_frame: &[Vec<Detection>],
    gt_by_frame: &[Vec<GtObject>],
    class_id: usize,
    radius: f64,
) -> (Vec<Flagged>, usize) {
    let mut flagged = Vec::new();
    let mut total_gt = 0usize;
    for (dets, gts) in dets_by_frame.iter().zip(gt_by_frame) {
        let gts: Vec<&GtObject> = gts.iter().filter(|g| g.class_id == class_id).collect();
        total_gt += gts.len();
        let mut order: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].class_id == class_id)
            .collect();
        order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
        let mut taken = vec![false; gts.len()];
        for i in order {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let dist = ((d.box_params.x - g.box_params.x).powi(2)
                    + (d.box_params.y - g.box_params.y).powi(2))
                .sqrt();
                if dist <= radius && best.map_or(true, |(_, b)| dist < b) {
                    best = Some((j, dist));
                }
            }
            let range_near =
                (d.box_params.x.powi(2) + d.box_params.y.powi(2)).sqrt() < RANGE_SPLIT_M;
            match best {
                Some((j, dist)) => {
                    taken[j] = true;
                    flagged.push(Flagged {
                        confidence: d.confidence,
                        true_positive: true,
                        distance: dist,
                        range_near,
                    });
                }
                None => flagged.push(Flagged {
                    confidence: d.confidence,
                    true_positive: false,
                    distance: f64::NAN,
                    range_near,
                }),
            }
        }
    }
    (flagged, total_gt)
}

/// All-points interpolated AP from (confidence, tp) pairs.
fn average_precision(mut flagged: Vec<(f64, bool)>, total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    flagged.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(flagged.len());
    for (rank, (_, is_tp)) in flagged.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        let recall = tp as f64 / total_gt as f64;
        let precision = tp as f64 / (rank + 1) as f64;
        curve.push((recall, precision));
    }
    // monotone precision envelope from the right
    let mut best = 0.0f64;
    for point in curve.iter_mut().rev() {
        best = best.max(point.1);
        point.1 = best;
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (recall, precision) in curve {
        if recall > last_recall {
            ap += (recall - last_recall) * precision;
            last_recall = recall;
        }
    }
    ap
}

/// Scores detections against ground truth with greedy center matching
/// inside `radius` meters (one cell by default).
pub fn evaluate(
    dets_by_frame: &[Vec<Detection>],
    gt_by_frame: &[Vec<GtObject>],
    radius: f64,
) -> ToyMetrics {
    assert_eq!(dets_by_frame.len(), gt_by_frame.len());
    let mut class_ap = Vec::with_capacity(NUM_CLASSES);
    let mut matched = 0usize;
    let mut total_gt = 0usize;
    let mut dist_sum = 0.0;
    let mut near: Vec<(f64, bool)> = Vec::new();
    let mut far: Vec<(f64, bool)> = Vec::new();
    let mut near_gt = 0usize;
    let mut far_gt = 0usize;

    for class_id in 0..NUM_CLASSES {
        let (flagged, gt_count) = greedy_match(dets_by_frame, gt_by_frame, class_id, radius);
        total_gt += gt_count;
        for f in &flagged {
            if f.true_positive {
                matched += 1;
                dist_sum += f.distance;
            }
            if f.range_near {
                near.push((f.confidence, f.true_positive));
            } else {
                far.push((f.confidence, f.true_positive));
            }
        }
        class_ap.push(average_precision(
            flagged.iter().map(|f| (f.confidence, f.true_positive)).collect(),
            gt_count,
        ));
    }
    for gts in gt_by_frame {
        for g in gts {
            let r = (g.box_params.x.powi(2) + g.box_params.y.powi(2)).sqrt();
            if r < RANGE_SPLIT_M {
                near_gt += 1;
            } else {
                far_gt += 1;
            }
        }
    }

    let total_dets: usize = dets_by_frame.iter().map(|d| d.len()).sum();
    ToyMetrics {
        center_mae: if matched > 0 {
            dist_sum / matched as f64
        } else {
            0.0
        },
        hit_rate: if total_gt > 0 {
            matched as f64 / total_gt as f64
        } else {
            0.0
        },
        toy_ap: class_ap.iter().sum::<f64>() / class_ap.len() as f64,
        class_ap,
        range_ap: [
            average_precision(near, near_gt),
            average_precision(far, far_gt),
        ],
        matched,
        total_gt,
        total_dets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::BoxParams;

    fn det(class_id: usize, x: f64, y: f64, conf: f64) -> Detection {
        Detection {
            class_id,
            class_scores: vec![0.5, 0.5],
            box_params: BoxParams {
                x,
                y,
                w: 2.0,
                l: 2.0,
                yaw: 0.0,
            },
            confidence: conf,
        }
    }

    fn gt(class_id: usize, x: f64, y: f64) -> GtObject {
        GtObject {
            class_id,
            box_params: BoxParams {
                x,
                y,
                w: 2.0,
                l: 2.0,
                yaw: 0.0,
            },
            vel: [0.0, 0.0],
        }
    }

    #[test]
    fn exact_detections_score_perfectly() {
        let gts = vec![vec![gt(0, 1.0, 2.0), gt(1, -3.0, 0.5)], vec![gt(0, 4.0, 4.0)]];
        let dets = vec![
            vec![det(0, 1.0, 2.0, 0.9), det(1, -3.0, 0.5, 0.8)],
            vec![det(0, 4.0, 4.0, 0.95)],
        ];
        let m = evaluate(&dets, &gts, 0.6);
        assert_eq!(m.center_mae, 0.0);
        assert_eq!(m.hit_rate, 1.0);
        assert_eq!(m.toy_ap, 1.0);
        assert_eq!(m.class_ap, vec![1.0, 1.0]);
        assert_eq!(m.matched, 3);
    }

    #[test]
    fn no_detections_score_zero() {
        let gts = vec![vec![gt(0, 1.0, 2.0)]];
        let dets = vec![vec![]];
        let m = evaluate(&dets, &gts, 0.6);
        assert_eq!(m.hit_rate, 0.0);
        assert_eq!(m.toy_ap, 0.0);
    }

    #[test]
    fn one_of_two_found_is_half_hit_rate() {
        let gts = vec![vec![gt(0, 1.0, 2.0), gt(0, -5.0, -5.0)]];
        let dets = vec![vec![det(0, 1.0, 2.0, 0.9)]];
        let m = evaluate(&dets, &gts, 0.6);
        assert_eq!(m.hit_rate, 0.5);
        assert_eq!(m.center_mae, 0.0);
        // one TP at full precision up to recall 0.5
        assert!((m.class_ap[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn false_positives_lower_ap_but_not_hit_rate() {
        let gts = vec![vec![gt(0, 0.0, 0.0)]];
        // high-confidence FP first, then the TP
        let dets = vec![vec![det(0, 9.0, 9.0, 0.99), det(0, 0.0, 0.0, 0.5)]];
        let m = evaluate(&dets, &gts, 0.6);
        assert_eq!(m.hit_rate, 1.0);
        assert!((m.class_ap[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn greedy_matching_prefers_the_nearest_ground_truth() {
        let gts = vec![vec![gt(0, 0.0, 0.0), gt(0, 0.5, 0.0)]];
        let dets = vec![vec![det(0, 0.45, 0.0, 0.9)]];
        let m = evaluate(&dets, &gts, 0.6);
        assert_eq!(m.matched, 1);
        assert!((m.center_mae - 0.05).abs() < 1e-9);
    }

    #[test]
    fn wrong_class_never_matches() {
        let gts = vec![vec![gt(0, 0.0, 0.0)]];
        let dets = vec![vec![det(1, 0.0, 0.0, 0.9)]];
        let m = evaluate(&dets, &gts, 0.6);
        assert_eq!(m.matched, 0);
        assert_eq!(m.toy_ap, 0.0);
    }

    #[test]
    fn range_split_buckets_by_distance() {
        let gts = vec![vec![gt(0, 1.0, 0.0), gt(0, 20.0, 0.0)]];
        let dets = vec![vec![det(0, 1.0, 0.0, 0.9), det(0, 20.0, 0.0, 0.8)]];
        let m = evaluate(&dets, &gts, 0.6);
        assert_eq!(m.range_ap, [1.0, 1.0]);

        let dets = vec![vec![det(0, 1.0, 0.0, 0.9)]];
        let m = evaluate(&dets, &gts, 0.6);
        assert_eq!(m.range_ap, [1.0, 0.0]);
    }
}
