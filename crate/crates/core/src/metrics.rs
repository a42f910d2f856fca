//! Detection metrics: rotated-footprint IoU via convex polygon clipping
//! and VOC-style all-point average precision with greedy score-ordered
//! matching.

use std::collections::BTreeMap;

use crate::detect::{Box3D, BoxRecord};
use crate::error::{Error, Result};

type Poly = Vec<(f64, f64)>;

/// Shoelace area of a simple polygon (vertices in order).
fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        twice += x0 * y1 - x1 * y0;
    }
    twice.abs() / 2.0
}

/// Clip `subject` against one directed edge (a→b) of a counter-clockwise
/// convex clip polygon, keeping the left side.
fn clip_edge(subject: &Poly, a: (f64, f64), b: (f64, f64)) -> Poly {
    let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let mut out = Vec::with_capacity(subject.len() + 1);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let (sc, sp) = (side(cur), side(prev));
        if sc >= 0.0 {
            if sp < 0.0 {
                out.push(intersect(prev, cur, a, b));
            }
            out.push(cur);
        } else if sp >= 0.0 {
            out.push(intersect(prev, cur, a, b));
        }
    }
    out
}

fn intersect(p0: (f64, f64), p1: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let d1 = (p1.0 - p0.0, p1.1 - p0.1);
    let d2 = (b.0 - a.0, b.1 - a.1);
    let denom = d1.0 * d2.1 - d1.1 * d2.0;
    let t = ((a.0 - p0.0) * d2.1 - (a.1 - p0.1) * d2.0) / denom;
    (p0.0 + t * d1.0, p0.1 + t * d1.1)
}

/// Intersection area of two convex polygons (Sutherland–Hodgman).
fn convex_intersection_area(a: &Poly, b: &Poly) -> f64 {
    let mut poly = a.clone();
    for i in 0..b.len() {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, b[i], b[(i + 1) % b.len()]);
    }
    polygon_area(&poly)
}

/// IoU of the two yaw-rotated box footprints in the ground plane.
pub fn rotated_bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let pa: Poly = a.bev_corners().to_vec();
    let pb: Poly = b.bev_corners().to_vec();
    let inter = convex_intersection_area(&pa, &pb);
    let union = polygon_area(&pa) + polygon_area(&pb) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// All-point average precision per class at one BEV-IoU threshold.
/// Predictions are matched greedily in descending score order; each
/// ground-truth box is claimed at most once, within its own frame and
/// class.
pub fn average_precision(
    preds: &[BoxRecord],
    gts: &[BoxRecord],
    iou_thresh: f64,
) -> Result<BTreeMap<usize, f64>> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::contract(
            "average_precision",
            format!("iou threshold {iou_thresh} outside [0,1]"),
        ));
    }
    let mut classes: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    classes.extend(preds.iter().map(|p| p.class));

    let mut out = BTreeMap::new();
    for class in classes {
        let class_gts: Vec<(usize, Box3D, u64)> = gts
            .iter()
            .filter(|g| g.class == class)
            .enumerate()
            .map(|(i, g)| Ok((i, g.to_box()?, g.frame_id)))
            .collect::<Result<_>>()?;
        let mut class_preds: Vec<(Box3D, u64)> = preds
            .iter()
            .filter(|p| p.class == class)
            .map(|p| Ok((p.to_box()?, p.frame_id)))
            .collect::<Result<_>>()?;
        class_preds.sort_by(|a, b| b.0.score.total_cmp(&a.0.score));

        if class_gts.is_empty() {
            out.insert(class, 0.0);
            continue;
        }
        let mut claimed = vec![false; class_gts.len()];
        let mut tp = Vec::with_capacity(class_preds.len());
        for (pred, frame) in &class_preds {
            let best = class_gts
                .iter()
                .filter(|(i, _, gf)| gf == frame && !claimed[*i])
                .map(|(i, g, _)| (*i, rotated_bev_iou(pred, g)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((i, iou)) if iou >= iou_thresh => {
                    claimed[i] = true;
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }

        // precision-recall staircase → area under the interpolated curve
        let n_gt = class_gts.len() as f64;
        let mut points = Vec::with_capacity(tp.len());
        let (mut tps, mut fps) = (0.0, 0.0);
        for &hit in &tp {
            if hit {
                tps += 1.0;
            } else {
                fps += 1.0;
            }
            points.push((tps / n_gt, tps / (tps + fps)));
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..points.len() {
            let (recall, _) = points[i];
            if recall > prev_recall {
                let best_prec = points[i..]
                    .iter()
                    .map(|&(_, p)| p)
                    .fold(0.0f64, f64::max);
                ap += (recall - prev_recall) * best_prec;
                prev_recall = recall;
            }
        }
        out.insert(class, ap);
    }
    Ok(out)
}

/// Mean AP over all classes present in the ground truth.
pub fn mean_average_precision(
    preds: &[BoxRecord],
    gts: &[BoxRecord],
    iou_thresh: f64,
) -> Result<f64> {
    let per_class = average_precision(preds, gts, iou_thresh)?;
    let gt_classes: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    if gt_classes.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = gt_classes.iter().map(|c| per_class[c]).sum();
    Ok(sum / gt_classes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(x: f64, y: f64, l: f64, w: f64, yaw: f64, score: f64) -> Box3D {
        Box3D::new((x, y, 0.5), (l, w, 1.5), yaw, 0, score).unwrap()
    }

    #[test]
    fn identical_and_disjoint_boxes() {
        let a = boxed(1.0, 2.0, 4.0, 2.0, 0.7, 1.0);
        assert!((rotated_bev_iou(&a, &a) - 1.0).abs() < 1e-12);

        let far = boxed(100.0, 2.0, 4.0, 2.0, 0.7, 1.0);
        assert_eq!(rotated_bev_iou(&a, &far), 0.0);
    }

    #[test]
    fn axis_aligned_iou_matches_rectangle_arithmetic() {
        // 4×2 at origin vs 4×2 shifted 2 along x: overlap 2×2
        let a = boxed(0.0, 0.0, 4.0, 2.0, 0.0, 1.0);
        let b = boxed(2.0, 0.0, 4.0, 2.0, 0.0, 1.0);
        let want = 4.0 / (8.0 + 8.0 - 4.0);
        assert!((rotated_bev_iou(&a, &b) - want).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_bounded() {
        let a = boxed(0.3, -0.2, 3.0, 1.5, 0.4, 1.0);
        let b = boxed(1.1, 0.5, 2.5, 2.0, -0.9, 1.0);
        let ab = rotated_bev_iou(&a, &b);
        let ba = rotated_bev_iou(&b, &a);
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn rotated_square_matches_monte_carlo() {
        // unit square vs itself rotated 45°: closed form 2(√2−1)/(2−2(√2−1))
        let a = boxed(0.0, 0.0, 1.0, 1.0, 0.0, 1.0);
        let b = boxed(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4, 1.0);
        let got = rotated_bev_iou(&a, &b);
        let octagon = 2.0 * (2.0f64.sqrt() - 1.0);
        let want = octagon / (2.0 - octagon);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");

        // Monte-Carlo point-sampling cross-check on a deterministic
        // lattice (1024² strata with a fixed in-cell offset)
        let n = 1024;
        let mut inside_both = 0u64;
        let mut inside_any = 0u64;
        let contains = |b: &Box3D, x: f64, y: f64| {
            let (s, c) = b.yaw.sin_cos();
            let (dx, dy) = (x - b.center.0, y - b.center.1);
            let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
            lx.abs() <= b.size.0 / 2.0 && ly.abs() <= b.size.1 / 2.0
        };
        for i in 0..n {
            for j in 0..n {
                let x = -1.0 + 2.0 * (i as f64 + 0.5) / n as f64;
                let y = -1.0 + 2.0 * (j as f64 + 0.5) / n as f64;
                let (ia, ib) = (contains(&a, x, y), contains(&b, x, y));
                if ia && ib {
                    inside_both += 1;
                }
                if ia || ib {
                    inside_any += 1;
                }
            }
        }
        let sampled = inside_both as f64 / inside_any as f64;
        assert!((sampled - want).abs() < 1e-3, "sampled {sampled}, want {want}");
    }

    fn record(frame: u64, x: f64, score: f64) -> BoxRecord {
        BoxRecord::from_box(frame, &boxed(x, 0.0, 4.0, 2.0, 0.0, score))
    }

    #[test]
    fn perfect_predictions_score_unit_ap() {
        let gts = vec![record(0, 0.0, 1.0), record(0, 10.0, 1.0), record(1, -5.0, 1.0)];
        let ap = average_precision(&gts, &gts, 0.5).unwrap();
        assert_eq!(ap[&0], 1.0);
        assert_eq!(mean_average_precision(&gts, &gts, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn no_predictions_score_zero() {
        let gts = vec![record(0, 0.0, 1.0)];
        let ap = average_precision(&[], &gts, 0.5).unwrap();
        assert_eq!(ap[&0], 0.0);
    }

    #[test]
    fn staircase_matches_hand_computation() {
        // two GT boxes in one frame; three predictions sorted by score:
        //   0.9 → hits the first GT       (recall 1/2, precision 1/1)
        //   0.8 → misses everything       (recall 1/2, precision 1/2)
        //   0.7 → hits the second GT      (recall 2/2, precision 2/3)
        // all-point AP = 0.5·1 + 0.5·(2/3)
        let gts = vec![record(0, 0.0, 1.0), record(0, 20.0, 1.0)];
        let preds = vec![
            record(0, 0.1, 0.9),
            record(0, 40.0, 0.8),
            record(0, 20.1, 0.7),
        ];
        let ap = average_precision(&preds, &gts, 0.5).unwrap();
        let want = 0.5 + 0.5 * (2.0 / 3.0);
        assert!((ap[&0] - want).abs() < 1e-12, "got {}, want {want}", ap[&0]);
    }

    #[test]
    fn ap_non_increasing_in_threshold() {
        let gts = vec![record(0, 0.0, 1.0), record(0, 20.0, 1.0)];
        let preds = vec![record(0, 0.8, 0.9), record(0, 20.6, 0.7)];
        let mut last = f64::INFINITY;
        for thresh in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let ap = average_precision(&preds, &gts, thresh).unwrap()[&0];
            assert!(ap <= last + 1e-12, "AP rose from {last} to {ap} at {thresh}");
            last = ap;
        }
    }

    #[test]
    fn matching_is_frame_scoped() {
        // prediction in frame 1 cannot claim the GT in frame 0
        let gts = vec![record(0, 0.0, 1.0)];
        let preds = vec![record(1, 0.0, 0.9)];
        let ap = average_precision(&preds, &gts, 0.5).unwrap();
        assert_eq!(ap[&0], 0.0);
    }
}
