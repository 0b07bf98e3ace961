//! Evaluation: detection mAP at a configurable minimum IoU (greedy
//! score-ordered matching, 11-point interpolated AP) and pixel F-measure for
//! the attention/segmentation output, plus PR-curve export.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{iou as box_iou, Detection, GtBox, SegMask};

/// Precision/recall curve with its average precision.
#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    /// One (recall, precision) point per ranked detection, recall non-decreasing.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// IoU of two corner-form boxes; degenerate boxes yield 0.
pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    box_iou(a, b)
}

fn det_corners(d: &Detection) -> (f64, f64, f64, f64) {
    (d.x1, d.y1, d.x2, d.y2)
}

fn gt_corners(g: &GtBox) -> (f64, f64, f64, f64) {
    (g.x1, g.y1, g.x2, g.y2)
}

/// Rank all detections by descending score (deterministic tie-break) and
/// greedily match each to the highest-IoU unmatched ground-truth box in the
/// same frame, requiring IoU >= `iou_min`. Returns one TP flag per ranked
/// detection plus the total ground-truth count.
///
/// `dets[f]` and `gts[f]` are the detections / boxes of frame `f`.
pub fn greedy_match(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    iou_min: f64,
) -> (Vec<bool>, usize) {
    // (frame, index-in-frame) ranking
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (f, frame_dets) in dets.iter().enumerate() {
        for i in 0..frame_dets.len() {
            order.push((f, i));
        }
    }
    order.sort_by(|&(fa, ia), &(fb, ib)| {
        let a = &dets[fa][ia];
        let b = &dets[fb][ib];
        b.score
            .partial_cmp(&a.score)
            .expect("detection scores are finite")
            .then(fa.cmp(&fb))
            .then(a.x1.partial_cmp(&b.x1).expect("finite"))
            .then(a.y1.partial_cmp(&b.y1).expect("finite"))
            .then(ia.cmp(&ib))
    });

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(order.len());
    for &(f, i) in &order {
        let d = &dets[f][i];
        let mut best: Option<(usize, f64)> = None;
        if f < gts.len() {
            for (j, g) in gts[f].iter().enumerate() {
                if matched[f][j] {
                    continue;
                }
                let ov = box_iou(det_corners(d), gt_corners(g));
                if ov >= iou_min && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((j, ov));
                }
            }
        }
        match best {
            Some((j, _)) => {
                matched[f][j] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    let n_gt = gts.iter().map(Vec::len).sum();
    (tp_flags, n_gt)
}

fn interp_ap(points: &[(f64, f64)], continuous: bool) -> f64 {
    if continuous {
        // all-point interpolation: integrate max-precision-to-the-right
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for (i, &(r, _)) in points.iter().enumerate() {
            if r > prev_r {
                let p_max = points[i..]
                    .iter()
                    .map(|&(_, p)| p)
                    .fold(0.0, f64::max);
                ap += (r - prev_r) * p_max;
                prev_r = r;
            }
        }
        ap
    } else {
        // 11-point: mean of interpolated precision at recall 0.0 .. 1.0
        let mut total = 0.0;
        for step in 0..=10 {
            let r = step as f64 / 10.0;
            let p = points
                .iter()
                .filter(|&&(rec, _)| rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max);
            total += p;
        }
        total / 11.0
    }
}

/// Class-agnostic average precision over per-frame detections/ground truth
/// (callers filter to one class; [`mean_average_precision`] does so).
/// With no ground truth at all the curve is empty and AP is 0.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    iou_min: f64,
    continuous: bool,
) -> PRCurve {
    let (flags, n_gt) = greedy_match(dets, gts, iou_min);
    if n_gt == 0 {
        return PRCurve {
            points: Vec::new(),
            ap: 0.0,
        };
    }
    let mut points = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (rank, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / n_gt as f64;
        points.push((recall, precision));
    }
    let ap = interp_ap(&points, continuous);
    PRCurve { points, ap }
}

/// Unweighted mean AP over the classes present in the ground truth, plus the
/// per-class curves. Errors when no frame has any ground-truth box.
pub fn mean_average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    iou_min: f64,
    continuous: bool,
) -> Result<(f64, BTreeMap<usize, PRCurve>)> {
    let mut classes: Vec<usize> = gts
        .iter()
        .flatten()
        .map(|g| g.class_id)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Data(
            "mean_average_precision: no ground-truth boxes of any class".into(),
        ));
    }
    let mut curves = BTreeMap::new();
    let mut total = 0.0;
    for &c in &classes {
        let cd: Vec<Vec<Detection>> = dets
            .iter()
            .map(|f| f.iter().filter(|d| d.class_id == c).cloned().collect())
            .collect();
        let cg: Vec<Vec<GtBox>> = gts
            .iter()
            .map(|f| f.iter().filter(|g| g.class_id == c).cloned().collect())
            .collect();
        let curve = average_precision(&cd, &cg, iou_min, continuous);
        total += curve.ap;
        curves.insert(c, curve);
    }
    Ok((total / classes.len() as f64, curves))
}

/// (attention >= thresh) ∩ union of detected boxes; pixel (x, y) belongs to a
/// box when x ∈ [x1, x2) and y ∈ [y1, y2).
pub fn binarize_and_mask(att: &Array2<f64>, dets: &[Detection], thresh: f64) -> SegMask {
    Array2::from_shape_fn(att.dim(), |(y, x)| {
        if att[[y, x]] < thresh {
            return 0;
        }
        let (xf, yf) = (x as f64, y as f64);
        u8::from(
            dets.iter()
                .any(|d| xf >= d.x1 && xf < d.x2 && yf >= d.y1 && yf < d.y2),
        )
    })
}

/// Pixel confusion counts (TP, FP, FN) between two binary masks.
pub fn mask_counts(pred: &SegMask, gt: &SegMask) -> Result<(usize, usize, usize)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "f_measure: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// (precision, recall, F) from confusion counts; all three 0 by convention
/// when their denominators vanish.
pub fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f)
}

/// Pixel-level (precision, recall, F) for one mask pair.
pub fn f_measure(pred: &SegMask, gt: &SegMask) -> Result<(f64, f64, f64)> {
    let (tp, fp, fn_) = mask_counts(pred, gt)?;
    Ok(prf_from_counts(tp, fp, fn_))
}

/// CSV export: `recall,precision` header plus one row per curve point.
pub fn write_pr_csv(path: &std::path::Path, curve: &PRCurve) -> Result<()> {
    let mut body = String::from("recall,precision\n");
    for &(r, p) in &curve.points {
        body.push_str(&format!("{r},{p}\n"));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, score: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
        Detection {
            class_id,
            score,
            x1,
            y1,
            x2,
            y2,
        }
    }

    fn gt(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> GtBox {
        GtBox::new(class_id, x1, y1, x2, y2).unwrap()
    }

    /// Independent naive matcher + AP, written from the spec text alone:
    /// walk detections in score order, scan every ground-truth box of the
    /// frame each time, accumulate the PR table, then evaluate the 11 recall
    /// levels literally.
    fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], iou_min: f64) -> f64 {
        #[derive(Clone)]
        struct Ranked {
            frame: usize,
            d: Detection,
            idx: usize,
        }
        let mut ranked: Vec<Ranked> = Vec::new();
        for (f, fd) in dets.iter().enumerate() {
            for (i, d) in fd.iter().enumerate() {
                ranked.push(Ranked {
                    frame: f,
                    d: *d,
                    idx: i,
                });
            }
        }
        ranked.sort_by(|a, b| {
            b.d.score
                .partial_cmp(&a.d.score)
                .unwrap()
                .then(a.frame.cmp(&b.frame))
                .then(a.d.x1.partial_cmp(&b.d.x1).unwrap())
                .then(a.d.y1.partial_cmp(&b.d.y1).unwrap())
                .then(a.idx.cmp(&b.idx))
        });
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        if n_gt == 0 {
            return 0.0;
        }
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut table: Vec<(f64, f64)> = Vec::new();
        for (k, r) in ranked.iter().enumerate() {
            let mut best_j = None;
            let mut best_iou = -1.0;
            for (j, g) in gts[r.frame].iter().enumerate() {
                if used[r.frame][j] {
                    continue;
                }
                let ov = iou(
                    (r.d.x1, r.d.y1, r.d.x2, r.d.y2),
                    (g.x1, g.y1, g.x2, g.y2),
                );
                if ov >= iou_min && ov > best_iou {
                    best_iou = ov;
                    best_j = Some(j);
                }
            }
            if let Some(j) = best_j {
                used[r.frame][j] = true;
                tp += 1;
            }
            table.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
        }
        let mut total = 0.0;
        for lvl in 0..=10 {
            let r = lvl as f64 * 0.1;
            let mut p_best = 0.0;
            for &(rec, prec) in &table {
                if rec >= r - 1e-12 && prec > p_best {
                    p_best = prec;
                }
            }
            total += p_best;
        }
        total / 11.0
    }

    #[test]
    fn iou_degenerate_and_symmetry() {
        assert_eq!(iou((0.0, 0.0, 10.0, 10.0), (0.0, 0.0, 10.0, 10.0)), 1.0);
        assert_eq!(iou((0.0, 0.0, 1.0, 1.0), (5.0, 5.0, 6.0, 6.0)), 0.0);
        let third = iou((0.0, 0.0, 10.0, 10.0), (5.0, 0.0, 15.0, 10.0));
        assert!((third - 1.0 / 3.0).abs() < 1e-12);
        // zero-area box
        assert_eq!(iou((3.0, 3.0, 3.0, 8.0), (0.0, 0.0, 10.0, 10.0)), 0.0);
        // symmetry on a few shapes
        for (a, b) in [
            ((0.0, 0.0, 4.0, 4.0), (2.0, 2.0, 6.0, 8.0)),
            ((1.0, 1.0, 3.0, 9.0), (0.0, 0.0, 10.0, 2.0)),
        ] {
            assert_eq!(iou(a, b), iou(b, a));
        }
    }

    #[test]
    fn perfect_detections_ap_one() {
        let gts = vec![
            vec![gt(0, 0.0, 0.0, 10.0, 10.0), gt(0, 20.0, 20.0, 30.0, 34.0)],
            vec![gt(0, 5.0, 5.0, 9.0, 9.0)],
        ];
        let dets: Vec<Vec<Detection>> = gts
            .iter()
            .map(|f| {
                f.iter()
                    .map(|g| det(g.class_id, 0.9, g.x1, g.y1, g.x2, g.y2))
                    .collect()
            })
            .collect();
        let c = average_precision(&dets, &gts, 0.7, false);
        assert_eq!(c.ap, 1.0);
        // curve sane: recall non-decreasing, precision in [0,1]
        let mut prev = 0.0;
        for &(r, p) in &c.points {
            assert!(r >= prev);
            assert!((0.0..=1.0).contains(&p));
            prev = r;
        }
    }

    #[test]
    fn empty_dets_ap_zero() {
        let gts = vec![vec![gt(0, 0.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![]];
        assert_eq!(average_precision(&dets, &gts, 0.7, false).ap, 0.0);
    }

    #[test]
    fn three_gt_two_correct_one_false_hand_value() {
        // 3 gts in one frame; dets: 2 correct (.9, .8) + 1 false (.85)
        // ranking: .9 TP (P=1, R=1/3), .85 FP (P=1/2), .8 TP (P=2/3, R=2/3)
        // 11-point: r<=ated 0.3 -> 1.0 (4 levels), r in 0.4..0.6 -> 2/3
        // (3 levels), r >= 0.7 -> 0 (4 levels); AP = (4 + 2)/11 = 6/11
        let gts = vec![vec![
            gt(0, 0.0, 0.0, 10.0, 10.0),
            gt(0, 20.0, 0.0, 30.0, 10.0),
            gt(0, 40.0, 0.0, 50.0, 10.0),
        ]];
        let dets = vec![vec![
            det(0, 0.9, 0.0, 0.0, 10.0, 10.0),
            det(0, 0.85, 60.0, 60.0, 70.0, 70.0),
            det(0, 0.8, 20.0, 0.0, 30.0, 10.0),
        ]];
        let c = average_precision(&dets, &gts, 0.7, false);
        assert!((c.ap - 6.0 / 11.0).abs() < 1e-12, "ap {}", c.ap);
        assert!((c.ap - oracle_ap(&dets, &gts, 0.7)).abs() < 1e-12);
    }

    #[test]
    fn oracle_equivalence_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        for trial in 0..100 {
            let n_frames = rng.gen_range(1..3);
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for _ in 0..n_frames {
                let ng = rng.gen_range(0..4);
                let g: Vec<GtBox> = (0..ng)
                    .map(|_| {
                        let x1 = rng.gen_range(0.0..40.0);
                        let y1 = rng.gen_range(0.0..40.0);
                        gt(
                            0,
                            x1,
                            y1,
                            x1 + rng.gen_range(4.0..16.0),
                            y1 + rng.gen_range(4.0..16.0),
                        )
                    })
                    .collect();
                let nd = rng.gen_range(0..=5 - (n_frames - 1) * 2);
                let d: Vec<Detection> = (0..nd)
                    .map(|_| {
                        // half the detections perturb a gt box, half are random
                        if !g.is_empty() && rng.gen_bool(0.5) {
                            let b = &g[rng.gen_range(0..g.len())];
                            let j = rng.gen_range(-2.0..2.0);
                            det(0, rng.gen(), b.x1 + j, b.y1 + j, b.x2 + j, b.y2 + j)
                        } else {
                            let x1 = rng.gen_range(0.0..40.0);
                            let y1 = rng.gen_range(0.0..40.0);
                            det(
                                0,
                                rng.gen(),
                                x1,
                                y1,
                                x1 + rng.gen_range(4.0..16.0),
                                y1 + rng.gen_range(4.0..16.0),
                            )
                        }
                    })
                    .collect();
                gts.push(g);
                dets.push(d);
            }
            let got = average_precision(&dets, &gts, 0.5, false).ap;
            let want = oracle_ap(&dets, &gts, 0.5);
            assert!(
                (got - want).abs() < 1e-12,
                "trial {trial}: {got} vs oracle {want}"
            );
            assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn lowest_score_fp_never_increases_ap() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(51);
        for _ in 0..30 {
            let g: Vec<GtBox> = (0..rng.gen_range(1..4))
                .map(|i| {
                    let x1 = 20.0 * i as f64;
                    gt(0, x1, 0.0, x1 + 10.0, 10.0)
                })
                .collect();
            let mut d: Vec<Detection> = Vec::new();
            for b in &g {
                if rng.gen_bool(0.7) {
                    d.push(det(0, rng.gen_range(0.3..1.0), b.x1, b.y1, b.x2, b.y2));
                }
            }
            let base = average_precision([d.clone()].as_ref(), [g.clone()].as_ref(), 0.7, false).ap;
            // append a far-away FP with a score below every existing one
            d.push(det(0, 0.01, 500.0, 500.0, 510.0, 510.0));
            let with_fp = average_precision([d].as_ref(), [g].as_ref(), 0.7, false).ap;
            assert!(with_fp <= base + 1e-12, "{with_fp} > {base}");
        }
    }

    #[test]
    fn no_double_matching() {
        // two dets trying to claim one gt: only one TP
        let gts = vec![vec![gt(0, 0.0, 0.0, 10.0, 10.0)]];
        let dets = vec![vec![
            det(0, 0.9, 0.0, 0.0, 10.0, 10.0),
            det(0, 0.8, 0.5, 0.5, 10.5, 10.5),
        ]];
        let (flags, n_gt) = greedy_match(&dets, &gts, 0.5);
        assert_eq!(n_gt, 1);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 1);
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn map_over_classes() {
        let gts = vec![vec![
            gt(0, 0.0, 0.0, 10.0, 10.0),
            gt(1, 20.0, 0.0, 30.0, 10.0),
        ]];
        // class 0 detected perfectly, class 1 not detected at all
        let dets = vec![vec![det(0, 0.9, 0.0, 0.0, 10.0, 10.0)]];
        let (map, curves) = mean_average_precision(&dets, &gts, 0.7, false).unwrap();
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[&0].ap, 1.0);
        assert_eq!(curves[&1].ap, 0.0);
        assert!((map - 0.5).abs() < 1e-12);

        // single class: mAP equals AP
        let gts1 = vec![vec![gt(0, 0.0, 0.0, 10.0, 10.0)]];
        let dets1 = vec![vec![det(0, 0.9, 0.0, 0.0, 10.0, 10.0)]];
        let (map1, _) = mean_average_precision(&dets1, &gts1, 0.7, false).unwrap();
        assert_eq!(map1, average_precision(&dets1, &gts1, 0.7, false).ap);

        // no gt at all -> error
        assert!(mean_average_precision(&dets, &[vec![]], 0.7, false).is_err());
    }

    #[test]
    fn continuous_ap_flag() {
        let gts = vec![vec![
            gt(0, 0.0, 0.0, 10.0, 10.0),
            gt(0, 20.0, 0.0, 30.0, 10.0),
            gt(0, 40.0, 0.0, 50.0, 10.0),
        ]];
        let dets = vec![vec![
            det(0, 0.9, 0.0, 0.0, 10.0, 10.0),
            det(0, 0.85, 60.0, 60.0, 70.0, 70.0),
            det(0, 0.8, 20.0, 0.0, 30.0, 10.0),
        ]];
        let c = average_precision(&dets, &gts, 0.7, true);
        // area: recall 0->1/3 at p_max 1.0, 1/3->2/3 at p_max 2/3
        let want = (1.0 / 3.0) * 1.0 + (1.0 / 3.0) * (2.0 / 3.0);
        assert!((c.ap - want).abs() < 1e-12, "ap {}", c.ap);
    }

    #[test]
    fn binarize_and_mask_contract() {
        let att = Array2::from_elem((16, 16), 1.0);
        // no detections -> empty
        assert!(binarize_and_mask(&att, &[], 0.5).iter().all(|&v| v == 0));
        // att ≡ 1, one box -> exactly the interior
        let d = det(0, 0.9, 4.0, 6.0, 10.0, 12.0);
        let m = binarize_and_mask(&att, &[d], 0.5);
        for ((y, x), &v) in m.indexed_iter() {
            let inside = (4..10).contains(&x) && (6..12).contains(&y);
            assert_eq!(v == 1, inside, "({y},{x})");
        }
        // threshold respected and subset property
        let mut att2 = Array2::from_elem((16, 16), 0.2);
        att2[[7, 5]] = 0.9;
        att2[[0, 0]] = 0.95; // outside the box
        let m2 = binarize_and_mask(&att2, &[d], 0.5);
        assert_eq!(m2[[7, 5]], 1);
        assert_eq!(m2[[0, 0]], 0);
        assert_eq!(m2.iter().map(|&v| v as usize).sum::<usize>(), 1);
    }

    #[test]
    fn f_measure_cases() {
        let mut gt_m = SegMask::zeros((4, 4));
        gt_m[[0, 0]] = 1;
        gt_m[[0, 1]] = 1;
        gt_m[[0, 2]] = 1; // 3 gt pixels
        let mut pred = SegMask::zeros((4, 4));
        pred[[0, 0]] = 1;
        pred[[0, 1]] = 1; // TP=2
        pred[[2, 2]] = 1; // FP=1 (FN=1 on gt[[0,2]])
        let (p, r, f) = f_measure(&pred, &gt_m).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-9);
        assert!((r - 2.0 / 3.0).abs() < 1e-9);
        assert!((f - 2.0 / 3.0).abs() < 1e-9);

        // perfect
        let (p1, r1, f1) = f_measure(&gt_m, &gt_m).unwrap();
        assert_eq!((p1, r1, f1), (1.0, 1.0, 1.0));

        // empty prediction, non-empty gt
        let empty = SegMask::zeros((4, 4));
        let (p0, r0, f0) = f_measure(&empty, &gt_m).unwrap();
        assert_eq!((p0, r0, f0), (0.0, 0.0, 0.0));

        // shape mismatch
        assert!(f_measure(&SegMask::zeros((3, 4)), &gt_m).is_err());
    }

    #[test]
    fn pr_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pr.csv");
        let curve = PRCurve {
            points: vec![(0.25, 1.0), (0.5, 0.8)],
            ap: 0.6,
        };
        write_pr_csv(&path, &curve).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "recall,precision\n0.25,1\n0.5,0.8\n");
    }
}
