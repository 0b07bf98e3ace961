//! Acceptance suite: twelve numbered criteria covering the loss algebra, the
//! gradient engine, the annotation pipeline, decoding, evaluation, and the
//! end-to-end training harness. Each test prints one `[criterion NN] PASS`
//! line (visible with `--nocapture`); a failing test marks its criterion FAIL.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spotnet::config::{
    AblateConfig, AnnotateConfig, AnnotateMode, CameraMotion, ModelConfig, SceneConfig,
    TrainConfig,
};
use spotnet::dataio::LoadedSequence;
use spotnet::decode::{extract_peaks, Peak};
use spotnet::evalkit;
use spotnet::loss;
use spotnet::net::{AttentionOverride, SpotNet};
use spotnet::types::{Detection, GtBox};
use spotnet::videogen::gen_sequence;

fn arr(vals: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
}

/// In-memory LoadedSequence (with oracle masks) from a synthetic scene.
fn loaded(scene: &SceneConfig) -> LoadedSequence {
    let seq = gen_sequence(scene).unwrap();
    LoadedSequence {
        dir: PathBuf::from("acceptance_mem"),
        frames: seq.frames,
        gt_boxes: seq.gt_boxes,
        oracle_masks: Some(seq.oracle_masks),
        annot_masks: None,
        manifest: None,
    }
}

// ---------------------------------------------------------------------------
// 1. Binary cross-entropy hand values
// ---------------------------------------------------------------------------

#[test]
#[allow(clippy::approx_constant)] // 0.693147 is the frozen reference value
fn criterion_01_bce_hand_values() {
    let t0 = Instant::now();
    let v = loss::bce_seg(&arr(&[0.5, 0.5]), &arr(&[1.0, 0.0])).unwrap();
    assert!(
        (v - 0.693147).abs() < 1e-6,
        "bce([0.5,0.5] vs [1,0]) = {v}, want 0.693147"
    );
    // fully-wrong prediction is clamped at eps = 1e-7
    let clamp = loss::bce_seg(&arr(&[0.0]), &arr(&[1.0])).unwrap();
    let want = -(1e-7f64).ln();
    assert!(
        (clamp - want).abs() < 1e-3,
        "clamped bce = {clamp}, want {want}"
    );
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 1.0, "criterion 1 took {dt:?}, budget 1 s");
    println!("[criterion 01] PASS - bce_seg hand values ({v:.6}, clamp {clamp:.3}) in {dt:?}");
}

// ---------------------------------------------------------------------------
// 2. Total-loss weighting
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_total_loss_weighting() {
    let bd = loss::total_loss(1.0, 1.0, 1.0, 1.0, true, 1.0, 0.1).unwrap();
    assert_eq!(bd.l_tot, 3.1, "total_loss(1,1,1,1) must equal 3.1 exactly");

    // L_tot is affine in L_WH: scaling the wh term scales its contribution
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (h, o, s): (f64, f64, f64) =
            (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
        let w: f64 = rng.gen_range(0.0..5.0);
        let lam: f64 = rng.gen_range(0.0..4.0);
        let ww: f64 = rng.gen_range(0.0..2.0);
        let base = loss::total_loss(h, o, s, 0.0, true, 1.0, ww).unwrap().l_tot;
        let at_w = loss::total_loss(h, o, s, w, true, 1.0, ww).unwrap().l_tot;
        let at_lw = loss::total_loss(h, o, s, lam * w, true, 1.0, ww).unwrap().l_tot;
        let lhs = at_lw - base;
        let rhs = lam * (at_w - base);
        assert!(
            (lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs().max(rhs.abs())),
            "wh linearity broken: {lhs} vs {rhs}"
        );
    }
    println!("[criterion 02] PASS - total_loss(1,1,1,1) = 3.1 exactly; wh linearity over 100 random inputs");
}

// ---------------------------------------------------------------------------
// 3. Focal-loss hand values
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_focal_hand_values() {
    let cell = |pred: f64, target: f64| {
        let p = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), pred);
        let t = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), target);
        loss::focal_heatmap(&p, &t).unwrap()
    };
    // positive cell: (1-0.5)^2 * -ln(0.5) = ln(2)/4
    let pos = cell(0.5, 1.0);
    // negative cell: (1-0)^4 * 0.5^2 * -ln(0.5) = ln(2)/4
    let neg = cell(0.5, 0.0);
    for (name, v) in [("positive", pos), ("negative", neg)] {
        assert!(
            (v - 0.173287).abs() < 1e-5,
            "{name} single-cell focal = {v}, want 0.173287"
        );
    }
    println!("[criterion 03] PASS - single-cell focal values {pos:.6} / {neg:.6} (want 0.173287)");
}

// ---------------------------------------------------------------------------
// 4. Finite-difference gradient oracle
// ---------------------------------------------------------------------------

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn fd_check(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, analytic: &ArrayD<f64>) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let up = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let dn = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        let fd = (up - dn) / (2.0 * h);
        let ana = analytic.as_slice().unwrap()[idx];
        worst = worst.max(rel_err(fd, ana));
    }
    worst
}

#[test]
fn criterion_04_gradient_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_overall = 0.0f64;
    for trial in 0..20 {
        let (h, w) = (rng.gen_range(2..=8), rng.gen_range(2..=8));

        // bce_seg on (1,1,h,w)
        let pred = ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |_| rng.gen_range(0.05..0.95));
        let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |_| {
            f64::from(u32::from(rng.gen_bool(0.5)))
        });
        let (_, g) = loss::bce_seg_grad(&pred, &target).unwrap();
        let t = target.clone();
        let worst = fd_check(&|x| loss::bce_seg(x, &t).unwrap(), &pred, &g);
        assert!(worst < 1e-3, "trial {trial}: bce grad rel err {worst}");
        worst_overall = worst_overall.max(worst);

        // focal_heatmap on (1,c,h,w) with a couple of exact-1 centers
        let c = rng.gen_range(1..=2);
        let pred = ArrayD::from_shape_fn(IxDyn(&[1, c, h, w]), |_| rng.gen_range(0.05..0.95));
        let mut target = ArrayD::from_shape_fn(IxDyn(&[1, c, h, w]), |_| rng.gen_range(0.0..0.9));
        for _ in 0..2 {
            let idx = [0, rng.gen_range(0..c), rng.gen_range(0..h), rng.gen_range(0..w)];
            target[IxDyn(&idx)] = 1.0;
        }
        let (_, g) = loss::focal_heatmap_grad(&pred, &target).unwrap();
        let t = target.clone();
        let worst = fd_check(&|x| loss::focal_heatmap(x, &t).unwrap(), &pred, &g);
        assert!(worst < 1e-3, "trial {trial}: focal grad rel err {worst}");
        worst_overall = worst_overall.max(worst);

        // l1_sparse on (2,h,w); keep |pred - target| away from the kink
        let pred = ArrayD::from_shape_fn(IxDyn(&[2, h, w]), |_| rng.gen_range(-2.0..2.0));
        let mut target = pred.clone();
        target.mapv_inplace(|v| v + 0.5 + rng.gen_range(0.0..1.0));
        let n_centers = rng.gen_range(1..=4);
        let centers: Vec<(usize, usize)> = (0..n_centers)
            .map(|_| (rng.gen_range(0..h), rng.gen_range(0..w)))
            .collect();
        let (_, g) = loss::l1_sparse_grad(&pred, &target, &centers).unwrap();
        let (t, cs) = (target.clone(), centers.clone());
        let worst = fd_check(&|x| loss::l1_sparse(x, &t, &cs).unwrap(), &pred, &g);
        assert!(worst < 1e-3, "trial {trial}: l1 grad rel err {worst}");
        worst_overall = worst_overall.max(worst);
    }
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 60.0, "criterion 4 took {dt:?}, budget 60 s");
    println!(
        "[criterion 04] PASS - 20 finite-difference trials x 3 losses, worst rel err {worst_overall:.2e} in {dt:?}"
    );
}

// ---------------------------------------------------------------------------
// 5. Attention identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_attention_identity() {
    let cfg = ModelConfig {
        n_stacks: 1,
        base_channels: 8,
        hourglass_depth: 2,
        attention_enabled: true,
        multitask_enabled: true,
        ..ModelConfig::default()
    };
    let model = SpotNet::<f32>::new(cfg, 5).unwrap();
    let plain = model.clone_with_config(ModelConfig {
        attention_enabled: false,
        ..cfg
    });

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let image = ArrayD::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |_| rng.gen_range(0.0f32..1.0));

    let mut t1 = spotnet::tensor::Tape::<f32>::new();
    let img1 = t1.leaf(image.clone(), false);
    let forced = model.forward_on(&mut t1, img1, AttentionOverride::ForceOne).unwrap();
    let mut t2 = spotnet::tensor::Tape::<f32>::new();
    let img2 = t2.leaf(image.clone(), false);
    let off = plain.forward_on(&mut t2, img2, AttentionOverride::None).unwrap();

    let ha = t1.value(forced.heatmap);
    let hb = t2.value(off.heatmap);
    let max_abs = ha
        .iter()
        .zip(hb.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_abs <= 1e-5, "heatmap mismatch {max_abs}");

    let da = spotnet::decode::decode_output(
        t1.value(forced.heatmap),
        t1.value(forced.wh),
        t1.value(forced.offset),
        10,
        0.0,
    )
    .unwrap();
    let db = spotnet::decode::decode_output(
        t2.value(off.heatmap),
        t2.value(off.wh),
        t2.value(off.offset),
        10,
        0.0,
    )
    .unwrap();
    assert_eq!(da, db, "detections must be argmax-identical");
    println!(
        "[criterion 05] PASS - forced-1 attention matches attention-off (max |dh| = {max_abs:.1e}), detections identical"
    );
}

// ---------------------------------------------------------------------------
// 6. Annotation subset invariant
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_annotation_subset_invariant() {
    let t0 = Instant::now();
    let mut total_fg = 0usize;
    for i in 0..10u64 {
        let moving = i >= 5;
        let scene = SceneConfig {
            height: 64,
            width: 64,
            n_objects: 2,
            size_min: 8,
            size_max: 14,
            n_frames: 8,
            camera: if moving {
                CameraMotion::Pan {
                    dx: 0.5 + 0.25 * (i - 5) as f64,
                    dy: if i % 2 == 0 { 0.5 } else { 0.0 },
                }
            } else {
                CameraMotion::None
            },
            seed: 60 + i,
            ..SceneConfig::default()
        };
        let seq = loaded(&scene);
        let mut cfg = AnnotateConfig {
            mode: if moving { AnnotateMode::Moving } else { AnnotateMode::Fixed },
            ..AnnotateConfig::default()
        };
        cfg.bg.warmup_frames = 3;
        let masks = spotnet::annotate::annotate_sequence(&seq, &cfg).unwrap();
        for (t, m) in masks.iter().enumerate() {
            let clipped = spotnet::annotate::intersect_with_boxes(m, &seq.gt_boxes[t]);
            let outside = m
                .iter()
                .zip(clipped.iter())
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(
                outside, 0,
                "seq {i} frame {t}: {outside} foreground pixels outside gt boxes"
            );
            total_fg += m.iter().filter(|&&v| v == 1).count();
        }
    }
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 120.0, "criterion 6 took {dt:?}, budget 2 min");
    println!(
        "[criterion 06] PASS - {total_fg} foreground pixels across 10 sequences (5 fixed + 5 moving), all inside gt boxes, in {dt:?}"
    );
}

// ---------------------------------------------------------------------------
// 7. Annotation quality vs oracle masks
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_annotation_quality() {
    // default synthetic scene, default annotation parameters (frozen after
    // tuning against the videogen oracle)
    let seq = loaded(&SceneConfig::default());
    let cfg = AnnotateConfig::default();
    let masks = spotnet::annotate::annotate_sequence(&seq, &cfg).unwrap();
    let oracle = seq.oracle_masks.as_ref().unwrap();
    let start = cfg.bg.warmup_frames;
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in start..masks.len() {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in masks[t].iter().zip(oracle[t].iter()) {
            if a == 1 || b == 1 {
                union += 1;
                if a == 1 && b == 1 {
                    inter += 1;
                }
            }
        }
        sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        n += 1;
    }
    let mean = sum / n as f64;
    assert!(
        mean >= 0.6,
        "mean post-warmup IoU vs oracle = {mean:.4}, threshold 0.6"
    );
    println!("[criterion 07] PASS - mean annotation IoU vs oracle {mean:.4} >= 0.6 over {n} post-warmup frames");
}

// ---------------------------------------------------------------------------
// 8. Peak-extraction oracle
// ---------------------------------------------------------------------------

/// Independent reimplementation: a peak is a cell with no strictly greater
/// in-bounds 3x3 neighbour; rank by score desc, then (cy, cx, class) asc.
fn oracle_peaks(hm: &ndarray::Array3<f64>, k: usize) -> Vec<Peak> {
    let (nc, h, w) = hm.dim();
    let mut out = Vec::new();
    for class in 0..nc {
        for y in 0..h {
            for x in 0..w {
                let v = hm[[class, y, x]];
                let mut beaten = false;
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if hm[[class, yy, xx]] > v {
                            beaten = true;
                        }
                    }
                }
                if !beaten {
                    out.push(Peak { class_id: class, cy: y, cx: x, score: v });
                }
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| (a.cy, a.cx, a.class_id).cmp(&(b.cy, b.cx, b.class_id)))
    });
    out.truncate(k);
    out
}

#[test]
fn criterion_08_decode_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let (nc, h, w) = (
            rng.gen_range(1..=3),
            rng.gen_range(3..=32),
            rng.gen_range(3..=32),
        );
        let mut hm = ndarray::Array3::<f64>::from_shape_fn((nc, h, w), |_| rng.gen_range(0.0..1.0));
        // inject plateaus so the non-strict comparison is exercised
        for _ in 0..3 {
            let (c, y, x) = (rng.gen_range(0..nc), rng.gen_range(0..h), rng.gen_range(0..w));
            let v = hm[[c, y, x]];
            if y + 1 < h {
                hm[[c, y + 1, x]] = v;
            }
            if x + 1 < w {
                hm[[c, y, x + 1]] = v;
            }
        }
        let k = rng.gen_range(1..=20);
        let got = extract_peaks(&hm.view(), k).unwrap();
        let want = oracle_peaks(&hm, k);
        assert_eq!(got.len(), want.len(), "case {case}");
        for (g, o) in got.iter().zip(&want) {
            assert!(
                g.class_id == o.class_id
                    && g.cy == o.cy
                    && g.cx == o.cx
                    && g.score.to_bits() == o.score.to_bits(),
                "case {case}: {g:?} vs {o:?}"
            );
        }
    }
    println!("[criterion 08] PASS - extract_peaks matches brute-force oracle on 200 random heatmaps exactly");
}

// ---------------------------------------------------------------------------
// 9. Average-precision oracle
// ---------------------------------------------------------------------------

/// Independent AP: rank detections by descending (distinct) score, match each
/// to the best-IoU unmatched gt (>= iou_min, scanning all gts), then 11-point
/// interpolation.
fn oracle_ap(dets: &[Detection], gts: &[GtBox], iou_min: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut used = vec![false; gts.len()];
    let mut curve = Vec::new();
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let ov = evalkit::iou((d.x1, d.y1, d.x2, d.y2), (g.x1, g.y1, g.x2, g.y2));
            if ov >= iou_min && best.is_none_or(|(_, b)| ov > b) {
                best = Some((j, ov));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for step in 0..=10 {
        let r = step as f64 / 10.0;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 11.0
}

#[test]
fn criterion_09_map_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        let n_gt = rng.gen_range(0..=4);
        let gts: Vec<GtBox> = (0..n_gt)
            .map(|_| {
                let x1 = rng.gen_range(0.0..70.0);
                let y1 = rng.gen_range(0.0..70.0);
                GtBox::new(
                    0,
                    x1,
                    y1,
                    x1 + rng.gen_range(8.0..25.0),
                    y1 + rng.gen_range(8.0..25.0),
                )
                .unwrap()
            })
            .collect();
        let n_det = rng.gen_range(0..=5);
        // distinct scores so the ranking is unambiguous
        let mut scores: Vec<f64> = (0..n_det).map(|i| 0.1 + 0.15 * i as f64).collect();
        for i in (1..scores.len()).rev() {
            scores.swap(i, rng.gen_range(0..=i));
        }
        let dets: Vec<Detection> = (0..n_det)
            .map(|i| {
                let (x1, y1, x2, y2) = if !gts.is_empty() && rng.gen_bool(0.7) {
                    let g = &gts[rng.gen_range(0..gts.len())];
                    let j = rng.gen_range(-4.0..4.0);
                    (g.x1 + j, g.y1 + j, g.x2 + j, g.y2 + j)
                } else {
                    let x1 = rng.gen_range(0.0..70.0);
                    let y1 = rng.gen_range(0.0..70.0);
                    (x1, y1, x1 + 12.0, y1 + 12.0)
                };
                Detection { class_id: 0, score: scores[i], x1, y1, x2, y2 }
            })
            .collect();

        let lib = evalkit::average_precision(
            std::slice::from_ref(&dets),
            std::slice::from_ref(&gts),
            0.5,
            false,
        )
        .ap;
        let want = oracle_ap(&dets, &gts, 0.5);
        assert_eq!(
            lib.to_bits(),
            want.to_bits(),
            "case {case}: lib AP {lib} vs oracle {want}"
        );
    }

    // perfect detections give mAP exactly 1.0
    let scene = SceneConfig {
        n_frames: 4,
        seed: 99,
        ..SceneConfig::default()
    };
    let seq = loaded(&scene);
    let dets: Vec<Vec<Detection>> = seq
        .gt_boxes
        .iter()
        .map(|boxes| {
            boxes
                .iter()
                .map(|b| Detection {
                    class_id: b.class_id,
                    score: 0.9,
                    x1: b.x1,
                    y1: b.y1,
                    x2: b.x2,
                    y2: b.y2,
                })
                .collect()
        })
        .collect();
    let (map, _) = evalkit::mean_average_precision(&dets, &seq.gt_boxes, 0.7, false).unwrap();
    assert_eq!(map, 1.0, "perfect detections must score mAP 1.0");
    println!("[criterion 09] PASS - AP matches exhaustive oracle on 100 random instances exactly; perfect detections score 1.0");
}

// ---------------------------------------------------------------------------
// 10. F-measure hand value
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_f_measure_hand_value() {
    // TP=2, FP=1, FN=1
    let pred = ndarray::arr2(&[[1u8, 1], [1, 0]]);
    let gt = ndarray::arr2(&[[1u8, 1], [0, 1]]);
    let (_, _, f) = evalkit::f_measure(&pred, &gt).unwrap();
    assert!((f - 2.0 / 3.0).abs() < 1e-9, "F = {f}, want 2/3");
    println!("[criterion 10] PASS - F(TP=2, FP=1, FN=1) = {f:.9} (2/3)");
}

// ---------------------------------------------------------------------------
// 11. End-to-end overfit
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_end_to_end_overfit() {
    let t0 = Instant::now();
    let scene = SceneConfig {
        n_frames: 8,
        seed: 7,
        ..SceneConfig::default() // 128x128, 3 objects
    };
    let seq = loaded(&scene);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        data_dirs: vec![],
        out_dir: dir.path().to_path_buf(),
        model: ModelConfig {
            n_stacks: 2,
            base_channels: 32,
            hourglass_depth: 4,
            attention_enabled: true,
            multitask_enabled: true,
            ..ModelConfig::default()
        },
        n_iters: 600, // well under the 2000-iteration budget
        seed: 0,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    assert!(cfg.n_iters <= 2000);
    let out = spotnet::trainer::train::<f32>(std::slice::from_ref(&seq), &cfg).unwrap();

    let (dets, gts) = spotnet::trainer::detect_frames(&out.model, &[seq], 20, 0.25).unwrap();
    let (map, _) = evalkit::mean_average_precision(&dets, &gts, 0.7, false).unwrap();
    let dt = t0.elapsed();
    assert!(
        dt.as_secs_f64() < 90.0 * 60.0,
        "criterion 11 took {dt:?}, budget 90 min"
    );
    assert!(
        map >= 0.9,
        "train-set mAP@0.7 = {map:.4} after {} iterations, need >= 0.9",
        cfg.n_iters
    );
    println!(
        "[criterion 11] PASS - overfit 8 frames in {} iterations: train-set mAP@0.7 = {map:.4} in {:.1} min",
        cfg.n_iters,
        dt.as_secs_f64() / 60.0
    );
}

// ---------------------------------------------------------------------------
// 12. Ablation harness (one command, three rows)
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_ablation_harness() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SceneConfig {
        height: 64,
        width: 64,
        n_objects: 2,
        size_min: 8,
        size_max: 14,
        n_frames: 10,
        seed: 12,
        ..SceneConfig::default()
    };
    let seq = gen_sequence(&scene).unwrap();
    let seq_dir = dir.path().join("seq");
    spotnet::dataio::write_sequence(&seq, &seq_dir).unwrap();

    let ablate_out = dir.path().join("ablate");
    let cfg = spotnet::config::RunConfig {
        ablate: Some(AblateConfig {
            train: TrainConfig {
                data_dirs: vec![seq_dir.clone()],
                out_dir: PathBuf::new(), // per-row dirs come from the harness
                model: ModelConfig {
                    n_stacks: 1,
                    base_channels: 16,
                    hourglass_depth: 3,
                    ..ModelConfig::default()
                },
                lr: 1e-3,
                batch_size: 2,
                n_iters: 150,
                seed: 3,
                checkpoint_every: 0,
                ..TrainConfig::default()
            },
            eval_seq_dirs: vec![seq_dir],
            out_dir: ablate_out.clone(),
            iou_min: 0.7,
            top_k: 10,
            score_thresh: 0.25,
        }),
        ..Default::default()
    };
    let cfg_path = dir.path().join("config.json");
    spotnet::dataio::write_json(&cfg_path, &cfg).unwrap();

    // one command produces all three rows
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_spotnet"))
        .args(["ablate", "--config", cfg_path.to_str().unwrap()])
        .env("SPOTNET_NUM_THREADS", "1")
        .status()
        .expect("spawn spotnet ablate");
    assert!(status.success(), "ablate exited with {status}");

    let report: spotnet::trainer::AblationReport =
        spotnet::dataio::read_json(&ablate_out.join("ablation_report.json")).unwrap();
    assert_eq!(report.rows.len(), 3, "expected exactly 3 ablation rows");
    let flags: Vec<(bool, bool)> = report
        .rows
        .iter()
        .map(|r| (r.attention, r.multitask))
        .collect();
    assert_eq!(
        flags,
        vec![(true, true), (false, true), (false, false)],
        "rows must follow the attention+multitask / multitask-only / baseline shape"
    );
    for r in &report.rows {
        assert!(
            r.final_loss < 0.5 * r.initial_loss,
            "row {}: smoothed loss {:.4} -> {:.4} did not halve",
            r.name,
            r.initial_loss,
            r.final_loss
        );
    }
    assert!(ablate_out.join("ablation_table.csv").is_file());
    assert!(ablate_out.join("pr_curves.png").is_file());
    let summary: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} {:.3}->{:.3}", r.name, r.initial_loss, r.final_loss))
        .collect();
    println!(
        "[criterion 12] PASS - one ablate command, 3 rows, losses halved: {}",
        summary.join("; ")
    );
}
