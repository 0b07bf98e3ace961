//! Training loop (adaptive-moment SGD), metrics logging, checkpointing, and
//! the three-row ablation harness (attention+multitask / multitask only /
//! neither).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{AblateConfig, SegLossKind, TrainConfig};
use crate::dataio::LoadedSequence;
use crate::decode;
use crate::error::{Error, Result};
use crate::evalkit;
use crate::loss::{self, FocalLossOp, L1SparseOp, LossBreakdown, SegLossOp};
use crate::net::{AttentionOverride, SpotNet};
use crate::plot;
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::types::{Detection, GtBox};

/// One training frame, fully preprocessed.
struct Sample<F: Scalar> {
    /// (in_channels, H, W) in [0,1].
    image: ArrayD<F>,
    targets: loss::ImageTargets<F>,
    /// (1, H, W) binary mask; present iff the dataset carries masks.
    seg: Option<ArrayD<F>>,
    boxes: Vec<GtBox>,
}

impl<F: Scalar> Sample<F> {
    /// Horizontal mirror (the only augmentation).
    fn flipped(&self, n_classes: usize) -> Result<Sample<F>> {
        let w = self.image.shape()[2] as f64;
        let image = self.image.slice(ndarray::s![.., .., ..;-1]).to_owned().into_dyn();
        let seg = self
            .seg
            .as_ref()
            .map(|s| s.slice(ndarray::s![.., .., ..;-1]).to_owned().into_dyn());
        let boxes: Vec<GtBox> = self
            .boxes
            .iter()
            .map(|b| GtBox::new(b.class_id, w - b.x2, b.y1, w - b.x1, b.y2))
            .collect::<Result<_>>()?;
        let (h, wd) = (self.image.shape()[1], self.image.shape()[2]);
        let targets = loss::splat_targets(&boxes, h, wd, n_classes)?;
        Ok(Sample {
            image,
            targets,
            seg,
            boxes,
        })
    }
}

/// Grayscale frame -> (channels, H, W) float tensor in [0,1]; the single
/// luma plane is replicated across channels.
pub fn image_tensor<F: Scalar>(frame: &ndarray::Array2<u8>, channels: usize) -> ArrayD<F> {
    let (h, w) = frame.dim();
    ArrayD::from_shape_fn(IxDyn(&[channels, h, w]), |ix| {
        F::of(frame[[ix[1], ix[2]]] as f64 / 255.0)
    })
}

fn build_samples<F: Scalar>(
    seqs: &[LoadedSequence],
    cfg: &TrainConfig,
) -> Result<Vec<Sample<F>>> {
    let model = &cfg.model;
    let mut samples = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for seq in seqs {
        let masks = seq.training_masks();
        if model.multitask_enabled && masks.is_none() {
            return Err(Error::Data(format!(
                "multitask training requires segmentation masks, but {} has none \
                 (run `spotnet annotate` first or generate with oracle masks)",
                seq.dir.display()
            )));
        }
        for (t, frame) in seq.frames.iter().enumerate() {
            let (h, w) = frame.dim();
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(Error::Data(format!(
                        "mixed frame sizes in training set: {:?} vs ({h}, {w})",
                        d
                    )))
                }
                _ => {}
            }
            let boxes = seq.gt_boxes[t].clone();
            for b in &boxes {
                if b.class_id >= model.n_classes {
                    return Err(Error::Data(format!(
                        "box class {} but model has {} classes",
                        b.class_id, model.n_classes
                    )));
                }
            }
            let targets = loss::splat_targets(&boxes, h, w, model.n_classes)?;
            let seg = masks.map(|m| {
                ArrayD::from_shape_fn(IxDyn(&[1, h, w]), |ix| {
                    F::of(m[t][[ix[1], ix[2]]] as f64)
                })
            });
            samples.push(Sample {
                image: image_tensor(frame, model.in_channels),
                targets,
                seg,
                boxes,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Data("training set has no frames".into()));
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction; gradients are pre-clipped by global norm.
pub struct Adam<F: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, ArrayD<F>>,
        grads: &BTreeMap<String, ArrayD<F>>,
    ) {
        self.t += 1;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one = F::one();
        let corr1 = F::of(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::of(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::of(self.lr);
        let eps = F::of(self.eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / corr1;
                    let vhat = *v / corr2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `clip`.
fn clip_global_norm<F: Scalar>(grads: &mut BTreeMap<String, ArrayD<F>>, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|&v| v.f64() * v.f64()).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > clip {
        let s = F::of(clip / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutcome<F: Scalar> {
    pub model: SpotNet<F>,
    /// One breakdown per iteration, all in f64 for logging.
    pub trace: Vec<LossBreakdown<f64>>,
    /// Periodic checkpoints plus the final `model.ckpt` (last entry).
    pub checkpoints: Vec<PathBuf>,
    pub log_csv: PathBuf,
}

/// Mean of the first / last `window` L_tot values (for before/after checks).
pub fn smoothed_endpoints(trace: &[LossBreakdown<f64>], window: usize) -> (f64, f64) {
    let w = window.clamp(1, trace.len());
    let head: f64 = trace[..w].iter().map(|b| b.l_tot).sum::<f64>() / w as f64;
    let tail: f64 =
        trace[trace.len() - w..].iter().map(|b| b.l_tot).sum::<f64>() / w as f64;
    (head, tail)
}

pub fn train<F: Scalar>(seqs: &[LoadedSequence], cfg: &TrainConfig) -> Result<TrainOutcome<F>> {
    cfg.model.validate()?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config("lr must be positive and finite".into()));
    }
    if cfg.batch_size == 0 || cfg.n_iters == 0 {
        return Err(Error::Config("batch_size and n_iters must be >= 1".into()));
    }
    if cfg.seg_weight < 0.0 || cfg.wh_weight < 0.0 {
        return Err(Error::Config("loss weights must be >= 0".into()));
    }
    // fails before iteration 0 when multitask masks are missing
    let samples = build_samples::<F>(seqs, cfg)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_csv = cfg.out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_csv).map_err(|e| Error::io(&log_csv, e))?,
    );
    writeln!(log, "iteration,l_heat,l_off,l_seg,l_wh,l_tot").map_err(|e| Error::io(&log_csv, e))?;

    let mut model = SpotNet::<F>::new(cfg.model, cfg.seed)?;
    let mut opt = Adam::<F>::new(cfg.lr);
    // distinct stream from the weight init
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));

    let n_classes = cfg.model.n_classes;
    let (h, w) = {
        let s = samples[0].image.shape();
        (s[1], s[2])
    };
    let (h4, w4) = (h / 4, w / 4);

    let mut trace: Vec<LossBreakdown<f64>> = Vec::with_capacity(cfg.n_iters);
    let mut checkpoints = Vec::new();

    for it in 0..cfg.n_iters {
        // assemble the batch
        let n = cfg.batch_size;
        let mut images = ArrayD::<F>::zeros(IxDyn(&[n, cfg.model.in_channels, h, w]));
        let mut heat_t = ArrayD::<F>::zeros(IxDyn(&[n, n_classes, h4, w4]));
        let mut wh_t = ArrayD::<F>::zeros(IxDyn(&[n, 2, h4, w4]));
        let mut off_t = ArrayD::<F>::zeros(IxDyn(&[n, 2, h4, w4]));
        let mut seg_t = ArrayD::<F>::zeros(IxDyn(&[n, 1, h, w]));
        let mut centers: Vec<(usize, usize, usize)> = Vec::new();
        for i in 0..n {
            let idx = rng.gen_range(0..samples.len());
            let flip = cfg.flip_augment && rng.gen_bool(0.5);
            let owned;
            let s: &Sample<F> = if flip {
                owned = samples[idx].flipped(n_classes)?;
                &owned
            } else {
                &samples[idx]
            };
            images
                .slice_mut(ndarray::s![i, .., .., ..])
                .assign(&s.image.view().into_dimensionality::<ndarray::Ix3>().expect("3d"));
            heat_t
                .slice_mut(ndarray::s![i, .., .., ..])
                .assign(&s.targets.heatmap);
            wh_t.slice_mut(ndarray::s![i, .., .., ..]).assign(&s.targets.wh);
            off_t
                .slice_mut(ndarray::s![i, .., .., ..])
                .assign(&s.targets.offset);
            if let Some(seg) = &s.seg {
                seg_t
                    .slice_mut(ndarray::s![i, .., .., ..])
                    .assign(&seg.view().into_dimensionality::<ndarray::Ix3>().expect("3d"));
            }
            for &(cy, cx) in &s.targets.centers {
                centers.push((i, cy, cx));
            }
        }

        // forward + losses on a fresh tape
        let mut tape = Tape::<F>::new();
        let img_node = tape.leaf(images, false);
        let pass = model.forward_on(&mut tape, img_node, AttentionOverride::None)?;
        let l_heat = tape.custom(Box::new(FocalLossOp { target: heat_t }), &[pass.heatmap])?;
        let l_off = tape.custom(
            Box::new(L1SparseOp {
                target: off_t,
                centers: centers.clone(),
            }),
            &[pass.offset],
        )?;
        let l_wh = tape.custom(
            Box::new(L1SparseOp {
                target: wh_t,
                centers,
            }),
            &[pass.wh],
        )?;
        let l_seg = if cfg.model.multitask_enabled {
            Some(tape.custom(
                Box::new(SegLossOp {
                    target: seg_t,
                    mse: matches!(cfg.seg_loss, SegLossKind::Mse),
                }),
                &[pass.attention],
            )?)
        } else {
            None
        };

        let mut terms: Vec<(crate::tensor::NodeId, F)> =
            vec![(l_heat, F::one()), (l_off, F::one()), (l_wh, F::of(cfg.wh_weight))];
        if let Some(ls) = l_seg {
            // weight 0 stays out of the graph so the seg head receives its
            // gradients only through the attention path
            if cfg.seg_weight > 0.0 {
                terms.push((ls, F::of(cfg.seg_weight)));
            }
        }
        let total = tape.weighted_sum(&terms)?;

        let hv = tape.value(l_heat)[[0]].f64();
        let ov = tape.value(l_off)[[0]].f64();
        let sv = l_seg.map(|n| tape.value(n)[[0]].f64()).unwrap_or(0.0);
        let wv = tape.value(l_wh)[[0]].f64();
        let bd = loss::total_loss(
            hv,
            ov,
            sv,
            wv,
            cfg.model.multitask_enabled,
            cfg.seg_weight,
            cfg.wh_weight,
        )
        .map_err(|e| {
            Error::NonFinite(format!("aborting at iteration {it}: {e}"))
        })?;
        if !bd.l_tot.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at iteration {it}: heat={} off={} seg={} wh={} — aborting",
                bd.l_heat, bd.l_off, bd.l_seg, bd.l_wh
            )));
        }

        tape.backward(total)?;
        let mut grads: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
        for (name, &node) in &pass.params {
            if let Some(g) = tape.grad(node) {
                grads.insert(name.clone(), g.clone());
            }
        }
        drop(tape);
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut model.params, &grads);

        writeln!(
            log,
            "{it},{},{},{},{},{}",
            bd.l_heat, bd.l_off, bd.l_seg, bd.l_wh, bd.l_tot
        )
        .map_err(|e| Error::io(&log_csv, e))?;
        trace.push(bd);

        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.n_iters
        {
            let path = cfg.out_dir.join(format!("checkpoint_{:06}.ckpt", it + 1));
            checkpoint::save_model(&path, &model)?;
            checkpoints.push(path);
        }
    }
    log.flush().map_err(|e| Error::io(&log_csv, e))?;

    let final_path = cfg.out_dir.join("model.ckpt");
    checkpoint::save_model(&final_path, &model)?;
    checkpoints.push(final_path);

    Ok(TrainOutcome {
        model,
        trace,
        checkpoints,
        log_csv,
    })
}

// ---------------------------------------------------------------------------
// Evaluation plumbing shared by ablate and the CLI
// ---------------------------------------------------------------------------

/// Run the detector over every frame of the sequences; one detection list
/// per frame, frames in sequence order.
#[allow(clippy::type_complexity)]
pub fn detect_frames<F: Scalar>(
    model: &SpotNet<F>,
    seqs: &[LoadedSequence],
    top_k: usize,
    score_thresh: f64,
) -> Result<(Vec<Vec<Detection>>, Vec<Vec<GtBox>>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for seq in seqs {
        for (t, frame) in seq.frames.iter().enumerate() {
            let img = image_tensor::<F>(frame, model.config.in_channels)
                .insert_axis(ndarray::Axis(0));
            let mut d = decode::detect(model, &img, top_k, score_thresh)?;
            dets.push(d.remove(0));
            gts.push(seq.gt_boxes[t].clone());
        }
    }
    Ok((dets, gts))
}

// ---------------------------------------------------------------------------
// Ablation harness (Table-IV shape: attention+multitask / multitask / neither)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub attention: bool,
    pub multitask: bool,
    pub map: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub iou_min: f64,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_ROWS: [(&str, bool, bool); 3] = [
    ("attention_multitask", true, true),
    ("multitask_only", false, true),
    ("baseline", false, false),
];

/// Train the three Table-IV configurations with identical seeds and frames,
/// evaluate each on the same held-out frames, and write report + PR curves.
pub fn ablate<F: Scalar>(
    train_seqs: &[LoadedSequence],
    eval_seqs: &[LoadedSequence],
    cfg: &AblateConfig,
) -> Result<AblationReport> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut rows = Vec::new();
    let mut plot_series = Vec::new();
    for (name, attention, multitask) in ABLATION_ROWS {
        let mut tc = cfg.train.clone();
        tc.model.attention_enabled = attention;
        tc.model.multitask_enabled = multitask;
        tc.out_dir = cfg.out_dir.join(name);
        let outcome = train::<F>(train_seqs, &tc)?;
        let (init, fin) = smoothed_endpoints(&outcome.trace, 10);

        let (dets, gts) =
            detect_frames(&outcome.model, eval_seqs, cfg.top_k, cfg.score_thresh)?;
        let (map, curves) =
            evalkit::mean_average_precision(&dets, &gts, cfg.iou_min, false)?;
        for (class, curve) in &curves {
            let path = tc.out_dir.join(format!("pr_class{class}.csv"));
            evalkit::write_pr_csv(&path, curve)?;
            plot_series.push(plot::Series {
                label: format!("{name}_class{class}"),
                points: curve.points.clone(),
            });
        }

        rows.push(AblationRow {
            name: name.to_string(),
            attention,
            multitask,
            map,
            initial_loss: init,
            final_loss: fin,
            checkpoint: outcome
                .checkpoints
                .last()
                .expect("train always writes a final checkpoint")
                .clone(),
        });
    }

    let report = AblationReport {
        iou_min: cfg.iou_min,
        rows,
    };
    let json_path = cfg.out_dir.join("ablation_report.json");
    crate::dataio::write_json(&json_path, &report)?;
    let csv_path = cfg.out_dir.join("ablation_table.csv");
    let mut csv = String::from("name,attention,multitask,map,initial_loss,final_loss\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name, r.attention, r.multitask, r.map, r.initial_loss, r.final_loss
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    plot::line_plot(
        &cfg.out_dir.join("pr_curves.png"),
        &plot_series,
        (0.0, 1.0),
        (0.0, 1.0),
    )?;
    Ok(report)
}
