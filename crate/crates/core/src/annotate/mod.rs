//! Semi-supervised segmentation labels from motion cues: background
//! subtraction for fixed cameras, median-compensated optical flow for moving
//! ones, then an intersection with the ground-truth boxes so that everything
//! outside a box is labelled background.

pub mod bg;
pub mod flow;

pub use bg::{bg_subtract_sequence, BgModel};
pub use flow::flow_field;

use ndarray::Array2;

use crate::config::{AnnotateConfig, AnnotateMode, FlowParams};
use crate::dataio::LoadedSequence;
use crate::error::{Error, Result};
use crate::types::{FlowField, GtBox, SegMask};

// ---------------------------------------------------------------------------
// Binary morphology (3x3 box structuring element)
// ---------------------------------------------------------------------------

fn erode3(mask: &SegMask) -> SegMask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    return 0; // outside counts as background
                }
                if mask[[yy as usize, xx as usize]] == 0 {
                    return 0;
                }
            }
        }
        1
    })
}

fn dilate3(mask: &SegMask) -> SegMask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize
                    && mask[[yy as usize, xx as usize]] == 1
                {
                    return 1;
                }
            }
        }
        0
    })
}

/// Morphological opening: erode then dilate (removes salt noise).
pub fn open3(mask: &SegMask) -> SegMask {
    dilate3(&erode3(mask))
}

/// Morphological closing: dilate then erode (fills small holes).
pub fn close3(mask: &SegMask) -> SegMask {
    erode3(&dilate3(mask))
}

// ---------------------------------------------------------------------------
// Flow-based masks
// ---------------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Residual-motion mask from one flow field: subtract the median flow vector
/// (dominant motion, i.e. the camera), threshold the residual magnitude, then
/// open+close.
pub fn flow_to_mask(flow: &FlowField, mag_threshold: f64) -> SegMask {
    let med_dx = median(flow.dx.iter().cloned().collect());
    let med_dy = median(flow.dy.iter().cloned().collect());
    let raw = Array2::from_shape_fn(flow.dx.dim(), |(y, x)| {
        let rx = flow.dx[[y, x]] - med_dx;
        let ry = flow.dy[[y, x]] - med_dy;
        u8::from((rx * rx + ry * ry).sqrt() > mag_threshold)
    });
    close3(&open3(&raw))
}

/// Per-frame motion masks for a whole sequence; the last frame reuses the
/// flow of the previous pair so every frame gets a mask.
pub fn flow_motion_mask(
    frames: &[Array2<u8>],
    params: &FlowParams,
    mag_threshold: f64,
) -> Result<Vec<SegMask>> {
    if frames.len() < 2 {
        return Err(Error::SequenceTooShort {
            got: frames.len(),
            need: 2,
            why: "optical flow needs consecutive frames".into(),
        });
    }
    let mut masks = Vec::with_capacity(frames.len());
    for t in 0..frames.len() - 1 {
        let fl = flow_field(&frames[t], &frames[t + 1], params)?;
        masks.push(flow_to_mask(&fl, mag_threshold));
    }
    masks.push(masks.last().expect("n >= 2").clone());
    Ok(masks)
}

// ---------------------------------------------------------------------------
// Box intersection and the full pipeline
// ---------------------------------------------------------------------------

/// Keep only foreground inside some ground-truth box; everything else is
/// background by definition.
pub fn intersect_with_boxes(mask: &SegMask, boxes: &[GtBox]) -> SegMask {
    Array2::from_shape_fn(mask.dim(), |(y, x)| {
        if mask[[y, x]] == 0 {
            return 0;
        }
        let (xf, yf) = (x as f64, y as f64);
        u8::from(
            boxes
                .iter()
                .any(|b| xf >= b.x1 && xf < b.x2 && yf >= b.y1 && yf < b.y2),
        )
    })
}

/// The full §-3.4-style pipeline: per-mode motion masks intersected with the
/// ground-truth boxes.
pub fn annotate_sequence(seq: &LoadedSequence, cfg: &AnnotateConfig) -> Result<Vec<SegMask>> {
    let raw = match cfg.mode {
        AnnotateMode::Fixed => bg_subtract_sequence(&seq.frames, &cfg.bg)?,
        AnnotateMode::Moving => flow_motion_mask(&seq.frames, &cfg.flow, cfg.mag_threshold)?,
    };
    Ok(raw
        .iter()
        .zip(&seq.gt_boxes)
        .map(|(m, boxes)| intersect_with_boxes(m, boxes))
        .collect())
}
