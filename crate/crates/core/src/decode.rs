//! Decoding: NetworkOutput -> scored boxes. Center cells are 3x3 local
//! maxima of the class heatmaps (no box NMS — keypoint decoding replaces it);
//! size and offset regressions turn a cell into a box.

use ndarray::{ArrayD, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::loss::STRIDE;
use crate::net::SpotNet;
use crate::scalar::Scalar;
use crate::types::Detection;

/// One heatmap peak: class channel, cell coordinates, score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub cy: usize,
    pub cx: usize,
    pub score: f64,
}

/// Cells that are non-strict maxima of their 3x3 neighborhood, best `k` by
/// score across all classes. Equal scores order by (cy, cx, class), i.e. the
/// top-left-most cell wins the tie.
///
/// Plateaus count: a cell equal to its neighbors is a maximum (so a uniform
/// heatmap yields every cell). This follows the reference max-pool decoding.
pub fn extract_peaks<F: Scalar>(heatmap: &ArrayView3<'_, F>, k: usize) -> Result<Vec<Peak>> {
    if k == 0 {
        return Err(Error::InvalidArgument("extract_peaks: k must be > 0".into()));
    }
    let (classes, h, w) = heatmap.dim();
    let mut peaks: Vec<Peak> = Vec::new();
    for c in 0..classes {
        for y in 0..h {
            for x in 0..w {
                let v = heatmap[[c, y, x]];
                let mut is_max = true;
                'scan: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        if heatmap[[c, yy as usize, xx as usize]] > v {
                            is_max = false;
                            break 'scan;
                        }
                    }
                }
                if is_max {
                    peaks.push(Peak {
                        class_id: c,
                        cy: y,
                        cx: x,
                        score: v.f64(),
                    });
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("heatmap scores are finite")
            .then(a.cy.cmp(&b.cy))
            .then(a.cx.cmp(&b.cx))
            .then(a.class_id.cmp(&b.class_id))
    });
    peaks.truncate(k);
    Ok(peaks)
}

/// Turn peaks into boxes: center = (cell + offset) * stride, size = the wh
/// regression clamped at 0. Degenerate (zero-area after clipping) boxes and
/// scores below `score_thresh` are dropped; boxes are clipped to the image.
///
/// `wh` and `offset` are (2, H/4, W/4): channel 0 = x/width, 1 = y/height.
pub fn assemble_boxes<F: Scalar>(
    peaks: &[Peak],
    wh: &ArrayView3<'_, F>,
    offset: &ArrayView3<'_, F>,
    stride: usize,
    img_h: usize,
    img_w: usize,
    score_thresh: f64,
) -> Result<Vec<Detection>> {
    if wh.dim().0 != 2 || offset.dim().0 != 2 {
        return Err(Error::Shape(format!(
            "assemble_boxes: wh {:?} / offset {:?} need 2 channels",
            wh.dim(),
            offset.dim()
        )));
    }
    let s = stride as f64;
    let mut out = Vec::new();
    for p in peaks {
        if p.score < score_thresh {
            continue;
        }
        let (cy, cx) = (p.cy, p.cx);
        let cxf = (cx as f64 + offset[[0, cy, cx]].f64()) * s;
        let cyf = (cy as f64 + offset[[1, cy, cx]].f64()) * s;
        let bw = wh[[0, cy, cx]].f64().max(0.0);
        let bh = wh[[1, cy, cx]].f64().max(0.0);
        let x1 = (cxf - bw / 2.0).clamp(0.0, img_w as f64);
        let x2 = (cxf + bw / 2.0).clamp(0.0, img_w as f64);
        let y1 = (cyf - bh / 2.0).clamp(0.0, img_h as f64);
        let y2 = (cyf + bh / 2.0).clamp(0.0, img_h as f64);
        if x2 <= x1 || y2 <= y1 {
            continue;
        }
        out.push(Detection {
            class_id: p.class_id,
            score: p.score,
            x1,
            y1,
            x2,
            y2,
        });
    }
    Ok(out)
}

/// Forward + peak extraction + box assembly for a batch of images
/// (N, in_channels, H, W). One detection list per image; no NMS.
pub fn detect<F: Scalar>(
    model: &SpotNet<F>,
    images: &ArrayD<F>,
    top_k: usize,
    score_thresh: f64,
) -> Result<Vec<Vec<Detection>>> {
    let out = model.infer(images)?;
    decode_output(&out.heatmap, &out.wh, &out.offset, top_k, score_thresh)
}

/// Decode already-computed network outputs (all (N, ch, H/4, W/4)).
pub fn decode_output<F: Scalar>(
    heatmap: &ArrayD<F>,
    wh: &ArrayD<F>,
    offset: &ArrayD<F>,
    top_k: usize,
    score_thresh: f64,
) -> Result<Vec<Vec<Detection>>> {
    let shape = heatmap.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("decode_output: heatmap {shape:?}")));
    }
    let (h4, w4) = (shape[2], shape[3]);
    let (img_h, img_w) = (h4 * STRIDE, w4 * STRIDE);
    let n = shape[0];
    let mut all = Vec::with_capacity(n);
    for i in 0..n {
        let hm = heatmap.index_axis(Axis(0), i);
        let hm3 = hm
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let whv = wh
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let offv = offset
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let peaks = extract_peaks(&hm3, top_k)?;
        all.push(assemble_boxes(
            &peaks,
            &whv,
            &offv,
            STRIDE,
            img_h,
            img_w,
            score_thresh,
        )?);
    }
    Ok(all)
}
