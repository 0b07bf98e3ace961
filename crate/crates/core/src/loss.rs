//! Training losses: segmentation binary cross-entropy (Eq. 1), the
//! penalty-reduced focal loss on center heatmaps, sparse L1 regression losses,
//! Gaussian target splatting, and the Eq. 2 weighted total
//! `L_tot = L_heat + L_off + L_seg + 0.1 * L_WH`.
//!
//! Every loss comes as a plain `value` / `value_and_grad` pair plus a
//! [`CustomOp`] wrapper so the tape can backprop through it.

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::CustomOp;
use crate::types::GtBox;

/// Probability clamp for both BCE and focal losses; keeps gradients bounded.
pub const PROB_EPS: f64 = 1e-7;

/// Network stride: heatmap/regression grids are input/4.
pub const STRIDE: usize = 4;

/// Minimum IoU kept by the Gaussian-radius rule when splatting targets.
pub const SPLAT_MIN_OVERLAP: f64 = 0.7;

fn clamp01<F: Scalar>(x: F) -> F {
    let lo = F::of(PROB_EPS);
    let hi = F::one() - lo;
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

fn check_same_shape<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Eq. 1: segmentation binary cross-entropy
// ---------------------------------------------------------------------------

/// `-(1/N) * sum[y*log(x) + (1-y)*log(1-x)]` with x clamped to [eps, 1-eps].
pub fn bce_seg<F: Scalar>(pred: &ArrayD<F>, target: &ArrayD<F>) -> Result<F> {
    check_same_shape(pred, target, "bce_seg")?;
    let n = F::of(pred.len() as f64);
    let mut acc = F::zero();
    for (&x, &y) in pred.iter().zip(target.iter()) {
        let x = clamp01(x);
        acc += y * x.ln() + (F::one() - y) * (F::one() - x).ln();
    }
    Ok(-acc / n)
}

/// Value plus gradient w.r.t. the prediction. Inside the clamp range the
/// gradient is `-(1/N) * (y/x - (1-y)/(1-x))`; where the clamp binds it is 0.
pub fn bce_seg_grad<F: Scalar>(pred: &ArrayD<F>, target: &ArrayD<F>) -> Result<(F, ArrayD<F>)> {
    check_same_shape(pred, target, "bce_seg")?;
    let n = F::of(pred.len() as f64);
    let lo = F::of(PROB_EPS);
    let hi = F::one() - lo;
    let mut acc = F::zero();
    let mut grad = ArrayD::<F>::zeros(pred.raw_dim());
    for ((&x, &y), g) in pred.iter().zip(target.iter()).zip(grad.iter_mut()) {
        let xc = clamp01(x);
        acc += y * xc.ln() + (F::one() - y) * (F::one() - xc).ln();
        if x > lo && x < hi {
            *g = -(y / xc - (F::one() - y) / (F::one() - xc)) / n;
        }
    }
    Ok((-acc / n, grad))
}

/// Mean squared error alternative for the segmentation head (the paper notes
/// BCE "works better than the initial mean squared error"; MSE stays available
/// behind the `seg_loss` config flag).
pub fn mse_seg<F: Scalar>(pred: &ArrayD<F>, target: &ArrayD<F>) -> Result<F> {
    check_same_shape(pred, target, "mse_seg")?;
    let n = F::of(pred.len() as f64);
    let mut acc = F::zero();
    for (&x, &y) in pred.iter().zip(target.iter()) {
        acc += (x - y) * (x - y);
    }
    Ok(acc / n)
}

pub fn mse_seg_grad<F: Scalar>(pred: &ArrayD<F>, target: &ArrayD<F>) -> Result<(F, ArrayD<F>)> {
    check_same_shape(pred, target, "mse_seg")?;
    let n = F::of(pred.len() as f64);
    let two = F::of(2.0);
    let mut acc = F::zero();
    let mut grad = ArrayD::<F>::zeros(pred.raw_dim());
    for ((&x, &y), g) in pred.iter().zip(target.iter()).zip(grad.iter_mut()) {
        acc += (x - y) * (x - y);
        *g = two * (x - y) / n;
    }
    Ok((acc / n, grad))
}

// ---------------------------------------------------------------------------
// Penalty-reduced focal loss on center heatmaps
// ---------------------------------------------------------------------------

/// Penalty-reduced pixel-wise focal loss (alpha=2, beta=4): cells with
/// target 1 contribute `(1-p)^2 * log p`, all others
/// `(1-t)^4 * p^2 * log(1-p)`; the negated sum is divided by the number of
/// target-1 cells (min 1).
pub fn focal_heatmap<F: Scalar>(pred: &ArrayD<F>, target: &ArrayD<F>) -> Result<F> {
    Ok(focal_heatmap_grad_impl(pred, target, false)?.0)
}

pub fn focal_heatmap_grad<F: Scalar>(
    pred: &ArrayD<F>,
    target: &ArrayD<F>,
) -> Result<(F, ArrayD<F>)> {
    let (v, g) = focal_heatmap_grad_impl(pred, target, true)?;
    Ok((v, g.expect("grad requested")))
}

fn focal_heatmap_grad_impl<F: Scalar>(
    pred: &ArrayD<F>,
    target: &ArrayD<F>,
    want_grad: bool,
) -> Result<(F, Option<ArrayD<F>>)> {
    check_same_shape(pred, target, "focal_heatmap")?;
    let one = F::one();
    let lo = F::of(PROB_EPS);
    let hi = one - lo;
    let n_pos = target.iter().filter(|&&t| t == one).count().max(1);
    let norm = F::of(n_pos as f64);
    let mut acc = F::zero();
    let mut grad = if want_grad { Some(ArrayD::<F>::zeros(pred.raw_dim())) } else { None };
    for (i, (&p_raw, &t)) in pred.iter().zip(target.iter()).enumerate() {
        let p = clamp01(p_raw);
        let q = one - p;
        if t == one {
            acc += q * q * p.ln();
            if let Some(g) = grad.as_mut() {
                if p_raw > lo && p_raw < hi {
                    // d/dp[-(1-p)^2 ln p] / n
                    g.as_slice_mut().unwrap()[i] = (F::of(2.0) * q * p.ln() - q * q / p) / norm;
                }
            }
        } else {
            let w = (one - t).powi(4);
            acc += w * p * p * q.ln();
            if let Some(g) = grad.as_mut() {
                if p_raw > lo && p_raw < hi {
                    // d/dp[-(1-t)^4 p^2 ln(1-p)] / n
                    g.as_slice_mut().unwrap()[i] = -w * (F::of(2.0) * p * q.ln() - p * p / q) / norm;
                }
            }
        }
    }
    Ok((-acc / norm, grad))
}

// ---------------------------------------------------------------------------
// Sparse L1 regression (wh and offset heads)
// ---------------------------------------------------------------------------

/// Mean absolute error over the listed center cells only, both channels.
/// `pred` and `target` are (2, h, w); returns 0 for an empty center list.
pub fn l1_sparse<F: Scalar>(
    pred: &ArrayD<F>,
    target: &ArrayD<F>,
    centers: &[(usize, usize)],
) -> Result<F> {
    Ok(l1_sparse_grad_impl(pred, target, centers, false)?.0)
}

pub fn l1_sparse_grad<F: Scalar>(
    pred: &ArrayD<F>,
    target: &ArrayD<F>,
    centers: &[(usize, usize)],
) -> Result<(F, ArrayD<F>)> {
    let (v, g) = l1_sparse_grad_impl(pred, target, centers, true)?;
    Ok((v, g.expect("grad requested")))
}

fn l1_sparse_grad_impl<F: Scalar>(
    pred: &ArrayD<F>,
    target: &ArrayD<F>,
    centers: &[(usize, usize)],
    want_grad: bool,
) -> Result<(F, Option<ArrayD<F>>)> {
    check_same_shape(pred, target, "l1_sparse")?;
    if pred.ndim() != 3 || pred.shape()[0] != 2 {
        return Err(Error::Shape(format!(
            "l1_sparse expects (2, h, w) maps, got {:?}",
            pred.shape()
        )));
    }
    let (h, w) = (pred.shape()[1], pred.shape()[2]);
    let mut grad = if want_grad { Some(ArrayD::<F>::zeros(pred.raw_dim())) } else { None };
    if centers.is_empty() {
        return Ok((F::zero(), grad));
    }
    for &(cy, cx) in centers {
        if cy >= h || cx >= w {
            return Err(Error::InvalidArgument(format!(
                "center ({cy},{cx}) outside {h}x{w} grid"
            )));
        }
    }
    let count = F::of((centers.len() * 2) as f64);
    let mut acc = F::zero();
    for &(cy, cx) in centers {
        for ch in 0..2 {
            let d = pred[[ch, cy, cx]] - target[[ch, cy, cx]];
            acc += d.abs();
            if let Some(g) = grad.as_mut() {
                let s = if d > F::zero() {
                    F::one()
                } else if d < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
                g[[ch, cy, cx]] += s / count;
            }
        }
    }
    Ok((acc / count, grad))
}

// ---------------------------------------------------------------------------
// Target splatting
// ---------------------------------------------------------------------------

/// CornerNet minimum-overlap radius: the largest corner displacement (in
/// output cells) that keeps IoU >= `min_overlap` against a `h x w` box, taking
/// the worst of the three displacement regimes.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w) = (height, width);
    let t = min_overlap;

    // both corners shifted in the same direction (pure translation)
    let b1 = h + w;
    let c1 = w * h * (1.0 - t) / (1.0 + t);
    let sq1 = (b1 * b1 - 4.0 * c1).sqrt();
    let r1 = (b1 - sq1) / 2.0;

    // both corners shifted inward (shrunk box)
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - t) * w * h;
    let sq2 = (b2 * b2 - 16.0 * c2).sqrt();
    let r2 = (b2 - sq2) / 8.0;

    // both corners shifted outward (grown box)
    let b3 = -2.0 * t * (h + w);
    let c3 = (t - 1.0) * w * h;
    let sq3 = (b3 * b3 - 16.0 * t * c3).sqrt();
    let r3 = (b3 + sq3) / (8.0 * t);

    r1.min(r2).min(r3)
}

/// Ground-truth tensors for one image, all on the stride-4 grid.
#[derive(Debug, Clone)]
pub struct ImageTargets<F> {
    /// (n_classes, h/4, w/4); exactly 1 at each object's center cell,
    /// Gaussian falloff elsewhere (element-wise max across objects).
    pub heatmap: Array3<F>,
    /// (2, h/4, w/4): (width, height) in input px, written at center cells.
    pub wh: Array3<F>,
    /// (2, h/4, w/4): (dx, dy) = center/stride - cell, in output-cell units.
    pub offset: Array3<F>,
    /// Center cells (y, x), one entry per ground-truth object.
    pub centers: Vec<(usize, usize)>,
}

/// Splat ground-truth boxes into heatmap/size/offset targets.
pub fn splat_targets<F: Scalar>(
    boxes: &[GtBox],
    img_h: usize,
    img_w: usize,
    n_classes: usize,
) -> Result<ImageTargets<F>> {
    if !img_h.is_multiple_of(STRIDE) || !img_w.is_multiple_of(STRIDE) {
        return Err(Error::Shape(format!(
            "image {img_h}x{img_w} not divisible by stride {STRIDE}"
        )));
    }
    let (h4, w4) = (img_h / STRIDE, img_w / STRIDE);
    let mut heatmap = Array3::<F>::zeros((n_classes, h4, w4));
    let mut wh = Array3::<F>::zeros((2, h4, w4));
    let mut offset = Array3::<F>::zeros((2, h4, w4));
    let mut centers = Vec::with_capacity(boxes.len());

    for b in boxes {
        if !b.inside(img_w, img_h) {
            return Err(Error::InvalidArgument(format!(
                "box [{},{},{},{}] outside {img_w}x{img_h} image",
                b.x1, b.y1, b.x2, b.y2
            )));
        }
        if b.class_id >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class {} >= n_classes {n_classes}",
                b.class_id
            )));
        }
        let (cx, cy) = b.center();
        let (cx4, cy4) = (cx / STRIDE as f64, cy / STRIDE as f64);
        let (ix, iy) = (cx4.floor() as usize, cy4.floor() as usize);
        let (ix, iy) = (ix.min(w4 - 1), iy.min(h4 - 1));

        let r = gaussian_radius(
            (b.height() / STRIDE as f64).ceil(),
            (b.width() / STRIDE as f64).ceil(),
            SPLAT_MIN_OVERLAP,
        );
        let radius = r.max(0.0) as usize;
        let sigma = (2 * radius + 1) as f64 / 6.0;
        let denom = 2.0 * sigma * sigma;
        for dy in -(radius as isize)..=(radius as isize) {
            let y = iy as isize + dy;
            if y < 0 || y >= h4 as isize {
                continue;
            }
            for dx in -(radius as isize)..=(radius as isize) {
                let x = ix as isize + dx;
                if x < 0 || x >= w4 as isize {
                    continue;
                }
                let g = F::of((-((dx * dx + dy * dy) as f64) / denom).exp());
                let cell = &mut heatmap[[b.class_id, y as usize, x as usize]];
                if g > *cell {
                    *cell = g;
                }
            }
        }
        heatmap[[b.class_id, iy, ix]] = F::one();
        wh[[0, iy, ix]] = F::of(b.width());
        wh[[1, iy, ix]] = F::of(b.height());
        offset[[0, iy, ix]] = F::of(cx4 - ix as f64);
        offset[[1, iy, ix]] = F::of(cy4 - iy as f64);
        centers.push((iy, ix));
    }
    Ok(ImageTargets { heatmap, wh, offset, centers })
}

// ---------------------------------------------------------------------------
// Eq. 2 total
// ---------------------------------------------------------------------------

/// The four loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<F> {
    pub l_heat: F,
    pub l_off: F,
    pub l_seg: F,
    pub l_wh: F,
    pub l_tot: F,
}

/// Eq. 2: `L_tot = L_heat + L_off + seg_weight * L_seg + wh_weight * L_WH`,
/// summed in exactly that order. With the default weights (1.0, 0.1) and unit
/// inputs this is 3.1 to the last bit. When `multitask` is off the
/// segmentation term is dropped and reported as 0.
pub fn total_loss<F: Scalar>(
    l_heat: F,
    l_off: F,
    l_seg: F,
    l_wh: F,
    multitask: bool,
    seg_weight: F,
    wh_weight: F,
) -> Result<LossBreakdown<F>> {
    for (name, v) in [("L_heat", l_heat), ("L_off", l_off), ("L_seg", l_seg), ("L_WH", l_wh)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    let l_seg = if multitask { l_seg } else { F::zero() };
    let l_tot = l_heat + l_off + seg_weight * l_seg + wh_weight * l_wh;
    Ok(LossBreakdown { l_heat, l_off, l_seg, l_wh, l_tot })
}

// ---------------------------------------------------------------------------
// Tape wrappers
// ---------------------------------------------------------------------------

/// BCE (or MSE) against a fixed target, as a tape op producing a scalar.
#[derive(Debug)]
pub struct SegLossOp<F> {
    pub target: ArrayD<F>,
    pub mse: bool,
}

impl<F: Scalar> CustomOp<F> for SegLossOp<F> {
    fn forward(&self, inputs: &[&ArrayD<F>]) -> Result<ArrayD<F>> {
        let v = if self.mse {
            mse_seg(inputs[0], &self.target)?
        } else {
            bce_seg(inputs[0], &self.target)?
        };
        Ok(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn backward(
        &self,
        inputs: &[&ArrayD<F>],
        _output: &ArrayD<F>,
        grad_out: &ArrayD<F>,
    ) -> Result<Vec<ArrayD<F>>> {
        let (_, mut g) = if self.mse {
            mse_seg_grad(inputs[0], &self.target)?
        } else {
            bce_seg_grad(inputs[0], &self.target)?
        };
        let go = grad_out[[0]];
        g.mapv_inplace(|v| v * go);
        Ok(vec![g])
    }
}

/// Focal heatmap loss against a fixed target heatmap.
#[derive(Debug)]
pub struct FocalLossOp<F> {
    pub target: ArrayD<F>,
}

impl<F: Scalar> CustomOp<F> for FocalLossOp<F> {
    fn forward(&self, inputs: &[&ArrayD<F>]) -> Result<ArrayD<F>> {
        let v = focal_heatmap(inputs[0], &self.target)?;
        Ok(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn backward(
        &self,
        inputs: &[&ArrayD<F>],
        _output: &ArrayD<F>,
        grad_out: &ArrayD<F>,
    ) -> Result<Vec<ArrayD<F>>> {
        let (_, mut g) = focal_heatmap_grad(inputs[0], &self.target)?;
        let go = grad_out[[0]];
        g.mapv_inplace(|v| v * go);
        Ok(vec![g])
    }
}

/// Batched sparse L1: prediction is (N, 2, h, w); targets/centers per image.
#[derive(Debug)]
pub struct L1SparseOp<F> {
    /// (N, 2, h, w) target values; only the listed centers matter.
    pub target: ArrayD<F>,
    /// (image index, cell y, cell x).
    pub centers: Vec<(usize, usize, usize)>,
}

impl<F: Scalar> L1SparseOp<F> {
    fn check(&self, pred: &ArrayD<F>) -> Result<()> {
        check_same_shape(pred, &self.target, "l1_sparse(batched)")?;
        if pred.ndim() != 4 || pred.shape()[1] != 2 {
            return Err(Error::Shape(format!(
                "batched l1 expects (N, 2, h, w), got {:?}",
                pred.shape()
            )));
        }
        let (n, h, w) = (pred.shape()[0], pred.shape()[2], pred.shape()[3]);
        for &(i, cy, cx) in &self.centers {
            if i >= n || cy >= h || cx >= w {
                return Err(Error::InvalidArgument(format!(
                    "center ({i},{cy},{cx}) outside ({n},{h},{w})"
                )));
            }
        }
        Ok(())
    }
}

impl<F: Scalar> CustomOp<F> for L1SparseOp<F> {
    fn forward(&self, inputs: &[&ArrayD<F>]) -> Result<ArrayD<F>> {
        let pred = inputs[0];
        self.check(pred)?;
        if self.centers.is_empty() {
            return Ok(ArrayD::zeros(IxDyn(&[1])));
        }
        let count = F::of((self.centers.len() * 2) as f64);
        let mut acc = F::zero();
        for &(i, cy, cx) in &self.centers {
            for ch in 0..2 {
                acc += (pred[[i, ch, cy, cx]] - self.target[[i, ch, cy, cx]]).abs();
            }
        }
        Ok(ArrayD::from_elem(IxDyn(&[1]), acc / count))
    }

    fn backward(
        &self,
        inputs: &[&ArrayD<F>],
        _output: &ArrayD<F>,
        grad_out: &ArrayD<F>,
    ) -> Result<Vec<ArrayD<F>>> {
        let pred = inputs[0];
        let mut g = ArrayD::<F>::zeros(pred.raw_dim());
        if self.centers.is_empty() {
            return Ok(vec![g]);
        }
        let scale = grad_out[[0]] / F::of((self.centers.len() * 2) as f64);
        for &(i, cy, cx) in &self.centers {
            for ch in 0..2 {
                let d = pred[[i, ch, cy, cx]] - self.target[[i, ch, cy, cx]];
                let s = if d > F::zero() {
                    F::one()
                } else if d < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
                g[[i, ch, cy, cx]] += s * scale;
            }
        }
        Ok(vec![g])
    }
}
