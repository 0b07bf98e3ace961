//! Dense optical flow by polynomial expansion (Farneback-style), coarse to
//! fine. Each image is locally modeled as `f(x) ~ c + b'x + x'Ax` via
//! Gaussian-weighted least squares; displacement follows from how the linear
//! term shifts between frames, aggregated over a box window.
//!
//! Convention: `next(x + d) ~ prev(x)`, so content moving right gives dx > 0.

use ndarray::Array2;

use crate::config::FlowParams;
use crate::error::{Error, Result};
use crate::types::FlowField;

/// Local quadratic-fit coefficients for one image.
struct PolyExpansion {
    bx: Array2<f64>,
    by: Array2<f64>,
    axx: Array2<f64>,
    ayy: Array2<f64>,
    axy: Array2<f64>,
}

/// Separable correlation with replicate borders: rows with `kx`, then columns
/// with `ky`. Kernels are centered, length 2n+1.
fn correlate_sep(img: &Array2<f64>, kx: &[f64], ky: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let nx = (kx.len() / 2) as isize;
    let ny = (ky.len() / 2) as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, &k) in kx.iter().enumerate() {
                let xx = (x + i as isize - nx).clamp(0, w as isize - 1) as usize;
                acc += k * img[[y, xx]];
            }
            tmp[[y, x as usize]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in ky.iter().enumerate() {
                let yy = (y + i as isize - ny).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[[yy, x]];
            }
            out[[y as usize, x]] = acc;
        }
    }
    out
}

/// Closed-form inverse of a symmetric 3x3 matrix.
fn invert3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let d = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * d;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * d;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * d;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * d;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * d;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * d;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * d;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * d;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * d;
    Some(inv)
}

/// Fit the quadratic model at every pixel.
///
/// With Gaussian applicability `a` and basis `[1, x, y, x2, y2, xy]`, the
/// normal-equation matrix G is sparse and separable, so each unknown reduces
/// to a few separable correlations.
fn poly_expansion(img: &Array2<f64>, n: usize, sigma: f64) -> Result<PolyExpansion> {
    if n == 0 || sigma <= 0.0 {
        return Err(Error::Config("poly_n and poly_sigma must be positive".into()));
    }
    let taps: Vec<f64> = (-(n as isize)..=n as isize)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let xs: Vec<f64> = (-(n as isize)..=n as isize).map(|d| d as f64).collect();
    let a: Vec<f64> = taps.clone();
    let ax: Vec<f64> = taps.iter().zip(&xs).map(|(a, x)| a * x).collect();
    let ax2: Vec<f64> = taps.iter().zip(&xs).map(|(a, x)| a * x * x).collect();

    // 1-d moments (odd ones vanish by symmetry)
    let s0: f64 = a.iter().sum();
    let s2: f64 = a.iter().zip(&xs).map(|(a, x)| a * x * x).sum();
    let s4: f64 = a.iter().zip(&xs).map(|(a, x)| a * x * x * x * x).sum();

    // v = correlation of image with a*phi_i
    let v0 = correlate_sep(img, &a, &a);
    let v1 = correlate_sep(img, &ax, &a); // x
    let v2 = correlate_sep(img, &a, &ax); // y
    let v3 = correlate_sep(img, &ax2, &a); // x^2
    let v4 = correlate_sep(img, &a, &ax2); // y^2
    let v5 = correlate_sep(img, &ax, &ax); // xy

    // G diag blocks: [1, x2, y2] couple; x, y, xy are 1x1
    let g00 = s0 * s0;
    let g03 = s2 * s0;
    let g04 = s0 * s2;
    let g33 = s4 * s0;
    let g44 = s0 * s4;
    let g34 = s2 * s2;
    let inv = invert3([[g00, g03, g04], [g03, g33, g34], [g04, g34, g44]])
        .ok_or_else(|| Error::Config("degenerate applicability window".into()))?;
    let g11 = s2 * s0; // x basis
    let g22 = s0 * s2; // y basis
    let g55 = s2 * s2; // xy basis

    let (h, w) = img.dim();
    let mut out = PolyExpansion {
        bx: Array2::zeros((h, w)),
        by: Array2::zeros((h, w)),
        axx: Array2::zeros((h, w)),
        ayy: Array2::zeros((h, w)),
        axy: Array2::zeros((h, w)),
    };
    for y in 0..h {
        for x in 0..w {
            out.bx[[y, x]] = v1[[y, x]] / g11;
            out.by[[y, x]] = v2[[y, x]] / g22;
            out.axy[[y, x]] = v5[[y, x]] / g55;
            let (c0, c3, c4) = (v0[[y, x]], v3[[y, x]], v4[[y, x]]);
            out.axx[[y, x]] = inv[1][0] * c0 + inv[1][1] * c3 + inv[1][2] * c4;
            out.ayy[[y, x]] = inv[2][0] * c0 + inv[2][1] * c3 + inv[2][2] * c4;
        }
    }
    Ok(out)
}

/// One displacement refinement at a single scale.
fn refine_flow(
    e1: &PolyExpansion,
    e2: &PolyExpansion,
    flow: &mut FlowField,
    aggregate_n: usize,
) {
    let (h, w) = flow.dx.dim();
    let mut g11 = Array2::<f64>::zeros((h, w));
    let mut g12 = Array2::<f64>::zeros((h, w));
    let mut g22 = Array2::<f64>::zeros((h, w));
    let mut h1 = Array2::<f64>::zeros((h, w));
    let mut h2 = Array2::<f64>::zeros((h, w));

    for y in 0..h {
        for x in 0..w {
            // sample frame-2 expansion at the displaced (rounded) position
            let dx = flow.dx[[y, x]].round();
            let dy = flow.dy[[y, x]].round();
            let xs = ((x as f64 + dx) as isize).clamp(0, w as isize - 1) as usize;
            let ys = ((y as f64 + dy) as isize).clamp(0, h as isize - 1) as usize;

            let a11 = (e1.axx[[y, x]] + e2.axx[[ys, xs]]) / 2.0;
            let a22 = (e1.ayy[[y, x]] + e2.ayy[[ys, xs]]) / 2.0;
            let a12 = (e1.axy[[y, x]] + e2.axy[[ys, xs]]) / 4.0;
            let dbx = -0.5 * (e2.bx[[ys, xs]] - e1.bx[[y, x]]) + a11 * dx + a12 * dy;
            let dby = -0.5 * (e2.by[[ys, xs]] - e1.by[[y, x]]) + a12 * dx + a22 * dy;

            g11[[y, x]] = a11 * a11 + a12 * a12;
            g12[[y, x]] = a12 * (a11 + a22);
            g22[[y, x]] = a12 * a12 + a22 * a22;
            h1[[y, x]] = a11 * dbx + a12 * dby;
            h2[[y, x]] = a12 * dbx + a22 * dby;
        }
    }

    let ones = vec![1.0; 2 * aggregate_n + 1];
    let g11 = correlate_sep(&g11, &ones, &ones);
    let g12 = correlate_sep(&g12, &ones, &ones);
    let g22 = correlate_sep(&g22, &ones, &ones);
    let h1 = correlate_sep(&h1, &ones, &ones);
    let h2 = correlate_sep(&h2, &ones, &ones);

    for y in 0..h {
        for x in 0..w {
            let det = g11[[y, x]] * g22[[y, x]] - g12[[y, x]] * g12[[y, x]];
            if det.abs() > 1e-9 {
                flow.dx[[y, x]] = (g22[[y, x]] * h1[[y, x]] - g12[[y, x]] * h2[[y, x]]) / det;
                flow.dy[[y, x]] = (g11[[y, x]] * h2[[y, x]] - g12[[y, x]] * h1[[y, x]]) / det;
            }
            // else: keep the incoming estimate
        }
    }
}

/// Flow near the border has no valid support: replicate padding biases the
/// polynomial fit and panning reveals content with no correspondence. Rather
/// than returning those unreliable values, copy the nearest supported
/// estimate outward (constant extension of the valid interior).
fn extend_border(field: &mut Array2<f64>, b: usize) {
    let (h, w) = field.dim();
    if h <= 2 * b + 1 || w <= 2 * b + 1 {
        return;
    }
    for y in 0..h {
        let yc = y.clamp(b, h - 1 - b);
        for x in 0..w {
            let xc = x.clamp(b, w - 1 - b);
            if (yc, xc) != (y, x) {
                field[[y, x]] = field[[yc, xc]];
            }
        }
    }
}

fn downsample2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array2::<f64>::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            out[[y, x]] = (img[[2 * y, 2 * x]]
                + img[[2 * y, 2 * x + 1]]
                + img[[2 * y + 1, 2 * x]]
                + img[[2 * y + 1, 2 * x + 1]])
                / 4.0;
        }
    }
    out
}

/// Bilinear resize (half-pixel-centered), used to carry flow up the pyramid.
fn resize_bilinear(src: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let pos = |o: usize, dst: usize, srcn: usize| -> (usize, usize, f64) {
        let scale = srcn as f64 / dst as f64;
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (srcn - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(srcn - 1), p - i0 as f64)
    };
    let mut out = Array2::<f64>::zeros((th, tw));
    for y in 0..th {
        let (y0, y1, ty) = pos(y, th, h);
        for x in 0..tw {
            let (x0, x1, tx) = pos(x, tw, w);
            out[[y, x]] = src[[y0, x0]] * (1.0 - ty) * (1.0 - tx)
                + src[[y0, x1]] * (1.0 - ty) * tx
                + src[[y1, x0]] * ty * (1.0 - tx)
                + src[[y1, x1]] * ty * tx;
        }
    }
    out
}

/// Dense flow between two grayscale frames.
pub fn flow_field(prev: &Array2<u8>, next: &Array2<u8>, params: &FlowParams) -> Result<FlowField> {
    if prev.dim() != next.dim() {
        return Err(Error::Shape(format!(
            "flow_field: {:?} vs {:?}",
            prev.dim(),
            next.dim()
        )));
    }
    if params.pyramid_levels == 0 || params.iterations == 0 {
        return Err(Error::Config("flow needs >= 1 pyramid level and iteration".into()));
    }
    let f1 = prev.mapv(|v| v as f64);
    let f2 = next.mapv(|v| v as f64);

    // build pyramids, coarsest last; stop early on tiny images
    let min_side = 4 * params.poly_n.max(2);
    let mut pyr1 = vec![f1];
    let mut pyr2 = vec![f2];
    for _ in 1..params.pyramid_levels {
        let last = pyr1.last().unwrap();
        let (h, w) = last.dim();
        if h / 2 < min_side || w / 2 < min_side {
            break;
        }
        pyr1.push(downsample2(pyr1.last().unwrap()));
        pyr2.push(downsample2(pyr2.last().unwrap()));
    }

    let coarsest = pyr1.len() - 1;
    let (ch, cw) = pyr1[coarsest].dim();
    let mut flow = FlowField::zeros(ch, cw);
    for level in (0..=coarsest).rev() {
        let (h, w) = pyr1[level].dim();
        if flow.dx.dim() != (h, w) {
            flow = FlowField {
                dx: resize_bilinear(&flow.dx, h, w).mapv(|v| v * 2.0),
                dy: resize_bilinear(&flow.dy, h, w).mapv(|v| v * 2.0),
            };
        }
        let e1 = poly_expansion(&pyr1[level], params.poly_n, params.poly_sigma)?;
        let e2 = poly_expansion(&pyr2[level], params.poly_n, params.poly_sigma)?;
        for _ in 0..params.iterations {
            refine_flow(&e1, &e2, &mut flow, params.aggregate_n);
        }
    }
    // both the applicability window (poly_n) and the aggregation window
    // (aggregate_n) reach past the image edge at the finest level
    let band = params.poly_n + params.aggregate_n;
    extend_border(&mut flow.dx, band);
    extend_border(&mut flow.dy, band);
    if flow.dx.iter().chain(flow.dy.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("optical flow".into()));
    }
    Ok(flow)
}
