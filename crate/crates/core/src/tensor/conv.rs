//! im2col convolution kernels (NCHW).

use ndarray::{s, Array1, Array2, Array4, ArrayView3, ArrayView4, ArrayViewMut3};
use ndarray::linalg::general_mat_mul;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "conv kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Gather kernel-sized patches into a (Cin*kh*kw, Ho*Wo) matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut Array2<F>,
) {
    let (cin, h, w) = x.dim();
    cols.fill(F::zero());
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    // valid ox satisfy 0 <= ox*stride + kx - pad < w
                    let min_ix = kx as isize - pad as isize;
                    let ox0 = if min_ix < 0 {
                        ((-min_ix) as usize).div_ceil(stride)
                    } else {
                        0
                    };
                    let ox1 = {
                        // largest ox with ox*stride + kx - pad <= w-1
                        let lim = w as isize - 1 - min_ix;
                        if lim < 0 {
                            continue;
                        }
                        (wo - 1).min(lim as usize / stride)
                    };
                    if ox0 > ox1 {
                        continue;
                    }
                    let ix0 = (ox0 * stride) as isize + min_ix;
                    let src = x.slice(s![c, iy as usize, ix0 as usize..; stride]);
                    let mut dst = cols.slice_mut(s![row, oy * wo + ox0..oy * wo + ox1 + 1]);
                    dst.assign(&src.slice(s![..ox1 - ox0 + 1]));
                }
            }
        }
    }
}

/// Scatter-add the column matrix back onto a (Cin, H, W) gradient image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<F: Scalar>(
    cols: &Array2<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut ArrayViewMut3<F>,
) {
    let (cin, h, w) = dx.dim();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    b: Option<&Array1<F>>,
    stride: usize,
    pad: usize,
) -> Result<Array4<F>> {
    let (n, cin, h, wid) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    if cin != cin_w {
        return Err(Error::Shape(format!(
            "conv input has {cin} channels, kernel expects {cin_w}"
        )));
    }
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(wid, kw, stride, pad)?;

    let w_flat = w
        .to_shape((cout, cin * kh * kw))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut out = Array4::<F>::zeros((n, cout, ho, wo));
    let mut cols = Array2::<F>::zeros((cin * kh * kw, ho * wo));
    for i in 0..n {
        im2col(&x.index_axis(ndarray::Axis(0), i), kh, kw, stride, pad, ho, wo, &mut cols);
        let mut out_i = out.index_axis_mut(ndarray::Axis(0), i);
        let mut out_mat = out_i
            .view_mut()
            .into_shape_with_order((cout, ho * wo))
            .map_err(|e| Error::Shape(e.to_string()))?;
        general_mat_mul(F::one(), &w_flat.view(), &cols.view(), F::zero(), &mut out_mat);
        if let Some(bias) = b {
            for (mut row, &bv) in out_mat.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<F: Scalar> {
    pub dx: Option<Array4<F>>,
    pub dw: Array4<F>,
    pub db: Array1<F>,
}

pub fn conv2d_backward<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    grad_out: &ArrayView4<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<F>> {
    let (n, cin, _h, _wid) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();

    let w_flat = w
        .to_shape((cout, cin * kh * kw))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut dw_flat = Array2::<F>::zeros((cout, cin * kh * kw));
    let mut db = Array1::<F>::zeros(cout);
    let mut dx = if need_dx { Some(Array4::<F>::zeros(x.dim())) } else { None };

    let mut cols = Array2::<F>::zeros((cin * kh * kw, ho * wo));
    let mut dcols = Array2::<F>::zeros((cin * kh * kw, ho * wo));
    for i in 0..n {
        let g_i = grad_out.index_axis(ndarray::Axis(0), i);
        let g_mat = g_i
            .to_shape((cout, ho * wo))
            .map_err(|e| Error::Shape(e.to_string()))?;
        im2col(&x.index_axis(ndarray::Axis(0), i), kh, kw, stride, pad, ho, wo, &mut cols);
        general_mat_mul(F::one(), &g_mat.view(), &cols.t(), F::one(), &mut dw_flat.view_mut());
        for (acc, row) in db.iter_mut().zip(g_mat.outer_iter()) {
            *acc += row.sum();
        }
        if let Some(dx) = dx.as_mut() {
            general_mat_mul(F::one(), &w_flat.t(), &g_mat.view(), F::zero(), &mut dcols.view_mut());
            col2im_add(
                &dcols,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
                &mut dx.index_axis_mut(ndarray::Axis(0), i),
            );
        }
    }
    let dw = dw_flat
        .into_shape_with_order((cout, cin, kh, kw))
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(ConvGrads { dx, dw, db })
}
