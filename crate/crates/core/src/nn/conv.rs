//! 2-D convolution via im2col + GEMM, with a naive reference implementation
//! used as an oracle in tests.
//!
//! Only square kernels and symmetric padding are supported — that covers
//! every architecture in this crate (1x1, 3x3 and 7x7 kernels).

use crate::{Error, Result};
use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array4, ArrayView4};

/// Cap on the im2col scratch buffer. Batches are processed in chunks small
/// enough that the column matrix stays under this many bytes.
const COL_BUDGET_BYTES: usize = 64 << 20;

/// Gradients produced by [`conv2d_backward`]. Fields are `None` when the
/// caller did not request them.
pub struct ConvGrads {
    pub dx: Option<Array4<f32>>,
    pub dw: Option<Array4<f32>>,
    pub db: Option<Array1<f32>>,
}

fn out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "conv kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_shapes(x: &ArrayView4<f32>, w: &ArrayView4<f32>) -> Result<()> {
    let (_, ci_x, _, _) = x.dim();
    let (_, ci_w, kh, kw) = w.dim();
    if kh != kw {
        return Err(Error::Shape(format!("non-square kernel {kh}x{kw}")));
    }
    if ci_x != ci_w {
        return Err(Error::Shape(format!(
            "conv input has {ci_x} channels, kernel expects {ci_w}"
        )));
    }
    Ok(())
}

/// Convolution forward pass. `x` is (B, Ci, H, W), `w` is (Co, Ci, K, K),
/// output is (B, Co, Ho, Wo) with `Ho = (H + 2p - K) / s + 1`.
pub fn conv2d_forward(
    x: &Array4<f32>,
    w: &Array4<f32>,
    b: Option<&Array1<f32>>,
    stride: usize,
    padding: usize,
) -> Result<Array4<f32>> {
    check_shapes(&x.view(), &w.view())?;
    let (bsz, ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let ho = out_dim(h, k, stride, padding)?;
    let wo = out_dim(wd, k, stride, padding)?;
    let hw_out = ho * wo;
    let rows = ci * k * k;

    let w_std = w.as_standard_layout();
    let wmat = w_std.view().into_shape_with_order((co, rows)).unwrap();
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();

    let chunk = (COL_BUDGET_BYTES / 4 / (rows * hw_out).max(1)).clamp(1, bsz);
    let mut cols = Array2::<f32>::zeros((rows, chunk * hw_out));
    let mut y = Array4::<f32>::zeros((bsz, co, ho, wo));
    let ys = y.as_slice_mut().unwrap();

    let mut b0 = 0;
    while b0 < bsz {
        let n = chunk.min(bsz - b0);
        {
            let mut cv = cols.slice_mut(s![.., ..n * hw_out]);
            im2col(
                xs, b0, n, ci, h, wd, k, stride, padding, ho, wo,
                cv.as_slice_mut().unwrap(),
            );
        }
        let out = wmat.dot(&cols.slice(s![.., ..n * hw_out]));
        let os = out.as_slice().unwrap();
        // Scatter (co, n*hw_out) back into per-sample blocks, adding bias.
        for j in 0..n {
            for c in 0..co {
                let src = &os[c * n * hw_out + j * hw_out..][..hw_out];
                let dst = &mut ys[((b0 + j) * co + c) * hw_out..][..hw_out];
                match b {
                    Some(bias) => {
                        let bv = bias[c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s + bv;
                        }
                    }
                    None => dst.copy_from_slice(src),
                }
            }
        }
        b0 += n;
    }
    Ok(y)
}

/// Backward pass. Pass `want_dx` / `want_dw` to skip gradients you do not
/// need (e.g. no input gradient at the first layer during plain training,
/// no weight gradient while the backbone is frozen).
pub fn conv2d_backward(
    x: &Array4<f32>,
    w: &Array4<f32>,
    dy: &Array4<f32>,
    stride: usize,
    padding: usize,
    want_dx: bool,
    want_dw: bool,
) -> Result<ConvGrads> {
    check_shapes(&x.view(), &w.view())?;
    let (bsz, ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let (bsz_y, co_y, ho, wo) = dy.dim();
    if bsz_y != bsz || co_y != co {
        return Err(Error::Shape("conv backward: dy does not match".into()));
    }
    let hw_out = ho * wo;
    let rows = ci * k * k;

    let w_std = w.as_standard_layout();
    let wmat = w_std.view().into_shape_with_order((co, rows)).unwrap();
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let dy_std = dy.as_standard_layout();
    let dys = dy_std.as_slice().unwrap();

    let chunk = (COL_BUDGET_BYTES / 4 / (rows * hw_out).max(1)).clamp(1, bsz);
    let mut cols = Array2::<f32>::zeros((rows, chunk * hw_out));
    let mut dy_mat = Array2::<f32>::zeros((co, chunk * hw_out));

    let mut dx = want_dx.then(|| Array4::<f32>::zeros((bsz, ci, h, wd)));
    let mut dw_mat = want_dw.then(|| Array2::<f32>::zeros((co, rows)));

    let mut b0 = 0;
    while b0 < bsz {
        let n = chunk.min(bsz - b0);
        // Gather dy for this chunk into sample-major columns.
        {
            let dm = dy_mat.as_slice_mut().unwrap();
            for j in 0..n {
                for c in 0..co {
                    let src = &dys[((b0 + j) * co + c) * hw_out..][..hw_out];
                    dm[c * chunk * hw_out + j * hw_out..][..hw_out].copy_from_slice(src);
                }
            }
        }
        let dy_v = dy_mat.slice(s![.., ..n * hw_out]);

        if let Some(dw_mat) = dw_mat.as_mut() {
            let mut cv = cols.slice_mut(s![.., ..n * hw_out]);
            im2col(
                xs, b0, n, ci, h, wd, k, stride, padding, ho, wo,
                cv.as_slice_mut().unwrap(),
            );
            let cv = cols.slice(s![.., ..n * hw_out]);
            general_mat_mul(1.0, &dy_v, &cv.t(), 1.0, dw_mat);
        }

        if let Some(dx) = dx.as_mut() {
            let dcols = wmat.t().dot(&dy_v);
            col2im(
                dcols.as_slice().unwrap(),
                dx.as_slice_mut().unwrap(),
                b0, n, ci, h, wd, k, stride, padding, ho, wo,
            );
        }
        b0 += n;
    }

    let db = {
        let mut db = Array1::<f32>::zeros(co);
        for bi in 0..bsz {
            for c in 0..co {
                let row = &dys[(bi * co + c) * hw_out..][..hw_out];
                db[c] += row.iter().sum::<f32>();
            }
        }
        db
    };

    Ok(ConvGrads {
        dx,
        dw: dw_mat.map(|m| {
            Array4::from_shape_vec((co, ci, k, k), m.into_raw_vec_and_offset().0).unwrap()
        }),
        db: Some(db),
    })
}

/// Fill `cols` (rows = ci*k*k, columns = n*ho*wo, sample-major) from samples
/// `b0..b0+n` of `xs`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    xs: &[f32],
    b0: usize,
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let hw_out = ho * wo;
    let ncols = n * hw_out;
    cols.fill(0.0);
    for j in 0..n {
        let xoff = (b0 + j) * ci * h * wd;
        for c in 0..ci {
            let xch = &xs[xoff + c * h * wd..][..h * wd];
            for kh in 0..k {
                for kw in 0..k {
                    let row = (c * k + kh) * k + kw;
                    let dst = &mut cols[row * ncols + j * hw_out..][..hw_out];
                    // Valid output range for this kernel offset.
                    let (oh0, oh1) = valid_range(kh, padding, stride, h, ho);
                    let (ow0, ow1) = valid_range(kw, padding, stride, wd, wo);
                    for oh in oh0..oh1 {
                        let ih = oh * stride + kh - padding;
                        let src_row = &xch[ih * wd..][..wd];
                        let drow = &mut dst[oh * wo..][..wo];
                        if stride == 1 {
                            let iw0 = ow0 + kw - padding;
                            drow[ow0..ow1].copy_from_slice(&src_row[iw0..iw0 + (ow1 - ow0)]);
                        } else {
                            for ow in ow0..ow1 {
                                drow[ow] = src_row[ow * stride + kw - padding];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the input layout; exact
/// adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f32],
    dxs: &mut [f32],
    b0: usize,
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let hw_out = ho * wo;
    let ncols = n * hw_out;
    for j in 0..n {
        let xoff = (b0 + j) * ci * h * wd;
        for c in 0..ci {
            let dxch = &mut dxs[xoff + c * h * wd..][..h * wd];
            for kh in 0..k {
                for kw in 0..k {
                    let row = (c * k + kh) * k + kw;
                    let src = &dcols[row * ncols + j * hw_out..][..hw_out];
                    let (oh0, oh1) = valid_range(kh, padding, stride, h, ho);
                    let (ow0, ow1) = valid_range(kw, padding, stride, wd, wo);
                    for oh in oh0..oh1 {
                        let ih = oh * stride + kh - padding;
                        let drow = &mut dxch[ih * wd..][..wd];
                        let srow = &src[oh * wo..][..wo];
                        for ow in ow0..ow1 {
                            drow[ow * stride + kw - padding] += srow[ow];
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `o` with `0 <= o*stride + koff - padding < extent`.
fn valid_range(koff: usize, padding: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    if extent + padding <= koff {
        return (0, 0);
    }
    let lo = if koff >= padding {
        0
    } else {
        (padding - koff).div_ceil(stride)
    };
    // positions with o*stride < extent + padding - koff
    let hi = (extent + padding - koff).div_ceil(stride).min(out);
    (lo.min(hi), hi)
}

/// Direct 7-loop convolution. Slow; exists as an independent oracle for the
/// GEMM path and for counting multiply-accumulates in tests.
pub fn conv2d_forward_naive(
    x: &Array4<f32>,
    w: &Array4<f32>,
    b: Option<&Array1<f32>>,
    stride: usize,
    padding: usize,
) -> Result<Array4<f32>> {
    check_shapes(&x.view(), &w.view())?;
    let (bsz, ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let ho = out_dim(h, k, stride, padding)?;
    let wo = out_dim(wd, k, stride, padding)?;
    let mut y = Array4::<f32>::zeros((bsz, co, ho, wo));
    for bi in 0..bsz {
        for c in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b.map(|bias| bias[c]).unwrap_or(0.0);
                    for ic in 0..ci {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                    acc += x[[bi, ic, ih as usize, iw as usize]]
                                        * w[[c, ic, kh, kw]];
                                }
                            }
                        }
                    }
                    y[[bi, c, oh, ow]] = acc;
                }
            }
        }
    }
    Ok(y)
}
