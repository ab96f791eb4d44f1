//! Max pooling and global average pooling.

use crate::{Error, Result};
use ndarray::{Array1, Array2, Array4};

/// Max pool with square window. Returns the pooled map and, per output
/// element, the flat (h*W + w) index of the winning input inside its
/// channel plane — the backward scatters into those positions.
pub fn maxpool_forward(
    x: &Array4<f32>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Array4<f32>, Array4<u32>)> {
    let (b, c, h, w) = x.dim();
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Shape("maxpool window larger than padded input".into()));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let mut y = Array4::<f32>::zeros((b, c, ho, wo));
    let mut arg = Array4::<u32>::zeros((b, c, ho, wo));
    let xs = x.as_slice().expect("maxpool expects a standard-layout input");
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xs[(bi * c + ci) * h * w..][..h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for kh in 0..k {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            let idx = ih as usize * w + iw as usize;
                            let v = plane[idx];
                            if v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                    y[[bi, ci, oh, ow]] = best;
                    arg[[bi, ci, oh, ow]] = best_idx;
                }
            }
        }
    }
    Ok((y, arg))
}

/// Scatter `dy` back to the argmax positions recorded by the forward.
pub fn maxpool_backward(
    dy: &Array4<f32>,
    arg: &Array4<u32>,
    in_shape: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (b, c, h, w) = in_shape;
    let mut dx = Array4::<f32>::zeros(in_shape);
    let dxs = dx.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            let dych = dy.index_axis(ndarray::Axis(0), bi);
            let dych = dych.index_axis(ndarray::Axis(0), ci);
            let argch = arg.index_axis(ndarray::Axis(0), bi);
            let argch = argch.index_axis(ndarray::Axis(0), ci);
            for (&d, &a) in dych.iter().zip(argch.iter()) {
                dxs[off + a as usize] += d;
            }
        }
    }
    dx
}

/// Global average pool: (B, C, H, W) -> (B, C).
pub fn gap_forward(x: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let n = (h * w) as f32;
    let mut y = Array2::<f32>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let s: f32 = x
                .index_axis(ndarray::Axis(0), bi)
                .index_axis(ndarray::Axis(0), ci)
                .iter()
                .sum();
            y[[bi, ci]] = s / n;
        }
    }
    y
}

/// Backward of global average pooling.
pub fn gap_backward(dy: &Array2<f32>, in_shape: (usize, usize, usize, usize)) -> Array4<f32> {
    let (b, c, h, w) = in_shape;
    let n = (h * w) as f32;
    let mut dx = Array4::<f32>::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            let v = dy[[bi, ci]] / n;
            dx.index_axis_mut(ndarray::Axis(0), bi)
                .index_axis_mut(ndarray::Axis(0), ci)
                .fill(v);
        }
    }
    dx
}

/// Channel-wise L2 norm helper used in a couple of reports.
pub fn channel_l1(x: &Array4<f32>) -> Array1<f32> {
    let (co, _, _, _) = x.dim();
    let mut out = Array1::<f32>::zeros(co);
    for c in 0..co {
        out[c] = x
            .index_axis(ndarray::Axis(0), c)
            .iter()
            .map(|v| v.abs())
            .sum();
    }
    out
}
