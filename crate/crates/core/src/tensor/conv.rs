//! im2col / col2im lowering used by the convolution op.

use ndarray::{Array2, ArrayView3, ArrayViewMut3};

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> usize {
    (input + 2 * pad - dil * (kernel - 1) - 1) / stride + 1
}

/// Unfold one (C,H,W) sample into a (C*kh*kw, ho*wo) patch matrix.
pub(crate) fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut out_row = col.row_mut(row);
                for oh in 0..ho {
                    let ih = (oh * stride + ki * dil) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj * dil) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        out_row[oh * wo + ow] = x[[ci, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a patch matrix back onto an input-shaped gradient buffer.
pub(crate) fn col2im(
    col: &Array2<f64>,
    out: &mut ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_row = col.row(row);
                for oh in 0..ho {
                    let ih = (oh * stride + ki * dil) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj * dil) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        out[[ci, ih as usize, iw as usize]] += col_row[oh * wo + ow];
                    }
                }
            }
        }
    }
}
