//! Dense array kernels backing the tape ops: im2col convolution, bilinear
//! resampling, pooling. All operate on `(B, C, H, W)` arrays and are
//! deterministic (single-threaded, fixed accumulation order).

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};

use crate::tensor::Real;

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds `x` into a `(C*K*K, B*OH*OW)` matrix. Column index is
/// `((b*OH + oy)*OW + ox)`; row index is `((c*K + ky)*K + kx)`.
pub fn im2col<F: Real>(x: &ArrayView4<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut col = Array2::<F>::zeros((c * k * k, b * oh * ow));
    for bi in 0..b {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let col_base = (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[[row, col_base + ox]] = x[[bi, ci, iy, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a `(C*K*K, B*OH*OW)` column matrix back into `(B, C, H, W)`.
/// Adjoint of [`im2col`].
pub fn col2im<F: Real>(
    col: &Array2<F>,
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut x = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let col_base = (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[bi, ci, iy, ix as usize]] += col[[row, col_base + ox]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `y = conv2d(x, w) + b` with square kernel, symmetric zero padding.
/// `w` is `(OC, C, K, K)`, `b` is `(OC)`.
pub fn conv2d_forward<F: Real>(
    x: &ArrayView4<F>,
    w: &Array4<F>,
    b: &Array1<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (bs, _c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, ic, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    debug_assert_eq!(ic, x.shape()[1]);
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(wid, k, stride, pad);

    let col = im2col(x, k, stride, pad);
    let wmat = w.view().into_shape_with_order((oc, ic * k * k)).unwrap();
    let mut out_mat = Array2::<F>::zeros((oc, bs * oh * ow));
    ndarray::linalg::general_mat_mul(F::one(), &wmat, &col.view(), F::zero(), &mut out_mat);

    // (OC, B*OH*OW) -> (B, OC, OH, OW)
    let mut out = Array4::<F>::zeros((bs, oc, oh, ow));
    for o in 0..oc {
        let bias = b[o];
        for bi in 0..bs {
            for oy in 0..oh {
                let base = (bi * oh + oy) * ow;
                for ox in 0..ow {
                    out[[bi, o, oy, ox]] = out_mat[[o, base + ox]] + bias;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each gradient is computed only when the
/// corresponding flag is set; skipped outputs are `None`.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<F: Real>(
    x: &ArrayView4<F>,
    w: &Array4<F>,
    gout: &ArrayView4<F>,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
    need_gb: bool,
) -> (Option<Array4<F>>, Option<Array4<F>>, Option<Array1<F>>) {
    let (bs, c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (gout.shape()[2], gout.shape()[3]);

    // (B, OC, OH, OW) -> (OC, B*OH*OW)
    let mut gmat = Array2::<F>::zeros((oc, bs * oh * ow));
    for o in 0..oc {
        for bi in 0..bs {
            for oy in 0..oh {
                let base = (bi * oh + oy) * ow;
                for ox in 0..ow {
                    gmat[[o, base + ox]] = gout[[bi, o, oy, ox]];
                }
            }
        }
    }

    let gb = if need_gb {
        Some(gmat.sum_axis(Axis(1)))
    } else {
        None
    };

    let gw = if need_gw {
        let col = im2col(x, k, stride, pad);
        let mut gw_mat = Array2::<F>::zeros((oc, c * k * k));
        ndarray::linalg::general_mat_mul(F::one(), &gmat.view(), &col.t(), F::zero(), &mut gw_mat);
        Some(gw_mat.into_shape_with_order((oc, c, k, k)).unwrap().to_owned())
    } else {
        None
    };

    let gx = if need_gx {
        let wmat = w.view().into_shape_with_order((oc, c * k * k)).unwrap();
        let mut gcol = Array2::<F>::zeros((c * k * k, bs * oh * ow));
        ndarray::linalg::general_mat_mul(F::one(), &wmat.t(), &gmat.view(), F::zero(), &mut gcol);
        Some(col2im(&gcol, (bs, c, h, wid), k, stride, pad))
    } else {
        None
    };

    (gx, gw, gb)
}

/// Per-axis bilinear sampling table: for each output index, the two source
/// indices (clamped) and the interpolation weight of the second one.
pub fn bilinear_table<F: Real>(out_len: usize, in_len: usize) -> Vec<(usize, usize, F)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i0 = floor.max(0.0).min((in_len - 1) as f64) as usize;
            let i1 = (floor + 1.0).max(0.0).min((in_len - 1) as f64) as usize;
            (i0, i1, F::from_f64(t.clamp(0.0, 1.0)))
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear_fwd<F: Real>(x: &ArrayView4<F>, oh: usize, ow: usize) -> Array4<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if (h, w) == (oh, ow) {
        return x.to_owned();
    }
    let ty = bilinear_table::<F>(oh, h);
    let tx = bilinear_table::<F>(ow, w);
    let one = F::one();
    let mut out = Array4::<F>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = x[[bi, ci, y0, x0]] * (one - wx) + x[[bi, ci, y0, x1]] * wx;
                    let bot = x[[bi, ci, y1, x0]] * (one - wx) + x[[bi, ci, y1, x1]] * wx;
                    out[[bi, ci, oy, ox]] = top * (one - wy) + bot * wy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear_fwd`]: scatter the output gradient back to
/// the input grid with the same weights.
pub fn resize_bilinear_bwd<F: Real>(gout: &ArrayView4<F>, h: usize, w: usize) -> Array4<F> {
    let (b, c, oh, ow) = (
        gout.shape()[0],
        gout.shape()[1],
        gout.shape()[2],
        gout.shape()[3],
    );
    if (h, w) == (oh, ow) {
        return gout.to_owned();
    }
    let ty = bilinear_table::<F>(oh, h);
    let tx = bilinear_table::<F>(ow, w);
    let one = F::one();
    let mut gin = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let g = gout[[bi, ci, oy, ox]];
                    gin[[bi, ci, y0, x0]] += g * (one - wy) * (one - wx);
                    gin[[bi, ci, y0, x1]] += g * (one - wy) * wx;
                    gin[[bi, ci, y1, x0]] += g * wy * (one - wx);
                    gin[[bi, ci, y1, x1]] += g * wy * wx;
                }
            }
        }
    }
    gin
}

/// 2x2 average pooling with stride 2. Requires even spatial dims.
pub fn avg_pool2_fwd<F: Real>(x: &ArrayView4<F>) -> Array4<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let quarter = F::from_f64(0.25);
    let mut out = Array4::<F>::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let (y, x0) = (oy * 2, ox * 2);
                    out[[bi, ci, oy, ox]] = (x[[bi, ci, y, x0]]
                        + x[[bi, ci, y, x0 + 1]]
                        + x[[bi, ci, y + 1, x0]]
                        + x[[bi, ci, y + 1, x0 + 1]])
                        * quarter;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_bwd<F: Real>(gout: &ArrayView4<F>) -> Array4<F> {
    let (b, c, oh, ow) = (
        gout.shape()[0],
        gout.shape()[1],
        gout.shape()[2],
        gout.shape()[3],
    );
    let quarter = F::from_f64(0.25);
    let mut gin = Array4::<F>::zeros((b, c, oh * 2, ow * 2));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[[bi, ci, oy, ox]] * quarter;
                    let (y, x0) = (oy * 2, ox * 2);
                    gin[[bi, ci, y, x0]] = g;
                    gin[[bi, ci, y, x0 + 1]] = g;
                    gin[[bi, ci, y + 1, x0]] = g;
                    gin[[bi, ci, y + 1, x0 + 1]] = g;
                }
            }
        }
    }
    gin
}

/// Nearest-neighbour 2x upsampling.
pub fn nearest_up2_fwd<F: Real>(x: &ArrayView4<F>) -> Array4<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Array4::<F>::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h * 2 {
                for x0 in 0..w * 2 {
                    out[[bi, ci, y, x0]] = x[[bi, ci, y / 2, x0 / 2]];
                }
            }
        }
    }
    out
}

pub fn nearest_up2_bwd<F: Real>(gout: &ArrayView4<F>) -> Array4<F> {
    let (b, c, oh, ow) = (
        gout.shape()[0],
        gout.shape()[1],
        gout.shape()[2],
        gout.shape()[3],
    );
    let mut gin = Array4::<F>::zeros((b, c, oh / 2, ow / 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for x0 in 0..ow {
                    gin[[bi, ci, y / 2, x0 / 2]] += gout[[bi, ci, y, x0]];
                }
            }
        }
    }
    gin
}
