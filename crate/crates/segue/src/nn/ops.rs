//! Raw tensor operations backing the layers.
//!
//! Convolution lowers each sample to a column matrix (`im2col`) and runs one
//! matrix multiplication; the backward pass reuses the same lowering. The
//! layouts are chosen so the flattened weight `[Cout, Cin*kh*kw]` multiplies
//! the column matrix `[Cin*kh*kw, Ho*Wo]` directly.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut2, ArrayViewMut3, Axis};

/// Output spatial size for a strided, padded convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower one sample `[C, H, W]` into columns `[C*kh*kw, Ho*Wo]`.
///
/// Row `(c*kh + ki)*kw + kj` holds, for every output position, the input
/// pixel that the kernel tap `(ki, kj)` of channel `c` sees; out-of-bounds
/// taps contribute zero.
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<f64>,
) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.shape(), &[c_in * kh * kw, ho * wo]);
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let mut row_view = cols.row_mut(row);
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let base = oh * wo;
                    if ih < 0 || ih >= h as isize {
                        row_view.slice_mut(ndarray::s![base..base + wo]).fill(0.0);
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        row_view[base + ow] = if iw < 0 || iw >= w as isize {
                            0.0
                        } else {
                            x[[c, ih as usize, iw as usize]]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back to the input layout; exact adjoint of `im2col`.
pub fn col2im_add(
    cols: &ArrayView2<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gx: &mut ArrayViewMut3<f64>,
) {
    let (c_in, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.shape(), &[c_in * kh * kw, ho * wo]);
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = cols.row((c * kh + ki) * kw + kj);
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = oh * wo;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            gx[[c, ih as usize, iw as usize]] += row[base + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward: `x [N,Cin,H,W]`, `w2 [Cout, Cin*kh*kw]`,
/// `b [Cout]` -> `[N,Cout,Ho,Wo]`.
pub fn conv2d_forward(
    x: &Array4<f64>,
    w2: &ArrayView2<f64>,
    b: &[f64],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c_in, h, w) = x.dim();
    let c_out = w2.shape()[0];
    debug_assert_eq!(w2.shape()[1], c_in * kh * kw);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut y = Array4::<f64>::zeros((n, c_out, ho, wo));
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, ho * wo));
    for i in 0..n {
        im2col(&x.index_axis(Axis(0), i), kh, kw, stride, pad, &mut cols);
        let mut y_i = y
            .index_axis_mut(Axis(0), i)
            .into_shape_with_order((c_out, ho * wo))
            .expect("per-sample output slice is contiguous");
        general_mat_mul(1.0, w2, &cols.view(), 0.0, &mut y_i);
        for (o, mut row) in y_i.axis_iter_mut(Axis(0)).enumerate() {
            row += b[o];
        }
    }
    y
}

/// Gradients of the batched convolution. Accumulates into `gw2`/`gb`
/// (callers pass zeroed or running buffers) and returns the input gradient
/// when `want_gx` is set. Skipping the weight gradient also skips the
/// column lowering entirely, which matters when a frozen model only relays
/// gradients to its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &Array4<f64>,
    w2: &ArrayView2<f64>,
    gy: &Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gw2: Option<ArrayViewMut2<f64>>,
    gb: Option<&mut [f64]>,
    want_gx: bool,
) -> Option<Array4<f64>> {
    let (n, c_in, h, w) = x.dim();
    let (_, c_out, ho, wo) = gy.dim();
    let mut gx = want_gx.then(|| Array4::<f64>::zeros((n, c_in, h, w)));
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, ho * wo));
    let mut gcols = Array2::<f64>::zeros((c_in * kh * kw, ho * wo));
    let mut gw2 = gw2;
    let mut gb = gb;
    for i in 0..n {
        let gy_i = gy
            .index_axis(Axis(0), i)
            .into_shape_with_order((c_out, ho * wo))
            .expect("per-sample gradient slice is contiguous");
        if gw2.is_some() || gb.is_some() {
            if gw2.is_some() {
                im2col(&x.index_axis(Axis(0), i), kh, kw, stride, pad, &mut cols);
            }
            if let Some(gw2) = gw2.as_mut() {
                general_mat_mul(1.0, &gy_i, &cols.t(), 1.0, gw2);
            }
            if let Some(gb) = gb.as_deref_mut() {
                for (o, row) in gy_i.axis_iter(Axis(0)).enumerate() {
                    gb[o] += row.sum();
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            general_mat_mul(1.0, &w2.t(), &gy_i, 0.0, &mut gcols.view_mut());
            col2im_add(
                &gcols.view(),
                kh,
                kw,
                stride,
                pad,
                &mut gx.index_axis_mut(Axis(0), i),
            );
        }
    }
    gx
}

/// Reference convolution by direct summation; used only by tests as an
/// independent oracle for the lowered implementation.
#[cfg(test)]
pub fn conv2d_direct(
    x: &Array4<f64>,
    w: &ndarray::Array4<f64>, // [Cout, Cin, kh, kw]
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c_in, h, win) = x.dim();
    let (c_out, c_in2, kh, kw) = w.dim();
    assert_eq!(c_in, c_in2);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(win, kw, stride, pad);
    let mut y = Array4::<f64>::zeros((n, c_out, ho, wo));
    for i in 0..n {
        for o in 0..c_out {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b[o];
                    for c in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oh * stride + ki) as isize - pad as isize;
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if ih >= 0
                                    && ih < h as isize
                                    && iw >= 0
                                    && iw < win as isize
                                {
                                    acc += w[[o, c, ki, kj]]
                                        * x[[i, c, ih as usize, iw as usize]];
                                }
                            }
                        }
                    }
                    y[[i, o, oh, ow]] = acc;
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::rng_for;
    use ndarray::Array4;
    use rand::Rng;

    fn random_tensor4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = rng_for(seed, "ops-test");
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Array4::from_shape_vec(shape, data).unwrap()
    }

    /// The lowered convolution must agree with direct summation to
    /// floating-point noise across strides and paddings.
    #[test]
    fn lowered_conv_matches_direct_summation() {
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
            let x = random_tensor4((2, 3, 7, 8), 10 + stride as u64 * 10 + pad as u64);
            let w = random_tensor4((4, 3, 3, 3), 99);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let w2 = w.view().into_shape_with_order((4, 27)).unwrap();
            let got = conv2d_forward(&x, &w2, &b, 3, 3, stride, pad);
            let want = conv2d_direct(&x, &w, &b, stride, pad);
            assert_eq!(got.dim(), want.dim());
            let max_err = (&got - &want).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(
                max_err < 1e-12,
                "stride={stride} pad={pad}: max abs err {max_err}"
            );
        }
    }

    /// col2im is the adjoint of im2col: <im2col(x), c> == <x, col2im(c)>
    /// for random x and c. This pins the backward lowering exactly.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = random_tensor4((1, 2, 5, 6), 4);
        let (kh, kw, stride, pad) = (3, 3, 2, 1);
        let ho = conv_out_dim(5, kh, stride, pad);
        let wo = conv_out_dim(6, kw, stride, pad);
        let mut cols = Array2::<f64>::zeros((2 * kh * kw, ho * wo));
        im2col(&x.index_axis(Axis(0), 0), kh, kw, stride, pad, &mut cols);

        let c = {
            let mut rng = rng_for(5, "adjoint");
            Array2::from_shape_fn((2 * kh * kw, ho * wo), |_| rng.random_range(-1.0..1.0))
        };
        let lhs: f64 = (&cols * &c).sum();

        let mut back = Array4::<f64>::zeros((1, 2, 5, 6));
        col2im_add(&c.view(), kh, kw, stride, pad, &mut back.index_axis_mut(Axis(0), 0));
        let rhs: f64 = (&back * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint identity violated: {lhs} vs {rhs}");
    }

    /// Finite-difference check of the full conv backward (weights, bias,
    /// input) against a scalar objective sum(conv(x)).
    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = random_tensor4((2, 2, 5, 5), 7);
        let w = random_tensor4((3, 2, 3, 3), 8);
        let b = vec![0.05, -0.1, 0.2];
        let (kh, kw, stride, pad) = (3, 3, 2, 1);
        let w2 = w.view().into_shape_with_order((3, 18)).unwrap();

        // Analytic gradients with gy = 1 everywhere (objective = sum of y).
        let y = conv2d_forward(&x, &w2, &b, kh, kw, stride, pad);
        let gy = Array4::<f64>::ones(y.dim());
        let mut gw2 = Array2::<f64>::zeros((3, 18));
        let mut gb = vec![0.0; 3];
        let gx = conv2d_backward(
            &x, &w2, &gy, kh, kw, stride, pad,
            Some(gw2.view_mut()), Some(&mut gb), true,
        )
        .unwrap();

        let objective = |x: &Array4<f64>, w: &Array4<f64>, b: &[f64]| -> f64 {
            let w2 = w.view().into_shape_with_order((3, 18)).unwrap();
            conv2d_forward(x, &w2, b, kh, kw, stride, pad).sum()
        };

        let h = 1e-6;
        // Spot-check a spread of weight coordinates.
        for idx in [0usize, 5, 17, 25, 40, 53] {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[idx] += h;
            wm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (objective(&x, &wp, &b) - objective(&x, &wm, &b)) / (2.0 * h);
            let an = gw2.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-5, "gw[{idx}]: fd {fd} vs analytic {an}");
        }
        // Bias.
        for o in 0..3 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[o] += h;
            bm[o] -= h;
            let fd = (objective(&x, &w, &bp) - objective(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - gb[o]).abs() < 1e-5, "gb[{o}]: fd {fd} vs analytic {}", gb[o]);
        }
        // Input coordinates.
        for idx in [0usize, 13, 49, 77] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (objective(&xp, &w, &b) - objective(&xm, &w, &b)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-5, "gx[{idx}]: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn out_dim_formula_matches_known_cases() {
        assert_eq!(conv_out_dim(32, 3, 1, 1), 32);
        assert_eq!(conv_out_dim(32, 3, 2, 1), 16);
        assert_eq!(conv_out_dim(8, 3, 2, 1), 4);
        assert_eq!(conv_out_dim(5, 3, 1, 0), 3);
    }
}
