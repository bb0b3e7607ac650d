//! Convolution kernels: grouped stride-1 conv via im2col + GEMM, and a 2x2
//! stride-2 transposed conv (exact 2x upsampling).
//!
//! The im2col buffer is rebuilt in the backward pass instead of being cached
//! on the tape; the copy is cheap next to the GEMMs and keeps peak memory at
//! roughly one activation set.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayD, ArrayView3, ArrayViewMut3, Axis, Zip};

use super::{dims4, Elem};

/// Lay out one (channels, H, W) group slice as a (channels * k * k, oh * ow)
/// patch matrix for a stride-1 convolution with symmetric zero padding.
fn im2col<T: Elem>(x: &ArrayView3<T>, k: usize, pad: usize, col: &mut Array2<T>) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    debug_assert_eq!(col.shape(), &[cin * k * k, oh * ow]);
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (c * k + ky) * k + kx;
                let mut row = col.row_mut(row_idx);
                let row = row.as_slice_mut().expect("col row contiguous");
                // Valid output-x range given this kernel offset.
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad - kx).min(ow);
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad || ox_lo >= ox_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = iy - pad;
                    dst[..ox_lo].fill(T::zero());
                    dst[ox_hi..].fill(T::zero());
                    let ix_lo = ox_lo + kx - pad;
                    let src = x.slice(s![c, iy, ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    dst[ox_lo..ox_hi].copy_from_slice(src.as_slice().expect("x row contiguous"));
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix cotangent back onto the input layout
/// (the adjoint of [`im2col`]).
fn col2im_add<T: Elem>(col: &Array2<T>, k: usize, pad: usize, dx: &mut ArrayViewMut3<T>) {
    let (cin, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (c * k + ky) * k + kx;
                let row = col.row(row_idx);
                let row = row.as_slice().expect("col row contiguous");
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad - kx).min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let ix_lo = ox_lo + kx - pad;
                    let src = &row[oy * ow + ox_lo..oy * ow + ox_hi];
                    let mut dst = dx.slice_mut(s![c, iy, ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    let dst = dst.as_slice_mut().expect("dx row contiguous");
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Elem>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: &ArrayD<T>,
    groups: usize,
    pad: usize,
) -> ArrayD<T> {
    let (bsz, cin, h, wd) = dims4(x);
    let (cout, cin_g, kh, kw) = dims4(w);
    assert_eq!(kh, kw, "conv2d: kernel must be square");
    assert_eq!(cin_g * groups, cin, "conv2d: channels/groups mismatch");
    assert_eq!(cout % groups, 0, "conv2d: out channels not divisible by groups");
    assert_eq!(bias.len(), cout, "conv2d: bias length mismatch");
    let k = kh;
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
    let oh = h + 2 * pad - k + 1;
    let ow = wd + 2 * pad - k + 1;
    let cout_g = cout / groups;
    let patch = cin_g * k * k;

    let w3 = w.view().into_shape_with_order((groups, cout_g, patch)).expect("w contiguous");
    let mut col = Array2::<T>::zeros((patch, oh * ow));
    let mut y = Array4::<T>::zeros((bsz, cout, oh, ow));
    for b in 0..bsz {
        for g in 0..groups {
            let xg = x
                .slice(s![b, g * cin_g..(g + 1) * cin_g, .., ..])
                .into_dimensionality()
                .expect("rank 3");
            im2col(&xg, k, pad, &mut col);
            let mut yg = y.slice_mut(s![b, g * cout_g..(g + 1) * cout_g, .., ..]);
            let mut ymat =
                yg.view_mut().into_shape_with_order((cout_g, oh * ow)).expect("y contiguous");
            general_mat_mul(T::one(), &w3.index_axis(Axis(0), g), &col.view(), T::zero(), &mut ymat);
        }
        for c in 0..cout {
            let bval = bias[c];
            y.slice_mut(s![b, c, .., ..]).mapv_inplace(|v| v + bval);
        }
    }
    y.into_dyn()
}

pub fn conv2d_backward<T: Elem>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    dy: &ArrayD<T>,
    groups: usize,
    pad: usize,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let (bsz, cin, h, wd) = dims4(x);
    let (cout, cin_g, k, _) = dims4(w);
    assert_eq!(cin_g * groups, cin, "conv2d backward: channels/groups mismatch");
    let cout_g = cout / groups;
    let patch = cin_g * k * k;
    let oh = h + 2 * pad - k + 1;
    let ow = wd + 2 * pad - k + 1;
    debug_assert_eq!(dy.shape(), &[bsz, cout, oh, ow]);

    let w3 = w.view().into_shape_with_order((groups, cout_g, patch)).expect("w contiguous");
    let mut dx = ArrayD::<T>::zeros(x.raw_dim());
    let mut dw = ArrayD::<T>::zeros(w.raw_dim());
    let mut db = ArrayD::<T>::zeros(bias_dim(cout));
    {
        let mut dw3 =
            dw.view_mut().into_shape_with_order((groups, cout_g, patch)).expect("dw contiguous");
        let mut col = Array2::<T>::zeros((patch, oh * ow));
        let mut dcol = Array2::<T>::zeros((patch, oh * ow));
        for b in 0..bsz {
            for g in 0..groups {
                let xg = x
                    .slice(s![b, g * cin_g..(g + 1) * cin_g, .., ..])
                    .into_dimensionality()
                    .expect("rank 3");
                im2col(&xg, k, pad, &mut col);
                let dyg = dy.slice(s![b, g * cout_g..(g + 1) * cout_g, .., ..]);
                let dymat =
                    dyg.into_shape_with_order((cout_g, oh * ow)).expect("dy contiguous");
                // dW_g += dY_g * col^T   (accumulates across the batch)
                let mut dwg = dw3.index_axis_mut(Axis(0), g);
                general_mat_mul(T::one(), &dymat, &col.t(), T::one(), &mut dwg);
                // dcol = W_g^T * dY_g, then scatter back onto dx.
                general_mat_mul(
                    T::one(),
                    &w3.index_axis(Axis(0), g).t(),
                    &dymat,
                    T::zero(),
                    &mut dcol.view_mut(),
                );
                let mut dxg = dx
                    .slice_mut(s![b, g * cin_g..(g + 1) * cin_g, .., ..])
                    .into_dimensionality()
                    .expect("rank 3");
                col2im_add(&dcol, k, pad, &mut dxg);
            }
        }
    }
    for c in 0..cout {
        let mut acc = T::zero();
        Zip::from(dy.slice(s![.., c, .., ..])).for_each(|&v| acc += v);
        db[c] = acc;
    }
    (dx, dw, db)
}

fn bias_dim(c: usize) -> ndarray::IxDyn {
    ndarray::IxDyn(&[c])
}

pub fn conv_t2x2_forward<T: Elem>(x: &ArrayD<T>, w: &ArrayD<T>, bias: &ArrayD<T>) -> ArrayD<T> {
    let (bsz, cin, h, wd) = dims4(x);
    let (wcin, cout, kh, kw) = dims4(w);
    assert_eq!(wcin, cin, "conv_transpose2x2: channel mismatch");
    assert_eq!((kh, kw), (2, 2), "conv_transpose2x2: kernel must be 2x2");
    assert_eq!(bias.len(), cout, "conv_transpose2x2: bias length mismatch");
    let mut y = Array4::<T>::zeros((bsz, cout, 2 * h, 2 * wd));
    let mut tmp = Array2::<T>::zeros((cout, h * wd));
    for b in 0..bsz {
        let xb = x.slice(s![b, .., .., ..]);
        let xmat = xb.into_shape_with_order((cin, h * wd)).expect("x contiguous");
        for dy_off in 0..2 {
            for dx_off in 0..2 {
                let wd2 = w.slice(s![.., .., dy_off, dx_off]); // (Cin, Cout), strided
                general_mat_mul(T::one(), &wd2.t(), &xmat, T::zero(), &mut tmp.view_mut());
                let tmp3 = tmp.view().into_shape_with_order((cout, h, wd)).expect("tmp");
                let mut dst = y.slice_mut(s![b, .., dy_off..;2, dx_off..;2]);
                dst.assign(&tmp3);
            }
        }
        for c in 0..cout {
            let bval = bias[c];
            y.slice_mut(s![b, c, .., ..]).mapv_inplace(|v| v + bval);
        }
    }
    y.into_dyn()
}

pub fn conv_t2x2_backward<T: Elem>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    dy: &ArrayD<T>,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let (bsz, cin, h, wd) = dims4(x);
    let (_, cout, _, _) = dims4(w);
    debug_assert_eq!(dy.shape(), &[bsz, cout, 2 * h, 2 * wd]);
    let mut dx = ArrayD::<T>::zeros(x.raw_dim());
    let mut dw = ArrayD::<T>::zeros(w.raw_dim());
    let mut db = ArrayD::<T>::zeros(bias_dim(cout));
    for b in 0..bsz {
        let xb = x.slice(s![b, .., .., ..]);
        let xmat = xb.into_shape_with_order((cin, h * wd)).expect("x contiguous");
        let mut dxb = dx.slice_mut(s![b, .., .., ..]);
        let mut dxmat = dxb.view_mut().into_shape_with_order((cin, h * wd)).expect("dx");
        for dy_off in 0..2 {
            for dx_off in 0..2 {
                // Strided slice of dy is not contiguous; densify for GEMM.
                let dslice = dy.slice(s![b, .., dy_off..;2, dx_off..;2]).to_owned();
                let dmat = dslice.into_shape_with_order((cout, h * wd)).expect("dy slice");
                let wd2 = w.slice(s![.., .., dy_off, dx_off]); // (Cin, Cout)
                general_mat_mul(T::one(), &wd2, &dmat.view(), T::one(), &mut dxmat);
                let mut dwd = dw.slice_mut(s![.., .., dy_off, dx_off]);
                let mut dwd2 = dwd.view_mut().into_dimensionality().expect("rank 2");
                general_mat_mul(T::one(), &xmat, &dmat.t(), T::one(), &mut dwd2);
            }
        }
    }
    for c in 0..cout {
        let mut acc = T::zero();
        Zip::from(dy.slice(s![.., c, .., ..])).for_each(|&v| acc += v);
        db[c] = acc;
    }
    (dx, dw, db)
}
