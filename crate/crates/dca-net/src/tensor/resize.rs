//! Spatial resampling kernels: 2x2 max pooling, nearest and bilinear
//! upsampling.

use ndarray::{s, Array4, ArrayD};

use super::{dims4, Elem};

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// scan order (row-major within the window), keeping results deterministic.
/// Returns the pooled map plus, per output element, the flat spatial index
/// (iy * W + ix) of the winning input.
pub fn max_pool2_forward<T: Elem>(x: &ArrayD<T>) -> (ArrayD<T>, ArrayD<u32>) {
    let (bsz, ch, h, w) = dims4(x);
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: H and W must be even, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<T>::zeros((bsz, ch, oh, ow));
    let mut arg = ArrayD::<u32>::zeros(ndarray::IxDyn(&[bsz, ch, oh, ow]));
    for b in 0..bsz {
        for c in 0..ch {
            let map = x.slice(s![b, c, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let (iy, ix) = (oy * 2, ox * 2);
                    let mut best = map[[iy, ix]];
                    let mut best_idx = (iy * w + ix) as u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = map[[iy + dy, ix + dx]];
                            if v > best {
                                best = v;
                                best_idx = ((iy + dy) * w + ix + dx) as u32;
                            }
                        }
                    }
                    y[[b, c, oy, ox]] = best;
                    arg[[b, c, oy, ox]] = best_idx;
                }
            }
        }
    }
    (y.into_dyn(), arg)
}

pub fn max_pool2_backward<T: Elem>(argmax: &ArrayD<u32>, dy: &ArrayD<T>, h: usize, w: usize) -> ArrayD<T> {
    let s = dy.shape();
    let (bsz, ch, oh, ow) = (s[0], s[1], s[2], s[3]);
    let mut dx = ArrayD::<T>::zeros(ndarray::IxDyn(&[bsz, ch, h, w]));
    for b in 0..bsz {
        for c in 0..ch {
            let mut dmap = dx.slice_mut(s![b, c, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let flat = argmax[[b, c, oy, ox]] as usize;
                    dmap[[flat / w, flat % w]] += dy[[b, c, oy, ox]];
                }
            }
        }
    }
    dx
}

pub fn up_nearest2_forward<T: Elem>(x: &ArrayD<T>) -> ArrayD<T> {
    let (bsz, ch, h, w) = dims4(x);
    let mut y = Array4::<T>::zeros((bsz, ch, 2 * h, 2 * w));
    for dy in 0..2 {
        for dx in 0..2 {
            y.slice_mut(s![.., .., dy..;2, dx..;2]).assign(
                &x.view().into_dimensionality::<ndarray::Ix4>().expect("rank 4"),
            );
        }
    }
    y.into_dyn()
}

pub fn up_nearest2_backward<T: Elem>(dy: &ArrayD<T>) -> ArrayD<T> {
    let (bsz, ch, h2, w2) = dims4(dy);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<T>::zeros((bsz, ch, h, w));
    for dyo in 0..2 {
        for dxo in 0..2 {
            dx += &dy.slice(s![.., .., dyo..;2, dxo..;2]);
        }
    }
    dx.into_dyn()
}

/// Per-axis bilinear lookup table: for each output index, the two source
/// indices and the interpolation weight of the second one. Half-pixel
/// centres (`align_corners = false`); indices clamp at the borders.
fn bilinear_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let floor = s.floor();
            let frac = s - floor;
            let i0 = (floor.max(0.0) as usize).min(src - 1);
            let i1 = ((floor + 1.0).max(0.0) as usize).min(src - 1);
            (i0, i1, frac)
        })
        .collect()
}

pub fn up_bilinear_forward<T: Elem>(x: &ArrayD<T>, out_h: usize, out_w: usize) -> ArrayD<T> {
    let (bsz, ch, h, w) = dims4(x);
    let ty = bilinear_table(h, out_h);
    let tx = bilinear_table(w, out_w);
    let mut y = Array4::<T>::zeros((bsz, ch, out_h, out_w));
    for b in 0..bsz {
        for c in 0..ch {
            let map = x.slice(s![b, c, .., ..]);
            let mut out = y.slice_mut(s![b, c, .., ..]);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let wy1 = T::from_f64(fy);
                let wy0 = T::one() - wy1;
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let wx1 = T::from_f64(fx);
                    let wx0 = T::one() - wx1;
                    out[[oy, ox]] = wy0 * (wx0 * map[[y0, x0]] + wx1 * map[[y0, x1]])
                        + wy1 * (wx0 * map[[y1, x0]] + wx1 * map[[y1, x1]]);
                }
            }
        }
    }
    y.into_dyn()
}

pub fn up_bilinear_backward<T: Elem>(dy: &ArrayD<T>, src_h: usize, src_w: usize) -> ArrayD<T> {
    let (bsz, ch, oh, ow) = dims4(dy);
    let ty = bilinear_table(src_h, oh);
    let tx = bilinear_table(src_w, ow);
    let mut dx = Array4::<T>::zeros((bsz, ch, src_h, src_w));
    for b in 0..bsz {
        for c in 0..ch {
            let grad = dy.slice(s![b, c, .., ..]);
            let mut dmap = dx.slice_mut(s![b, c, .., ..]);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let wy1 = T::from_f64(fy);
                let wy0 = T::one() - wy1;
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let wx1 = T::from_f64(fx);
                    let wx0 = T::one() - wx1;
                    let g = grad[[oy, ox]];
                    dmap[[y0, x0]] += wy0 * wx0 * g;
                    dmap[[y0, x1]] += wy0 * wx1 * g;
                    dmap[[y1, x0]] += wy1 * wx0 * g;
                    dmap[[y1, x1]] += wy1 * wx1 * g;
                }
            }
        }
    }
    dx.into_dyn()
}
