//! Group normalisation and softmax kernels.

use ndarray::{Array2, ArrayD, Axis, Zip};

use super::{dims4, Elem};

/// Group-normalise (B, C, H, W) over `groups` channel groups.
///
/// Returns the normalised output plus per-(batch, group) mean and inverse
/// standard deviation (biased variance), which the backward pass reuses.
/// `groups == C` yields instance normalisation.
pub fn group_norm_forward<T: Elem>(
    x: &ArrayD<T>,
    groups: usize,
    eps: T,
    gamma: Option<&ArrayD<T>>,
    beta: Option<&ArrayD<T>>,
) -> (ArrayD<T>, Array2<T>, Array2<T>) {
    let (bsz, ch, h, w) = dims4(x);
    assert!(groups > 0 && ch % groups == 0, "group_norm: C={} not divisible by groups={}", ch, groups);
    let cg = ch / groups;
    let m = cg * h * w;
    let inv_m = T::one() / T::from_f64(m as f64);
    if let Some(g) = gamma {
        assert_eq!(g.len(), ch, "group_norm: gamma length mismatch");
    }
    if let Some(b) = beta {
        assert_eq!(b.len(), ch, "group_norm: beta length mismatch");
    }

    let x3 = x.view().into_shape_with_order((bsz, groups, m)).expect("x contiguous");
    let mut mean = Array2::<T>::zeros((bsz, groups));
    let mut istd = Array2::<T>::zeros((bsz, groups));
    let mut y = ArrayD::<T>::zeros(x.raw_dim());
    {
        let mut y3 = y.view_mut().into_shape_with_order((bsz, groups, m)).expect("y contiguous");
        for b in 0..bsz {
            for g in 0..groups {
                let slab = x3.slice(ndarray::s![b, g, ..]);
                let mut mu = T::zero();
                for &v in slab {
                    mu += v;
                }
                mu *= inv_m;
                let mut var = T::zero();
                for &v in slab {
                    let d = v - mu;
                    var += d * d;
                }
                var *= inv_m;
                let is = T::one() / (var + eps).sqrt();
                mean[[b, g]] = mu;
                istd[[b, g]] = is;
                let mut out = y3.slice_mut(ndarray::s![b, g, ..]);
                Zip::from(&mut out).and(&slab).for_each(|o, &v| *o = (v - mu) * is);
            }
        }
    }
    if gamma.is_some() || beta.is_some() {
        for c in 0..ch {
            let gm = gamma.map(|g| g[c]).unwrap_or_else(T::one);
            let bt = beta.map(|b| b[c]).unwrap_or_else(T::zero);
            y.slice_mut(ndarray::s![.., c, .., ..]).mapv_inplace(|v| v * gm + bt);
        }
    }
    (y, mean, istd)
}

/// Adjoint of [`group_norm_forward`]. Recomputes the normalised activations
/// from the cached statistics rather than storing them.
pub fn group_norm_backward<T: Elem>(
    x: &ArrayD<T>,
    groups: usize,
    mean: &Array2<T>,
    istd: &Array2<T>,
    gamma: Option<&ArrayD<T>>,
    dy: &ArrayD<T>,
) -> (ArrayD<T>, Option<ArrayD<T>>, Option<ArrayD<T>>) {
    let (bsz, ch, h, w) = dims4(x);
    let cg = ch / groups;
    let m = cg * h * w;
    let inv_m = T::one() / T::from_f64(m as f64);

    let x3 = x.view().into_shape_with_order((bsz, groups, m)).expect("x contiguous");
    let dy4 = dy;
    let mut dx = ArrayD::<T>::zeros(x.raw_dim());
    // d gamma / d beta accumulate per channel over batch and space.
    let mut dgamma = ArrayD::<T>::zeros(ndarray::IxDyn(&[ch]));
    let mut dbeta = ArrayD::<T>::zeros(ndarray::IxDyn(&[ch]));
    {
        let dy3 = dy4.view().into_shape_with_order((bsz, groups, m)).expect("dy contiguous");
        let mut dx3 =
            dx.view_mut().into_shape_with_order((bsz, groups, m)).expect("dx contiguous");
        let hw = h * w;
        for b in 0..bsz {
            for g in 0..groups {
                let mu = mean[[b, g]];
                let is = istd[[b, g]];
                let xs = x3.slice(ndarray::s![b, g, ..]);
                let dys = dy3.slice(ndarray::s![b, g, ..]);
                // Channel-aware pass: dxhat = dy * gamma_c, plus the affine
                // parameter gradients.
                let mut s1 = T::zero(); // mean of dxhat
                let mut s2 = T::zero(); // mean of dxhat * xhat
                let mut dxs = dx3.slice_mut(ndarray::s![b, g, ..]);
                for idx in 0..m {
                    let c = g * cg + idx / hw;
                    let xhat = (xs[idx] - mu) * is;
                    let dyv = dys[idx];
                    dgamma[c] += dyv * xhat;
                    dbeta[c] += dyv;
                    let dxhat = match gamma {
                        Some(gm) => dyv * gm[c],
                        None => dyv,
                    };
                    // Stash dxhat; finished below once s1/s2 are known.
                    dxs[idx] = dxhat;
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
                s1 *= inv_m;
                s2 *= inv_m;
                for idx in 0..m {
                    let xhat = (xs[idx] - mu) * is;
                    dxs[idx] = is * (dxs[idx] - s1 - xhat * s2);
                }
            }
        }
    }
    let dgamma = gamma.is_some().then_some(dgamma);
    let dbeta = gamma.is_some().then_some(dbeta);
    (dx, dgamma, dbeta)
}

/// Numerically-stable softmax along axis 1 for any rank >= 2.
pub fn softmax_lanes<T: Elem>(x: &ArrayD<T>) -> ArrayD<T> {
    let mut y = x.clone();
    for mut lane in y.lanes_mut(Axis(1)) {
        let mut mx = lane[0];
        for &v in lane.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = T::zero();
        for v in lane.iter_mut() {
            *v = (*v - mx).exp();
            denom += *v;
        }
        for v in lane.iter_mut() {
            *v /= denom;
        }
    }
    y
}

/// Softmax adjoint: dx = y * (dy - <dy, y>) per lane.
pub fn softmax_lanes_backward<T: Elem>(y: &ArrayD<T>, dy: &ArrayD<T>) -> ArrayD<T> {
    let mut dx = dy.clone();
    Zip::from(dx.lanes_mut(Axis(1)))
        .and(y.lanes(Axis(1)))
        .for_each(|mut dl, yl| {
            let mut dot = T::zero();
            Zip::from(&dl).and(&yl).for_each(|&d, &yv| dot += d * yv);
            Zip::from(&mut dl).and(&yl).for_each(|d, &yv| *d = yv * (*d - dot));
        });
    dx
}
