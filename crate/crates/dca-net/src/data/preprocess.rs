//! Volume preprocessing: per-volume z-score normalization of the nonzero
//! region and axial resizing (bilinear for images, nearest for masks).

use ndarray::{Array2, Array3, Axis};

use super::VolumePair;
use crate::error::{Error, Result};

/// Standardize the nonzero voxels to zero mean / unit variance in place;
/// exact zeros (background air) are left untouched.
pub fn z_score_nonzero(image: &mut Array3<f32>) -> Result<()> {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for &v in image.iter() {
        if v != 0.0 {
            n += 1;
            sum += v as f64;
        }
    }
    if n == 0 {
        return Err(Error::Numeric("cannot normalize an all-zero volume".into()));
    }
    let mean = sum / n as f64;
    let mut sq = 0.0f64;
    for &v in image.iter() {
        if v != 0.0 {
            let d = v as f64 - mean;
            sq += d * d;
        }
    }
    let std = (sq / n as f64).sqrt();
    if std < 1e-8 {
        return Err(Error::Numeric(format!(
            "cannot normalize a constant-intensity volume (std {std:.2e})"
        )));
    }
    for v in image.iter_mut() {
        if *v != 0.0 {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
    Ok(())
}

/// Bilinear resize with half-pixel-centered sampling, edges clamped.
pub fn resize_bilinear(src: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    assert!(oh > 0 && ow > 0, "resize target must be positive");
    let (ih, iw) = src.dim();
    let mut out = Array2::<f32>::zeros((oh, ow));
    let map = |o: usize, osz: usize, isz: usize| -> (usize, usize, f32) {
        let scale = isz as f64 / osz as f64;
        let center = (o as f64 + 0.5) * scale - 0.5;
        let clamped = center.clamp(0.0, (isz - 1) as f64);
        let i0 = clamped.floor() as usize;
        let i1 = (i0 + 1).min(isz - 1);
        (i0, i1, (clamped - i0 as f64) as f32)
    };
    for oy in 0..oh {
        let (y0, y1, fy) = map(oy, oh, ih);
        for ox in 0..ow {
            let (x0, x1, fx) = map(ox, ow, iw);
            let top = src[(y0, x0)] * (1.0 - fx) + src[(y0, x1)] * fx;
            let bot = src[(y1, x0)] * (1.0 - fx) + src[(y1, x1)] * fx;
            out[(oy, ox)] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Nearest-neighbor resize with the same half-pixel convention; preserves
/// the input's value set exactly.
pub fn resize_nearest_u8(src: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    assert!(oh > 0 && ow > 0, "resize target must be positive");
    let (ih, iw) = src.dim();
    let mut out = Array2::<u8>::zeros((oh, ow));
    let map = |o: usize, osz: usize, isz: usize| -> usize {
        let scale = isz as f64 / osz as f64;
        let center = (o as f64 + 0.5) * scale - 0.5;
        (center.round().clamp(0.0, (isz - 1) as f64)) as usize
    };
    for oy in 0..oh {
        let sy = map(oy, oh, ih);
        for ox in 0..ow {
            out[(oy, ox)] = src[(sy, map(ox, ow, iw))];
        }
    }
    out
}

/// Standardize (optionally) and resize every axial slice to
/// `target_size` x `target_size`. In-plane spacing is rescaled so physical
/// extents are preserved.
pub fn preprocess_volume(
    volume: &VolumePair,
    target_size: usize,
    normalize: bool,
) -> Result<VolumePair> {
    volume.validate()?;
    if target_size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let (depth, h, w) = volume.image.dim();
    let mut image = volume.image.clone();
    if normalize {
        z_score_nonzero(&mut image)?;
    }
    let mut out_img = Array3::<f32>::zeros((depth, target_size, target_size));
    let mut out_lbl = Array3::<u8>::zeros((depth, target_size, target_size));
    for z in 0..depth {
        let img_slice = image.index_axis(Axis(0), z).to_owned();
        let lbl_slice = volume.label.index_axis(Axis(0), z).to_owned();
        out_img
            .index_axis_mut(Axis(0), z)
            .assign(&resize_bilinear(&img_slice, target_size, target_size));
        out_lbl
            .index_axis_mut(Axis(0), z)
            .assign(&resize_nearest_u8(&lbl_slice, target_size, target_size));
    }
    let (sz, sy, sx) = volume.spacing;
    Ok(VolumePair {
        image: out_img,
        label: out_lbl,
        spacing: (
            sz,
            sy * h as f64 / target_size as f64,
            sx * w as f64 / target_size as f64,
        ),
        patient_id: volume.patient_id.clone(),
    })
}
