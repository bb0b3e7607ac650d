//! Validated tensor newtypes for module boundaries.
//!
//! Raw `ndarray` values flow freely inside the network; these wrappers exist
//! where arrays cross public API boundaries and carry invariants worth
//! enforcing (shape conventions, value ranges, simplex constraints).

use ndarray::{Array2, Array3, Array4, ArrayD};

use crate::error::{Error, Result};
use crate::tensor::Elem;

fn ensure_finite<'a, T: Elem>(mut vals: impl Iterator<Item = &'a T>, what: &str) -> Result<()> {
    if vals.any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// A batch of feature maps, shape (B, C, H, W), finite entries.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Elem>(Array4<T>);

impl<T: Elem> FeatureMap<T> {
    pub fn new(a: Array4<T>) -> Result<Self> {
        if a.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("feature map has empty axis: {:?}", a.shape())));
        }
        ensure_finite(a.iter(), "feature map")?;
        Ok(FeatureMap(a))
    }

    pub fn from_dyn(a: ArrayD<T>) -> Result<Self> {
        let a = a
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::Shape("feature map must be rank 4 (B, C, H, W)".into()))?;
        Self::new(a)
    }

    pub fn get(&self) -> &Array4<T> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<T> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Per-item channel descriptors, shape (B, C): spatially pooled features.
#[derive(Debug, Clone)]
pub struct PooledDescriptor<T: Elem>(Array2<T>);

impl<T: Elem> PooledDescriptor<T> {
    pub fn new(a: Array2<T>) -> Result<Self> {
        ensure_finite(a.iter(), "pooled descriptor")?;
        Ok(PooledDescriptor(a))
    }

    pub fn get(&self) -> &Array2<T> {
        &self.0
    }
}

/// A bank of per-item basis vectors, shape (B, N, C), every entry strictly
/// inside (0, 1) (they are sigmoid outputs) and N >= 3 so divergence triples
/// exist.
#[derive(Debug, Clone)]
pub struct BasisBank<T: Elem>(Array3<T>);

impl<T: Elem> BasisBank<T> {
    pub fn new(a: Array3<T>) -> Result<Self> {
        if a.shape()[1] < 3 {
            return Err(Error::Shape(format!(
                "basis bank needs at least 3 rows, got {}",
                a.shape()[1]
            )));
        }
        let zero = T::zero();
        let one = T::one();
        for &v in a.iter() {
            if !v.is_finite() || v <= zero || v >= one {
                return Err(Error::Numeric(format!(
                    "basis bank entry {v} outside the open interval (0, 1)"
                )));
            }
        }
        Ok(BasisBank(a))
    }

    pub fn from_dyn(a: ArrayD<T>) -> Result<Self> {
        let a = a
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| Error::Shape("basis bank must be rank 3 (B, N, C)".into()))?;
        Self::new(a)
    }

    pub fn get(&self) -> &Array3<T> {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Per-item mixture weights over bank rows, shape (B, N): nonnegative, each
/// row summing to 1 within `SIMPLEX_TOL`.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T: Elem>(Array2<T>);

/// Tolerance on softmax row sums.
pub const SIMPLEX_TOL: f64 = 1e-6;

impl<T: Elem> AttentionWeights<T> {
    pub fn new(a: Array2<T>) -> Result<Self> {
        ensure_finite(a.iter(), "attention weights")?;
        for row in a.outer_iter() {
            let mut sum = 0.0;
            for &v in row {
                if v.to_f64() < 0.0 {
                    return Err(Error::Numeric(format!("negative attention weight {v}")));
                }
                sum += v.to_f64();
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Numeric(format!(
                    "attention row sums to {sum}, expected 1 within {SIMPLEX_TOL}"
                )));
            }
        }
        Ok(AttentionWeights(a))
    }

    pub fn from_dyn(a: ArrayD<T>) -> Result<Self> {
        let a = a
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::Shape("attention weights must be rank 2 (B, N)".into()))?;
        Self::new(a)
    }

    pub fn get(&self) -> &Array2<T> {
        &self.0
    }
}

/// Per-item channel calibration factors, shape (B, C), strictly inside
/// (0, 1): convex combinations of basis-bank entries.
#[derive(Debug, Clone)]
pub struct CalibrationVector<T: Elem>(Array2<T>);

impl<T: Elem> CalibrationVector<T> {
    pub fn new(a: Array2<T>) -> Result<Self> {
        let zero = T::zero();
        let one = T::one();
        for &v in a.iter() {
            if !v.is_finite() || v <= zero || v >= one {
                return Err(Error::Numeric(format!(
                    "calibration factor {v} outside the open interval (0, 1)"
                )));
            }
        }
        Ok(CalibrationVector(a))
    }

    pub fn from_dyn(a: ArrayD<T>) -> Result<Self> {
        let a = a
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::Shape("calibration vector must be rank 2 (B, C)".into()))?;
        Self::new(a)
    }

    pub fn get(&self) -> &Array2<T> {
        &self.0
    }
}
