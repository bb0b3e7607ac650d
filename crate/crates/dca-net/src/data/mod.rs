//! Multi-domain dataset handling: a synthetic multi-domain generator for
//! desk-scale experiments, NIfTI-1 volume ingestion, slice-triple sampling
//! and leave-one-domain-out splitting.

pub mod manifest;
pub mod nifti;
pub mod preprocess;
pub mod sample;
pub mod split;
pub mod storage;
pub mod synthetic;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// One image/label volume with physical voxel spacing, axes (Z, Y, X).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub image: Array3<f32>,
    /// Binary mask, same shape as `image`.
    pub label: Array3<u8>,
    /// Millimetres per voxel along (z, y, x).
    pub spacing: (f64, f64, f64),
    pub patient_id: String,
}

impl VolumePair {
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.label.dim() {
            return Err(Error::Data(format!(
                "patient {}: image shape {:?} != label shape {:?}",
                self.patient_id,
                self.image.dim(),
                self.label.dim()
            )));
        }
        if self.image.is_empty() {
            return Err(Error::Data(format!("patient {}: empty volume", self.patient_id)));
        }
        if let Some(bad) = self.label.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!(
                "patient {}: non-binary label value {bad}",
                self.patient_id
            )));
        }
        let (sz, sy, sx) = self.spacing;
        if !(sz > 0.0 && sy > 0.0 && sx > 0.0) {
            return Err(Error::Data(format!(
                "patient {}: nonpositive spacing {:?}",
                self.patient_id, self.spacing
            )));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "patient {}: non-finite image intensity",
                self.patient_id
            )));
        }
        Ok(())
    }
}

/// All volumes of one acquisition domain (site).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub volumes: Vec<VolumePair>,
}

impl DomainDataset {
    pub fn validate(&self) -> Result<()> {
        if self.domain_id.is_empty() {
            return Err(Error::Data("empty domain id".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.volumes {
            v.validate()?;
            if !seen.insert(&v.patient_id) {
                return Err(Error::Data(format!(
                    "domain {}: duplicate patient id {}",
                    self.domain_id, v.patient_id
                )));
            }
        }
        Ok(())
    }
}

/// The full multi-site collection.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainRegistry {
    pub domains: Vec<DomainDataset>,
}

impl DomainRegistry {
    pub fn new(domains: Vec<DomainDataset>) -> Result<Self> {
        let reg = DomainRegistry { domains };
        reg.validate()?;
        Ok(reg)
    }

    /// Domain count M.
    pub fn m(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, id: &str) -> Option<&DomainDataset> {
        self.domains.iter().find(|d| d.domain_id == id)
    }

    pub fn num_volumes(&self) -> usize {
        self.domains.iter().map(|d| d.volumes.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for d in &self.domains {
            d.validate()?;
            if !ids.insert(&d.domain_id) {
                return Err(Error::Data(format!("duplicate domain id {}", d.domain_id)));
            }
        }
        Ok(())
    }
}

/// One training example: three adjacent slices as channels, the central
/// slice's mask as target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// (3, H, W) slice triple (z-1, z, z+1), edges replicated.
    pub image: Array3<f32>,
    /// (H, W) binary mask of the central slice.
    pub label: Array2<u8>,
    pub domain_id: String,
    pub patient_id: String,
    pub slice_index: usize,
}
