//! Multi-site dataset manifest: a JSON document mapping each domain id to
//! its image/label volume files and patient ids.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::nifti;
use super::{DomainDataset, DomainRegistry, VolumePair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDomain {
    pub images: Vec<String>,
    pub labels: Vec<String>,
    pub patient_ids: Vec<String>,
}

/// Domain id → file lists; ordered map so iteration order is stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub domains: BTreeMap<String, ManifestDomain>,
}

/// Parse and validate manifest JSON.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let m: Manifest =
        serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
    if m.domains.is_empty() {
        return Err(Error::Data("manifest lists no domains".into()));
    }
    for (id, d) in &m.domains {
        if d.images.is_empty() {
            return Err(Error::Data(format!("manifest domain {id}: no volumes")));
        }
        if d.images.len() != d.labels.len() || d.images.len() != d.patient_ids.len() {
            return Err(Error::Data(format!(
                "manifest domain {id}: {} images, {} labels, {} patient ids — counts must match",
                d.images.len(),
                d.labels.len(),
                d.patient_ids.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &d.patient_ids {
            if !seen.insert(p) {
                return Err(Error::Data(format!(
                    "manifest domain {id}: duplicate patient id {p}"
                )));
            }
        }
    }
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&bytes)
}

/// Load every volume the manifest names, relative to `root`. Image spacing
/// comes from the image headers; label grids must match their image.
pub fn load_multisite_volumes(root: &Path, manifest: &Manifest) -> Result<DomainRegistry> {
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for (id, d) in &manifest.domains {
        let mut volumes = Vec::with_capacity(d.images.len());
        for ((img, lbl), patient) in d.images.iter().zip(&d.labels).zip(&d.patient_ids) {
            let (image, spacing) = nifti::read_nifti(&root.join(img))?;
            let (label, _) = nifti::read_nifti_mask(&root.join(lbl))?;
            if image.dim() != label.dim() {
                return Err(Error::Data(format!(
                    "{img} has shape {:?} but {lbl} has {:?}",
                    image.dim(),
                    label.dim()
                )));
            }
            let pair = VolumePair { image, label, spacing, patient_id: patient.clone() };
            pair.validate()?;
            volumes.push(pair);
        }
        let ds = DomainDataset { domain_id: id.clone(), volumes };
        ds.validate()?;
        domains.push(ds);
    }
    DomainRegistry::new(domains)
}
