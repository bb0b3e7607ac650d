//! On-disk format for generated datasets: one directory per domain holding
//! raw little-endian float32 image slabs, float32 label slabs, and a JSON
//! sidecar describing shapes, spacing, style and provenance.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::synthetic::DomainStyle;
use super::{DomainDataset, DomainRegistry, VolumePair};
use crate::error::{Error, Result};

/// Sidecar file name inside each domain directory.
pub const SIDECAR: &str = "domain.json";

/// Upper bound on voxels per volume accepted from a sidecar (guards
/// allocation on corrupt files).
const MAX_VOXELS: u64 = 1 << 28;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub domain_id: String,
    /// (Z, Y, X) of every volume in this domain.
    pub shape: [usize; 3],
    /// Millimetres per voxel (z, y, x).
    pub spacing: [f64; 3],
    /// Style used to generate the domain, if synthetic.
    pub style: Option<DomainStyle>,
    /// Root seed used for generation, if synthetic.
    pub seed: Option<u64>,
    pub volumes: Vec<SidecarVolume>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarVolume {
    pub patient_id: String,
    /// File name of the image slab, relative to the sidecar.
    pub image: String,
    /// File name of the label slab, relative to the sidecar.
    pub label: String,
}

/// Parse and sanity-check sidecar JSON.
pub fn parse_sidecar(bytes: &[u8]) -> Result<Sidecar> {
    let sc: Sidecar =
        serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("bad sidecar: {e}")))?;
    if sc.domain_id.is_empty() {
        return Err(Error::Data("sidecar: empty domain id".into()));
    }
    let voxels = sc.shape.iter().map(|&d| d as u64).product::<u64>();
    if voxels == 0 || voxels > MAX_VOXELS {
        return Err(Error::Data(format!("sidecar: implausible shape {:?}", sc.shape)));
    }
    if sc.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Data(format!("sidecar: invalid spacing {:?}", sc.spacing)));
    }
    if sc.volumes.is_empty() {
        return Err(Error::Data("sidecar: no volumes listed".into()));
    }
    for v in &sc.volumes {
        // Slab paths must stay inside the domain directory.
        for f in [&v.image, &v.label] {
            if f.contains('/') || f.contains('\\') || f.contains("..") || f.is_empty() {
                return Err(Error::Data(format!("sidecar: unsafe slab path {f:?}")));
            }
        }
    }
    Ok(sc)
}

fn write_slab_f32(path: &Path, data: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_slab_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expect * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes ({expect} float32), found {}",
            path.display(),
            expect * 4,
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Write one domain into `dir` (created if missing). All volumes must share
/// one shape, which the format requires.
pub fn save_domain(
    dir: &Path,
    domain: &DomainDataset,
    style: Option<&DomainStyle>,
    seed: Option<u64>,
) -> Result<()> {
    domain.validate()?;
    let first = domain
        .volumes
        .first()
        .ok_or_else(|| Error::Data(format!("domain {}: no volumes to save", domain.domain_id)))?;
    let shape = first.image.dim();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut listed = Vec::with_capacity(domain.volumes.len());
    for (i, vol) in domain.volumes.iter().enumerate() {
        if vol.image.dim() != shape {
            return Err(Error::Data(format!(
                "domain {}: mixed volume shapes {:?} vs {:?}",
                domain.domain_id,
                vol.image.dim(),
                shape
            )));
        }
        let image = format!("p{i:03}.img.raw");
        let label = format!("p{i:03}.lbl.raw");
        write_slab_f32(&dir.join(&image), vol.image.iter().copied())?;
        write_slab_f32(&dir.join(&label), vol.label.iter().map(|&v| v as f32))?;
        listed.push(SidecarVolume { patient_id: vol.patient_id.clone(), image, label });
    }
    let sc = Sidecar {
        domain_id: domain.domain_id.clone(),
        shape: [shape.0, shape.1, shape.2],
        spacing: [first.spacing.0, first.spacing.1, first.spacing.2],
        style: style.copied(),
        seed,
        volumes: listed,
    };
    let json = serde_json::to_string_pretty(&sc)
        .map_err(|e| Error::Data(format!("sidecar serialization: {e}")))?;
    let path = dir.join(SIDECAR);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Load one domain directory written by [`save_domain`].
pub fn load_domain(dir: &Path) -> Result<DomainDataset> {
    let sidecar_path = dir.join(SIDECAR);
    let bytes = fs::read(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let sc = parse_sidecar(&bytes)?;
    let [z, y, x] = sc.shape;
    let n = z * y * x;
    let mut volumes = Vec::with_capacity(sc.volumes.len());
    for v in &sc.volumes {
        let img = read_slab_f32(&dir.join(&v.image), n)?;
        let lbl = read_slab_f32(&dir.join(&v.label), n)?;
        let label: Array3<u8> = Array3::from_shape_vec(
            (z, y, x),
            lbl.iter()
                .map(|&f| {
                    if f == 0.0 {
                        Ok(0u8)
                    } else if f == 1.0 {
                        Ok(1u8)
                    } else {
                        Err(Error::Data(format!(
                            "{}: non-binary label value {f}",
                            v.patient_id
                        )))
                    }
                })
                .collect::<Result<Vec<u8>>>()?,
        )
        .expect("length checked");
        let pair = VolumePair {
            image: Array3::from_shape_vec((z, y, x), img).expect("length checked"),
            label,
            spacing: (sc.spacing[0], sc.spacing[1], sc.spacing[2]),
            patient_id: v.patient_id.clone(),
        };
        pair.validate()?;
        volumes.push(pair);
    }
    let ds = DomainDataset { domain_id: sc.domain_id, volumes };
    ds.validate()?;
    Ok(ds)
}

/// Save a whole registry: one subdirectory per domain.
pub fn save_registry(root: &Path, registry: &DomainRegistry, seed: Option<u64>) -> Result<()> {
    for d in &registry.domains {
        save_domain(&root.join(&d.domain_id), d, None, seed)?;
    }
    Ok(())
}

/// Load every domain directory (any subdirectory containing a sidecar)
/// under `root`, sorted by domain id for a stable order.
pub fn load_registry(root: &Path) -> Result<DomainRegistry> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SIDECAR).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!(
            "{}: no domain directories (nothing contains {SIDECAR})",
            root.display()
        )));
    }
    let mut domains = Vec::with_capacity(dirs.len());
    for dir in dirs {
        domains.push(load_domain(&dir)?);
    }
    domains.sort_by(|a, b| a.domain_id.cmp(&b.domain_id));
    DomainRegistry::new(domains)
}
