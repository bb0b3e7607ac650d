//! Slice-triple extraction: each training sample stacks three adjacent
//! axial slices as channels and predicts the central slice's mask.

use ndarray::{Array3, Axis};

use super::{Sample, VolumePair};

/// One sample per slice; boundary slices replicate their edge neighbor.
pub fn make_slice_triples(volume: &VolumePair, domain_id: &str) -> Vec<Sample> {
    let (depth, h, w) = volume.image.dim();
    let mut out = Vec::with_capacity(depth);
    for z in 0..depth {
        let lo = z.saturating_sub(1);
        let hi = (z + 1).min(depth - 1);
        let mut image = Array3::<f32>::zeros((3, h, w));
        for (c, src) in [lo, z, hi].into_iter().enumerate() {
            image.index_axis_mut(Axis(0), c).assign(&volume.image.index_axis(Axis(0), src));
        }
        out.push(Sample {
            image,
            label: volume.label.index_axis(Axis(0), z).to_owned(),
            domain_id: domain_id.to_string(),
            patient_id: volume.patient_id.clone(),
            slice_index: z,
        });
    }
    out
}
