//! Evaluation metrics: volume Dice (percent) and Average Surface Distance
//! (millimetres, physical spacing), plus model-driven volume evaluation and
//! CSV emission.
//!
//! Conventions (fixed here, since they vary across papers): surfaces are
//! foreground voxels with at least one background 6-neighbor, the volume
//! border counting as background; points are voxel centers scaled by
//! spacing; ASD is the arithmetic mean of the two directed mean surface
//! distances; an empty mask makes ASD undefined (reported as missing, never
//! as a sentinel value).

use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::preprocess::{preprocess_volume, resize_nearest_u8};
use crate::data::VolumePair;
use crate::dca::CalibrationMode;
use crate::error::{Error, Result};
use crate::network::DcaUnet;
use crate::tensor::{Elem, Graph, ParamStore};

/// Per-volume evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub domain_id: String,
    pub patient_id: String,
    pub dice_percent: f64,
    /// Missing when either surface is empty.
    pub asd_mm: Option<f64>,
}

/// Volume overlap in percent; 100 when both masks are empty.
pub fn dice_score(pred: &Array3<u8>, gt: &Array3<u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "dice: mask shapes {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        p += a as usize;
        g += b as usize;
        inter += (a & b) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Centers of foreground voxels that touch background through a face
/// (6-connectivity); the volume border counts as background. Coordinates
/// are scaled to millimetres.
pub fn extract_surface(mask: &Array3<u8>, spacing: (f64, f64, f64)) -> Vec<[f64; 3]> {
    let (nz, ny, nx) = mask.dim();
    let mut pts = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask[(z, y, x)] == 0 {
                    continue;
                }
                let exposed = (z == 0 || mask[(z - 1, y, x)] == 0)
                    || (z + 1 == nz || mask[(z + 1, y, x)] == 0)
                    || (y == 0 || mask[(z, y - 1, x)] == 0)
                    || (y + 1 == ny || mask[(z, y + 1, x)] == 0)
                    || (x == 0 || mask[(z, y, x - 1)] == 0)
                    || (x + 1 == nx || mask[(z, y, x + 1)] == 0);
                if exposed {
                    pts.push([z as f64 * spacing.0, y as f64 * spacing.1, x as f64 * spacing.2]);
                }
            }
        }
    }
    pts
}

/// Static 3-d k-d tree for nearest-neighbor queries.
struct KdTree {
    /// (point, split axis) in heap-like preorder; children via `left`/`right`.
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

struct KdNode {
    point: [f64; 3],
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    fn build(points: &[[f64; 3]]) -> KdTree {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree { nodes: Vec::with_capacity(points.len()), root: None };
        tree.root = tree.build_rec(points, &mut idx, 0);
        tree
    }

    fn build_rec(
        &mut self,
        points: &[[f64; 3]],
        idx: &mut [usize],
        depth: usize,
    ) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].partial_cmp(&points[b][axis]).expect("finite coordinates")
        });
        let point = points[idx[mid]];
        let slot = self.nodes.len();
        self.nodes.push(KdNode { point, axis, left: None, right: None });
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_rec(points, lo, depth + 1);
        let right = self.build_rec(points, hi, depth + 1);
        self.nodes[slot].left = left;
        self.nodes[slot].right = right;
        Some(slot)
    }

    /// Squared distance to the nearest stored point.
    fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, q, &mut best);
        best
    }

    fn search(&self, node: Option<usize>, q: &[f64; 3], best: &mut f64) {
        let Some(i) = node else { return };
        let n = &self.nodes[i];
        let d = dist_sq(&n.point, q);
        if d < *best {
            *best = d;
        }
        let delta = q[n.axis] - n.point[n.axis];
        let (near, far) =
            if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, q, best);
        if delta * delta < *best {
            self.search(far, q, best);
        }
    }
}

fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dz = a[0] - b[0];
    let dy = a[1] - b[1];
    let dx = a[2] - b[2];
    dz * dz + dy * dy + dx * dx
}

fn directed_mean(from: &[[f64; 3]], to_tree: &KdTree) -> f64 {
    let sum: f64 = from.iter().map(|p| to_tree.nearest_sq(p).sqrt()).sum();
    sum / from.len() as f64
}

/// Average Surface Distance in millimetres: the arithmetic mean of the two
/// directed mean surface distances. Undefined (error) when either mask has
/// no surface.
pub fn asd(pred: &Array3<u8>, gt: &Array3<u8>, spacing: (f64, f64, f64)) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "asd: mask shapes {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let ps = extract_surface(pred, spacing);
    let gs = extract_surface(gt, spacing);
    if ps.is_empty() || gs.is_empty() {
        return Err(Error::Numeric(
            "average surface distance is undefined for an empty mask".into(),
        ));
    }
    let pred_tree = KdTree::build(&ps);
    let gt_tree = KdTree::build(&gs);
    Ok(0.5 * (directed_mean(&ps, &gt_tree) + directed_mean(&gs, &pred_tree)))
}

/// Settings for model-driven volume evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// In-plane size slices are resized to before the forward pass.
    pub input_size: usize,
    /// Z-score the volume first (synthetic data is already standardized at
    /// generation scale, but evaluation must match training preprocessing).
    pub normalize: bool,
    /// Slices per forward batch.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { input_size: 64, normalize: true, batch_size: 8 }
    }
}

/// Segment one native-resolution volume: preprocess, run the network over
/// slice triples, restack, resize the prediction back to the native grid.
pub fn predict_volume<T: Elem>(
    model: &DcaUnet,
    store: &ParamStore<T>,
    volume: &VolumePair,
    cfg: &EvalConfig,
) -> Result<Array3<u8>> {
    let (depth, nh, nw) = volume.image.dim();
    let prep = preprocess_volume(volume, cfg.input_size, cfg.normalize)?;
    let samples = crate::data::sample::make_slice_triples(&prep, "eval");
    let mut small = Array3::<u8>::zeros((depth, cfg.input_size, cfg.input_size));
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let b = chunk.len();
        let mut batch = ArrayD::<T>::zeros(IxDyn(&[b, 3, cfg.input_size, cfg.input_size]));
        for (i, s) in chunk.iter().enumerate() {
            for c in 0..3 {
                for y in 0..cfg.input_size {
                    for x in 0..cfg.input_size {
                        batch[[i, c, y, x]] = T::from_f64(s.image[(c, y, x)] as f64);
                    }
                }
            }
        }
        let mut g = Graph::new();
        let x = g.constant(batch);
        let out = model.forward(&mut g, store, x, CalibrationMode::Learned)?;
        let logits = g.value(out.logits_per_scale[0]);
        for (i, s) in chunk.iter().enumerate() {
            for y in 0..cfg.input_size {
                for x in 0..cfg.input_size {
                    let fg = logits[[i, 1, y, x]] > logits[[i, 0, y, x]];
                    small[(s.slice_index, y, x)] = fg as u8;
                }
            }
        }
    }
    let mut native = Array3::<u8>::zeros((depth, nh, nw));
    for z in 0..depth {
        let slice = small.index_axis(Axis(0), z).to_owned();
        native.index_axis_mut(Axis(0), z).assign(&resize_nearest_u8(&slice, nh, nw));
    }
    Ok(native)
}

/// Full per-volume evaluation at native resolution and spacing.
pub fn evaluate_volume<T: Elem>(
    model: &DcaUnet,
    store: &ParamStore<T>,
    domain_id: &str,
    volume: &VolumePair,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    let pred = predict_volume(model, store, volume, cfg)?;
    evaluate_masks(domain_id, &volume.patient_id, &pred, &volume.label, volume.spacing)
}

/// Worker count for volume-level evaluation parallelism, capped by the
/// `DCA_NUM_WORKERS` environment variable (default 1: evaluation stays
/// single-threaded, and therefore bit-reproducible ordering aside, unless
/// explicitly widened).
pub fn num_workers() -> usize {
    std::env::var("DCA_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Evaluate a batch of volumes, in input order. Volumes are independent,
/// so results are identical whatever the worker count.
pub fn evaluate_volumes<T: Elem>(
    model: &DcaUnet,
    store: &ParamStore<T>,
    volumes: &[crate::data::split::EvalVolume],
    cfg: &EvalConfig,
) -> Result<Vec<EvalResult>> {
    let workers = num_workers().min(volumes.len().max(1));
    if workers <= 1 {
        return volumes
            .iter()
            .map(|v| evaluate_volume(model, store, &v.domain_id, &v.volume, cfg))
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Data(format!("worker pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        volumes
            .par_iter()
            .map(|v| evaluate_volume(model, store, &v.domain_id, &v.volume, cfg))
            .collect()
    })
}

/// Metrics for an already-computed prediction.
pub fn evaluate_masks(
    domain_id: &str,
    patient_id: &str,
    pred: &Array3<u8>,
    gt: &Array3<u8>,
    spacing: (f64, f64, f64),
) -> Result<EvalResult> {
    let dice_percent = dice_score(pred, gt)?;
    let asd_mm = match asd(pred, gt, spacing) {
        Ok(v) => Some(v),
        Err(Error::Numeric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalResult {
        domain_id: domain_id.to_string(),
        patient_id: patient_id.to_string(),
        dice_percent,
        asd_mm,
    })
}

/// Mean/std aggregate of one domain's rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAggregate {
    pub domain_id: String,
    pub n: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Over volumes where ASD was defined.
    pub asd_mean: Option<f64>,
    pub asd_std: Option<f64>,
    pub asd_missing: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group rows by domain (first-appearance order) and aggregate.
pub fn aggregate(results: &[EvalResult]) -> Vec<DomainAggregate> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.domain_id.as_str()) {
            order.push(&r.domain_id);
        }
    }
    order
        .into_iter()
        .map(|id| {
            let rows: Vec<&EvalResult> =
                results.iter().filter(|r| r.domain_id == id).collect();
            let dice: Vec<f64> = rows.iter().map(|r| r.dice_percent).collect();
            let asd: Vec<f64> = rows.iter().filter_map(|r| r.asd_mm).collect();
            let (dice_mean, dice_std) = mean_std(&dice);
            let (asd_mean, asd_std) = if asd.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&asd);
                (Some(m), Some(s))
            };
            DomainAggregate {
                domain_id: id.to_string(),
                n: rows.len(),
                dice_mean,
                dice_std,
                asd_mean,
                asd_std,
                asd_missing: rows.len() - asd.len(),
            }
        })
        .collect()
}

/// Write per-volume rows: `domain,patient,dice,asd` (asd blank if missing).
pub fn write_volume_csv(path: &Path, results: &[EvalResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["domain", "patient", "dice", "asd"]).map_err(|e| csv_err(path, e))?;
    for r in results {
        w.write_record([
            r.domain_id.as_str(),
            r.patient_id.as_str(),
            &format!("{:.6}", r.dice_percent),
            &r.asd_mm.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write per-domain aggregates:
/// `domain,n,dice_mean,dice_std,asd_mean,asd_std,asd_missing`.
pub fn write_domain_csv(path: &Path, aggregates: &[DomainAggregate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["domain", "n", "dice_mean", "dice_std", "asd_mean", "asd_std", "asd_missing"])
        .map_err(|e| csv_err(path, e))?;
    for a in aggregates {
        w.write_record([
            a.domain_id.as_str(),
            &a.n.to_string(),
            &format!("{:.6}", a.dice_mean),
            &format!("{:.6}", a.dice_std),
            &a.asd_mean.map(|v| format!("{v:.6}")).unwrap_or_default(),
            &a.asd_std.map(|v| format!("{v:.6}")).unwrap_or_default(),
            &a.asd_missing.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Append a human-readable summary block to a writer (used by the CLI).
pub fn print_summary(out: &mut dyn Write, aggregates: &[DomainAggregate]) -> std::io::Result<()> {
    for a in aggregates {
        let asd = match (a.asd_mean, a.asd_std) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3} mm"),
            _ => "undefined".to_string(),
        };
        writeln!(
            out,
            "{:>12}  n={:<3}  Dice {:6.2} ± {:5.2} %   ASD {asd}{}",
            a.domain_id,
            a.n,
            a.dice_mean,
            a.dice_std,
            if a.asd_missing > 0 { format!("   ({} ASD missing)", a.asd_missing) } else { String::new() },
        )?;
    }
    Ok(())
}
