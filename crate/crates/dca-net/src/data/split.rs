//! Leave-one-domain-out splitting: train on every slice of the seen
//! domains, partition the unseen domain's patients into a small validation
//! set (model selection) and a test set (reporting).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::sample::make_slice_triples;
use super::{DomainRegistry, Sample, VolumePair};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub held_out_domain: String,
    /// Fraction of unseen patients used for validation (rest is test).
    pub val_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(held_out_domain: impl Into<String>, seed: u64) -> Self {
        SplitSpec { held_out_domain: held_out_domain.into(), val_fraction: 0.2, seed }
    }
}

/// A whole unseen-domain volume queued for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalVolume {
    pub domain_id: String,
    pub volume: VolumePair,
}

#[derive(Debug, Clone)]
pub struct LodoSplit {
    pub held_out_domain: String,
    /// Every slice triple of every seen-domain volume, in registry order.
    pub train: Vec<Sample>,
    pub val: Vec<EvalVolume>,
    pub test: Vec<EvalVolume>,
}

/// Partition `registry` for one held-out domain. The unseen domain's
/// patients are shuffled by a seed-derived generator and split
/// `val_fraction` / rest at patient level; seen domains contribute all of
/// their slices to training.
pub fn leave_one_domain_out_split(
    registry: &DomainRegistry,
    spec: &SplitSpec,
) -> Result<LodoSplit> {
    if registry.m() < 2 {
        return Err(Error::Config(format!(
            "leave-one-domain-out needs at least 2 domains, registry has {}",
            registry.m()
        )));
    }
    if !(0.0 < spec.val_fraction && spec.val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction {} must be in (0, 1)",
            spec.val_fraction
        )));
    }
    let unseen = registry.domain(&spec.held_out_domain).ok_or_else(|| {
        Error::Config(format!(
            "unknown held-out domain {:?} (available: {})",
            spec.held_out_domain,
            registry
                .domains
                .iter()
                .map(|d| d.domain_id.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ))
    })?;
    let n = unseen.volumes.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "held-out domain {} has {n} patient(s); need at least 2 for a val/test split",
            spec.held_out_domain
        )));
    }

    let mut train = Vec::new();
    for domain in &registry.domains {
        if domain.domain_id == spec.held_out_domain {
            continue;
        }
        for vol in &domain.volumes {
            train.extend(make_slice_triples(vol, &domain.domain_id));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        seed::rng(spec.seed, &format!("lodo-split/{}", spec.held_out_domain));
    order.shuffle(&mut rng);
    let n_val = ((spec.val_fraction * n as f64).floor() as usize).clamp(1, n - 1);

    let wrap = |idx: &[usize]| -> Vec<EvalVolume> {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        sorted
            .into_iter()
            .map(|i| EvalVolume {
                domain_id: spec.held_out_domain.clone(),
                volume: unseen.volumes[i].clone(),
            })
            .collect()
    };
    Ok(LodoSplit {
        held_out_domain: spec.held_out_domain.clone(),
        train,
        val: wrap(&order[..n_val]),
        test: wrap(&order[n_val..]),
    })
}
