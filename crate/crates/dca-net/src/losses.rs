//! Training objectives: soft Dice with deep supervision, the basis-bank
//! divergence constraint, a shape compactness regularizer, and their
//! weighted combination.
//!
//! All losses are built from tape ops, so analytic gradients come from the
//! same code path the finite-difference suite verifies.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Graph, Var};

/// Smoothing added inside the divergence-loss gradient denominator. The
/// forward value is exact; only the adjoint at coinciding basis vectors is
/// regularised. Well below every verification tolerance.
pub const DIVERGENCE_SMOOTHING: f64 = 1e-12;

/// Weights and constants of the combined objective.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the compactness term.
    pub lambda1: f64,
    /// Weight of the divergence term.
    pub lambda2: f64,
    /// Dice smoothing constant.
    pub dice_eps: f64,
    /// Compactness gradient-magnitude smoothing constant.
    pub comp_eps: f64,
    /// Per-scale deep-supervision weights, full resolution first.
    pub ds_weights: Vec<f64>,
    /// Divide squared distances by the vector dimension in the divergence
    /// term. Off by default: the plain formula can go negative once pairwise
    /// distances exceed 1, which is intended.
    pub normalize_divergence: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 0.1,
            dice_eps: 1e-5,
            comp_eps: 1e-6,
            ds_weights: deep_supervision_weights(4),
            normalize_divergence: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.dice_eps <= 0.0 || self.comp_eps <= 0.0 {
            return Err(Error::Config("loss smoothing constants must be positive".into()));
        }
        if self.ds_weights.is_empty() || self.ds_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("deep-supervision weights must be nonnegative".into()));
        }
        let sum: f64 = self.ds_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "deep-supervision weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Halving weights over `n` supervision scales, full resolution first,
/// normalised to sum 1: for n = 4 this is (8, 4, 2, 1) / 15.
pub fn deep_supervision_weights(n: usize) -> Vec<f64> {
    assert!(n >= 1);
    let denom = (2f64.powi(n as i32)) - 1.0;
    (0..n).map(|s| 2f64.powi((n - 1 - s) as i32) / denom).collect()
}

/// Soft Dice loss on foreground probabilities.
///
/// Per item: 1 - (2 sum(p*l) + eps) / (sum(p) + sum(l) + eps), then averaged
/// over the batch. Both-empty items contribute exactly 0.
pub fn dice_loss<T: Elem>(g: &mut Graph<T>, probs: Var, labels: Var, eps: f64) -> Result<Var> {
    let ps = g.value(probs).shape().to_vec();
    let ls = g.value(labels).shape().to_vec();
    if ps.len() != 3 {
        return Err(Error::Shape(format!("dice_loss expects (B, H, W) probs, got {ps:?}")));
    }
    if ps != ls {
        return Err(Error::Shape(format!(
            "dice_loss: probs shape {ps:?} != labels shape {ls:?}"
        )));
    }
    let e = T::from_f64(eps);
    let inter = g.mul(probs, labels);
    let inter_sum = g.sum_trailing(inter, 1);
    let twice = g.mul_scalar(inter_sum, T::from_f64(2.0));
    let num = g.add_scalar(twice, e);
    let psum = g.sum_trailing(probs, 1);
    let lsum = g.sum_trailing(labels, 1);
    let den_raw = g.add(psum, lsum);
    let den = g.add_scalar(den_raw, e);
    let ratio = g.div(num, den);
    let neg = g.mul_scalar(ratio, T::from_f64(-1.0));
    let per_item = g.add_scalar(neg, T::one());
    Ok(g.mean_all(per_item))
}

/// Draw three distinct bank indices, uniform over unordered triples.
pub fn sample_preceptor_triple(n: usize, rng: &mut ChaCha12Rng) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::Config(format!("triple sampling needs bank size >= 3, got {n}")));
    }
    // Partial Fisher-Yates: the first three entries are a uniform ordered
    // triple, hence uniform as an unordered set.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..3 {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    Ok((idx[0], idx[1], idx[2]))
}

/// Divergence constraint on one basis bank (B, N, C) for a chosen triple:
///
/// L = 1 - sqrt( (|p_i-p_j|^2 + |p_i-p_k|^2 + |p_j-p_k|^2) / 3 ),
///
/// averaged over the batch. Coinciding vectors give exactly 1; the value can
/// go negative once distances exceed 1 (intended — it is a reward then). The
/// triple is canonicalised (sorted) so the result is bit-identical under
/// permutations of (i, j, k).
pub fn divergence_loss<T: Elem>(
    g: &mut Graph<T>,
    bank: Var,
    triple: (usize, usize, usize),
    normalize: bool,
) -> Result<Var> {
    let bs = g.value(bank).shape().to_vec();
    if bs.len() != 3 {
        return Err(Error::Shape(format!("divergence_loss: bank must be (B, N, C), got {bs:?}")));
    }
    let n = bs[1];
    let mut idx = [triple.0, triple.1, triple.2];
    idx.sort_unstable();
    let (i, j, k) = (idx[0], idx[1], idx[2]);
    if i == j || j == k {
        return Err(Error::Config(format!("divergence_loss: triple {triple:?} has repeats")));
    }
    if k >= n {
        return Err(Error::Config(format!(
            "divergence_loss: triple {triple:?} out of range for bank size {n}"
        )));
    }
    let pi = g.select_bank_row(bank, i);
    let pj = g.select_bank_row(bank, j);
    let pk = g.select_bank_row(bank, k);
    let pair_sq = |g: &mut Graph<T>, a: Var, b: Var| {
        let d = g.sub(a, b);
        let sq = g.mul(d, d);
        g.sum_trailing(sq, 1)
    };
    let dij = pair_sq(g, pi, pj);
    let dik = pair_sq(g, pi, pk);
    let djk = pair_sq(g, pj, pk);
    let s0 = g.add(dij, dik);
    let s1 = g.add(s0, djk);
    let mut scale = 1.0 / 3.0;
    if normalize {
        scale /= bs[2] as f64;
    }
    let m = g.mul_scalar(s1, T::from_f64(scale));
    let root = g.sqrt_smoothed(m, T::from_f64(DIVERGENCE_SMOOTHING));
    let neg = g.mul_scalar(root, T::from_f64(-1.0));
    let per_item = g.add_scalar(neg, T::one());
    Ok(g.mean_all(per_item))
}

/// Shape compactness of a foreground probability map (B, H, W):
/// P^2 / (4 pi A) per item, batch-averaged, where P sums the smoothed
/// gradient magnitude (forward differences, zero-padded border) and A sums
/// the probabilities. A disk is optimal for the continuous functional; the
/// discrete sum overshoots (staircase boundaries plus the eps floor adds
/// sqrt(eps) per pixel), which the regression oracles below pin exactly.
pub fn compactness_loss<T: Elem>(g: &mut Graph<T>, probs: Var, eps: f64) -> Result<Var> {
    let ps = g.value(probs).shape().to_vec();
    if ps.len() != 3 {
        return Err(Error::Shape(format!(
            "compactness_loss expects (B, H, W) probs, got {ps:?}"
        )));
    }
    let e = T::from_f64(eps);
    let dx = g.forward_diff(probs, 2);
    let dy = g.forward_diff(probs, 1);
    let dx2 = g.mul(dx, dx);
    let dy2 = g.mul(dy, dy);
    let mag_sq = g.add(dx2, dy2);
    let shifted = g.add_scalar(mag_sq, e);
    let mag = g.sqrt(shifted);
    let perimeter = g.sum_trailing(mag, 1);
    let area_raw = g.sum_trailing(probs, 1);
    let area = g.add_scalar(area_raw, e);
    let p2 = g.mul(perimeter, perimeter);
    let denom = g.mul_scalar(area, T::from_f64(4.0 * std::f64::consts::PI));
    let ratio = g.div(p2, denom);
    Ok(g.mean_all(ratio))
}

/// Handles to the four scalar loss nodes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_seg: Var,
    pub l_comp: Var,
    pub l_div: Var,
    pub l_total: Var,
}

/// Loss values read off the tape, for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossScalars {
    pub l_seg: f64,
    pub l_comp: f64,
    pub l_div: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn read<T: Elem>(&self, g: &Graph<T>) -> LossScalars {
        LossScalars {
            l_seg: g.scalar(self.l_seg).to_f64(),
            l_comp: g.scalar(self.l_comp).to_f64(),
            l_div: g.scalar(self.l_div).to_f64(),
            l_total: g.scalar(self.l_total).to_f64(),
        }
    }
}

/// Assemble the combined objective from per-scale logits, ground truth and
/// (possibly zero) basis banks:
///
/// total = seg + lambda1 * comp + lambda2 * div
///
/// * `logits_per_scale`: (B, 2, h_s, w_s) each, full resolution first;
///   lower-resolution logits are bilinearly upsampled to the label grid
///   before softmax and Dice.
/// * the compactness term sees only the full-resolution prediction;
/// * one independent triple is drawn per bank, banks averaged.
///
/// With an empty `banks` slice the divergence term is a constant zero
/// (baselines without calibration blocks).
pub fn assemble_loss<T: Elem>(
    g: &mut Graph<T>,
    logits_per_scale: &[Var],
    labels: Var,
    banks: &[Var],
    cfg: &LossConfig,
    rng: &mut ChaCha12Rng,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if logits_per_scale.is_empty() {
        return Err(Error::Shape("assemble_loss: no predictions given".into()));
    }
    if cfg.ds_weights.len() != logits_per_scale.len() {
        return Err(Error::Config(format!(
            "{} deep-supervision weights for {} prediction scales",
            cfg.ds_weights.len(),
            logits_per_scale.len()
        )));
    }
    let ls = g.value(labels).shape().to_vec();
    if ls.len() != 3 {
        return Err(Error::Shape(format!("labels must be (B, H, W), got {ls:?}")));
    }
    let (lh, lw) = (ls[1], ls[2]);

    let mut l_seg: Option<Var> = None;
    let mut full_res_fg: Option<Var> = None;
    for (s, (&logits, &w)) in logits_per_scale.iter().zip(&cfg.ds_weights).enumerate() {
        let shape = g.value(logits).shape().to_vec();
        if shape.len() != 4 || shape[0] != ls[0] {
            return Err(Error::Shape(format!(
                "scale {s}: logits shape {shape:?} incompatible with labels {ls:?}"
            )));
        }
        if shape[1] != 2 {
            return Err(Error::Config(format!(
                "scale {s}: binary segmentation requires 2 logit channels, got {}",
                shape[1]
            )));
        }
        let at_label_res = if shape[2] == lh && shape[3] == lw {
            logits
        } else {
            g.upsample_bilinear(logits, lh, lw)
        };
        let probs = g.softmax_classes(at_label_res);
        let fg = g.select_channel(probs, 1);
        if s == 0 {
            full_res_fg = Some(fg);
        }
        let d = dice_loss(g, fg, labels, cfg.dice_eps)?;
        let weighted = g.mul_scalar(d, T::from_f64(w));
        l_seg = Some(match l_seg {
            Some(acc) => g.add(acc, weighted),
            None => weighted,
        });
    }
    let l_seg = l_seg.expect("at least one scale");
    let l_comp = compactness_loss(g, full_res_fg.expect("scale 0 present"), cfg.comp_eps)?;

    let l_div = if banks.is_empty() {
        g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[])))
    } else {
        let mut acc: Option<Var> = None;
        for &bank in banks {
            let n = g.value(bank).shape()[1];
            let triple = sample_preceptor_triple(n, rng)?;
            let d = divergence_loss(g, bank, triple, cfg.normalize_divergence)?;
            acc = Some(match acc {
                Some(a) => g.add(a, d),
                None => d,
            });
        }
        let sum = acc.expect("non-empty banks");
        g.mul_scalar(sum, T::from_f64(1.0 / banks.len() as f64))
    };

    let l_total = weighted_total(g, l_seg, l_comp, l_div, cfg);
    Ok(LossBreakdown { l_seg, l_comp, l_div, l_total })
}

/// The Eq.-style combination: seg + lambda1 * comp + lambda2 * div.
pub fn weighted_total<T: Elem>(
    g: &mut Graph<T>,
    l_seg: Var,
    l_comp: Var,
    l_div: Var,
    cfg: &LossConfig,
) -> Var {
    let wc = g.mul_scalar(l_comp, T::from_f64(cfg.lambda1));
    let wd = g.mul_scalar(l_div, T::from_f64(cfg.lambda2));
    let partial = g.add(l_seg, wc);
    g.add(partial, wd)
}

/// The full objective for calibration networks; requires at least one bank.
pub fn total_loss<T: Elem>(
    g: &mut Graph<T>,
    logits_per_scale: &[Var],
    labels: Var,
    banks: &[Var],
    cfg: &LossConfig,
    rng: &mut ChaCha12Rng,
) -> Result<LossBreakdown> {
    if banks.is_empty() {
        return Err(Error::Config(
            "total_loss requires at least one basis bank; use assemble_loss for plain baselines"
                .into(),
        ));
    }
    assemble_loss(g, logits_per_scale, labels, banks, cfg, rng)
}
