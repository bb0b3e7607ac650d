//! Channel calibration from composed basis descriptors.
//!
//! The block takes a feature map F (B, C, H, W) and rescales its channels:
//!
//! 1. spatial average pooling condenses F to a descriptor f (B, C);
//! 2. a bank of N independent "preceptor" subnetworks (realised as grouped
//!    1x1 convolutions, one group per bank row) maps f to N basis vectors
//!    p_1..p_N in (0, 1)^C;
//! 3. an attention head looks at F itself and produces simplex weights
//!    beta (B, N);
//! 4. the calibration vector alpha = sum_n beta_n * p_n scales each channel
//!    of F.
//!
//! Grouped convolutions guarantee the bank rows are parameter-independent:
//! row i is influenced only by group i's weights. The training loss pushes
//! the rows apart (see `losses::divergence_loss`), so the bank spans a
//! simplex of channel statistics and the attention head can interpolate
//! inside it for inputs it has never seen.

use ndarray::ArrayD;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Elem, Graph, ParamId, ParamStore, Var};

/// How the pooled descriptor is fed to the grouped preceptor convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdpInput {
    /// Tile f N times so every bank row sees the full descriptor (default).
    Tiled,
    /// Slice f into N chunks; row n sees only its own chunk. Requires
    /// C % N == 0.
    Sliced,
}

/// Whether the block applies its learned calibration or passes features
/// through untouched (a verification hook: multiplying by exactly 1.0 is
/// bit-transparent for finite floats).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationMode {
    Learned,
    Identity,
}

/// Parameter handles for one calibration block.
#[derive(Debug, Clone)]
pub struct DcaParams {
    pub pdp_conv1_w: ParamId,
    pub pdp_conv1_b: ParamId,
    /// (gamma, beta) of the first group norm, absent when affine is off.
    pub pdp_gn1: Option<(ParamId, ParamId)>,
    pub pdp_conv2_w: ParamId,
    pub pdp_conv2_b: ParamId,
    pub pdp_gn2: Option<(ParamId, ParamId)>,
    pub attn_conv_w: ParamId,
    pub attn_conv_b: ParamId,
    pub attn_fc1_w: ParamId,
    pub attn_fc1_b: ParamId,
    pub attn_fc2_w: ParamId,
    pub attn_fc2_b: ParamId,
    pub channels: usize,
    pub bank_size: usize,
    pub reduction: usize,
    pub pdp_input: PdpInput,
    pub norm_eps: f64,
}

impl DcaParams {
    /// Create and register all parameters for a block over `channels`-wide
    /// features with `bank_size` basis rows and a `reduction`-fold hidden
    /// bottleneck. Parameter names get `prefix` prepended (e.g. "dec0.dca.").
    pub fn init<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        channels: usize,
        bank_size: usize,
        reduction: usize,
        pdp_input: PdpInput,
        gn_affine: bool,
        norm_eps: f64,
    ) -> Result<Self> {
        if bank_size < 3 {
            return Err(Error::Config(format!(
                "bank size must be at least 3 (divergence triples), got {bank_size}"
            )));
        }
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} not divisible by reduction {reduction}"
            )));
        }
        if pdp_input == PdpInput::Sliced && channels % bank_size != 0 {
            return Err(Error::Config(format!(
                "sliced descriptor input needs channels ({channels}) divisible by bank size ({bank_size})"
            )));
        }
        let hidden = channels / reduction;
        let n = bank_size;
        let conv1_in_per_group = match pdp_input {
            PdpInput::Tiled => channels,
            PdpInput::Sliced => channels / n,
        };

        let pdp_conv1_w = store.add(
            format!("{prefix}pdp_conv1.w"),
            init::fan_in_uniform(rng, &[n * hidden, conv1_in_per_group, 1, 1], conv1_in_per_group),
        );
        let pdp_conv1_b = store.add(format!("{prefix}pdp_conv1.b"), init::zeros(&[n * hidden]));
        let pdp_gn1 = gn_affine.then(|| {
            (
                store.add(format!("{prefix}pdp_gn1.g"), init::ones(&[n * hidden])),
                store.add(format!("{prefix}pdp_gn1.b"), init::zeros(&[n * hidden])),
            )
        });
        let pdp_conv2_w = store.add(
            format!("{prefix}pdp_conv2.w"),
            init::fan_in_uniform(rng, &[n * channels, hidden, 1, 1], hidden),
        );
        let pdp_conv2_b = store.add(format!("{prefix}pdp_conv2.b"), init::zeros(&[n * channels]));
        let pdp_gn2 = gn_affine.then(|| {
            (
                store.add(format!("{prefix}pdp_gn2.g"), init::ones(&[n * channels])),
                store.add(format!("{prefix}pdp_gn2.b"), init::zeros(&[n * channels])),
            )
        });
        let attn_conv_w = store.add(
            format!("{prefix}attn_conv.w"),
            init::fan_in_uniform(rng, &[hidden, channels, 1, 1], channels),
        );
        let attn_conv_b = store.add(format!("{prefix}attn_conv.b"), init::zeros(&[hidden]));
        let attn_fc1_w = store.add(
            format!("{prefix}attn_fc1.w"),
            init::fan_in_uniform(rng, &[hidden, hidden], hidden),
        );
        let attn_fc1_b = store.add(format!("{prefix}attn_fc1.b"), init::zeros(&[hidden]));
        let attn_fc2_w = store.add(
            format!("{prefix}attn_fc2.w"),
            init::fan_in_uniform(rng, &[n, hidden], hidden),
        );
        let attn_fc2_b = store.add(format!("{prefix}attn_fc2.b"), init::zeros(&[n]));

        Ok(DcaParams {
            pdp_conv1_w,
            pdp_conv1_b,
            pdp_gn1,
            pdp_conv2_w,
            pdp_conv2_b,
            pdp_gn2,
            attn_conv_w,
            attn_conv_b,
            attn_fc1_w,
            attn_fc1_b,
            attn_fc2_w,
            attn_fc2_b,
            channels,
            bank_size,
            reduction,
            pdp_input,
            norm_eps,
        })
    }

    /// Every parameter id of this block, in declaration order.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.pdp_conv1_w, self.pdp_conv1_b];
        if let Some((g, b)) = self.pdp_gn1 {
            ids.extend([g, b]);
        }
        ids.extend([self.pdp_conv2_w, self.pdp_conv2_b]);
        if let Some((g, b)) = self.pdp_gn2 {
            ids.extend([g, b]);
        }
        ids.extend([
            self.attn_conv_w,
            self.attn_conv_b,
            self.attn_fc1_w,
            self.attn_fc1_b,
            self.attn_fc2_w,
            self.attn_fc2_b,
        ]);
        ids
    }

    /// Parameter ids belonging exclusively to bank row `row` (the slices of
    /// the grouped convolutions and group norms that produce p_row).
    /// Bias/affine tensors are shared arrays, so only whole-tensor ids are
    /// reported; use [`DcaParams::row_slices`] for per-row coordinates.
    pub fn preceptor_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.pdp_conv1_w, self.pdp_conv1_b, self.pdp_conv2_w, self.pdp_conv2_b];
        if let Some((g, b)) = self.pdp_gn1 {
            ids.extend([g, b]);
        }
        if let Some((g, b)) = self.pdp_gn2 {
            ids.extend([g, b]);
        }
        ids
    }

    /// For each preceptor parameter tensor, the half-open range of leading
    /// indices owned by bank row `row`. All grouped tensors are laid out
    /// row-major in the bank dimension, so row `row` owns `[row*k, (row+1)*k)`
    /// along axis 0.
    pub fn row_range(&self, id: ParamId, row: usize) -> Option<std::ops::Range<usize>> {
        let n = self.bank_size;
        let hidden = self.channels / self.reduction;
        let per_row = if id == self.pdp_conv1_w || id == self.pdp_conv1_b {
            hidden
        } else if id == self.pdp_conv2_w || id == self.pdp_conv2_b {
            self.channels
        } else if let Some((g, b)) = self.pdp_gn1 {
            if id == g || id == b {
                hidden
            } else {
                return self.row_range_gn2(id, row);
            }
        } else {
            return self.row_range_gn2(id, row);
        };
        debug_assert!(row < n);
        Some(row * per_row..(row + 1) * per_row)
    }

    fn row_range_gn2(&self, id: ParamId, row: usize) -> Option<std::ops::Range<usize>> {
        if let Some((g, b)) = self.pdp_gn2 {
            if id == g || id == b {
                return Some(row * self.channels..(row + 1) * self.channels);
            }
        }
        None
    }
}

/// Spatially pool a feature map (B, C, H, W) to a descriptor (B, C).
/// Differentiable with respect to the features.
pub fn avg_pool_features<T: Elem>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    let shape = g.value(features).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "avg_pool_features expects (B, C, H, W), got {shape:?}"
        )));
    }
    Ok(g.spatial_mean(features))
}

/// Run the preceptor bank on a pooled descriptor (B, C), producing the basis
/// bank (B, N, C). Row n only touches group n's parameters.
pub fn preceptor_bank<T: Elem>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    pooled: Var,
    p: &DcaParams,
) -> Result<Var> {
    let shape = g.value(pooled).shape().to_vec();
    if shape.len() != 2 || shape[1] != p.channels {
        return Err(Error::Shape(format!(
            "preceptor_bank expects (B, {}), got {shape:?}",
            p.channels
        )));
    }
    let bsz = shape[0];
    let n = p.bank_size;
    let eps = T::from_f64(p.norm_eps);

    let stacked = match p.pdp_input {
        PdpInput::Tiled => {
            let tiled = g.tile_channels(pooled, n);
            g.reshape(tiled, &[bsz, n * p.channels, 1, 1])
        }
        PdpInput::Sliced => g.reshape(pooled, &[bsz, p.channels, 1, 1]),
    };

    let w1 = g.param(store, p.pdp_conv1_w);
    let b1 = g.param(store, p.pdp_conv1_b);
    let h1 = g.conv2d(stacked, w1, b1, n, 0);
    let (g1, be1) = affine_vars(g, store, p.pdp_gn1);
    let n1 = g.group_norm(h1, n, eps, g1, be1);
    let a1 = g.relu(n1);

    let w2 = g.param(store, p.pdp_conv2_w);
    let b2 = g.param(store, p.pdp_conv2_b);
    let h2 = g.conv2d(a1, w2, b2, n, 0);
    let (g2, be2) = affine_vars(g, store, p.pdp_gn2);
    let n2 = g.group_norm(h2, n, eps, g2, be2);
    let s = g.sigmoid(n2);
    Ok(g.reshape(s, &[bsz, n, p.channels]))
}

fn affine_vars<T: Elem>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    pair: Option<(ParamId, ParamId)>,
) -> (Option<Var>, Option<Var>) {
    match pair {
        Some((gamma, beta)) => (Some(g.param(store, gamma)), Some(g.param(store, beta))),
        None => (None, None),
    }
}

/// Predict simplex weights (B, N) over the bank rows from the raw feature
/// map: 1x1 conv bottleneck, global pooling, a two-layer FC head, softmax.
pub fn attention_weights<T: Elem>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: Var,
    p: &DcaParams,
) -> Result<Var> {
    let shape = g.value(features).shape().to_vec();
    if shape.len() != 4 || shape[1] != p.channels {
        return Err(Error::Shape(format!(
            "attention_weights expects (B, {}, H, W), got {shape:?}",
            p.channels
        )));
    }
    let cw = g.param(store, p.attn_conv_w);
    let cb = g.param(store, p.attn_conv_b);
    let c = g.conv2d(features, cw, cb, 1, 0);
    let c = g.relu(c);
    let pooled = g.spatial_mean(c);
    let w1 = g.param(store, p.attn_fc1_w);
    let b1 = g.param(store, p.attn_fc1_b);
    let h = g.linear(pooled, w1, b1);
    let h = g.relu(h);
    let w2 = g.param(store, p.attn_fc2_w);
    let b2 = g.param(store, p.attn_fc2_b);
    let logits = g.linear(h, w2, b2);
    Ok(g.softmax_classes(logits))
}

/// Convex combination of bank rows under attention weights:
/// (B, N, C) x (B, N) -> (B, C).
pub fn compose_calibration<T: Elem>(g: &mut Graph<T>, bank: Var, weights: Var) -> Result<Var> {
    let bs = g.value(bank).shape().to_vec();
    let ws = g.value(weights).shape().to_vec();
    if bs.len() != 3 {
        return Err(Error::Shape(format!("compose_calibration: bank must be (B, N, C), got {bs:?}")));
    }
    if ws.len() != 2 || ws != bs[..2] {
        return Err(Error::Shape(format!(
            "compose_calibration: weights {ws:?} incompatible with bank {bs:?}"
        )));
    }
    Ok(g.compose_bank(bank, weights))
}

/// Everything a calibration block produces in one forward pass.
pub struct DcaOutput {
    /// Recalibrated feature map, same shape as the input.
    pub calibrated: Var,
    /// Basis bank (B, N, C).
    pub bank: Var,
    /// Attention weights (B, N).
    pub attention: Var,
    /// Applied channel scales (B, C); all-ones in identity mode.
    pub alpha: Var,
}

/// Full block: pool, bank, attention, compose, rescale.
pub fn dca_forward<T: Elem>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: Var,
    p: &DcaParams,
    mode: CalibrationMode,
) -> Result<DcaOutput> {
    let pooled = avg_pool_features(g, features)?;
    let bank = preceptor_bank(g, store, pooled, p)?;
    let attention = attention_weights(g, store, features, p)?;
    let alpha = match mode {
        CalibrationMode::Learned => compose_calibration(g, bank, attention)?,
        CalibrationMode::Identity => {
            let bsz = g.value(features).shape()[0];
            g.constant(ArrayD::from_elem(ndarray::IxDyn(&[bsz, p.channels]), T::one()))
        }
    };
    let calibrated = g.mul_channels(features, alpha);
    Ok(DcaOutput { calibrated, bank, attention, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{AttentionWeights, BasisBank, CalibrationVector};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_features(rng: &mut ChaCha12Rng, b: usize, c: usize, h: usize, w: usize) -> ArrayD<f64> {
        let data: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), data).unwrap()
    }

    fn build(
        channels: usize,
        bank: usize,
        red: usize,
        input: PdpInput,
    ) -> (ParamStore<f64>, DcaParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let p = DcaParams::init(&mut store, &mut rng, "t.", channels, bank, red, input, true, 1e-5)
            .unwrap();
        (store, p)
    }

    #[test]
    fn rejects_tiny_banks_and_bad_divisibility() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert!(DcaParams::init(
            &mut store, &mut rng, "a.", 8, 2, 4, PdpInput::Tiled, true, 1e-5
        )
        .is_err());
        assert!(DcaParams::init(
            &mut store, &mut rng, "b.", 6, 4, 4, PdpInput::Tiled, true, 1e-5
        )
        .is_err());
        assert!(DcaParams::init(
            &mut store, &mut rng, "c.", 10, 4, 2, PdpInput::Sliced, true, 1e-5
        )
        .is_err());
    }

    #[test]
    fn bank_entries_live_in_open_unit_interval() {
        let (store, p) = build(8, 4, 4, PdpInput::Tiled);
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let mut g = Graph::new();
        let f = g.constant(rand_features(&mut rng, 3, 8, 5, 5));
        let pooled = avg_pool_features(&mut g, f).unwrap();
        let bank = preceptor_bank(&mut g, &store, pooled, &p).unwrap();
        assert_eq!(g.value(bank).shape(), &[3, 4, 8]);
        BasisBank::from_dyn(g.value(bank).clone()).expect("valid bank");
    }

    #[test]
    fn attention_is_a_simplex_row_per_item() {
        let (store, p) = build(8, 5, 4, PdpInput::Tiled);
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let mut g = Graph::new();
        let f = g.constant(rand_features(&mut rng, 4, 8, 6, 6));
        let w = attention_weights(&mut g, &store, f, &p).unwrap();
        assert_eq!(g.value(w).shape(), &[4, 5]);
        AttentionWeights::from_dyn(g.value(w).clone()).expect("valid simplex");
    }

    #[test]
    fn zeroed_final_fc_gives_uniform_attention() {
        let (mut store, p) = build(8, 4, 4, PdpInput::Tiled);
        store.value_mut(p.attn_fc2_w).fill(0.0);
        store.value_mut(p.attn_fc2_b).fill(0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        let mut g = Graph::new();
        let f = g.constant(rand_features(&mut rng, 2, 8, 4, 4));
        let w = attention_weights(&mut g, &store, f, &p).unwrap();
        for &v in g.value(w).iter() {
            assert!((v - 0.25).abs() < 1e-12, "expected uniform 1/4, got {v}");
        }
    }

    #[test]
    fn identity_mode_is_bit_transparent() {
        let (store, p) = build(8, 4, 4, PdpInput::Tiled);
        let mut rng = ChaCha12Rng::seed_from_u64(36);
        let feats = rand_features(&mut rng, 2, 8, 5, 5);
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let out = dca_forward(&mut g, &store, f, &p, CalibrationMode::Identity).unwrap();
        let cal = g.value(out.calibrated);
        assert_eq!(cal.shape(), feats.shape());
        for (a, b) in cal.iter().zip(feats.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "identity mode must not alter bits");
        }
    }

    #[test]
    fn learned_alpha_is_convex_combination() {
        let (store, p) = build(8, 4, 4, PdpInput::Tiled);
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let mut g = Graph::new();
        let f = g.constant(rand_features(&mut rng, 2, 8, 5, 5));
        let out = dca_forward(&mut g, &store, f, &p, CalibrationMode::Learned).unwrap();
        let alpha = g.value(out.alpha).clone();
        CalibrationVector::from_dyn(alpha.clone()).expect("alpha in (0,1)");
        // alpha must lie between the min and max bank entry per channel.
        let bank = g.value(out.bank);
        for b in 0..2 {
            for c in 0..8 {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for n in 0..4 {
                    lo = lo.min(bank[[b, n, c]]);
                    hi = hi.max(bank[[b, n, c]]);
                }
                let a = alpha[[b, c]];
                assert!(a >= lo - 1e-12 && a <= hi + 1e-12, "alpha {a} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn compose_rejects_mismatched_shapes() {
        let mut g = Graph::<f64>::new();
        let bank = g.constant(ArrayD::from_elem(IxDyn(&[2, 4, 8]), 0.5));
        let w = g.constant(ArrayD::from_elem(IxDyn(&[2, 3]), 0.25));
        assert!(compose_calibration(&mut g, bank, w).is_err());
    }

    #[test]
    fn sliced_input_mode_runs() {
        let (store, p) = build(8, 4, 4, PdpInput::Sliced);
        let mut rng = ChaCha12Rng::seed_from_u64(39);
        let mut g = Graph::new();
        let f = g.constant(rand_features(&mut rng, 2, 8, 4, 4));
        let out = dca_forward(&mut g, &store, f, &p, CalibrationMode::Learned).unwrap();
        assert_eq!(g.value(out.bank).shape(), &[2, 4, 8]);
        BasisBank::from_dyn(g.value(out.bank).clone()).expect("valid bank");
    }

    #[test]
    fn perturbing_other_groups_leaves_row_bits_unchanged() {
        let (store, p) = build(8, 4, 4, PdpInput::Tiled);
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let feats = rand_features(&mut rng, 2, 8, 4, 4);

        let row_of = |store: &ParamStore<f64>, row: usize| -> Vec<u64> {
            let mut g = Graph::new();
            let f = g.constant(feats.clone());
            let pooled = avg_pool_features(&mut g, f).unwrap();
            let bank = preceptor_bank(&mut g, store, pooled, &p).unwrap();
            g.value(bank)
                .index_axis(ndarray::Axis(1), row)
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };

        let before = row_of(&store, 1);
        // Perturb every preceptor parameter slice owned by rows != 1.
        let mut store2 = store.clone();
        for id in p.preceptor_ids() {
            for row in [0usize, 2, 3] {
                let range = p.row_range(id, row).expect("preceptor tensors have row ranges");
                let v = store2.value_mut(id);
                for i in range {
                    v.index_axis_mut(ndarray::Axis(0), i).mapv_inplace(|x| x + 0.731);
                }
            }
        }
        let after = row_of(&store2, 1);
        assert_eq!(before, after, "bank row 1 must be bit-identical");
    }
}
