//! The segmentation network: a 2-D U-Net encoder/decoder with an optional
//! calibration block between the two convolutions of every decoder stage,
//! and 1x1 prediction heads for deep supervision.
//!
//! The backbone uses instance normalization (per-channel group norm without
//! affine terms) so that no cross-image batch statistics leak between
//! domains. Convolutions feeding an instance norm carry no bias — a bias
//! would be removed exactly by the normalization and only add dead
//! parameters. Upsampling convolutions and prediction heads keep theirs.

use ndarray::ArrayD;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dca::{dca_forward, CalibrationMode, DcaParams, PdpInput};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Elem, Graph, ParamId, ParamStore, Var};

/// Decoder upsampling flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Nearest-neighbor 2x upsampling followed by a 3x3 convolution
    /// (default; avoids checkerboard artifacts).
    NearestConv,
    /// Transposed 2x2 stride-2 convolution.
    Transposed,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Input channels; 3 for slice triples.
    pub in_channels: usize,
    /// Output classes; 2 for binary foreground/background.
    pub num_classes: usize,
    /// Channel widths of the five encoder scales, shallow to deep.
    pub encoder_widths: Vec<usize>,
    /// Basis rows per calibration bank.
    pub bank_size: usize,
    /// Channel reduction of the calibration bottlenecks.
    pub reduction: usize,
    /// Insert calibration blocks into the decoder.
    pub use_dca: bool,
    /// Attach prediction heads to every decoder scale (not just the last).
    pub deep_supervision: bool,
    /// Decoder upsampling flavor.
    pub upsample: Upsample,
    /// How the pooled descriptor is fed to the basis subnetwork.
    pub pdp_input: PdpInput,
    /// Learnable scale/shift on the calibration group norms.
    pub dca_gn_affine: bool,
    /// Normalization epsilon throughout.
    pub norm_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            num_classes: 2,
            encoder_widths: vec![16, 32, 64, 128, 256],
            bank_size: 8,
            reduction: 4,
            use_dca: true,
            deep_supervision: true,
            upsample: Upsample::NearestConv,
            pdp_input: PdpInput::Tiled,
            dca_gn_affine: true,
            norm_eps: 1e-5,
        }
    }
}

/// Encoder scale count; the spatial size shrinks by 2^(SCALES-1) = 16.
pub const SCALES: usize = 5;

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes (got {}); binary segmentation uses 2",
                self.num_classes
            )));
        }
        if self.encoder_widths.len() != SCALES {
            return Err(Error::Config(format!(
                "expected {SCALES} encoder widths, got {}",
                self.encoder_widths.len()
            )));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if self.use_dca {
            if self.bank_size < 3 {
                return Err(Error::Config(format!(
                    "bank size must be at least 3, got {}",
                    self.bank_size
                )));
            }
            for &w in &self.encoder_widths {
                if self.reduction == 0 || w % self.reduction != 0 {
                    return Err(Error::Config(format!(
                        "width {w} not divisible by reduction {}",
                        self.reduction
                    )));
                }
                if self.pdp_input == PdpInput::Sliced && w % self.bank_size != 0 {
                    return Err(Error::Config(format!(
                        "sliced descriptor input needs width {w} divisible by bank size {}",
                        self.bank_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Decoder widths, deepest stage first.
    pub fn decoder_widths(&self) -> Vec<usize> {
        self.encoder_widths[..SCALES - 1].iter().rev().copied().collect()
    }
}

/// A 2-D convolution layer; `bias` is omitted where a normalization follows.
#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    pad: usize,
    out: usize,
}

impl Conv {
    fn init<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        bias: bool,
    ) -> Conv {
        let w = store.add(
            format!("{name}.w"),
            init::fan_in_uniform(rng, &[cout, cin, k, k], cin * k * k),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), init::zeros(&[cout])));
        Conv { w, b, pad: k / 2, out: cout }
    }

    fn apply<T: Elem>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = match self.b {
            Some(id) => g.param(store, id),
            None => g.constant(init::zeros(&[self.out])),
        };
        g.conv2d(x, w, b, 1, self.pad)
    }

    /// Convolution -> instance norm -> ReLU.
    fn apply_norm_relu<T: Elem>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        eps: f64,
    ) -> Var {
        let c = self.apply(g, store, x);
        let n = g.group_norm(c, self.out, T::from_f64(eps), None, None);
        g.relu(n)
    }
}

#[derive(Debug, Clone)]
enum UpLayer {
    NearestConv(Conv),
    Transposed { w: ParamId, b: ParamId },
}

impl UpLayer {
    fn init<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        kind: Upsample,
        cin: usize,
        cout: usize,
    ) -> UpLayer {
        match kind {
            Upsample::NearestConv => {
                UpLayer::NearestConv(Conv::init(store, rng, name, cout, cin, 3, true))
            }
            Upsample::Transposed => {
                // Stride-2 2x2 kernels do not overlap: each output pixel sees
                // exactly `cin` inputs.
                let w = store.add(
                    format!("{name}.w"),
                    init::fan_in_uniform(rng, &[cin, cout, 2, 2], cin),
                );
                let b = store.add(format!("{name}.b"), init::zeros(&[cout]));
                UpLayer::Transposed { w, b }
            }
        }
    }

    fn apply<T: Elem>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        match self {
            UpLayer::NearestConv(conv) => {
                let up = g.upsample_nearest2(x);
                conv.apply(g, store, up)
            }
            UpLayer::Transposed { w, b } => {
                let wv = g.param(store, *w);
                let bv = g.param(store, *b);
                g.conv_transpose2x2(x, wv, bv)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct EncBlock {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Debug, Clone)]
struct DecBlock {
    up: UpLayer,
    conv1: Conv,
    dca: Option<DcaParams>,
    conv2: Conv,
    head: Option<Conv>,
}

/// Everything the network produces in one pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per-scale class logits, full input resolution first.
    pub logits_per_scale: Vec<Var>,
    /// Basis banks (B, N, C_s), one per calibration block in decode order
    /// (deepest stage first); empty without calibration.
    pub banks: Vec<Var>,
    /// Attention weights (B, N) matching `banks`.
    pub attention: Vec<Var>,
}

/// U-Net with optional decoder calibration blocks. Parameters live in a
/// [`ParamStore`]; the model itself only holds handles, so forward passes
/// are re-entrant over a shared store.
#[derive(Debug, Clone)]
pub struct DcaUnet {
    pub config: NetworkConfig,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
}

/// Build the calibrated network per `config` (honoring `use_dca`).
pub fn build_dca_unet<T: Elem>(
    store: &mut ParamStore<T>,
    config: &NetworkConfig,
    rng: &mut ChaCha12Rng,
) -> Result<DcaUnet> {
    config.validate()?;
    let w = &config.encoder_widths;
    let mut enc = Vec::with_capacity(SCALES);
    for s in 0..SCALES {
        let cin = if s == 0 { config.in_channels } else { w[s - 1] };
        enc.push(EncBlock {
            conv1: Conv::init(store, rng, &format!("enc{s}.conv1"), w[s], cin, 3, false),
            conv2: Conv::init(store, rng, &format!("enc{s}.conv2"), w[s], w[s], 3, false),
        });
    }
    let mut dec = Vec::with_capacity(SCALES - 1);
    for (d, &cout) in config.decoder_widths().iter().enumerate() {
        let cin = if d == 0 { w[SCALES - 1] } else { config.decoder_widths()[d - 1] };
        let name = format!("dec{d}");
        let up = UpLayer::init(store, rng, &format!("{name}.up"), config.upsample, cin, cout);
        let conv1 = Conv::init(store, rng, &format!("{name}.conv1"), cout, 2 * cout, 3, false);
        let dca = if config.use_dca {
            Some(DcaParams::init(
                store,
                rng,
                &format!("{name}.dca."),
                cout,
                config.bank_size,
                config.reduction,
                config.pdp_input,
                config.dca_gn_affine,
                config.norm_eps,
            )?)
        } else {
            None
        };
        let conv2 = Conv::init(store, rng, &format!("{name}.conv2"), cout, cout, 3, false);
        let is_last = d == SCALES - 2;
        let head = (config.deep_supervision || is_last).then(|| {
            Conv::init(store, rng, &format!("{name}.head"), config.num_classes, cout, 1, true)
        });
        dec.push(DecBlock { up, conv1, dca, conv2, head });
    }
    Ok(DcaUnet { config: config.clone(), enc, dec })
}

/// Build the plain U-Net comparator: same backbone, no calibration blocks.
pub fn build_baseline_unet<T: Elem>(
    store: &mut ParamStore<T>,
    config: &NetworkConfig,
    rng: &mut ChaCha12Rng,
) -> Result<DcaUnet> {
    let mut cfg = config.clone();
    cfg.use_dca = false;
    build_dca_unet(store, &cfg, rng)
}

impl DcaUnet {
    /// Run the network on an image batch (B, in_channels, H, W). H and W
    /// must be divisible by 16 (four pooling stages). `mode` switches the
    /// calibration blocks between learned scaling and a bit-transparent
    /// identity (verification hook).
    pub fn forward<T: Elem>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        mode: CalibrationMode,
    ) -> Result<ForwardOutput> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected (B, {}, H, W) input, got {shape:?}",
                self.config.in_channels
            )));
        }
        let div = 1 << (SCALES - 1);
        if shape[2] % div != 0 || shape[3] % div != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} not divisible by {div} (four pooling stages)",
                shape[2], shape[3]
            )));
        }

        let eps = self.config.norm_eps;
        let mut skips = Vec::with_capacity(SCALES);
        let mut cur = images;
        for (s, block) in self.enc.iter().enumerate() {
            if s > 0 {
                cur = g.max_pool2(cur);
            }
            cur = block.conv1.apply_norm_relu(g, store, cur, eps);
            cur = block.conv2.apply_norm_relu(g, store, cur, eps);
            skips.push(cur);
        }

        let mut logits_deep_first = Vec::new();
        let mut banks = Vec::new();
        let mut attention = Vec::new();
        for (d, block) in self.dec.iter().enumerate() {
            let skip = skips[SCALES - 2 - d];
            let up = block.up.apply(g, store, cur);
            let merged = g.concat_channels(up, skip);
            cur = block.conv1.apply_norm_relu(g, store, merged, eps);
            if let Some(dca) = &block.dca {
                let out = dca_forward(g, store, cur, dca, mode)?;
                banks.push(out.bank);
                attention.push(out.attention);
                cur = out.calibrated;
            }
            cur = block.conv2.apply_norm_relu(g, store, cur, eps);
            if let Some(head) = &block.head {
                logits_deep_first.push(head.apply(g, store, cur));
            }
        }
        logits_deep_first.reverse();
        Ok(ForwardOutput { logits_per_scale: logits_deep_first, banks, attention })
    }

    /// Parameter ids of all calibration blocks, decode order.
    pub fn dca_param_ids(&self) -> Vec<ParamId> {
        self.dec
            .iter()
            .filter_map(|b| b.dca.as_ref())
            .flat_map(|p| p.all_ids())
            .collect()
    }

    pub fn num_calibration_blocks(&self) -> usize {
        self.dec.iter().filter(|b| b.dca.is_some()).count()
    }
}

/// Copy every parameter whose name exists in both stores from `src` to
/// `dst` (used to run the calibrated network and the plain baseline on
/// identical backbone weights).
pub fn copy_shared_params<T: Elem>(src: &ParamStore<T>, dst: &mut ParamStore<T>) -> usize {
    let mut copied = 0;
    let names: Vec<String> = dst.ids().map(|id| dst.name(id).to_string()).collect();
    for name in names {
        if let Some(sid) = src.id(&name) {
            let did = dst.id(&name).expect("name from dst");
            assert_eq!(
                src.value(sid).shape(),
                dst.value(did).shape(),
                "shape mismatch for shared parameter {name}"
            );
            dst.value_mut(did).assign(src.value(sid));
            copied += 1;
        }
    }
    copied
}

/// Convenience wrapper: forward on raw image data in a fresh graph,
/// returning full-resolution logits as an owned array (evaluation path).
pub fn predict_logits<T: Elem>(
    model: &DcaUnet,
    store: &ParamStore<T>,
    images: &ArrayD<T>,
) -> Result<ArrayD<T>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let out = model.forward(&mut g, store, x, CalibrationMode::Learned)?;
    Ok(g.value(out.logits_per_scale[0]).clone())
}
